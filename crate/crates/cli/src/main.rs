//! `layerdag` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage, 2 data (parse/validation/IO), 3 numeric.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use layerdag::dag::Dag;
use layerdag::eval::{self, EvalError, SurrogateConfig};
use layerdag::io::{self, IoError, RunConfig};
use layerdag::lp::{generate_lp, LpConfig, LpVariant};
use layerdag::model::{self, ModelError, SampleConfig, Schedule};
use layerdag::nn::gradcheck::gradient_suite;
use layerdag::nn::NnError;

#[derive(Parser)]
#[command(name = "layerdag", version, about = "Layerwise diffusion generator for attributed DAGs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Base,
    Multi,
}

impl From<Variant> for LpVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Base => LpVariant::Base,
            Variant::Multi => LpVariant::Multi,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a latent preferential DAG dataset.
    LpGen {
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "base")]
        variant: Variant,
        /// Attach the label |V| + 0.1 |E| to every graph.
        #[arg(long)]
        size_label: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a CSV loss log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// TOML run configuration; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log path; defaults to `<out>.loss.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        conditional: bool,
    },
    /// Sample graphs from a checkpoint.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One label per sample, first CSV column.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, requires = "t_max", conflicts_with = "t_const")]
        t_min: Option<usize>,
        #[arg(long, requires = "t_min", conflicts_with = "t_const")]
        t_max: Option<usize>,
        #[arg(long)]
        t_const: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Per-sample timing path; defaults to `<out>.timing.csv`.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Compare generated graphs with real ones.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        /// Report LP validity under this balance slack.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long, value_enum, default_value = "base")]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a regressor on one labeled set and test it on another.
    Surrogate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hold out one label quantile.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        quantiles: usize,
        #[arg(long)]
        hold: usize,
        #[arg(long)]
        out_dev: PathBuf,
        #[arg(long)]
        out_held: PathBuf,
    },
    /// Check every layer's gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failure with its exit-code class.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e) => e,
        }
    }
}

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::NonFiniteLoss { .. } | ModelError::Nn(NnError::NonFiniteGradient) | ModelError::Diffusion(_) => {
            Failure::Numeric(e.into())
        }
        ModelError::InvalidConfig(_) => Failure::Usage(e.into()),
        _ => Failure::Data(e.into()),
    }
}

fn io_failure(e: IoError) -> Failure {
    match e {
        IoError::Model(m) => model_failure(m),
        IoError::Config(_) => Failure::Usage(e.into()),
        other => Failure::Data(other.into()),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::Nn(_) | EvalError::ZeroVariance => Failure::Numeric(e.into()),
        EvalError::InvalidArgument(_) => Failure::Usage(e.into()),
        other => Failure::Data(other.into()),
    }
}

trait Classify<T> {
    fn data(self, what: impl Fn() -> String) -> Result<T, Failure>;
}

impl<T> Classify<T> for Result<T, IoError> {
    fn data(self, what: impl Fn() -> String) -> Result<T, Failure> {
        self.map_err(|e| match io_failure(e) {
            Failure::Usage(e) => Failure::Usage(e.context(what())),
            Failure::Data(e) => Failure::Data(e.context(what())),
            Failure::Numeric(e) => Failure::Numeric(e.context(what())),
        })
    }
}

fn load(path: &Path) -> Result<Vec<Dag>, Failure> {
    io::load_dataset(path).data(|| format!("reading {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::LpGen {
            rho,
            count,
            seed,
            variant,
            size_label,
            out,
        } => {
            let cfg = LpConfig::new(rho, variant.into(), count, seed);
            let mut graphs = generate_lp(&cfg).map_err(|e| Failure::Usage(e.into()))?;
            if size_label {
                for d in &mut graphs {
                    let y = d.num_nodes() as f64 + 0.1 * d.num_edges() as f64;
                    d.set_label(Some(y));
                }
            }
            io::save_dataset(&out, &graphs).data(|| format!("writing {}", out.display()))?;
        }
        Command::Train {
            data,
            val,
            config,
            out,
            log,
            conditional,
        } => {
            let mut rc = match &config {
                Some(p) => RunConfig::load(p).data(|| format!("reading {}", p.display()))?,
                None => RunConfig::default(),
            };
            rc.conditional |= conditional;
            let train_set = load(&data)?;
            let val_set = match &val {
                Some(p) => load(p)?,
                None => Vec::new(),
            };
            let (params, tlog) =
                model::train(&train_set, &val_set, rc.model_config(), &rc.train_config()).map_err(model_failure)?;
            io::save_checkpoint(&params, &out).data(|| format!("writing {}", out.display()))?;
            let rows: Vec<Vec<String>> = tlog
                .epochs
                .iter()
                .map(|e| {
                    let v = |f: fn(&model::LossBreakdown) -> f64| e.val.as_ref().map(|l| fmt(f(l))).unwrap_or_default();
                    vec![
                        e.epoch.to_string(),
                        fmt(e.train.size),
                        fmt(e.train.node),
                        fmt(e.train.edge),
                        fmt(e.train.total),
                        v(|l| l.size),
                        v(|l| l.node),
                        v(|l| l.edge),
                        v(|l| l.total),
                        (e.epoch == tlog.best_epoch).to_string(),
                    ]
                })
                .collect();
            let log = log.unwrap_or_else(|| with_suffix(&out, ".loss.csv"));
            io::write_csv(
                &log,
                &[
                    "epoch",
                    "train_size",
                    "train_node",
                    "train_edge",
                    "train_total",
                    "val_size",
                    "val_node",
                    "val_edge",
                    "val_total",
                    "best",
                ],
                &rows,
            )
            .data(|| format!("writing {}", log.display()))?;
        }
        Command::Sample {
            model: ckpt,
            count,
            seed,
            labels,
            t_min,
            t_max,
            t_const,
            out,
            timing,
        } => {
            let params = io::load_checkpoint(&ckpt).data(|| format!("reading {}", ckpt.display()))?;
            let schedule = match (t_const, t_min, t_max) {
                (Some(t), _, _) => Schedule::Constant(t),
                (None, Some(a), Some(b)) => Schedule::Linear { t_min: a, t_max: b },
                _ => Schedule::Linear {
                    t_min: params.config.t_min,
                    t_max: params.config.t_max,
                },
            };
            let labels = labels
                .map(|p| io::read_label_csv(&p).data(|| format!("reading {}", p.display())))
                .transpose()?;
            let cfg = SampleConfig {
                count,
                schedule,
                l_cap: None,
                n_cap: None,
                labels,
                seed,
            };
            let samples = model::sample(&params, &cfg).map_err(model_failure)?;
            let graphs: Vec<Dag> = samples.iter().map(|s| s.dag.clone()).collect();
            io::save_dataset(&out, &graphs).data(|| format!("writing {}", out.display()))?;
            let rows: Vec<Vec<String>> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    vec![
                        i.to_string(),
                        s.stats.layers().to_string(),
                        s.dag.num_nodes().to_string(),
                        s.dag.num_edges().to_string(),
                        s.stats.total_steps().to_string(),
                        s.stats.scheduled_steps().to_string(),
                        fmt(s.stats.wall_seconds),
                        s.stats.flag.map(|f| format!("{f:?}")).unwrap_or_default(),
                    ]
                })
                .collect();
            let timing = timing.unwrap_or_else(|| with_suffix(&out, ".timing.csv"));
            io::write_csv(
                &timing,
                &["sample", "layers", "nodes", "edges", "steps", "scheduled_steps", "wall_seconds", "flag"],
                &rows,
            )
            .data(|| format!("writing {}", timing.display()))?;
        }
        Command::Eval {
            real,
            gen,
            rho,
            variant,
            out,
        } => {
            let real_set = load(&real)?;
            let gen_set = load(&gen)?;
            let lp = rho.map(|r| LpConfig::new(r, variant.into(), 1, 0));
            let cards: Option<Vec<usize>> = matches!(variant, Variant::Multi).then(|| {
                let channels = real_set.first().map_or(0, Dag::num_channels);
                let mut cards = vec![1; channels];
                for d in real_set.iter().chain(&gen_set) {
                    for row in d.attrs() {
                        for (c, &x) in row.iter().enumerate().take(channels) {
                            cards[c] = cards[c].max(x as usize + 1);
                        }
                    }
                }
                cards
            });
            let report = eval::compare(&real_set, &gen_set, lp.as_ref(), cards.as_deref()).map_err(eval_failure)?;
            let mut rows: Vec<Vec<String>> = Vec::new();
            let mut push = |k: &str, v: f64| rows.push(vec![k.to_string(), fmt(v)]);
            if let Some(v) = report.validity {
                push("validity_full", v.full);
                push("validity_balance", v.balance);
                push("validity_attribute", v.attribute);
                push("validity_indegree", v.indegree);
            }
            push("w1_layers", report.w1_layers);
            push("mmd_layer_size", report.mmd_layer_size);
            push("sigma_layer_size", report.sigma_layer_size);
            if let (Some(m), Some(s)) = (report.mmd_attribute, report.sigma_attribute) {
                push("mmd_attribute", m);
                push("sigma_attribute", s);
            }
            io::write_csv(&out, &["metric", "value"], &rows).data(|| format!("writing {}", out.display()))?;
        }
        Command::Surrogate {
            train,
            val,
            test,
            epochs,
            seed,
            out,
        } => {
            let cfg = SurrogateConfig {
                epochs,
                seed,
                ..SurrogateConfig::default()
            };
            let (reg, log) = eval::train_surrogate(&load(&train)?, &load(&val)?, &cfg).map_err(eval_failure)?;
            let ev = eval::eval_surrogate(&reg, &load(&test)?).map_err(eval_failure)?;
            let rows = vec![
                vec!["pearson".to_string(), ev.pearson.map(fmt).unwrap_or_default()],
                vec!["mae".to_string(), fmt(ev.mae)],
                vec!["best_epoch".to_string(), log.best_epoch.to_string()],
            ];
            io::write_csv(&out, &["metric", "value"], &rows).data(|| format!("writing {}", out.display()))?;
            if ev.pearson.is_none() {
                eprintln!("warning: zero variance on the test set; Pearson undefined");
            }
        }
        Command::Split {
            data,
            quantiles,
            hold,
            out_dev,
            out_held,
        } => {
            let (dev, held) = eval::quantile_split(&load(&data)?, quantiles, hold).map_err(eval_failure)?;
            io::save_dataset(&out_dev, &dev).data(|| format!("writing {}", out_dev.display()))?;
            io::save_dataset(&out_held, &held).data(|| format!("writing {}", out_held.display()))?;
        }
        Command::Gradcheck { seed } => {
            let mut failed = Vec::new();
            for (name, report) in gradient_suite(seed) {
                let ok = report.passes(1e-5);
                println!(
                    "{name}: max relative error {:.3e} over {} scalars {}",
                    report.max_rel_error,
                    report.checked,
                    if ok { "ok" } else { "FAILED" }
                );
                if !ok {
                    failed.push(name);
                }
            }
            if !failed.is_empty() {
                return Err(Failure::Numeric(anyhow::anyhow!("gradient check failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command).map_err(|f| {
        eprintln!("error: {:#}", f.error());
        f.code()
    }) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}
