//! Dataset files, checkpoints, run configuration and CSV output.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dag::{check_predecessor_property, validate_dag, Dag};
use crate::model::{ModelConfig, ModelError, ModelMeta, ModelParams, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LDAG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: invalid graph: {reason}")]
    Validation { line: usize, reason: String },
    #[error("checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("config: {0}")]
    Config(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    n: usize,
    attrs: Vec<Vec<u32>>,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<f64>,
}

/// Parses one JSON-lines record; `line` is 1-based and used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<Dag, IoError> {
    let rec: Record = serde_json::from_str(text).map_err(|e| IoError::Parse {
        line,
        msg: e.to_string(),
    })?;
    let dag = Dag::from_parts(rec.n, rec.edges.iter().map(|e| (e[0], e[1])).collect(), rec.attrs, rec.label);
    let invalid = |reason: String| IoError::Validation { line, reason };
    validate_dag(&dag).map_err(|e| invalid(e.to_string()))?;
    check_predecessor_property(&dag).map_err(|e| invalid(e.to_string()))?;
    Ok(dag)
}

pub fn record_line(d: &Dag) -> String {
    let rec = Record {
        n: d.num_nodes(),
        attrs: d.attrs().to_vec(),
        edges: d.edges().iter().map(|&(u, v)| [u, v]).collect(),
        label: d.label(),
    };
    serde_json::to_string(&rec).expect("records always serialize")
}

/// Streams records from a reader. Blank lines are skipped.
pub fn read_dataset(reader: impl BufRead) -> impl Iterator<Item = Result<Dag, IoError>> {
    reader.lines().enumerate().filter_map(|(i, line)| match line {
        Ok(text) if text.trim().is_empty() => None,
        Ok(text) => Some(parse_record(&text, i + 1)),
        Err(e) => Some(Err(IoError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })),
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<Dag>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_dataset(BufReader::new(file)).collect()
}

pub fn save_dataset(path: &Path, graphs: &[Dag]) -> Result<(), IoError> {
    write_atomic(path, |w| {
        for d in graphs {
            writeln!(w, "{}", record_line(d))?;
        }
        Ok(())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// In f32 elements from the start of the payload.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    meta: ModelMeta,
    tensors: Vec<TensorEntry>,
}

/// Checkpoint bytes: magic, version (u32 LE), metadata length (u64 LE),
/// JSON metadata, then every tensor as little-endian f32 in directory order.
pub fn checkpoint_bytes(p: &ModelParams) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (_, name, t) in p.store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let meta = CheckpointMeta {
        config: p.config.clone(),
        meta: p.meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&meta).expect("metadata always serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in p.store.iter() {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelParams, IoError> {
    let corrupt = |msg: &str| IoError::CorruptFile(msg.to_string());
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing LDAG magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(IoError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let meta_end = usize::try_from(meta_len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("metadata length exceeds file size"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..meta_end])
        .map_err(|e| IoError::CorruptFile(format!("metadata: {e}")))?;
    let payload = &bytes[meta_end..];
    if payload.len() % 4 != 0 {
        return Err(corrupt("payload is not a whole number of f32 values"));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut expected = 0;
    for t in &meta.tensors {
        if t.offset != expected {
            return Err(IoError::CorruptFile(format!("tensor {} has offset {}, expected {expected}", t.name, t.offset)));
        }
        expected += t.shape.iter().product::<usize>();
    }
    if expected != values.len() {
        return Err(IoError::CorruptFile(format!(
            "payload holds {} values, directory describes {expected}",
            values.len()
        )));
    }
    let mut params = ModelParams::init(meta.config, meta.meta, 0).map_err(|e| IoError::CorruptFile(e.to_string()))?;
    if params.store.len() != meta.tensors.len() {
        return Err(IoError::CorruptFile(format!(
            "directory lists {} tensors, architecture has {}",
            meta.tensors.len(),
            params.store.len()
        )));
    }
    let dir = &meta.tensors;
    params
        .load_tensors(|name, shape| {
            let t = dir.iter().find(|t| t.name == name && t.shape == shape)?;
            let len = shape.iter().product::<usize>();
            Some(values[t.offset..t.offset + len].to_vec())
        })
        .map_err(|e| IoError::CorruptFile(e.to_string()))?;
    Ok(params)
}

pub fn save_checkpoint(p: &ModelParams, path: &Path) -> Result<(), IoError> {
    let bytes = checkpoint_bytes(p);
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, IoError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    parse_checkpoint(&bytes)
}

/// Flat TOML run configuration. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub hidden_dim: usize,
    pub mpnn_layers: usize,
    pub attn_blocks: usize,
    pub attn_heads: usize,
    pub t_train: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub conditional: bool,
    pub loss_weights: [f64; 3],
    pub s_offset: f64,
    pub shared_encoder: bool,
    pub cosine_decay: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            hidden_dim: m.hidden_dim,
            mpnn_layers: m.mpnn_layers,
            attn_blocks: m.attn_blocks,
            attn_heads: m.attn_heads,
            t_train: m.t_train,
            t_min: m.t_min,
            t_max: m.t_max,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            seed: t.seed,
            conditional: m.conditional,
            loss_weights: t.loss_weights,
            s_offset: m.s_offset,
            shared_encoder: m.shared_encoder,
            cosine_decay: t.cosine_decay,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden_dim: self.hidden_dim,
            mpnn_layers: self.mpnn_layers,
            attn_blocks: self.attn_blocks,
            attn_heads: self.attn_heads,
            t_train: self.t_train,
            t_min: self.t_min,
            t_max: self.t_max,
            s_offset: self.s_offset,
            shared_encoder: self.shared_encoder,
            conditional: self.conditional,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            patience: self.patience,
            seed: self.seed,
            loss_weights: self.loss_weights,
            cosine_decay: self.cosine_decay,
            ..TrainConfig::default()
        }
    }
}

/// Writes a header row and records atomically.
pub fn write_csv<R: AsRef<[String]>>(path: &Path, header: &[&str], rows: &[R]) -> Result<(), IoError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.as_ref())?;
        }
        w.flush().map_err(io_err(path))?;
    }
    write_atomic(path, |w| w.write_all(&buf))
}

/// Reads the first column of a CSV as numbers; a non-numeric first row is
/// taken as a header.
pub fn read_label_csv(path: &Path) -> Result<Vec<f64>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = rec.get(0).unwrap_or("").trim();
        match field.parse::<f64>() {
            Ok(y) => out.push(y),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(IoError::Parse {
                    line: i + 1,
                    msg: format!("label {field:?}: {e}"),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp::{generate_lp, LpConfig, LpVariant};

    fn small_params() -> ModelParams {
        let data = generate_lp(&LpConfig::new(1.0, LpVariant::Base, 10, 1)).unwrap();
        let meta = ModelMeta::from_dataset(&data, false).unwrap();
        let cfg = ModelConfig {
            hidden_dim: 8,
            mpnn_layers: 1,
            attn_blocks: 1,
            attn_heads: 2,
            t_train: 4,
            t_min: 1,
            t_max: 4,
            ..Default::default()
        };
        ModelParams::init(cfg, meta, 9).unwrap()
    }

    #[test]
    fn parses_documented_record() {
        let d = parse_record(r#"{"n":2,"attrs":[[0],[1]],"edges":[[0,1]],"label":1.5}"#, 1).unwrap();
        assert_eq!(d.num_nodes(), 2);
        assert_eq!(d.edges(), &[(0, 1)]);
        assert_eq!(d.label(), Some(1.5));
    }

    #[test]
    fn rejects_cycles_and_bad_json_with_line_numbers() {
        let text = "{\"n\":1,\"attrs\":[[0]],\"edges\":[]}\n\n{\"n\":2,\"attrs\":[[0],[1]],\"edges\":[[1,0],[0,1]]}\n";
        let out: Vec<_> = read_dataset(text.as_bytes()).collect();
        assert!(out[0].is_ok());
        assert!(matches!(out[1], Err(IoError::Validation { line: 3, .. })));
        let bad: Vec<_> = read_dataset("{\"n\":1,".as_bytes()).collect();
        assert!(matches!(bad[0], Err(IoError::Parse { line: 1, .. })));
        let extra = parse_record(r#"{"n":1,"attrs":[[0]],"edges":[],"x":1}"#, 4);
        assert!(matches!(extra, Err(IoError::Parse { line: 4, .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let data = generate_lp(&LpConfig::new(0.5, LpVariant::Multi, 30, 2)).unwrap();
        save_dataset(&path, &data).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = small_params();
        let q = parse_checkpoint(&checkpoint_bytes(&p)).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.meta, p.meta);
        for ((_, na, a), (_, nb, b)) in p.store.iter().zip(q.store.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &crate::nn::Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(checkpoint_bytes(&q), checkpoint_bytes(&p));
    }

    #[test]
    fn checkpoint_corruption_is_detected() {
        let bytes = checkpoint_bytes(&small_params());
        let truncated = &bytes[..bytes.len() - 4];
        assert!(matches!(parse_checkpoint(truncated), Err(IoError::CorruptFile(_))));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(parse_checkpoint(&magic), Err(IoError::CorruptFile(_))));
        let mut version = bytes.clone();
        version[4] = 7;
        assert!(matches!(
            parse_checkpoint(&version),
            Err(IoError::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn run_config_defaults_and_unknown_keys() {
        let cfg = RunConfig::parse("hidden_dim = 32\nepochs = 3\n").unwrap();
        assert_eq!(cfg.hidden_dim, 32);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.t_train, ModelConfig::default().t_train);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert!(matches!(RunConfig::parse("hiden_dim = 3"), Err(IoError::Config(_))));
    }

    #[test]
    fn csv_round_trip_of_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("y.csv");
        let rows = vec![vec!["1.5".to_string()], vec!["3".to_string()]];
        write_csv(&path, &["label"], &rows).unwrap();
        assert_eq!(read_label_csv(&path).unwrap(), vec![1.5, 3.0]);
    }
}
