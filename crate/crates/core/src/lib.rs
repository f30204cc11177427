pub mod dag;
pub mod diffusion;
pub mod eval;
pub mod io;
pub mod lp;
pub mod model;
pub mod nn;
pub mod rng;
