pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fit;
pub mod gradsuite;
pub mod infer;
pub mod io;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod render;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
