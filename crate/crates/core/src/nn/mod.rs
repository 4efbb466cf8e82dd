//! Numerical substrate: dense matrices, a reverse-mode tape, transformer
//! layers, Adam, and a finite-difference gradient checker. Everything runs
//! in `f64`.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod mat;
pub mod params;
pub mod tape;

pub use adam::AdamState;
pub use gradcheck::{finite_difference_check, CheckOptions, GradCheckReport};
pub use layers::{Attention, AttnMask, FeedForward, KeyValue, LayerNorm, Linear, TransformerLayer};
pub use mat::Mat;
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{log_softmax, softmax, InputGrads, Tape, Var};
