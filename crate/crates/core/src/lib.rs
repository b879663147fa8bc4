//! Ground-truth-free segmentation quality prediction.
//!
//! Pipeline: a small dropout-capable conv segmenter produces per-pixel class
//! probabilities; Bayesian-approximation samplers (MC dropout, ensembles,
//! test-time augmentation) turn one image into a stack of candidate
//! probability maps; per-pixel uncertainty estimates (confidence, Rényi-2
//! entropy, mutual information, EPKL) are reduced to per-image scalars,
//! min-max normalized, and combined into a weighted aggregate score used to
//! rank and flag suspect images; two- and three-branch CNN regressors predict
//! the Dice score of a segmentation without access to ground truth.
//!
//! Everything trains and evaluates on a deterministic synthetic lesion
//! corpus, with file-based stage boundaries so externally produced sample
//! stacks can enter the pipeline at the uncertainty-estimate stage.

pub mod adam;
pub mod error;
pub mod exec;
pub mod io;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod pipeline;
pub mod quality;
pub mod rng;
pub mod sampler;
pub mod segmenter;
pub mod synth;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::Tensor;
