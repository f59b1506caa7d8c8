//! Variational LSTM autoencoder with a latent constraint network and a
//! re-encoder, for unsupervised time-series anomaly detection.

pub mod checkpoint;
pub mod constraint;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod scoring;
pub mod tensor;
pub mod train;
pub mod vae;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{Dataset, RawDataset, SplitSpec};
pub use diff::{Graph, GradientMap, Var};
pub use error::{Result, VelcError};
pub use eval::{auc, EvalReport};
pub use model::{LatentTarget, LossBreakdown, Mode, ModelConfig, VelcModel};
pub use params::{ParamId, ParamStore};
pub use scoring::{ScoreComponents, ScoreFile, ScoreParams, ScoredSeries};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainLog};
