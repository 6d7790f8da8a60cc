//! FMM wave modelling of single-lead ECG heartbeats, an optimisation-based
//! coefficient fitter, and dense autoencoders whose decoder can be replaced
//! by an FMM reconstruction head for explainable anomaly detection.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod filter;
pub mod fit;
pub mod head;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod synth;
pub mod train;
pub mod wave;

pub use error::{Error, Result};
pub use fit::{fit_beat, fit_single_wave, FitConfig, FitResult};
pub use head::FmmHead;
pub use metrics::{circular_correlation, circular_mean, pearson, roc_auroc, RocCurve};
pub use nn::{Activation, AdamState, DenseLayer, Mlp};
pub use preprocess::{EcgRecord, Heartbeat, Label};
pub use train::{AeConfig, Architecture, Autoencoder, TrainConfig, TrainReport};
pub use wave::{
    canonical_order, decode, encode, eval_beat, eval_wave, CoefficientVector, FmmBeatParams, FmmWave, PhaseGrid,
    WaveName,
};
