//! Core algorithms for unsupervised dual-task visual representation
//! learning and its evaluation battery: contrastive + relative-position
//! training, linear probing, and neural predictivity scoring.

pub mod augment;
pub mod brainsim;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod probes;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use augment::{AugmentPolicy, QuadrantSample};
pub use brainsim::{
    fit_pls, layer_score, model_score, noise_ceiling, pearson, BrainScoreReport, CvSpec,
    PlsModel, ScoreDistribution,
};
pub use data::{ImageSet, NeuralRecording, Region};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, TemperatureMode};
pub use model::{ActivationMatrix, Architecture, BackboneConfig, HeadConfig, Model};
pub use probes::{fit_linear_probe, ic_accuracy, rpp_accuracy, LinearProbe};
pub use tensor::Tensor;
pub use trainer::{train, CheckpointSeries, TrainConfig, Trainer};
