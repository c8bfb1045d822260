//! Graph-free traffic forecasting with grouped spatial mixing and
//! mixture-of-experts channel mixing, on a small self-contained tensor and
//! gradient substrate.

pub mod config;
pub mod cost;
pub mod data;
pub mod embedding;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod layers;
pub mod m3;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use config::{ModelConfig, Variant};
pub use data::{DatasetCard, NormStats, RawSeries, SampleSet, SplitSpec, Splits, WindowedSample};
pub use error::{Error, Result};
pub use metrics::{MetricCell, MetricsReport};
pub use model::{Checkpoint, M3Net};
pub use params::{ParamStore, Parameter};
pub use tensor::{Real, Tensor};
pub use trainer::{TrainConfig, TrainOutcome};
