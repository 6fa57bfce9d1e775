//! Calibration-driven low-rank compression for transformer-shaped models.
//!
//! The pipeline calibrates a model with two forward passes, assigns
//! per-sublayer compression ratios from input/output cosine similarity,
//! splits each sublayer's rank budget by balancing retained energy across
//! its matrices, and rewrites every weight matrix as a low-rank factor pair
//! using any of several decomposition backends.

pub mod allocate;
pub mod decompose;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod pipeline;

pub use allocate::{
    AllocationConfig, AllocationPlan, MatrixStats, SublayerId, SublayerKind, SublayerStats,
};
pub use decompose::{EnergyKind, EnergyProfile, FactorPair, Method, ScaleKind, ScaleVector};
pub use harness::{
    CaptureMode, CaptureRequest, CaptureState, ToyModel, ToyModelConfig, WeightSlot,
};
pub use linalg::{EvdResult, Matrix, SvdResult};
pub use pipeline::{CompressionReport, EvalMetrics, PipelineError, Stage};
