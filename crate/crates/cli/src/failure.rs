//! Stage-tagged command failures, rendered as `error[stage]: message`.

use mgaa_core::harness::HarnessError;
use mgaa_core::io::IoError;
use mgaa_core::pipeline::PipelineError;

#[derive(Debug)]
pub struct Failure {
    pub stage: String,
    pub message: String,
}

impl Failure {
    pub fn new(stage: &str, message: impl Into<String>) -> Self {
        Self {
            stage: stage.to_string(),
            message: message.into(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(err: IoError) -> Self {
        let stage = match &err {
            IoError::Config(_) | IoError::Json(_) => "config",
            _ => "io",
        };
        Failure::new(stage, err.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(err: PipelineError) -> Self {
        Failure {
            stage: err.stage.to_string(),
            message: err.source.to_string(),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(err: HarnessError) -> Self {
        Failure::new("data", err.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(err: std::io::Error) -> Self {
        Failure::new("io", err.to_string())
    }
}
