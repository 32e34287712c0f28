//! Machine-readable (`--json`) outputs. Every document carries a `schema`
//! tag; bump its version whenever a field changes meaning or disappears.

use serde::Serialize;

use resattn::network::{CostReport, StageCost};
use resattn::train::{EvalReport, StageResponse};

pub const SUMMARY_SCHEMA: &str = "resattn.summary/v1";
pub const GRADCHECK_SCHEMA: &str = "resattn.gradcheck/v1";
pub const TRAIN_SCHEMA: &str = "resattn.train/v1";
pub const EVAL_SCHEMA: &str = "resattn.eval/v1";
pub const PROBE_SCHEMA: &str = "resattn.probe/v1";

#[derive(Serialize)]
pub struct Summary<'a> {
    pub schema: &'static str,
    pub network: String,
    pub input: String,
    pub classes: usize,
    pub params: u64,
    pub flops: u64,
    pub trunk_depth: usize,
    pub stages: &'a [StageCost],
}

impl<'a> Summary<'a> {
    pub fn new(network: String, input: String, classes: usize, cost: &'a CostReport) -> Self {
        Summary {
            schema: SUMMARY_SCHEMA,
            network,
            input,
            classes,
            params: cost.params,
            flops: cost.flops,
            trunk_depth: cost.trunk_depth,
            stages: &cost.stages,
        }
    }
}

#[derive(Serialize)]
pub struct GradcheckCase {
    pub name: String,
    pub scope: &'static str,
    pub passed: bool,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Serialize)]
pub struct Gradcheck {
    pub schema: &'static str,
    pub seed: u64,
    pub tol: f64,
    pub passed: bool,
    pub cases: Vec<GradcheckCase>,
}

#[derive(Serialize)]
pub struct Train {
    pub schema: &'static str,
    pub out: String,
    pub iteration: u64,
    pub config_hash: String,
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub checkpoint: String,
}

#[derive(Serialize)]
pub struct Eval {
    pub schema: &'static str,
    pub iteration: u64,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Serialize)]
pub struct Probe {
    pub schema: &'static str,
    pub iteration: u64,
    pub samples: usize,
    pub rows: Vec<StageResponse>,
}
