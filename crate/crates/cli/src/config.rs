//! Experiment configuration.
//!
//! A config is one JSON document:
//!
//! ```json
//! { "command": "flow", "seed": 7, "params": { "p": 2.5, "steps": 100 } }
//! ```
//!
//! `params` is parsed into the command's parameter struct. Unknown keys are
//! rejected at both levels and every omitted field takes the default shown
//! in the resolved echo.

use std::path::PathBuf;

use plat_core::energy_flow::{KernelMode, StepMode};
use plat_core::spectral::SpectralConfig;
use plat_core::training::{AuditConfig, ModelConfig, OptimizerConfig, SyntheticTask};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandName {
    Equivcheck,
    Gradcheck,
    Flow,
    Spectral,
    Train,
    Audit,
}

impl CommandName {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandName::Equivcheck => "equivcheck",
            CommandName::Gradcheck => "gradcheck",
            CommandName::Flow => "flow",
            CommandName::Spectral => "spectral",
            CommandName::Train => "train",
            CommandName::Audit => "audit",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    command: CommandName,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    params: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquivcheckParams {
    pub instances: usize,
    pub max_tokens: usize,
    pub max_dim: usize,
    pub tolerance: f64,
    pub euler_tolerance: f64,
}

impl Default for EquivcheckParams {
    fn default() -> Self {
        Self { instances: 100, max_tokens: 16, max_dim: 8, tolerance: 1e-12, euler_tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckParams {
    pub configs: usize,
    pub p_values: Vec<f64>,
    pub n_tokens: usize,
    pub d_model: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub n_layers: usize,
    pub heads: usize,
    pub batch_size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub init_scale: f64,
    pub epsilon_clamp: f64,
    pub layer_scaling: bool,
    pub renormalize_rows: bool,
}

impl Default for GradcheckParams {
    fn default() -> Self {
        Self {
            configs: 20,
            p_values: vec![1.5, 2.0, 2.5, 3.0],
            n_tokens: 4,
            d_model: 3,
            d_qk: 2,
            d_v: 3,
            n_layers: 2,
            heads: 2,
            batch_size: 2,
            step: 1e-5,
            tolerance: 1e-4,
            init_scale: 0.3,
            epsilon_clamp: plat_core::attention::DEFAULT_EPSILON_CLAMP,
            layer_scaling: false,
            renormalize_rows: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowInit {
    Random,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowParams {
    pub n_tokens: usize,
    pub d_model: usize,
    pub d_qk: usize,
    pub key_scale: f64,
    pub init: FlowInit,
    pub p: f64,
    pub epsilon_clamp: f64,
    pub kernel: KernelMode,
    pub step_mode: StepMode,
    pub steps: usize,
    pub tolerance: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            n_tokens: 8,
            d_model: 3,
            d_qk: 2,
            key_scale: 0.7,
            init: FlowInit::Random,
            p: 2.0,
            epsilon_clamp: plat_core::attention::DEFAULT_EPSILON_CLAMP,
            kernel: KernelMode::SymmetricKeys,
            step_mode: StepMode::Fixed(1e-3),
            steps: 200,
            tolerance: plat_core::energy_flow::DEFAULT_FLOW_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// Random positive row-stochastic matrix.
    RowStochastic,
    /// `alpha` times a random row-stochastic matrix.
    ScaledRowStochastic,
    /// p-LaT combined weights over values spread along a line with gaps in
    /// `[min_gap, 2 * min_gap)`.
    PlatHeterophilic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Uniform entries in `[-1, 1)`.
    Random,
    /// The operator's power-iteration eigenvector.
    Perron,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralParams {
    pub operator: OperatorKind,
    pub probe: ProbeKind,
    pub trials: usize,
    pub n: usize,
    pub alpha: f64,
    pub p: f64,
    pub d_qk: usize,
    pub qk_scale: f64,
    pub min_gap: f64,
    /// Trials with `lambda_max > 1 + lambda_margin` count as amplifying.
    pub lambda_margin: f64,
    pub analysis: SpectralConfig,
}

impl Default for SpectralParams {
    fn default() -> Self {
        Self {
            operator: OperatorKind::RowStochastic,
            probe: ProbeKind::Random,
            trials: 1,
            n: 8,
            alpha: 1.0,
            p: 2.5,
            d_qk: 2,
            qk_scale: 1.5,
            min_gap: 1.5,
            lambda_margin: 0.05,
            analysis: SpectralConfig { t_max: 50, ..SpectralConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            model: ModelConfig { positional: true, ..ModelConfig::default() },
            task: SyntheticTask::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditParams {
    pub model: ModelConfig,
    pub task: SyntheticTask,
    /// Training run before auditing; zero epochs audits the fresh model.
    pub optimizer: OptimizerConfig,
    /// Checkpoint to audit instead of a freshly initialised model.
    pub checkpoint: Option<PathBuf>,
    pub audit: AuditConfig,
}

impl Default for AuditParams {
    fn default() -> Self {
        Self {
            model: ModelConfig { positional: true, ..ModelConfig::default() },
            task: SyntheticTask { n_train: 64, n_test: 16, ..SyntheticTask::default() },
            optimizer: OptimizerConfig { epochs: 0, ..OptimizerConfig::default() },
            checkpoint: None,
            audit: AuditConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "params", rename_all = "snake_case")]
pub enum CommandParams {
    Equivcheck(EquivcheckParams),
    Gradcheck(GradcheckParams),
    Flow(FlowParams),
    Spectral(SpectralParams),
    Train(TrainParams),
    Audit(AuditParams),
}

impl CommandParams {
    pub fn name(&self) -> CommandName {
        match self {
            CommandParams::Equivcheck(_) => CommandName::Equivcheck,
            CommandParams::Gradcheck(_) => CommandName::Gradcheck,
            CommandParams::Flow(_) => CommandName::Flow,
            CommandParams::Spectral(_) => CommandName::Spectral,
            CommandParams::Train(_) => CommandName::Train,
            CommandParams::Audit(_) => CommandName::Audit,
        }
    }
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub command: CommandParams,
}

fn typed<T: for<'de> Deserialize<'de>>(params: Value) -> Result<T> {
    serde_json::from_value(params).map_err(|e| CliError::Config(format!("params: {e}")))
}

/// Positional encodings default on for heterophilic tasks and off otherwise.
fn fill_positional(params: &mut Value) {
    let Some(obj) = params.as_object_mut() else { return };
    let kind = obj
        .get("task")
        .and_then(|t| t.get("kind"))
        .and_then(Value::as_str)
        .unwrap_or("heterophilic")
        .to_string();
    let model = obj.entry("model").or_insert_with(|| Value::Object(Default::default()));
    if let Some(m) = model.as_object_mut() {
        m.entry("positional").or_insert(Value::Bool(kind == "heterophilic"));
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut params = raw.params.unwrap_or_else(|| Value::Object(Default::default()));
        if !params.is_object() {
            return Err(CliError::Config("params must be a JSON object".into()));
        }
        let command = match raw.command {
            CommandName::Equivcheck => CommandParams::Equivcheck(typed(params)?),
            CommandName::Gradcheck => CommandParams::Gradcheck(typed(params)?),
            CommandName::Flow => CommandParams::Flow(typed(params)?),
            CommandName::Spectral => CommandParams::Spectral(typed(params)?),
            CommandName::Train => {
                fill_positional(&mut params);
                CommandParams::Train(typed(params)?)
            }
            CommandName::Audit => {
                fill_positional(&mut params);
                CommandParams::Audit(typed(params)?)
            }
        };
        Ok(Self { seed: raw.seed, output_dir: raw.output_dir, command })
    }

    pub fn new(seed: u64, command: CommandParams) -> Self {
        Self { seed, output_dir: None, command }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
