//! One function per CLI command. Each writes its CSV/JSON artifacts into the
//! output directory and returns a JSON summary.

use std::fmt::Write as _;
use std::path::Path;

use plat_core::attention::{plat_attention, softmax_attention, AttentionHeadConfig};
use plat_core::energy_flow::{euler_step, run_flow, EnergyKernel, FlowConfig, FlowState, KernelMode, StepMode};
use plat_core::io::Checkpoint;
use plat_core::numerics::RealMatrix;
use plat_core::rng::{gaussian_matrix, seeded, uniform_matrix, SeededRng};
use plat_core::spectral::{analyze_operator, dominant_eigenvalue, plat_operator_matrix, Regime};
use plat_core::training::{
    audit_hooks, batch_gradients, compare_gradients, finite_difference_gradients, generate_task, train, Example,
    Model, ModelConfig,
};
use rand::Rng;
use serde_json::{json, Value};

use crate::config::{
    AuditParams, EquivcheckParams, FlowInit, FlowParams, GradcheckParams, OperatorKind, ProbeKind, SpectralParams,
    TrainParams,
};
use crate::error::{CliError, Result};

/// Result of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    /// Artifact file names relative to the output directory.
    pub files: Vec<String>,
    pub summary: Value,
    /// Set when the run completed but did not meet its own pass condition
    /// or diverged.
    pub failure: Option<String>,
}

pub(crate) fn write_artifact(dir: &Path, name: &str, contents: &str, files: &mut Vec<String>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    files.push(name.to_string());
    Ok(())
}

fn finite_or_str(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(v.to_string())
    }
}

pub fn equivcheck(dir: &Path, seed: u64, p: &EquivcheckParams) -> Result<CommandOutput> {
    if p.instances == 0 || p.max_tokens == 0 || p.max_dim == 0 {
        return Err(CliError::Config("equivcheck needs instances, max_tokens and max_dim >= 1".into()));
    }
    let mut rng = seeded(seed);
    let mut csv = String::from("instance,n_tokens,d_v,d_qk,attention_diff,euler_diff\n");
    let (mut worst_attn, mut worst_euler) = (0.0f64, 0.0f64);
    for i in 0..p.instances {
        let n = rng.random_range(1..=p.max_tokens);
        let d = rng.random_range(1..=p.max_dim);
        let d_qk = rng.random_range(1..=p.max_dim);
        let q = gaussian_matrix(&mut rng, n, d_qk, 1.0);
        let k = gaussian_matrix(&mut rng, n, d_qk, 1.0);
        let v = gaussian_matrix(&mut rng, n, d, 1.0);
        let cfg = AttentionHeadConfig::new(d, d_qk, d, 2.0);
        let attn = plat_attention(&q, &k, &v, &cfg)?.max_abs_diff(&softmax_attention(&q, &k, &v)?)?;

        let kernel = EnergyKernel::symmetric_keys(&k)?;
        let state = FlowState::new(v.clone(), &kernel, 2.0)?;
        let stepped = euler_step(&state, &kernel, &FlowConfig::new(2.0, StepMode::PaperRowwise))?;
        let euler = stepped.u.max_abs_diff(&plat_attention(&k, &k, &v, &cfg)?)?;

        worst_attn = worst_attn.max(attn);
        worst_euler = worst_euler.max(euler);
        let _ = writeln!(csv, "{i},{n},{d},{d_qk},{attn},{euler}");
    }
    let mut files = Vec::new();
    write_artifact(dir, "equivcheck.csv", &csv, &mut files)?;
    let passed = worst_attn < p.tolerance && worst_euler < p.euler_tolerance;
    Ok(CommandOutput {
        files,
        summary: json!({
            "instances": p.instances,
            "max_attention_diff": worst_attn,
            "max_euler_diff": worst_euler,
            "passed": passed,
        }),
        failure: (!passed).then(|| "equivalence tolerance exceeded".to_string()),
    })
}

pub fn gradcheck(dir: &Path, seed: u64, p: &GradcheckParams) -> Result<CommandOutput> {
    if p.p_values.is_empty() || p.configs == 0 || p.heads == 0 || p.batch_size == 0 {
        return Err(CliError::Config("gradcheck needs configs, heads, batch_size >= 1 and some p_values".into()));
    }
    let mut rng = seeded(seed);
    let mut csv = String::from("config,head_p,stop_gradient,tensor,relative_error,analytic_norm\n");
    let mut worst = 0.0f64;
    let mut per_config = Vec::with_capacity(p.configs);
    for i in 0..p.configs {
        let head_p: Vec<f64> = (0..p.heads).map(|h| p.p_values[(i + h) % p.p_values.len()]).collect();
        let stop = (i / p.p_values.len()) % 2 == 1;
        let config = ModelConfig {
            d_model: p.d_model,
            n_tokens: p.n_tokens,
            n_classes: 2,
            n_layers: p.n_layers,
            head_p: head_p.clone(),
            d_qk: p.d_qk,
            d_v: p.d_v,
            stop_gradient_modulation: stop,
            layer_scaling: p.layer_scaling,
            renormalize_rows: p.renormalize_rows,
            init_scale: p.init_scale,
            epsilon_clamp: p.epsilon_clamp,
            ..ModelConfig::default()
        };
        let model = Model::init(config, rng.random())?;
        let batch: Vec<Example> = (0..p.batch_size)
            .map(|b| Example { tokens: gaussian_matrix(&mut rng, p.n_tokens, p.d_model, 1.0), label: b % 2 })
            .collect();
        let (_, analytic) = batch_gradients(&model, &batch)?;
        let numeric = finite_difference_gradients(&model, &batch, p.step)?;
        let label = head_p.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        let mut config_worst = 0.0f64;
        for check in compare_gradients(&analytic, &numeric) {
            config_worst = config_worst.max(check.relative_error);
            let _ = writeln!(csv, "{i},{label},{stop},{},{},{}", check.name, check.relative_error, check.analytic_norm);
        }
        worst = worst.max(config_worst);
        per_config.push(json!({ "config": i, "head_p": head_p, "stop_gradient": stop, "max_relative_error": config_worst }));
    }
    let mut files = Vec::new();
    write_artifact(dir, "gradcheck.csv", &csv, &mut files)?;
    let passed = worst < p.tolerance;
    Ok(CommandOutput {
        files,
        summary: json!({ "configs": per_config, "max_relative_error": worst, "passed": passed }),
        failure: (!passed).then(|| format!("gradient relative error {worst} >= {}", p.tolerance)),
    })
}

pub fn flow(dir: &Path, seed: u64, p: &FlowParams) -> Result<CommandOutput> {
    if p.n_tokens == 0 || p.d_model == 0 || p.d_qk == 0 {
        return Err(CliError::Config("flow needs n_tokens, d_model and d_qk >= 1".into()));
    }
    let mut rng = seeded(seed);
    let u0 = match p.init {
        FlowInit::Random => gaussian_matrix(&mut rng, p.n_tokens, p.d_model, 1.0),
        FlowInit::Constant => RealMatrix::filled(p.n_tokens, p.d_model, 0.5),
    };
    let queries = gaussian_matrix(&mut rng, p.n_tokens, p.d_qk, p.key_scale);
    let keys = gaussian_matrix(&mut rng, p.n_tokens, p.d_qk, p.key_scale);
    let kernel = match p.kernel {
        KernelMode::Asymmetric => {
            return Err(CliError::Config("flow needs a symmetric kernel (`symmetric` or `symmetric_keys`)".into()))
        }
        KernelMode::Symmetric => EnergyKernel::symmetric(&queries, &keys)?,
        KernelMode::SymmetricKeys => EnergyKernel::symmetric_keys(&keys)?,
    };
    let cfg = FlowConfig { p: p.p, epsilon_clamp: p.epsilon_clamp, step_mode: p.step_mode, tolerance: p.tolerance };
    cfg.validate()?;
    let report = run_flow(&u0, &kernel, &cfg, p.steps)?;
    let mut files = Vec::new();
    write_artifact(dir, "energy.csv", &report.to_csv(), &mut files)?;
    let energies = report.energies();
    Ok(CommandOutput {
        files,
        summary: json!({
            "steps_taken": energies.len().saturating_sub(1),
            "initial_energy": energies.first(),
            "final_energy": energies.last(),
            "monotone_fraction": report.monotone_fraction,
            "converged": report.converged,
            "final_gradient_norm": report.final_gradient_norm,
            "diverged_at": report.diverged_at,
        }),
        failure: report.diverged_at.map(|s| format!("flow diverged at step {s}")),
    })
}

fn row_stochastic(rng: &mut SeededRng, n: usize) -> RealMatrix {
    let mut m = uniform_matrix(rng, n, n, 0.01, 1.0);
    for i in 0..n {
        let s: f64 = m.row(i).iter().sum();
        m.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    m
}

/// Values along the first axis with gaps in `[min_gap, 2 min_gap)` and a
/// small transverse jitter, so every pairwise distance is at least `min_gap`.
pub fn spread_values(rng: &mut SeededRng, n: usize, min_gap: f64) -> RealMatrix {
    let mut v = RealMatrix::zeros(n, 2);
    let mut pos = 0.0;
    for i in 0..n {
        v.set(i, 0, pos);
        v.set(i, 1, rng.random_range(-0.5..0.5) * min_gap / 1.5);
        pos += rng.random_range(min_gap..2.0 * min_gap);
    }
    v
}

fn regime_name(r: Option<Regime>) -> &'static str {
    match r {
        Some(Regime::Homophily) => "homophily",
        Some(Regime::Heterophily) => "heterophily",
        Some(Regime::Mixed) => "mixed",
        None => "none",
    }
}

pub fn spectral(dir: &Path, seed: u64, p: &SpectralParams) -> Result<CommandOutput> {
    if p.trials == 0 || p.n == 0 {
        return Err(CliError::Config("spectral needs trials and n >= 1".into()));
    }
    if p.operator == OperatorKind::ScaledRowStochastic && !(p.alpha > 0.0) {
        return Err(CliError::Config("alpha must be > 0".into()));
    }
    let mut rng = seeded(seed);
    let mut trials_csv = String::from("trial,lambda_max,lambda_converged,final_ratio,min_ratio,low_pass,regime\n");
    let mut ratio_csv = String::new();
    let mut trials = Vec::with_capacity(p.trials);
    let (mut low_pass, mut amplifying, mut min_ratio_all) = (0usize, 0usize, f64::INFINITY);
    let (mut max_final, mut min_lambda, mut max_lambda) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for trial in 0..p.trials {
        let (a, v) = match p.operator {
            OperatorKind::RowStochastic => (row_stochastic(&mut rng, p.n), None),
            OperatorKind::ScaledRowStochastic => (row_stochastic(&mut rng, p.n).scaled(p.alpha), None),
            OperatorKind::PlatHeterophilic => {
                let v = spread_values(&mut rng, p.n, p.min_gap);
                let q = gaussian_matrix(&mut rng, p.n, p.d_qk, p.qk_scale);
                let k = gaussian_matrix(&mut rng, p.n, p.d_qk, p.qk_scale);
                let cfg = AttentionHeadConfig::new(2, p.d_qk, 2, p.p);
                (plat_operator_matrix(&q, &k, &v, &cfg)?, Some(v))
            }
        };
        let z: Vec<f64> = match p.probe {
            ProbeKind::Random => (0..p.n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ProbeKind::Perron => dominant_eigenvalue(&a, p.analysis.eig_tol, p.analysis.max_iter)?.eigenvector,
        };
        let report = analyze_operator(&a, &z, v.as_ref(), &p.analysis)?;
        let final_ratio = report.final_ratio().unwrap_or(f64::NAN);
        let min_ratio = report.ratio_trajectory.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        low_pass += usize::from(report.is_low_pass_empirical);
        amplifying += usize::from(report.lambda_max > 1.0 + p.lambda_margin);
        min_ratio_all = min_ratio_all.min(min_ratio);
        max_final = if final_ratio.is_nan() { f64::NAN } else { max_final.max(final_ratio) };
        min_lambda = min_lambda.min(report.lambda_max);
        max_lambda = max_lambda.max(report.lambda_max);
        let _ = writeln!(
            trials_csv,
            "{trial},{},{},{final_ratio},{min_ratio},{},{}",
            report.lambda_max,
            report.lambda_max_converged,
            report.is_low_pass_empirical,
            regime_name(report.regime)
        );
        if trial == 0 {
            ratio_csv = report.ratio_csv();
        }
        trials.push(json!({
            "trial": trial,
            "lambda_max": report.lambda_max,
            "lambda_max_converged": report.lambda_max_converged,
            "final_ratio": finite_or_str(final_ratio),
            "min_ratio": finite_or_str(min_ratio),
            "is_low_pass_empirical": report.is_low_pass_empirical,
            "regime": report.regime,
        }));
    }
    let summary = json!({
        "operator": p.operator,
        "trials": p.trials,
        "low_pass_trials": low_pass,
        "amplifying_trials": amplifying,
        "min_ratio": finite_or_str(min_ratio_all),
        "max_final_ratio": finite_or_str(max_final),
        "min_lambda_max": min_lambda,
        "max_lambda_max": max_lambda,
    });
    let mut files = Vec::new();
    write_artifact(dir, "ratio.csv", &ratio_csv, &mut files)?;
    write_artifact(dir, "trials.csv", &trials_csv, &mut files)?;
    let detail = json!({ "summary": summary, "trials": trials });
    write_artifact(dir, "spectral.json", &format!("{}\n", serde_json::to_string_pretty(&detail).expect("json")), &mut files)?;
    Ok(CommandOutput { files, summary, failure: None })
}

fn check_model_task(model: &ModelConfig, task: &plat_core::training::SyntheticTask) -> Result<()> {
    if model.d_model != task.d_x || model.n_tokens != task.n_tokens {
        return Err(CliError::Config(format!(
            "model expects {}x{} sequences but the task produces {}x{}",
            model.n_tokens, model.d_model, task.n_tokens, task.d_x
        )));
    }
    if model.n_classes != 2 {
        return Err(CliError::Config("synthetic tasks have 2 classes".into()));
    }
    Ok(())
}

pub fn train_command(dir: &Path, seed: u64, p: &TrainParams) -> Result<CommandOutput> {
    check_model_task(&p.model, &p.task)?;
    let data = generate_task(&p.task)?;
    let mut model = Model::init(p.model.clone(), seed)?;
    let report = train(&mut model, &data, &p.optimizer)?;
    let mut files = Vec::new();
    write_artifact(dir, "train.csv", &report.to_csv(), &mut files)?;
    write_artifact(dir, "checkpoint.json", &Checkpoint::from_model(&model).to_json(), &mut files)?;
    let first = report.epochs.first();
    Ok(CommandOutput {
        files,
        summary: json!({
            "final_test_accuracy": report.final_test_accuracy,
            "initial_train_loss": first.map(|r| finite_or_str(r.train_loss)),
            "final_train_loss": report.epochs.last().map(|r| finite_or_str(r.train_loss)),
            "epochs_run": report.epochs.len().saturating_sub(1),
            "diverged_at": report.diverged_at,
            "config_hash": report.config_hash,
            "seed": report.seed,
        }),
        failure: report.diverged_at.map(|e| format!("training diverged at epoch {e}")),
    })
}

/// Heads with `lambda_max` above `1 + AMPLIFY_TOL` count as amplifying.
pub const AMPLIFY_TOL: f64 = 1e-6;

pub fn audit(dir: &Path, seed: u64, p: &AuditParams) -> Result<CommandOutput> {
    let mut model = match &p.checkpoint {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            Checkpoint::from_json(&bytes)?.into_model()?
        }
        None => Model::init(p.model.clone(), seed)?,
    };
    check_model_task(&model.config, &p.task)?;
    let data = generate_task(&p.task)?;
    let mut failure = None;
    if p.optimizer.epochs > 0 {
        let report = train(&mut model, &data, &p.optimizer)?;
        failure = report.diverged_at.map(|e| format!("training diverged at epoch {e}"));
    }
    let audits = audit_hooks(&model, &data, &p.audit)?;
    let mut csv = String::from("sequence,layer,head,p,lambda_max,lambda_converged,final_ratio,regime,energy_in,energy_out\n");
    let (mut max_lambda, mut amplifying) = (f64::NEG_INFINITY, 0usize);
    let mut energy_rises = 0usize;
    for (s, layers) in audits.iter().enumerate() {
        for layer in layers {
            let e = layer.energy.energies();
            energy_rises += usize::from(layer.energy.monotone_fraction < 1.0);
            for head in &layer.heads {
                max_lambda = max_lambda.max(head.spectral.lambda_max);
                amplifying += usize::from(head.spectral.lambda_max > 1.0 + AMPLIFY_TOL);
                let _ = writeln!(
                    csv,
                    "{s},{},{},{},{},{},{},{},{},{}",
                    layer.layer,
                    head.head,
                    head.p,
                    head.spectral.lambda_max,
                    head.spectral.lambda_max_converged,
                    head.spectral.final_ratio().unwrap_or(f64::NAN),
                    regime_name(Some(head.regime)),
                    e[0],
                    e[1]
                );
            }
        }
    }
    let mut files = Vec::new();
    write_artifact(dir, "audit.csv", &csv, &mut files)?;
    Ok(CommandOutput {
        files,
        summary: json!({
            "sequences": audits.len(),
            "max_lambda": finite_or_str(max_lambda),
            "amplifying_heads": amplifying,
            "layers_with_energy_increase": energy_rises,
        }),
        failure,
    })
}
