//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Criteria run one after another so the timings
//! are not distorted by parallel tests.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use plat_cli::{execute, ExperimentConfig, RunOutcome, RunStatus};
use plat_core::energy_flow::{energy_functional, flow_rhs, EnergyKernel};
use plat_core::numerics::RealMatrix;
use plat_core::rng::{gaussian_matrix, seeded};
use rand::Rng;
use serde_json::{json, Value};
use tempfile::TempDir;

const EQUIV_TOL: f64 = 1e-12;
const EULER_TOL: f64 = 1e-10;
const FLOW_GRAD_TOL: f64 = 1e-5;
const FLOW_FD_STEP: f64 = 1e-6;
const LOW_PASS_TOL: f64 = 1e-6;
const AMPLIFY_MARGIN: f64 = 0.05;
const MIN_AMPLIFYING: u64 = 95;
const MIN_HETERO_RATIO: f64 = 0.1;
const GRAD_TOL: f64 = 1e-4;
const HOMOPHILIC_TARGET: f64 = 0.95;

struct Verdict {
    passed: bool,
    detail: String,
}

fn run(config: Value, dir: &Path) -> RunOutcome {
    let config = ExperimentConfig::from_json(&config.to_string()).expect("valid config");
    execute(&config, dir).expect("run completes")
}

fn f(v: &Value, key: &str) -> f64 {
    v[key].as_f64().unwrap_or_else(|| panic!("summary field {key} missing in {v}"))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn reduction(tmp: &Path) -> Verdict {
    let out = run(
        json!({"command": "equivcheck", "seed": 1,
               "params": {"instances": 100, "max_tokens": 16, "max_dim": 8,
                          "tolerance": EQUIV_TOL, "euler_tolerance": EULER_TOL}}),
        &tmp.join("c1"),
    );
    let (a, e) = (f(&out.summary, "max_attention_diff"), f(&out.summary, "max_euler_diff"));
    Verdict {
        passed: out.status == RunStatus::Ok && a < EQUIV_TOL && e < EULER_TOL,
        detail: format!("max |p=2 - softmax| = {a:.2e}, max |Euler - attention| = {e:.2e}"),
    }
}

fn flow_gradient() -> Verdict {
    let mut rng = seeded(2);
    let mut worst = 0.0f64;
    for &p in &[1.5, 2.0, 2.5, 3.0] {
        for _ in 0..10 {
            let n = rng.random_range(2..=8);
            let d = rng.random_range(1..=4);
            let u = gaussian_matrix(&mut rng, n, d, 1.0);
            let q = gaussian_matrix(&mut rng, n, 2, 0.7);
            let k = gaussian_matrix(&mut rng, n, 2, 0.7);
            for kernel in [EnergyKernel::symmetric(&q, &k).unwrap(), EnergyKernel::symmetric_keys(&k).unwrap()] {
                let mut probe = u.clone();
                let numeric = RealMatrix::from_fn(n, d, |i, j| {
                    let x = u.get(i, j);
                    probe.set(i, j, x + FLOW_FD_STEP);
                    let plus = energy_functional(&probe, &kernel, p).unwrap();
                    probe.set(i, j, x - FLOW_FD_STEP);
                    let minus = energy_functional(&probe, &kernel, p).unwrap();
                    probe.set(i, j, x);
                    -(plus - minus) / (2.0 * FLOW_FD_STEP)
                });
                let rhs = flow_rhs(&u, &kernel, p, plat_core::attention::DEFAULT_EPSILON_CLAMP).unwrap();
                let err = rhs.sub(&numeric).unwrap().frobenius_norm()
                    / rhs.frobenius_norm().max(numeric.frobenius_norm());
                worst = worst.max(err);
            }
        }
    }
    Verdict { passed: worst < FLOW_GRAD_TOL, detail: format!("80 instances, max relative error {worst:.2e}") }
}

fn descent(tmp: &Path) -> Verdict {
    let mut worst = 1.0f64;
    let mut failed = Vec::new();
    for run_id in 0..20u64 {
        let p = [1.5, 2.0, 2.5, 3.0][run_id as usize % 4];
        let out = run(
            json!({"command": "flow", "seed": run_id,
                   "params": {"p": p, "step_mode": {"kind": "fixed", "dt": 1e-3}, "steps": 200}}),
            &tmp.join(format!("c3_fixed_{run_id}")),
        );
        let m = f(&out.summary, "monotone_fraction");
        worst = worst.min(m);
        if m != 1.0 || out.status != RunStatus::Ok {
            failed.push(run_id);
        }
    }
    let mut worst_rowwise = 1.0f64;
    for run_id in 0..5u64 {
        let out = run(
            json!({"command": "flow", "seed": run_id,
                   "params": {"p": 2.0, "step_mode": {"kind": "paper_rowwise"}, "steps": 200}}),
            &tmp.join(format!("c3_rowwise_{run_id}")),
        );
        let m = f(&out.summary, "monotone_fraction");
        worst_rowwise = worst_rowwise.min(m);
        if m != 1.0 || out.status != RunStatus::Ok {
            failed.push(100 + run_id);
        }
    }
    Verdict {
        passed: failed.is_empty(),
        detail: format!("fixed dt: 20 runs, min monotone fraction {worst}; rowwise p=2: 5 runs, min {worst_rowwise}"),
    }
}

fn low_pass(tmp: &Path) -> Verdict {
    let plain = run(
        json!({"command": "spectral", "seed": 4,
               "params": {"operator": "row_stochastic", "trials": 100, "analysis": {"t_max": 50}}}),
        &tmp.join("c4_plain"),
    );
    let scaled = run(
        json!({"command": "spectral", "seed": 5,
               "params": {"operator": "scaled_row_stochastic", "alpha": 0.9, "trials": 100,
                          "analysis": {"t_max": 50}}}),
        &tmp.join("c4_scaled"),
    );
    let (r1, r2) = (f(&plain.summary, "max_final_ratio"), f(&scaled.summary, "max_final_ratio"));
    let lambda = f(&scaled.summary, "max_lambda_max");
    Verdict {
        passed: r1 < LOW_PASS_TOL && r2 < LOW_PASS_TOL && lambda <= 1.0,
        detail: format!(
            "row-stochastic max ratio {r1:.2e}; 0.9*row-stochastic max lambda {lambda:.6}, max ratio {r2:.2e}"
        ),
    }
}

fn heterophily_witness(tmp: &Path) -> Verdict {
    let out = run(
        json!({"command": "spectral", "seed": 5,
               "params": {"operator": "plat_heterophilic", "probe": "perron", "trials": 100, "n": 16,
                          "p": 2.5, "min_gap": 1.5, "lambda_margin": AMPLIFY_MARGIN,
                          "analysis": {"t_max": 200}}}),
        &tmp.join("c5"),
    );
    let amplifying = out.summary["amplifying_trials"].as_u64().expect("amplifying_trials");
    let min_ratio = f(&out.summary, "min_ratio");
    Verdict {
        passed: amplifying >= MIN_AMPLIFYING && min_ratio >= MIN_HETERO_RATIO,
        detail: format!(
            "{amplifying}/100 trials with lambda_max > 1 + {AMPLIFY_MARGIN}, min ratio over t<=200 {min_ratio:.3}"
        ),
    }
}

fn backward(tmp: &Path) -> Verdict {
    let dir = tmp.join("c6");
    let out = run(json!({"command": "gradcheck", "seed": 0, "params": {"configs": 20}}), &dir);
    let csv = std::fs::read_to_string(dir.join("gradcheck.csv")).unwrap();
    let mut ps = BTreeSet::new();
    let mut modes = BTreeSet::new();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        for p in cols[1].split(';') {
            ps.insert(p.to_string());
        }
        modes.insert(cols[2].to_string());
    }
    let covered = ["1.5", "2", "2.5"].iter().all(|p| ps.contains(*p)) && modes.len() == 2;
    let worst = f(&out.summary, "max_relative_error");
    Verdict {
        passed: worst < GRAD_TOL && covered,
        detail: format!("20 configs, p in {ps:?}, stop-gradient {modes:?}, max relative error {worst:.2e}"),
    }
}

fn train_config(seed: u64, head_p: &[f64], task: Value) -> Value {
    json!({"command": "train", "seed": seed + 100,
           "params": {"model": {"head_p": head_p, "epsilon_clamp": 1e-2, "layer_scaling": true},
                      "task": task,
                      "optimizer": {"seed": seed}}})
}

fn toy_comparison(tmp: &Path) -> Verdict {
    let mut base = Vec::new();
    let mut mixed = Vec::new();
    for s in 0..5u64 {
        let task = json!({"kind": "heterophilic", "n_tokens": 16, "n_train": 2000, "n_test": 500, "seed": s});
        let b = run(train_config(s, &[2.0; 4], task.clone()), &tmp.join(format!("c7_base_{s}")));
        let m = run(train_config(s, &[1.5, 1.5, 2.5, 2.5], task), &tmp.join(format!("c7_mixed_{s}")));
        base.push(f(&b.summary, "final_test_accuracy"));
        mixed.push(f(&m.summary, "final_test_accuracy"));
    }
    let homophilic = run(
        train_config(0, &[2.0; 4], json!({"kind": "homophilic", "noise_sigma": 0.0, "seed": 0})),
        &tmp.join("c7_homophilic"),
    );
    let hom = f(&homophilic.summary, "final_test_accuracy");
    let (mb, mm) = (median(base.clone()), median(mixed.clone()));
    Verdict {
        passed: mm >= mb && hom >= HOMOPHILIC_TARGET,
        detail: format!(
            "heterophilic median mixed {mm:.3} {mixed:?} vs p=2 {mb:.3} {base:?}; noiseless homophilic p=2 {hom:.3}"
        ),
    }
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism(tmp: &Path) -> Verdict {
    let configs = [
        json!({"command": "equivcheck", "seed": 1}),
        json!({"command": "gradcheck", "seed": 0, "params": {"configs": 4}}),
        json!({"command": "flow", "seed": 3, "params": {"p": 1.5}}),
        json!({"command": "spectral", "seed": 5, "params": {"operator": "plat_heterophilic", "probe": "perron",
                                                             "trials": 10, "n": 16, "analysis": {"t_max": 200}}}),
        json!({"command": "train", "seed": 7, "params": {"task": {"n_train": 100, "n_test": 50}, "optimizer": {"epochs": 3}}}),
        json!({"command": "audit", "seed": 7, "params": {"task": {"n_train": 16, "n_test": 4}}}),
    ];
    let mut mismatched = Vec::new();
    let mut compared = 0;
    for (i, config) in configs.iter().enumerate() {
        let a = tmp.join(format!("c8_{i}_a"));
        let b = tmp.join(format!("c8_{i}_b"));
        run(config.clone(), &a);
        run(config.clone(), &b);
        let (ca, cb) = (csv_bytes(&a), csv_bytes(&b));
        compared += ca.len();
        if ca.is_empty() || ca != cb {
            mismatched.push(config["command"].as_str().unwrap().to_string());
        }
    }
    Verdict {
        passed: mismatched.is_empty(),
        detail: format!("{compared} CSV artifacts over 6 commands compared, mismatches {mismatched:?}"),
    }
}

fn main() -> ExitCode {
    let tmp = TempDir::new().expect("tempdir");
    let t = tmp.path();
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("1 reduction equivalence", Duration::from_secs(1), Box::new(|| reduction(t))),
        ("2 gradient-flow correctness", Duration::from_secs(10), Box::new(flow_gradient)),
        ("3 energy descent", Duration::from_secs(30), Box::new(|| descent(t))),
        ("4 low-pass behaviour", Duration::from_secs(30), Box::new(|| low_pass(t))),
        ("5 non-low-pass witness", Duration::from_secs(60), Box::new(|| heterophily_witness(t))),
        ("6 backward correctness", Duration::from_secs(120), Box::new(|| backward(t))),
        ("7 end-to-end toy comparison", Duration::from_secs(600), Box::new(|| toy_comparison(t))),
        ("8 determinism", Duration::from_secs(600), Box::new(|| determinism(t))),
    ];
    let mut all = true;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let verdict = check();
        let elapsed = start.elapsed();
        let passed = verdict.passed && elapsed <= limit;
        all &= passed;
        println!(
            "{} criterion {name}: {} ({:.2}s, limit {}s)",
            if passed { "PASS" } else { "FAIL" },
            verdict.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
