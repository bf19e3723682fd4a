//! The p-Laplacian energy
//!
//! ```text
//! J(u) = 1/p * sum_{x,y} k(x,y) * ||u(y) - u(x)||^p
//! ```
//!
//! over a token sequence, its gradient flow
//! `du/dt = -sum_y K(x,y) ||u(x) - u(y)||^(p-2) (u(x) - u(y))` with the
//! symmetric kernel `K = k + k^T`, and the explicit Euler integrator.
//!
//! Symmetric kernels store `K` directly. The energy of a symmetric kernel is
//! evaluated with the half-kernel `K / 2` (one of the `k` with `k + k^T = K`;
//! `J` does not depend on which one is picked because the distance term is
//! symmetric), so `flow_rhs` is exactly `-grad J`.

use serde::{Deserialize, Serialize};

use crate::attention::modulation_factor;
use crate::error::{Error, Result};
use crate::numerics::{euclidean_distance, matmul_transposed, RealMatrix, TokenSequence};

pub const DEFAULT_FLOW_TOLERANCE: f64 = 1e-8;
/// Absolute slack allowed when checking that J did not increase.
pub const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// `k(x,y) = exp(q(x).k(y) / sqrt(d_qk))`
    Asymmetric,
    /// `K(x,y) = k(x,y) + k(y,x)`
    Symmetric,
    /// `K(x,y) = exp(k(x).k(y) / sqrt(d_qk))`
    SymmetricKeys,
}

impl KernelMode {
    pub fn is_symmetric(self) -> bool {
        !matches!(self, KernelMode::Asymmetric)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyKernel {
    mode: KernelMode,
    matrix: RealMatrix,
}

fn exp_scores(q: &RealMatrix, k: &RealMatrix) -> Result<RealMatrix> {
    if q.shape() != k.shape() {
        return Err(Error::shape("kernel q/k", q.shape(), k.shape()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let m = matmul_transposed(q, k)?.map(|s| (s * scale).exp());
    if !m.is_finite() || m.data().iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidParameter(
            "kernel scores overflow or underflow; rescale the keys".into(),
        ));
    }
    Ok(m)
}

impl EnergyKernel {
    pub fn asymmetric(queries: &RealMatrix, keys: &RealMatrix) -> Result<Self> {
        Ok(Self {
            mode: KernelMode::Asymmetric,
            matrix: exp_scores(queries, keys)?,
        })
    }

    pub fn symmetric(queries: &RealMatrix, keys: &RealMatrix) -> Result<Self> {
        let k = exp_scores(queries, keys)?;
        let kt = k.transpose();
        Ok(Self {
            mode: KernelMode::Symmetric,
            matrix: k.add(&kt)?,
        })
    }

    pub fn symmetric_keys(keys: &RealMatrix) -> Result<Self> {
        let m = exp_scores(keys, keys)?;
        // q.k and k.q accumulate identically, but keep the matrix exactly symmetric
        let n = m.rows();
        let sym = RealMatrix::from_fn(n, n, |i, j| if i <= j { m.get(i, j) } else { m.get(j, i) });
        Ok(Self {
            mode: KernelMode::SymmetricKeys,
            matrix: sym,
        })
    }

    /// Wraps a precomputed matrix, validating positivity and, for the
    /// symmetric modes, exact symmetry.
    pub fn from_matrix(mode: KernelMode, matrix: RealMatrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::shape("kernel", matrix.shape(), (matrix.rows(), matrix.rows())));
        }
        if matrix.data().iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("kernel entries must be finite and > 0".into()));
        }
        if mode.is_symmetric() && !matrix.is_symmetric(0.0) {
            return Err(Error::InvalidParameter("symmetric kernel mode with asymmetric matrix".into()));
        }
        Ok(Self { mode, matrix })
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn matrix(&self) -> &RealMatrix {
        &self.matrix
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    /// Weights that multiply `||u(y) - u(x)||^p` inside `J`.
    fn energy_weight(&self, x: usize, y: usize) -> f64 {
        let w = self.matrix.get(x, y);
        if self.mode.is_symmetric() {
            0.5 * w
        } else {
            w
        }
    }

    /// `k(x,y) + k(y,x)` of the energy weights; equals `matrix` for the
    /// symmetric modes.
    fn symmetrized(&self, x: usize, y: usize) -> f64 {
        if self.mode.is_symmetric() {
            self.matrix.get(x, y)
        } else {
            self.matrix.get(x, y) + self.matrix.get(y, x)
        }
    }
}

fn check_kernel(u: &TokenSequence, kernel: &EnergyKernel) -> Result<()> {
    if kernel.n() != u.rows() {
        return Err(Error::shape("kernel vs sequence", kernel.matrix.shape(), u.shape()));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::InvalidParameter(format!("p must be > 1, got {p}")));
    }
    Ok(())
}

pub fn energy_functional(u: &TokenSequence, kernel: &EnergyKernel, p: f64) -> Result<f64> {
    check_kernel(u, kernel)?;
    check_p(p)?;
    let n = u.rows();
    let mut total = 0.0;
    for x in 0..n {
        for y in 0..n {
            if x == y {
                continue;
            }
            let d = euclidean_distance(u.row(x), u.row(y));
            if d > 0.0 {
                total += kernel.energy_weight(x, y) * d.powf(p);
            }
        }
    }
    Ok(total / p)
}

/// `sum_y (k(x,y) + k(y,x)) max(d, eps)^(p-2) (u(x) - u(y))` for any kernel mode.
pub fn energy_gradient(u: &TokenSequence, kernel: &EnergyKernel, p: f64, eps: f64) -> Result<TokenSequence> {
    check_kernel(u, kernel)?;
    check_p(p)?;
    let (n, d) = u.shape();
    let mut grad = RealMatrix::zeros(n, d);
    for x in 0..n {
        for y in 0..n {
            if x == y {
                continue;
            }
            let dist = euclidean_distance(u.row(x), u.row(y));
            if dist == 0.0 {
                continue;
            }
            let w = kernel.symmetrized(x, y) * modulation_factor(dist, p, eps);
            for c in 0..d {
                grad.add_at(x, c, w * (u.get(x, c) - u.get(y, c)));
            }
        }
    }
    Ok(grad)
}

/// Right-hand side of the gradient flow. Requires a symmetric kernel.
pub fn flow_rhs(u: &TokenSequence, kernel: &EnergyKernel, p: f64, eps: f64) -> Result<TokenSequence> {
    if !kernel.mode.is_symmetric() {
        return Err(Error::AsymmetricKernel("flow_rhs"));
    }
    Ok(energy_gradient(u, kernel, p, eps)?.scaled(-1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "dt")]
pub enum StepMode {
    /// Per-row step `1 / sum_y K(x,y)`.
    PaperRowwise,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub p: f64,
    #[serde(default = "default_eps")]
    pub epsilon_clamp: f64,
    pub step_mode: StepMode,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_eps() -> f64 {
    crate::attention::DEFAULT_EPSILON_CLAMP
}

fn default_tolerance() -> f64 {
    DEFAULT_FLOW_TOLERANCE
}

impl FlowConfig {
    pub fn new(p: f64, step_mode: StepMode) -> Self {
        Self {
            p,
            epsilon_clamp: default_eps(),
            step_mode,
            tolerance: DEFAULT_FLOW_TOLERANCE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_p(self.p)?;
        if !(self.epsilon_clamp > 0.0) {
            return Err(Error::InvalidParameter("epsilon_clamp must be > 0".into()));
        }
        if let StepMode::Fixed(dt) = self.step_mode {
            if !(dt > 0.0) || !dt.is_finite() {
                return Err(Error::InvalidParameter(format!("fixed dt must be > 0, got {dt}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub u: TokenSequence,
    pub step_index: usize,
    pub energy: f64,
}

impl FlowState {
    pub fn new(u: TokenSequence, kernel: &EnergyKernel, p: f64) -> Result<Self> {
        let energy = energy_functional(&u, kernel, p)?;
        Ok(Self { u, step_index: 0, energy })
    }
}

pub fn euler_step(state: &FlowState, kernel: &EnergyKernel, cfg: &FlowConfig) -> Result<FlowState> {
    cfg.validate()?;
    let rhs = flow_rhs(&state.u, kernel, cfg.p, cfg.epsilon_clamp)?;
    let mut u = state.u.clone();
    for x in 0..u.rows() {
        let dt = match cfg.step_mode {
            StepMode::Fixed(dt) => dt,
            StepMode::PaperRowwise => 1.0 / crate::numerics::sum(kernel.matrix.row(x)),
        };
        for (ui, ri) in u.row_mut(x).iter_mut().zip(rhs.row(x)) {
            *ui += dt * ri;
        }
    }
    let energy = energy_functional(&u, kernel, cfg.p)?;
    Ok(FlowState {
        u,
        step_index: state.step_index + 1,
        energy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyRecord {
    pub step: usize,
    pub energy: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub trajectory: Vec<EnergyRecord>,
    pub monotone_fraction: f64,
    pub converged: bool,
    pub final_gradient_norm: f64,
    /// Step whose state was non-finite; the trajectory stops before it.
    #[serde(default)]
    pub diverged_at: Option<usize>,
}

impl EnergyReport {
    fn from_trajectory(trajectory: Vec<EnergyRecord>, monotone_pairs: &[(f64, f64)], tolerance: f64) -> Self {
        let monotone_fraction = if monotone_pairs.is_empty() {
            1.0
        } else {
            let ok = monotone_pairs
                .iter()
                .filter(|(before, after)| *after <= *before + MONOTONE_SLACK)
                .count();
            ok as f64 / monotone_pairs.len() as f64
        };
        let final_gradient_norm = trajectory.last().map_or(0.0, |r| r.gradient_norm);
        Self {
            trajectory,
            monotone_fraction,
            converged: final_gradient_norm < tolerance,
            final_gradient_norm,
            diverged_at: None,
        }
    }

    pub fn energies(&self) -> Vec<f64> {
        self.trajectory.iter().map(|r| r.energy).collect()
    }

    /// `step,energy,gradient_norm` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,energy,gradient_norm\n");
        for r in &self.trajectory {
            out.push_str(&format!("{},{},{}\n", r.step, r.energy, r.gradient_norm));
        }
        out
    }
}

/// Integrates up to `steps` Euler steps, stopping early once the gradient
/// norm drops below `cfg.tolerance` or the state stops being finite. The
/// kernel is held fixed.
pub fn run_flow(u0: &TokenSequence, kernel: &EnergyKernel, cfg: &FlowConfig, steps: usize) -> Result<EnergyReport> {
    cfg.validate()?;
    if steps == 0 {
        return Err(Error::InvalidParameter("run_flow needs steps >= 1".into()));
    }
    let mut state = FlowState::new(u0.clone(), kernel, cfg.p)?;
    let mut trajectory = Vec::with_capacity(steps + 1);
    let mut pairs = Vec::with_capacity(steps);
    loop {
        let grad_norm = flow_rhs(&state.u, kernel, cfg.p, cfg.epsilon_clamp)?.frobenius_norm();
        trajectory.push(EnergyRecord {
            step: state.step_index,
            energy: state.energy,
            gradient_norm: grad_norm,
        });
        if grad_norm < cfg.tolerance || state.step_index >= steps {
            break;
        }
        let next = euler_step(&state, kernel, cfg)?;
        pairs.push((state.energy, next.energy));
        if !next.energy.is_finite() || !next.u.is_finite() {
            let mut report = EnergyReport::from_trajectory(trajectory, &pairs, cfg.tolerance);
            report.converged = false;
            report.diverged_at = Some(next.step_index);
            return Ok(report);
        }
        state = next;
    }
    Ok(EnergyReport::from_trajectory(trajectory, &pairs, cfg.tolerance))
}

/// Kernels used by [`layer_energy_audit`].
#[derive(Debug, Clone)]
pub enum KernelSchedule {
    Shared(EnergyKernel),
    /// One kernel per state; transition `l -> l+1` is judged with kernel `l`.
    PerLayer(Vec<EnergyKernel>),
}

/// Evaluates J at every layer state and records whether each transition
/// `U^l -> U^(l+1)` lowered it.
pub fn layer_energy_audit(states: &[TokenSequence], kernels: &KernelSchedule, p: f64, eps: f64) -> Result<EnergyReport> {
    if states.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "layer audit needs at least 2 states, got {}",
            states.len()
        )));
    }
    let kernel_at = |l: usize| -> Result<&EnergyKernel> {
        match kernels {
            KernelSchedule::Shared(k) => Ok(k),
            KernelSchedule::PerLayer(ks) => {
                if ks.len() != states.len() {
                    return Err(Error::InvalidParameter(format!(
                        "{} kernels for {} states",
                        ks.len(),
                        states.len()
                    )));
                }
                Ok(&ks[l])
            }
        }
    };
    let mut trajectory = Vec::with_capacity(states.len());
    let mut pairs = Vec::with_capacity(states.len() - 1);
    for (l, state) in states.iter().enumerate() {
        let kernel = kernel_at(l)?;
        trajectory.push(EnergyRecord {
            step: l,
            energy: energy_functional(state, kernel, p)?,
            gradient_norm: energy_gradient(state, kernel, p, eps)?.frobenius_norm(),
        });
        if let Some(next) = states.get(l + 1) {
            pairs.push((trajectory[l].energy, energy_functional(next, kernel, p)?));
        }
    }
    Ok(EnergyReport::from_trajectory(trajectory, &pairs, DEFAULT_FLOW_TOLERANCE))
}
