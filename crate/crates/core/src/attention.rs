//! Softmax self-attention and the p-Laplacian variant, where every softmax
//! weight is multiplied by the modulation factor `||v(x) - v(y)||^(p-2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_transposed, pairwise_distances, row_softmax, RealMatrix, TokenSequence};

pub const DEFAULT_EPSILON_CLAMP: f64 = 1e-5;

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON_CLAMP
}

/// Per-head dimensions and p-modulation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionHeadConfig {
    pub d_model: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub p_exponent: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon_clamp: f64,
    #[serde(default)]
    pub renormalize_rows: bool,
    #[serde(default)]
    pub stop_gradient_modulation: bool,
}

impl AttentionHeadConfig {
    pub fn new(d_model: usize, d_qk: usize, d_v: usize, p_exponent: f64) -> Self {
        Self {
            d_model,
            d_qk,
            d_v,
            p_exponent,
            epsilon_clamp: DEFAULT_EPSILON_CLAMP,
            renormalize_rows: false,
            stop_gradient_modulation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_exponent > 1.0) || !self.p_exponent.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "p_exponent must be > 1, got {}",
                self.p_exponent
            )));
        }
        if !(self.epsilon_clamp > 0.0) || !self.epsilon_clamp.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "epsilon_clamp must be > 0, got {}",
                self.epsilon_clamp
            )));
        }
        if self.d_model == 0 || self.d_qk == 0 || self.d_v == 0 {
            return Err(Error::InvalidParameter("head dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Projection weights of one head. `w_q` and `w_k` are `d_qk x d_model`,
/// `w_v` is `d_v x d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_q: RealMatrix,
    pub w_k: RealMatrix,
    pub w_v: RealMatrix,
}

impl HeadWeights {
    /// Symmetric attention: queries and keys share one projection.
    pub fn symmetric(w_k: RealMatrix, w_v: RealMatrix) -> Self {
        Self {
            w_q: w_k.clone(),
            w_k,
            w_v,
        }
    }

    pub fn check(&self, cfg: &AttentionHeadConfig) -> Result<()> {
        let want_qk = (cfg.d_qk, cfg.d_model);
        let want_v = (cfg.d_v, cfg.d_model);
        for (m, want) in [(&self.w_q, want_qk), (&self.w_k, want_qk), (&self.w_v, want_v)] {
            if m.shape() != want {
                return Err(Error::shape("head weights", m.shape(), want));
            }
        }
        Ok(())
    }
}

/// One multi-head block. Per-head p values may differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub heads: Vec<AttentionHeadConfig>,
    /// `(H * d_v) x d_model` output projection.
    pub w_o: RealMatrix,
    #[serde(default)]
    pub use_layer_scaling: bool,
}

impl LayerConfig {
    pub fn d_model(&self) -> usize {
        self.heads.first().map_or(0, |h| h.d_model)
    }

    pub fn concat_width(&self) -> usize {
        self.heads.iter().map(|h| h.d_v).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(Error::InvalidParameter("layer needs at least one head".into()));
        }
        let d_model = self.d_model();
        for h in &self.heads {
            h.validate()?;
            if h.d_model != d_model {
                return Err(Error::InvalidParameter(format!(
                    "heads disagree on d_model: {} vs {}",
                    h.d_model, d_model
                )));
            }
        }
        if self.w_o.shape() != (self.concat_width(), d_model) {
            return Err(Error::shape("w_o", self.w_o.shape(), (self.concat_width(), d_model)));
        }
        Ok(())
    }
}

/// Named per-head p allocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPreset {
    /// Four softmax heads.
    Baseline,
    /// Two heads at p = 1.5 and two at p = 2.5.
    MixedLowHigh,
    /// Two heads at p = 1.5 and two at p = 2.
    MixedLowStandard,
    /// Two heads at p = 2 and two at p = 2.5.
    MixedStandardHigh,
}

impl HeadPreset {
    pub fn p_values(self) -> [f64; 4] {
        match self {
            HeadPreset::Baseline => [2.0; 4],
            HeadPreset::MixedLowHigh => [1.5, 1.5, 2.5, 2.5],
            HeadPreset::MixedLowStandard => [1.5, 1.5, 2.0, 2.0],
            HeadPreset::MixedStandardHigh => [2.0, 2.0, 2.5, 2.5],
        }
    }
}

/// Symmetric positive N x N matrix of modulation factors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationMatrix {
    matrix: RealMatrix,
}

impl ModulationMatrix {
    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &RealMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> RealMatrix {
        self.matrix
    }
}

/// `max(d, eps)^(p - 2)`; exactly 1 when `p == 2`.
#[inline]
pub fn modulation_factor(distance: f64, p: f64, eps: f64) -> f64 {
    if p == 2.0 {
        1.0
    } else {
        distance.max(eps).powf(p - 2.0)
    }
}

pub fn project_qkv(x: &TokenSequence, w: &HeadWeights) -> Result<(RealMatrix, RealMatrix, RealMatrix)> {
    Ok((
        matmul_transposed(x, &w.w_q)?,
        matmul_transposed(x, &w.w_k)?,
        matmul_transposed(x, &w.w_v)?,
    ))
}

fn check_qkv(q: &RealMatrix, k: &RealMatrix, v: &RealMatrix) -> Result<()> {
    if q.shape() != k.shape() {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    if v.rows() != q.rows() {
        return Err(Error::shape("attention q/v", q.shape(), v.shape()));
    }
    Ok(())
}

/// `row_softmax(Q K^T / sqrt(d_qk))`.
pub fn attention_scores(q: &RealMatrix, k: &RealMatrix) -> Result<RealMatrix> {
    if q.shape() != k.shape() {
        return Err(Error::shape("attention q/k", q.shape(), k.shape()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    Ok(row_softmax(&matmul_transposed(q, k)?.scaled(scale)))
}

pub fn softmax_attention(q: &RealMatrix, k: &RealMatrix, v: &RealMatrix) -> Result<TokenSequence> {
    check_qkv(q, k, v)?;
    matmul(&attention_scores(q, k)?, v)
}

pub fn modulation_matrix(v: &RealMatrix, p: f64, eps: f64) -> ModulationMatrix {
    let n = v.rows();
    let matrix = if p == 2.0 {
        RealMatrix::filled(n, n, 1.0)
    } else {
        pairwise_distances(v).map(|d| modulation_factor(d, p, eps))
    };
    ModulationMatrix { matrix }
}

/// The combined N x N weights `softmax_xy * P(x, y)`, row-normalised when
/// the config asks for it.
pub fn combined_weights(q: &RealMatrix, k: &RealMatrix, v: &RealMatrix, cfg: &AttentionHeadConfig) -> Result<RealMatrix> {
    check_qkv(q, k, v)?;
    let scores = attention_scores(q, k)?;
    if cfg.p_exponent == 2.0 && !cfg.renormalize_rows {
        return Ok(scores);
    }
    let modulation = modulation_matrix(v, cfg.p_exponent, cfg.epsilon_clamp);
    let mut w = scores.hadamard(modulation.matrix())?;
    if cfg.renormalize_rows {
        for i in 0..w.rows() {
            let row = w.row_mut(i);
            let total = crate::numerics::sum(row);
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    Ok(w)
}

/// `u(x) = sum_y softmax_xy * P(x, y) * v(y)`.
pub fn plat_attention(q: &RealMatrix, k: &RealMatrix, v: &RealMatrix, cfg: &AttentionHeadConfig) -> Result<TokenSequence> {
    matmul(&combined_weights(q, k, v, cfg)?, v)
}

/// Parameter-free RMS scaling of each token row, used by the optional
/// pre-block normalisation.
pub const LAYER_SCALING_EPS: f64 = 1e-6;

pub fn rms_scale_rows(x: &TokenSequence) -> TokenSequence {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().fold(0.0, |acc, v| acc + v * v) / row.len() as f64;
        let r = (ms + LAYER_SCALING_EPS).sqrt();
        row.iter_mut().for_each(|v| *v /= r);
    }
    out
}

/// Concatenate per-head outputs, project with `w_o`, add the residual.
pub fn multi_head_layer(x: &TokenSequence, layer: &LayerConfig, weights: &[HeadWeights]) -> Result<TokenSequence> {
    layer.validate()?;
    if weights.len() != layer.heads.len() {
        return Err(Error::InvalidParameter(format!(
            "layer has {} heads but {} weight sets were given",
            layer.heads.len(),
            weights.len()
        )));
    }
    if x.cols() != layer.d_model() {
        return Err(Error::shape("multi_head_layer input", x.shape(), (x.rows(), layer.d_model())));
    }
    let input = if layer.use_layer_scaling { rms_scale_rows(x) } else { x.clone() };
    let mut outputs = Vec::with_capacity(weights.len());
    for (cfg, w) in layer.heads.iter().zip(weights) {
        w.check(cfg)?;
        let (q, k, v) = project_qkv(&input, w)?;
        outputs.push(plat_attention(&q, &k, &v, cfg)?);
    }
    let mixed = matmul(&RealMatrix::hconcat(&outputs)?, &layer.w_o)?;
    mixed.add(x)
}
