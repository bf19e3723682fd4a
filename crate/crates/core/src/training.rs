//! Toy trainable p-LaT classifier with an explicit backward pass.
//!
//! Architecture: input tokens (+ optional sinusoidal positions) pass through
//! `L` residual multi-head blocks, are mean-pooled over tokens, and a linear
//! head produces class logits. Loss is mean cross-entropy; the optimiser is
//! plain minibatch SGD.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    attention_scores, modulation_factor, project_qkv, AttentionHeadConfig, HeadWeights, LayerConfig,
    LAYER_SCALING_EPS,
};
use crate::energy_flow::{layer_energy_audit, EnergyKernel, EnergyReport, KernelSchedule};
use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, matmul_transposed, pairwise_distances, RealMatrix, TokenSequence};
use crate::rng::{gaussian, gaussian_matrix, seeded, SeededRng};
use crate::spectral::{analyze_operator, Regime, SpectralConfig, SpectralReport};

/// Architecture hyperparameters. Every layer uses the same per-head p list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_tokens: usize,
    pub n_classes: usize,
    pub n_layers: usize,
    pub head_p: Vec<f64>,
    pub d_qk: usize,
    pub d_v: usize,
    pub epsilon_clamp: f64,
    pub renormalize_rows: bool,
    pub stop_gradient_modulation: bool,
    pub layer_scaling: bool,
    pub positional: bool,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 8,
            n_tokens: 16,
            n_classes: 2,
            n_layers: 1,
            head_p: vec![2.0; 4],
            d_qk: 2,
            d_v: 2,
            epsilon_clamp: crate::attention::DEFAULT_EPSILON_CLAMP,
            renormalize_rows: false,
            stop_gradient_modulation: false,
            layer_scaling: false,
            positional: false,
            init_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn head_config(&self, h: usize) -> AttentionHeadConfig {
        AttentionHeadConfig {
            d_model: self.d_model,
            d_qk: self.d_qk,
            d_v: self.d_v,
            p_exponent: self.head_p[h],
            epsilon_clamp: self.epsilon_clamp,
            renormalize_rows: self.renormalize_rows,
            stop_gradient_modulation: self.stop_gradient_modulation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::InvalidParameter("model needs at least one layer".into()));
        }
        if self.head_p.is_empty() {
            return Err(Error::InvalidParameter("model needs at least one head".into()));
        }
        if self.n_classes < 2 || self.n_tokens == 0 {
            return Err(Error::InvalidParameter("need n_classes >= 2 and n_tokens >= 1".into()));
        }
        for h in 0..self.head_p.len() {
            self.head_config(h).validate()?;
        }
        Ok(())
    }

    /// Total number of scalar parameters, or `None` on overflow.
    pub fn parameter_count(&self) -> Option<usize> {
        let (d, h) = (self.d_model, self.head_p.len());
        let head = self.d_qk.checked_mul(2)?.checked_add(self.d_v)?.checked_mul(d)?;
        let w_o = h.checked_mul(self.d_v)?.checked_mul(d)?;
        let layer = head.checked_mul(h)?.checked_add(w_o)?;
        let classifier = self.n_classes.checked_mul(d.checked_add(1)?)?;
        layer.checked_mul(self.n_layers)?.checked_add(classifier)
    }
}

/// Sinusoidal table: `PE(i, 2j) = sin(i / 10000^(2j/D))`, `PE(i, 2j+1) = cos(...)`.
pub fn sinusoidal_table(n_tokens: usize, d_model: usize) -> RealMatrix {
    RealMatrix::from_fn(n_tokens, d_model, |i, c| {
        let pair = (c / 2) as f64;
        let angle = i as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub heads: Vec<HeadWeights>,
    pub w_o: RealMatrix,
}

/// All trainable tensors. Also used to hold gradients of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub layers: Vec<LayerParams>,
    /// `n_classes x d_model`
    pub classifier_weight: RealMatrix,
    /// `1 x n_classes`
    pub classifier_bias: RealMatrix,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        let z = |m: &RealMatrix| RealMatrix::zeros(m.rows(), m.cols());
        Params {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadWeights { w_q: z(&h.w_q), w_k: z(&h.w_k), w_v: z(&h.w_v) })
                        .collect(),
                    w_o: z(&l.w_o),
                })
                .collect(),
            classifier_weight: z(&other.classifier_weight),
            classifier_bias: z(&other.classifier_bias),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &RealMatrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{l}.head{h}.w_q"), &head.w_q));
                out.push((format!("layer{l}.head{h}.w_k"), &head.w_k));
                out.push((format!("layer{l}.head{h}.w_v"), &head.w_v));
            }
            out.push((format!("layer{l}.w_o"), &layer.w_o));
        }
        out.push(("classifier.weight".into(), &self.classifier_weight));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut RealMatrix> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.w_q);
                out.push(&mut head.w_k);
                out.push(&mut head.w_v);
            }
            out.push(&mut layer.w_o);
        }
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// `self += factor * other`
    pub fn axpy(&mut self, factor: f64, other: &Params) {
        let others: Vec<&RealMatrix> = other.tensors().into_iter().map(|(_, m)| m).collect();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(others) {
            for (a, b) in mine.data_mut().iter_mut().zip(theirs.data()) {
                *a += factor * b;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

fn xavier(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> RealMatrix {
    let std = scale * (2.0 / (rows + cols) as f64).sqrt();
    gaussian_matrix(rng, rows, cols, std)
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let (d, h, s) = (config.d_model, config.head_p.len(), config.init_scale);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                heads: (0..h)
                    .map(|_| HeadWeights {
                        w_q: xavier(&mut rng, config.d_qk, d, s),
                        w_k: xavier(&mut rng, config.d_qk, d, s),
                        w_v: xavier(&mut rng, config.d_v, d, s),
                    })
                    .collect(),
                w_o: xavier(&mut rng, h * config.d_v, d, s),
            })
            .collect();
        let classifier_weight = xavier(&mut rng, config.n_classes, d, s);
        Ok(Self {
            params: Params {
                layers,
                classifier_weight,
                classifier_bias: RealMatrix::zeros(1, config.n_classes),
            },
            config,
        })
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        if self.params.layers.len() != c.n_layers {
            return Err(Error::InvalidParameter("layer count does not match config".into()));
        }
        for l in 0..c.n_layers {
            let layer = self.layer_config(l);
            layer.validate()?;
            let heads = &self.params.layers[l].heads;
            if heads.len() != c.head_p.len() {
                return Err(Error::InvalidParameter("head count does not match config".into()));
            }
            for (cfg, w) in layer.heads.iter().zip(heads) {
                w.check(cfg)?;
            }
        }
        if self.params.classifier_weight.shape() != (c.n_classes, c.d_model) {
            return Err(Error::shape("classifier", self.params.classifier_weight.shape(), (c.n_classes, c.d_model)));
        }
        if self.params.classifier_bias.shape() != (1, c.n_classes) {
            return Err(Error::shape("classifier bias", self.params.classifier_bias.shape(), (1, c.n_classes)));
        }
        Ok(())
    }

    /// The attention-module view of layer `l`.
    pub fn layer_config(&self, l: usize) -> LayerConfig {
        LayerConfig {
            heads: (0..self.config.head_p.len()).map(|h| self.config.head_config(h)).collect(),
            w_o: self.params.layers[l].w_o.clone(),
            use_layer_scaling: self.config.layer_scaling,
        }
    }

    pub fn positional_table(&self) -> Option<RealMatrix> {
        self.config
            .positional
            .then(|| sinusoidal_table(self.config.n_tokens, self.config.d_model))
    }
}

/// Activations of one head kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub q: RealMatrix,
    pub k: RealMatrix,
    pub v: RealMatrix,
    /// softmax scores
    pub scores: RealMatrix,
    /// modulation matrix, `None` at p = 2
    pub modulation: Option<RealMatrix>,
    pub distances: Option<RealMatrix>,
    /// row sums of `scores * modulation` when renormalising
    pub row_sums: Option<Vec<f64>>,
    /// final weights applied to `v`
    pub weights: RealMatrix,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: TokenSequence,
    /// block input after optional RMS scaling
    pub normed: TokenSequence,
    pub rms: Option<Vec<f64>>,
    pub heads: Vec<HeadCache>,
    pub concat: RealMatrix,
    pub output: TokenSequence,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    params_fingerprint: u64,
    pub layers: Vec<LayerCache>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

fn fingerprint(params: &Params) -> u64 {
    let mut hasher = DefaultHasher::new();
    for (_, m) in params.tensors() {
        for v in m.data() {
            v.to_bits().hash(&mut hasher);
        }
    }
    hasher.finish()
}

/// Modulation matrices per layer and head, captured from a forward pass.
pub type FrozenModulation = Vec<Vec<Option<RealMatrix>>>;

/// Forward pass of one head with everything the backward needs.
pub fn head_forward(x: &TokenSequence, w: &HeadWeights, cfg: &AttentionHeadConfig) -> Result<(RealMatrix, HeadCache)> {
    head_forward_with(x, w, cfg, None)
}

fn head_forward_with(
    x: &TokenSequence,
    w: &HeadWeights,
    cfg: &AttentionHeadConfig,
    frozen: Option<&RealMatrix>,
) -> Result<(RealMatrix, HeadCache)> {
    let (q, k, v) = project_qkv(x, w)?;
    let scores = attention_scores(&q, &k)?;
    let p = cfg.p_exponent;
    let (modulation, distances) = if p == 2.0 {
        (None, None)
    } else {
        let d = pairwise_distances(&v);
        let m = match frozen {
            Some(m) => m.clone(),
            None => d.map(|dist| modulation_factor(dist, p, cfg.epsilon_clamp)),
        };
        (Some(m), Some(d))
    };
    let mut weights = match &modulation {
        Some(m) => scores.hadamard(m)?,
        None => scores.clone(),
    };
    let row_sums = if cfg.renormalize_rows {
        let sums = weights.row_sums();
        for (i, s) in sums.iter().enumerate() {
            weights.row_mut(i).iter_mut().for_each(|w| *w /= s);
        }
        Some(sums)
    } else {
        None
    };
    let out = matmul(&weights, &v)?;
    Ok((
        out,
        HeadCache { q, k, v, scores, modulation, distances, row_sums, weights },
    ))
}

/// Gradients of one head's output with respect to its Q, K and V.
pub fn head_backward(cache: &HeadCache, d_out: &RealMatrix, cfg: &AttentionHeadConfig) -> Result<(RealMatrix, RealMatrix, RealMatrix)> {
    let n = cache.v.rows();
    let d_weights_final = matmul_transposed(d_out, &cache.v)?;
    let mut d_v = matmul(&cache.weights.transpose(), d_out)?;

    // undo the row renormalisation
    let d_weights = match &cache.row_sums {
        Some(sums) => {
            let mut g = d_weights_final.clone();
            for x in 0..n {
                let inner = dot(d_weights_final.row(x), cache.weights.row(x));
                for (gv, &dw) in g.row_mut(x).iter_mut().zip(d_weights_final.row(x)) {
                    *gv = (dw - inner) / sums[x];
                }
            }
            g
        }
        None => d_weights_final,
    };

    let d_scores = match &cache.modulation {
        Some(m) => d_weights.hadamard(m)?,
        None => d_weights.clone(),
    };

    if let (Some(_), Some(dist), false) = (&cache.modulation, &cache.distances, cfg.stop_gradient_modulation) {
        let p = cfg.p_exponent;
        let dv_cols = cache.v.cols();
        for x in 0..n {
            for y in 0..n {
                let d = dist.get(x, y);
                if x == y || d < cfg.epsilon_clamp {
                    continue;
                }
                let g = d_weights.get(x, y) * cache.scores.get(x, y) * (p - 2.0) * d.powf(p - 3.0) / d;
                for c in 0..dv_cols {
                    let diff = cache.v.get(x, c) - cache.v.get(y, c);
                    d_v.add_at(x, c, g * diff);
                    d_v.add_at(y, c, -g * diff);
                }
            }
        }
    }

    // softmax backward
    let mut d_logits = RealMatrix::zeros(n, n);
    for x in 0..n {
        let inner = dot(d_scores.row(x), cache.scores.row(x));
        for y in 0..n {
            d_logits.set(x, y, cache.scores.get(x, y) * (d_scores.get(x, y) - inner));
        }
    }
    let scale = 1.0 / (cache.q.cols() as f64).sqrt();
    let d_q = matmul(&d_logits, &cache.k)?.scaled(scale);
    let d_k = matmul(&d_logits.transpose(), &cache.q)?.scaled(scale);
    Ok((d_q, d_k, d_v))
}

fn layer_forward(model: &Model, l: usize, x: &TokenSequence, frozen: Option<&FrozenModulation>) -> Result<LayerCache> {
    let c = &model.config;
    let (normed, rms) = if c.layer_scaling {
        let mut out = x.clone();
        let mut rms = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            let r = (row.iter().fold(0.0, |a, v| a + v * v) / row.len() as f64 + LAYER_SCALING_EPS).sqrt();
            row.iter_mut().for_each(|v| *v /= r);
            rms.push(r);
        }
        (out, Some(rms))
    } else {
        (x.clone(), None)
    };
    let mut outputs = Vec::with_capacity(c.head_p.len());
    let mut heads = Vec::with_capacity(c.head_p.len());
    for (h, w) in model.params.layers[l].heads.iter().enumerate() {
        let fixed = frozen.and_then(|f| f.get(l)).and_then(|layer| layer.get(h)).and_then(Option::as_ref);
        let (out, cache) = head_forward_with(&normed, w, &c.head_config(h), fixed)?;
        outputs.push(out);
        heads.push(cache);
    }
    let concat = RealMatrix::hconcat(&outputs)?;
    let output = matmul(&concat, &model.params.layers[l].w_o)?.add(x)?;
    Ok(LayerCache { input: x.clone(), normed, rms, heads, concat, output })
}

/// Runs the model on one sequence, returning logits and the cache.
pub fn forward(model: &Model, x: &TokenSequence) -> Result<(Vec<f64>, ForwardCache)> {
    forward_with(model, x, None)
}

/// Forward pass with the modulation matrices replaced by `frozen`.
pub fn forward_with(model: &Model, x: &TokenSequence, frozen: Option<&FrozenModulation>) -> Result<(Vec<f64>, ForwardCache)> {
    let c = &model.config;
    if x.shape() != (c.n_tokens, c.d_model) {
        return Err(Error::shape("model input", x.shape(), (c.n_tokens, c.d_model)));
    }
    let mut current = match model.positional_table() {
        Some(table) => x.add(&table)?,
        None => x.clone(),
    };
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let cache = layer_forward(model, l, &current, frozen)?;
        current = cache.output.clone();
        layers.push(cache);
    }
    let n = current.rows() as f64;
    let pooled: Vec<f64> = (0..current.cols())
        .map(|j| (0..current.rows()).fold(0.0, |a, i| a + current.get(i, j)) / n)
        .collect();
    let w = &model.params.classifier_weight;
    let logits: Vec<f64> = (0..c.n_classes)
        .map(|k| dot(w.row(k), &pooled) + model.params.classifier_bias.get(0, k))
        .collect();
    Ok((
        logits.clone(),
        ForwardCache { params_fingerprint: fingerprint(&model.params), layers, pooled, logits },
    ))
}

impl ForwardCache {
    pub fn modulation(&self) -> FrozenModulation {
        self.layers
            .iter()
            .map(|l| l.heads.iter().map(|h| h.modulation.clone()).collect())
            .collect()
    }
}

/// Backpropagates `d_logits` through a cached forward pass.
pub fn backward(model: &Model, cache: &ForwardCache, d_logits: &[f64]) -> Result<Params> {
    if cache.params_fingerprint != fingerprint(&model.params) {
        return Err(Error::StaleCache("parameters changed since forward".into()));
    }
    let c = &model.config;
    if d_logits.len() != c.n_classes || cache.layers.len() != c.n_layers {
        return Err(Error::StaleCache("cache does not match model shape".into()));
    }
    let mut grads = Params::zeros_like(&model.params);
    for k in 0..c.n_classes {
        grads.classifier_bias.set(0, k, d_logits[k]);
        for j in 0..c.d_model {
            grads.classifier_weight.set(k, j, d_logits[k] * cache.pooled[j]);
        }
    }
    let d_pooled: Vec<f64> = (0..c.d_model)
        .map(|j| (0..c.n_classes).fold(0.0, |a, k| a + model.params.classifier_weight.get(k, j) * d_logits[k]))
        .collect();
    let n = c.n_tokens as f64;
    let mut d_current = RealMatrix::from_fn(c.n_tokens, c.d_model, |_, j| d_pooled[j] / n);

    for l in (0..c.n_layers).rev() {
        let lc = &cache.layers[l];
        let params = &model.params.layers[l];
        grads.layers[l].w_o = matmul(&lc.concat.transpose(), &d_current)?;
        let d_concat = matmul_transposed(&d_current, &params.w_o)?;
        let mut d_normed = RealMatrix::zeros(lc.normed.rows(), lc.normed.cols());
        for (h, head_cache) in lc.heads.iter().enumerate() {
            let cfg = c.head_config(h);
            let d_out = d_concat.column_block(h * c.d_v, c.d_v);
            let (d_q, d_k, d_v) = head_backward(head_cache, &d_out, &cfg)?;
            let w = &params.heads[h];
            let g = &mut grads.layers[l].heads[h];
            g.w_q = matmul(&d_q.transpose(), &lc.normed)?;
            g.w_k = matmul(&d_k.transpose(), &lc.normed)?;
            g.w_v = matmul(&d_v.transpose(), &lc.normed)?;
            d_normed.add_assign(&matmul(&d_q, &w.w_q)?)?;
            d_normed.add_assign(&matmul(&d_k, &w.w_k)?)?;
            d_normed.add_assign(&matmul(&d_v, &w.w_v)?)?;
        }
        let d_input = match &lc.rms {
            Some(rms) => {
                let mut d = d_normed.clone();
                let width = d.cols() as f64;
                for i in 0..d.rows() {
                    let inner = dot(d_normed.row(i), lc.normed.row(i)) / width;
                    for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                        *dv = (d_normed.get(i, j) - lc.normed.get(i, j) * inner) / rms[i];
                    }
                }
                d
            }
            None => d_normed,
        };
        d_current = d_current.add(&d_input)?;
    }
    Ok(grads)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().fold(0.0, |a, l| a + (l - max).exp()).ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let grad = logp
        .iter()
        .enumerate()
        .map(|(k, lp)| lp.exp() - if k == label { 1.0 } else { 0.0 })
        .collect();
    (-logp[label], grad)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: TokenSequence,
    pub label: usize,
}

/// Mean loss over `batch`.
pub fn batch_loss(model: &Model, batch: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let (logits, _) = forward(model, &ex.tokens)?;
        total += cross_entropy(&logits, ex.label).0;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and gradient over `batch`, accumulated in example order.
pub fn batch_gradients(model: &Model, batch: &[Example]) -> Result<(f64, Params)> {
    let mut grads = Params::zeros_like(&model.params);
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for ex in batch {
        let (logits, cache) = forward(model, &ex.tokens)?;
        let (loss, d_logits) = cross_entropy(&logits, ex.label);
        total += loss;
        let g = backward(model, &cache, &d_logits)?;
        grads.axpy(scale, &g);
    }
    Ok((total * scale, grads))
}

fn frozen_batch_loss(model: &Model, batch: &[Example], frozen: &[Option<FrozenModulation>]) -> Result<f64> {
    let mut total = 0.0;
    for (ex, f) in batch.iter().zip(frozen) {
        let (logits, _) = forward_with(model, &ex.tokens, f.as_ref())?;
        total += cross_entropy(&logits, ex.label).0;
    }
    Ok(total / batch.len() as f64)
}

/// Central finite differences of the batch loss for every parameter. With
/// `stop_gradient_modulation` the modulation matrices are held at their
/// unperturbed values, matching what the analytic backward differentiates.
pub fn finite_difference_gradients(model: &Model, batch: &[Example], h: f64) -> Result<Params> {
    let frozen: Vec<Option<FrozenModulation>> = batch
        .iter()
        .map(|ex| -> Result<_> {
            Ok(if model.config.stop_gradient_modulation {
                Some(forward(model, &ex.tokens)?.1.modulation())
            } else {
                None
            })
        })
        .collect::<Result<_>>()?;
    let mut probe = model.clone();
    let mut grads = Params::zeros_like(&model.params);
    let n_tensors = model.params.tensors().len();
    for t in 0..n_tensors {
        let len = model.params.tensors()[t].1.data().len();
        for i in 0..len {
            let original = probe.params.tensors_mut()[t].data()[i];
            probe.params.tensors_mut()[t].data_mut()[i] = original + h;
            let plus = frozen_batch_loss(&probe, batch, &frozen)?;
            probe.params.tensors_mut()[t].data_mut()[i] = original - h;
            let minus = frozen_batch_loss(&probe, batch, &frozen)?;
            probe.params.tensors_mut()[t].data_mut()[i] = original;
            grads.tensors_mut()[t].data_mut()[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

/// Denominator floor for [`compare_gradients`]. Tensors whose gradient norm
/// is below it are effectively compared by absolute error; at `h = 1e-5`
/// central differences carry round-off of order `1e-10`.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-5;

/// Relative error `||a - f|| / max(||a||, ||f||, floor)` per parameter tensor.
pub fn compare_gradients(analytic: &Params, numeric: &Params) -> Vec<GradientCheck> {
    analytic
        .tensors()
        .into_iter()
        .zip(numeric.tensors())
        .map(|((name, a), (_, f))| {
            let diff = a.sub(f).map(|d| d.frobenius_norm()).unwrap_or(f64::INFINITY);
            let scale = a.frobenius_norm().max(f.frobenius_norm()).max(GRADIENT_CHECK_FLOOR);
            GradientCheck {
                name,
                relative_error: diff / scale,
                analytic_norm: a.frobenius_norm(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Homophilic,
    Heterophilic,
}

/// Two-prototype sequence classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub n_tokens: usize,
    pub d_x: usize,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Heterophilic only: each sequence draws one rate uniformly from this
    /// list; at that rate a position repeats its predecessor's prototype
    /// instead of alternating.
    pub flip_probs: Vec<f64>,
    /// Explicit unit prototypes; drawn from the seed (and orthogonalised)
    /// when absent.
    pub prototypes: Option<[Vec<f64>; 2]>,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::Heterophilic,
            n_tokens: 16,
            d_x: 8,
            noise_sigma: 0.1,
            n_train: 2000,
            n_test: 500,
            seed: 0,
            flip_probs: vec![0.2, 0.8],
            prototypes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: SyntheticTask,
    pub prototypes: [Vec<f64>; 2],
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

fn check_prototypes(p: &[Vec<f64>; 2], d_x: usize) -> Result<()> {
    for v in p {
        if v.len() != d_x {
            return Err(Error::InvalidParameter(format!("prototype length {} != d_x {d_x}", v.len())));
        }
        if (crate::numerics::norm(v) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter("prototypes must be unit norm".into()));
        }
    }
    if dot(&p[0], &p[1]).abs() > 1.0 - 1e-6 {
        return Err(Error::InvalidParameter("prototypes are collinear".into()));
    }
    Ok(())
}

/// Number of adjacent positions whose prototypes differ.
pub fn adjacent_dissimilar_pairs(assignment: &[usize]) -> usize {
    assignment.windows(2).filter(|w| w[0] != w[1]).count()
}

pub fn heterophilic_label(assignment: &[usize]) -> usize {
    let n = assignment.len();
    usize::from(2 * adjacent_dissimilar_pairs(assignment) > n.saturating_sub(1))
}

pub fn generate_task(task: &SyntheticTask) -> Result<Dataset> {
    if task.n_tokens == 0 || task.d_x < 2 {
        return Err(Error::InvalidParameter("need n_tokens >= 1 and d_x >= 2".into()));
    }
    if !(task.noise_sigma >= 0.0) {
        return Err(Error::InvalidParameter("noise_sigma must be >= 0".into()));
    }
    if task.flip_probs.is_empty() || task.flip_probs.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(Error::InvalidParameter("flip_probs must be non-empty with entries in [0, 1]".into()));
    }
    let mut rng = seeded(task.seed);
    let prototypes = match &task.prototypes {
        Some(p) => p.clone(),
        None => {
            let a: Vec<f64> = (0..task.d_x).map(|_| gaussian(&mut rng)).collect();
            let b: Vec<f64> = (0..task.d_x).map(|_| gaussian(&mut rng)).collect();
            let na = crate::numerics::norm(&a);
            let a: Vec<f64> = a.iter().map(|v| v / na).collect();
            let proj = dot(&a, &b);
            let b: Vec<f64> = b.iter().zip(&a).map(|(bv, av)| bv - proj * av).collect();
            let nb = crate::numerics::norm(&b);
            [a, b.iter().map(|v| v / nb).collect()]
        }
    };
    check_prototypes(&prototypes, task.d_x)?;

    let sample = |rng: &mut SeededRng| -> Example {
        let (assignment, label) = match task.kind {
            TaskKind::Homophilic => {
                let label = usize::from(rand::Rng::random_bool(rng, 0.5));
                (vec![label; task.n_tokens], label)
            }
            TaskKind::Heterophilic => {
                let rate = task.flip_probs[rand::Rng::random_range(rng, 0..task.flip_probs.len())];
                let mut assignment = Vec::with_capacity(task.n_tokens);
                assignment.push(usize::from(rand::Rng::random_bool(rng, 0.5)));
                for i in 1..task.n_tokens {
                    let prev = assignment[i - 1];
                    let flip = rand::Rng::random_bool(rng, rate);
                    assignment.push(if flip { prev } else { 1 - prev });
                }
                let label = heterophilic_label(&assignment);
                (assignment, label)
            }
        };
        let tokens = RealMatrix::from_fn(task.n_tokens, task.d_x, |i, j| {
            prototypes[assignment[i]][j] + task.noise_sigma * gaussian(rng)
        });
        Example { tokens, label }
    };
    let train = (0..task.n_train).map(|_| sample(&mut rng)).collect();
    let test = (0..task.n_test).map(|_| sample(&mut rng)).collect();
    Ok(Dataset { task: task.clone(), prototypes, train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, epochs: 30, batch_size: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Epoch 0 is the model before any update.
    pub epochs: Vec<EpochRecord>,
    pub final_test_accuracy: f64,
    pub seed: u64,
    pub config_hash: String,
    /// Epoch at which the loss became non-finite; training stops there.
    pub diverged_at: Option<usize>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,test_loss,test_acc\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.test_loss, r.test_acc
            ));
        }
        out
    }
}

/// Mean loss and accuracy over a set of examples.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for ex in examples {
        let (logits, _) = forward(model, &ex.tokens)?;
        loss += cross_entropy(&logits, ex.label).0;
        correct += usize::from(argmax(&logits) == ex.label);
    }
    let n = examples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

fn config_hash(model: &ModelConfig, task: &SyntheticTask, opt: &OptimizerConfig) -> String {
    let json = serde_json::json!({ "model": model, "task": task, "optimizer": opt });
    hex::encode(Sha256::digest(json.to_string().as_bytes()))
}

/// Minibatch SGD with a seeded shuffle each epoch.
pub fn train(model: &mut Model, data: &Dataset, opt: &OptimizerConfig) -> Result<TrainReport> {
    model.check()?;
    if opt.batch_size == 0 || !(opt.learning_rate >= 0.0) {
        return Err(Error::InvalidParameter("batch_size must be >= 1 and learning_rate >= 0".into()));
    }
    if data.train.is_empty() {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let mut rng = seeded(opt.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(opt.epochs + 1);
    let mut diverged_at = None;

    let record = |model: &Model, epoch: usize| -> Result<EpochRecord> {
        let (train_loss, train_acc) = evaluate(model, &data.train)?;
        let (test_loss, test_acc) = evaluate(model, &data.test)?;
        Ok(EpochRecord { epoch, train_loss, train_acc, test_loss, test_acc })
    };
    records.push(record(model, 0)?);

    'epochs: for epoch in 1..=opt.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opt.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let (loss, grads) = batch_gradients(model, &batch)?;
            if !loss.is_finite() || !grads.is_finite() {
                diverged_at = Some(epoch);
                break 'epochs;
            }
            model.params.axpy(-opt.learning_rate, &grads);
        }
        let r = record(model, epoch)?;
        let finite = r.train_loss.is_finite() && r.test_loss.is_finite();
        records.push(r);
        if !finite {
            diverged_at = Some(epoch);
            break;
        }
    }
    Ok(TrainReport {
        final_test_accuracy: records.last().map_or(0.0, |r| r.test_acc),
        epochs: records,
        seed: opt.seed,
        config_hash: config_hash(&model.config, &data.task, opt),
        diverged_at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadAudit {
    pub head: usize,
    pub p: f64,
    pub spectral: SpectralReport,
    pub regime: Regime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAudit {
    pub layer: usize,
    /// J of the layer input and output under the mean of the heads'
    /// symmetric key kernels.
    pub energy: EnergyReport,
    pub heads: Vec<HeadAudit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub spectral: SpectralConfig,
    /// Exponent used when evaluating J on layer states.
    pub energy_p: f64,
    /// Number of sequences to audit.
    pub limit: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { spectral: SpectralConfig::default(), energy_p: 2.0, limit: 8 }
    }
}

/// Per-layer energy and per-head spectral diagnostics for one sequence.
pub fn audit_sequence(model: &Model, x: &TokenSequence, cfg: &AuditConfig) -> Result<Vec<LayerAudit>> {
    let (_, cache) = forward(model, x)?;
    let c = &model.config;
    let mut out = Vec::with_capacity(c.n_layers);
    for (l, lc) in cache.layers.iter().enumerate() {
        let mut mean_kernel = RealMatrix::zeros(c.n_tokens, c.n_tokens);
        let mut heads = Vec::with_capacity(lc.heads.len());
        for (h, hc) in lc.heads.iter().enumerate() {
            let kernel = EnergyKernel::symmetric_keys(&hc.k)?;
            mean_kernel.add_assign(&kernel.matrix().scaled(1.0 / lc.heads.len() as f64))?;
            let probe = hc.v.column(0);
            let report = analyze_operator(&hc.weights, &probe, Some(&hc.v), &cfg.spectral)?;
            let regime = report.regime.unwrap_or(Regime::Homophily);
            heads.push(HeadAudit { head: h, p: c.head_p[h], spectral: report, regime });
        }
        let n = mean_kernel.rows();
        let sym = RealMatrix::from_fn(n, n, |i, j| if i <= j { mean_kernel.get(i, j) } else { mean_kernel.get(j, i) });
        let kernel = EnergyKernel::from_matrix(crate::energy_flow::KernelMode::SymmetricKeys, sym)?;
        let energy = layer_energy_audit(
            &[lc.input.clone(), lc.output.clone()],
            &KernelSchedule::Shared(kernel),
            cfg.energy_p,
            c.epsilon_clamp,
        )?;
        out.push(LayerAudit { layer: l, energy, heads });
    }
    Ok(out)
}

/// Audits the first `cfg.limit` test sequences (or training sequences when
/// the test split is empty).
pub fn audit_hooks(model: &Model, data: &Dataset, cfg: &AuditConfig) -> Result<Vec<Vec<LayerAudit>>> {
    let source = if data.test.is_empty() { &data.train } else { &data.test };
    source
        .iter()
        .take(cfg.limit)
        .map(|ex| audit_sequence(model, &ex.tokens, cfg))
        .collect()
}
