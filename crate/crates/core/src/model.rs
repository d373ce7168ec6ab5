//! Decoder-only transformer with single-head attention and a gated MLP.
//!
//! Row-vector convention throughout: activations are `n x d` matrices, one row
//! per token, and weights multiply on the right.
//!
//! Each layer computes
//!
//! ```text
//! y = softmax(Q Kᵀ / √d) · h(X; γ) · W_v · W_o + X        Q = h(X; γ) R W_q,  K = h(X; γ) R W_k
//! z = (σ(h(y; γ') W_G) ⊙ h(y; γ') W_up) · W_down + y
//! ```
//!
//! where `h` is a root-mean-square style normalization and `R` the rotary
//! position embedding, applied to the normalized input ahead of the query/key
//! projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, random_matrix, Matrix, SeededRng};

const MODEL_STREAM: u64 = 0x6d6f_6465_6c00_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    /// tanh approximation.
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + inner.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            }
        }
    }
}

// sqrt(2 / pi)
const GELU_C: f64 = 0.797_884_560_802_865_4;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How the squared norm is scaled inside the normalization's square root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `x ⊙ γ / √(‖x‖² + ε)`
    SumSquares,
    /// `x ⊙ γ / √(‖x‖²/d + ε)`, the usual RMSNorm.
    MeanSquares,
}

impl NormMode {
    /// Multiplier applied to `‖x‖²` for a vector of length `d`.
    #[inline]
    pub fn factor(self, d: usize) -> f64 {
        match self {
            NormMode::SumSquares => 1.0,
            NormMode::MeanSquares => 1.0 / d as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub mlp_size: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_norm_mode")]
    pub norm_mode: NormMode,
}

fn default_norm_eps() -> f64 {
    1e-6
}
fn default_rope_base() -> f64 {
    10_000.0
}
fn default_activation() -> Activation {
    Activation::Silu
}
fn default_norm_mode() -> NormMode {
    NormMode::SumSquares
}

impl ModelConfig {
    pub fn new(hidden_size: usize, mlp_size: usize, num_layers: usize, vocab_size: usize) -> Self {
        Self {
            hidden_size,
            mlp_size,
            num_layers,
            vocab_size,
            norm_eps: default_norm_eps(),
            rope_base: default_rope_base(),
            activation: default_activation(),
            norm_mode: default_norm_mode(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ModelConfig { hidden_size: d, mlp_size: p, num_layers: l, vocab_size: v, .. } = *self;
        if d == 0 || p == 0 || l == 0 || v == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive (d={d}, p={p}, L={l}, V={v})"
            )));
        }
        if d % 2 != 0 {
            return Err(Error::Config(format!("hidden size must be even for RoPE, got {d}")));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config(format!("norm_eps must be positive, got {}", self.norm_eps)));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(Error::Config(format!("rope_base must be positive, got {}", self.rope_base)));
        }
        Ok(())
    }
}

/// Parameters of one decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// `d x d`
    pub w_q: Matrix,
    /// `d x d`
    pub w_k: Matrix,
    /// `d x d`
    pub w_v: Matrix,
    /// `d x d`
    pub w_o: Matrix,
    /// Attention-side normalization weight γ, length `d`.
    pub attn_norm: Vec<f64>,
    /// MLP-side normalization weight γ', length `d`.
    pub mlp_norm: Vec<f64>,
    /// `d x p`
    pub w_gate: Matrix,
    /// `d x p`
    pub w_up: Matrix,
    /// `p x d`
    pub w_down: Matrix,
}

impl LayerWeights {
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let (d, p) = (cfg.hidden_size, cfg.mlp_size);
        let expect = [
            ("w_q", &self.w_q, (d, d)),
            ("w_k", &self.w_k, (d, d)),
            ("w_v", &self.w_v, (d, d)),
            ("w_o", &self.w_o, (d, d)),
            ("w_gate", &self.w_gate, (d, p)),
            ("w_up", &self.w_up, (d, p)),
            ("w_down", &self.w_down, (p, d)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "{name} is {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
        }
        if self.attn_norm.len() != d || self.mlp_norm.len() != d {
            return Err(Error::ShapeMismatch("normalization weights must have length d".into()));
        }
        Ok(())
    }

    /// `W_v · W_o`, the only attention parameters a single-token probe can see.
    pub fn value_output_product(&self) -> Matrix {
        self.w_v.matmul(&self.w_o).expect("layer shapes validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `V x d`
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cfg = &self.config;
        if self.embedding.shape() != (cfg.vocab_size, cfg.hidden_size) {
            return Err(Error::ShapeMismatch(format!(
                "embedding is {:?}, expected ({}, {})",
                self.embedding.shape(),
                cfg.vocab_size,
                cfg.hidden_size
            )));
        }
        if self.layers.len() != cfg.num_layers {
            return Err(Error::ShapeMismatch(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        self.layers.iter().try_for_each(|l| l.check_shapes(cfg))
    }

    /// Errors unless `other` has the same configuration.
    pub fn check_compatible(&self, other: &Model) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Incompatible(format!(
                "configurations differ: {:?} vs {:?}",
                self.config, other.config
            )));
        }
        Ok(())
    }

    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        let vocab = self.config.vocab_size;
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::OutOfVocab { id, vocab });
        }
        Ok(self.embedding.select_rows(tokens))
    }
}

/// Activations recorded at one layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer_index: usize,
    pub x_in: Matrix,
    /// Output of the residual attention block.
    pub y_mid: Matrix,
    /// Output of the residual MLP block.
    pub z_out: Matrix,
}

/// Normalizes one row: `(x ⊙ γ) / √(c‖x‖² + ε)`.
pub fn rms_norm(x: &[f64], gamma: &[f64], eps: f64, mode: NormMode) -> Vec<f64> {
    let sq: f64 = x.iter().map(|v| v * v).sum();
    let inv = 1.0 / (mode.factor(x.len()) * sq + eps).sqrt();
    x.iter().zip(gamma).map(|(v, g)| v * g * inv).collect()
}

fn norm_rows(x: &Matrix, gamma: &[f64], cfg: &ModelConfig) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let h = rms_norm(x.row(r), gamma, cfg.norm_eps, cfg.norm_mode);
        out.row_mut(r).copy_from_slice(&h);
    }
    out
}

/// Rotates coordinate pairs `(2i, 2i+1)` by `pos · base^(-2i/d)`.
pub fn rope_rotate(v: &[f64], pos: usize, base: f64) -> Vec<f64> {
    let d = v.len();
    assert!(d.is_multiple_of(2), "RoPE needs an even dimension");
    let mut out = v.to_vec();
    if pos == 0 {
        return out;
    }
    for i in 0..d / 2 {
        let theta = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        out[2 * i] = a * cos - b * sin;
        out[2 * i + 1] = a * sin + b * cos;
    }
    out
}

/// Row-wise softmax with max subtraction. `-inf` entries get zero weight.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Causal attention weights `softmax(QKᵀ/√d)` for positions `0..n`.
pub fn attention_weights(x: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> Matrix {
    let h = norm_rows(x, &w.attn_norm, cfg);
    attention_weights_normed(&h, w, cfg)
}

fn attention_weights_normed(h: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> Matrix {
    let n = h.rows();
    if n == 1 {
        return Matrix::from_raw(1, 1, vec![1.0]);
    }
    let mut rotated = Matrix::zeros(n, h.cols());
    for pos in 0..n {
        rotated.row_mut(pos).copy_from_slice(&rope_rotate(h.row(pos), pos, cfg.rope_base));
    }
    let q = rotated.matmul(&w.w_q).expect("layer shapes validated");
    let k = rotated.matmul(&w.w_k).expect("layer shapes validated");
    let scale = 1.0 / (cfg.hidden_size as f64).sqrt();
    let mut scores = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let s = if j > i {
                f64::NEG_INFINITY
            } else {
                crate::numerics::dot(q.row(i), k.row(j)) * scale
            };
            scores.set(i, j, s);
        }
    }
    softmax_rows(&scores)
}

/// Residual self-attention block.
pub fn attention(x: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> Matrix {
    let h = norm_rows(x, &w.attn_norm, cfg);
    let a = attention_weights_normed(&h, w, cfg);
    let mixed = a.matmul(&h).expect("square weights");
    let vo = mixed
        .matmul(&w.w_v)
        .and_then(|m| m.matmul(&w.w_o))
        .expect("layer shapes validated");
    vo.add(x).expect("same shape")
}

/// Intermediate values of one MLP row evaluation, kept for backpropagation.
pub(crate) struct MlpPass {
    /// `1 / √(c‖y‖² + ε)`
    pub inv_norm: f64,
    pub gate: Vec<f64>,
    pub up: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) fn mlp_pass(y: &[f64], w: &LayerWeights, cfg: &ModelConfig) -> MlpPass {
    let sq: f64 = y.iter().map(|v| v * v).sum();
    let inv_norm = 1.0 / (cfg.norm_mode.factor(y.len()) * sq + cfg.norm_eps).sqrt();
    let h: Vec<f64> = y.iter().zip(&w.mlp_norm).map(|(v, g)| v * g * inv_norm).collect();
    let gate = w.w_gate.vec_mul(&h);
    let up = w.w_up.vec_mul(&h);
    let act: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| cfg.activation.apply(g) * u).collect();
    let mut out = w.w_down.vec_mul(&act);
    for (o, v) in out.iter_mut().zip(y) {
        *o += v;
    }
    MlpPass { inv_norm, gate, up, out }
}

/// Residual gated MLP for a single row.
pub fn mlp_forward_row(y: &[f64], w: &LayerWeights, cfg: &ModelConfig) -> Vec<f64> {
    mlp_pass(y, w, cfg).out
}

/// Residual gated MLP block.
pub fn mlp_forward(y: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        out.row_mut(r).copy_from_slice(&mlp_forward_row(y.row(r), w, cfg));
    }
    out
}

/// One decoder layer; returns `(y_mid, z_out)`.
pub fn layer_forward(x: &Matrix, w: &LayerWeights, cfg: &ModelConfig) -> (Matrix, Matrix) {
    let y = attention(x, w, cfg);
    let z = mlp_forward(&y, w, cfg);
    (y, z)
}

/// Runs every layer and records `(x_in, y_mid, z_out)` for each.
pub fn forward_capture(model: &Model, tokens: &[usize]) -> Result<Vec<LayerTrace>> {
    let mut x = model.embed(tokens)?;
    let mut traces = Vec::with_capacity(model.layers.len());
    for (i, w) in model.layers.iter().enumerate() {
        let (y, z) = layer_forward(&x, w, &model.config);
        traces.push(LayerTrace { layer_index: i, x_in: x, y_mid: y, z_out: z.clone() });
        x = z;
    }
    Ok(traces)
}

/// Output of the last layer.
pub fn forward(model: &Model, tokens: &[usize]) -> Result<Matrix> {
    let mut x = model.embed(tokens)?;
    for w in &model.layers {
        x = layer_forward(&x, w, &model.config).1;
    }
    Ok(x)
}

/// Random model: Gaussian projections and embedding with std `1/√d`, unit norm weights.
pub fn generate_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let (d, p) = (cfg.hidden_size, cfg.mlp_size);
    let scale = 1.0 / (d as f64).sqrt();
    let mut rng = SeededRng::derive(seed, MODEL_STREAM, &[u64::MAX]);
    let embedding = random_matrix(&mut rng, cfg.vocab_size, d, scale)?;
    let layers = (0..cfg.num_layers)
        .map(|l| {
            let mut rng = SeededRng::derive(seed, MODEL_STREAM, &[l as u64]);
            Ok(LayerWeights {
                w_q: random_matrix(&mut rng, d, d, scale)?,
                w_k: random_matrix(&mut rng, d, d, scale)?,
                w_v: random_matrix(&mut rng, d, d, scale)?,
                w_o: random_matrix(&mut rng, d, d, scale)?,
                attn_norm: vec![1.0; d],
                mlp_norm: vec![1.0; d],
                w_gate: random_matrix(&mut rng, d, p, scale)?,
                w_up: random_matrix(&mut rng, d, p, scale)?,
                w_down: random_matrix(&mut rng, p, d, scale)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model { config: cfg.clone(), embedding, layers })
}

/// Largest `|cos|` between any two distinct embedding rows.
pub fn max_embedding_cosine(model: &Model) -> f64 {
    let e = &model.embedding;
    let mut worst: f64 = 0.0;
    for i in 0..e.rows() {
        for j in (i + 1)..e.rows() {
            worst = worst.max(cosine(e.row(i), e.row(j)).abs());
        }
    }
    worst
}
