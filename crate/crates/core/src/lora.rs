//! Injected low-rank adaptation deltas on attention projections.
//!
//! A delta on target `t` replaces `W_t` by `W_t + scale · A · B` with Gaussian
//! factors `A: d x s` and `B: s x d`. MLP and normalization weights are never
//! touched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, Model, ModelConfig};
use crate::numerics::{random_matrix, singular_values, Matrix, SeededRng};

const LORA_STREAM: u64 = 0x6c6f_7261_0000_0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Q,
    K,
    V,
    O,
}

impl Target {
    fn index(self) -> u64 {
        self as u64
    }

    pub fn weight(self, w: &LayerWeights) -> &Matrix {
        match self {
            Target::Q => &w.w_q,
            Target::K => &w.w_k,
            Target::V => &w.w_v,
            Target::O => &w.w_o,
        }
    }

    fn weight_mut(self, w: &mut LayerWeights) -> &mut Matrix {
        match self {
            Target::Q => &mut w.w_q,
            Target::K => &mut w.w_k,
            Target::V => &mut w.w_v,
            Target::O => &mut w.w_o,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub targets: Vec<Target>,
    /// Multiplier on `A · B`; `None` means `0.02 / √rank`.
    #[serde(default)]
    pub scale: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Layers to adapt; `None` means every layer.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
}

impl LoraSpec {
    pub fn new(rank: usize, targets: &[Target], seed: u64) -> Self {
        Self { rank, targets: targets.to_vec(), scale: None, seed, layers: None }
    }

    pub fn effective_scale(&self) -> f64 {
        self.scale.unwrap_or(0.02 / (self.rank as f64).sqrt())
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let half = cfg.hidden_size / 2;
        if self.rank == 0 || self.rank > half {
            return Err(Error::Config(format!(
                "LoRA rank must be in 1..={half} for hidden size {}, got {}",
                cfg.hidden_size, self.rank
            )));
        }
        let scale = self.effective_scale();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("LoRA scale must be positive, got {scale}")));
        }
        let mut t = self.targets.clone();
        t.sort();
        t.dedup();
        if t.len() != self.targets.len() {
            return Err(Error::Config("duplicate LoRA target".into()));
        }
        if let Some(layers) = &self.layers {
            if let Some(l) = layers.iter().find(|&&l| l >= cfg.num_layers) {
                return Err(Error::Config(format!(
                    "layer {l} out of range for {} layers",
                    cfg.num_layers
                )));
            }
        }
        Ok(())
    }

    pub fn layer_indices(&self, cfg: &ModelConfig) -> Vec<usize> {
        match &self.layers {
            Some(l) => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                l
            }
            None => (0..cfg.num_layers).collect(),
        }
    }
}

/// One factor pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaFactor {
    pub layer: usize,
    pub target: Target,
    /// `d x s`
    pub a: Matrix,
    /// `s x d`
    pub b: Matrix,
    pub scale: f64,
}

impl DeltaFactor {
    /// `scale · A · B`.
    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b).expect("factor shapes agree").scale(self.scale)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoraDelta {
    pub factors: Vec<DeltaFactor>,
}

/// Draws Gaussian factors for every `(layer, target)` in the spec.
pub fn make_delta(spec: &LoraSpec, cfg: &ModelConfig) -> Result<LoraDelta> {
    spec.validate(cfg)?;
    let d = cfg.hidden_size;
    let mut targets = spec.targets.clone();
    targets.sort();
    let mut factors = Vec::new();
    for layer in spec.layer_indices(cfg) {
        for &target in &targets {
            let mut rng = SeededRng::derive(spec.seed, LORA_STREAM, &[layer as u64, target.index()]);
            factors.push(DeltaFactor {
                layer,
                target,
                a: random_matrix(&mut rng, d, spec.rank, 1.0)?,
                b: random_matrix(&mut rng, spec.rank, d, 1.0)?,
                scale: spec.effective_scale(),
            });
        }
    }
    Ok(LoraDelta { factors })
}

/// Adds each delta onto its target weight; everything else is copied unchanged.
pub fn apply(model: &Model, delta: &LoraDelta) -> Result<Model> {
    let mut out = model.clone();
    let d = model.config.hidden_size;
    for f in &delta.factors {
        if f.a.rows() != d || f.b.cols() != d || f.a.cols() != f.b.rows() {
            return Err(Error::ShapeMismatch(format!(
                "factor pair {:?} x {:?} does not fit hidden size {d}",
                f.a.shape(),
                f.b.shape()
            )));
        }
        let layer = out.layers.get_mut(f.layer).ok_or_else(|| {
            Error::ShapeMismatch(format!("delta targets missing layer {}", f.layer))
        })?;
        let w = f.target.weight_mut(layer);
        *w = w.add(&f.delta())?;
    }
    Ok(out)
}

/// Numerical rank of `W_v W_o − W̃_v W̃_o`: singular values above `rel_threshold · σ₁`.
///
/// Returns 0 when `σ₁` is below `1e-12 · ‖W_v W_o‖_F`, i.e. the products agree to roundoff.
pub fn product_delta_rank(base: &LayerWeights, cand: &LayerWeights, rel_threshold: f64) -> usize {
    let pb = base.value_output_product();
    let diff = pb.sub(&cand.value_output_product()).expect("layer shapes agree");
    let spec = singular_values(&diff).expect("non-empty");
    if spec.largest() < 1e-12 * pb.frobenius_norm() {
        return 0;
    }
    spec.numerical_rank(rel_threshold)
}
