//! Function-preserving reparameterizations of decoder layers.
//!
//! Each transform acts on an inner dimension that is summed over, so the
//! layer's input/output map is unchanged while the stored weights move:
//!
//! * MLP hidden units: permute the columns of `W_G` and `W_up` together with
//!   the rows of `W_down`.
//! * Attention value channels: permute the columns of `W_v` with the rows of `W_o`.
//! * Query/key channels: permute the columns of `W_q` and `W_k` together.
//! * Paired scalings: `W_v` columns by `c`, `W_o` rows by `1/c`; likewise
//!   `W_up` columns against `W_down` rows. The gate is left alone because the
//!   activation is not homogeneous.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_capture, LayerWeights, Model};
use crate::numerics::{is_permutation, random_matrix, random_permutation, SeededRng};

const OBF_STREAM: u64 = 0x6f62_6600_0000_0003;
const VERIFY_STREAM: u64 = 0x7665_7269_0000_0004;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObfuscationSpec {
    #[serde(default = "yes")]
    pub enable_mlp_perm: bool,
    #[serde(default = "yes")]
    pub enable_attn_inner_perm: bool,
    #[serde(default = "yes")]
    pub enable_qk_perm: bool,
    #[serde(default = "yes")]
    pub enable_vo_scaling: bool,
    #[serde(default = "yes")]
    pub enable_updown_scaling: bool,
    #[serde(default = "default_range")]
    pub scaling_range: (f64, f64),
    #[serde(default)]
    pub seed: u64,
    /// Std of Gaussian noise added to `W_v`. Not function-preserving; stress testing only.
    #[serde(default)]
    pub additive_noise: f64,
}

fn yes() -> bool {
    true
}

fn default_range() -> (f64, f64) {
    (0.5, 2.0)
}

impl Default for ObfuscationSpec {
    fn default() -> Self {
        Self::all(0)
    }
}

impl ObfuscationSpec {
    /// Every function-preserving transform enabled.
    pub fn all(seed: u64) -> Self {
        Self {
            enable_mlp_perm: true,
            enable_attn_inner_perm: true,
            enable_qk_perm: true,
            enable_vo_scaling: true,
            enable_updown_scaling: true,
            scaling_range: default_range(),
            seed,
            additive_noise: 0.0,
        }
    }

    pub fn none(seed: u64) -> Self {
        Self {
            enable_mlp_perm: false,
            enable_attn_inner_perm: false,
            enable_qk_perm: false,
            enable_vo_scaling: false,
            enable_updown_scaling: false,
            ..Self::all(seed)
        }
    }

    /// Spec with the flags given as a 5-bit mask (bit order as the fields).
    pub fn from_mask(mask: u8, seed: u64) -> Self {
        Self {
            enable_mlp_perm: mask & 1 != 0,
            enable_attn_inner_perm: mask & 2 != 0,
            enable_qk_perm: mask & 4 != 0,
            enable_vo_scaling: mask & 8 != 0,
            enable_updown_scaling: mask & 16 != 0,
            ..Self::all(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scaling_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scaling range must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
        }
        if !(self.additive_noise >= 0.0 && self.additive_noise.is_finite()) {
            return Err(Error::Config(format!("additive noise must be >= 0, got {}", self.additive_noise)));
        }
        Ok(())
    }
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n || !is_permutation(perm) {
        return Err(Error::InvalidPermutation(n));
    }
    Ok(())
}

fn check_scales(c: &[f64], n: usize) -> Result<()> {
    if c.len() != n {
        return Err(Error::ShapeMismatch(format!("{} scales for dimension {n}", c.len())));
    }
    if let Some(v) = c.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidParameter(format!("scales must be positive, got {v}")));
    }
    Ok(())
}

pub fn permute_mlp(layer: &LayerWeights, perm: &[usize]) -> Result<LayerWeights> {
    check_perm(perm, layer.w_gate.cols())?;
    Ok(LayerWeights {
        w_gate: layer.w_gate.permute_cols(perm),
        w_up: layer.w_up.permute_cols(perm),
        w_down: layer.w_down.permute_rows(perm),
        ..layer.clone()
    })
}

pub fn permute_attn_inner(layer: &LayerWeights, perm: &[usize]) -> Result<LayerWeights> {
    check_perm(perm, layer.w_v.cols())?;
    Ok(LayerWeights {
        w_v: layer.w_v.permute_cols(perm),
        w_o: layer.w_o.permute_rows(perm),
        ..layer.clone()
    })
}

pub fn permute_qk(layer: &LayerWeights, perm: &[usize]) -> Result<LayerWeights> {
    check_perm(perm, layer.w_q.cols())?;
    Ok(LayerWeights {
        w_q: layer.w_q.permute_cols(perm),
        w_k: layer.w_k.permute_cols(perm),
        ..layer.clone()
    })
}

pub fn scale_pair_vo(layer: &LayerWeights, c: &[f64]) -> Result<LayerWeights> {
    check_scales(c, layer.w_v.cols())?;
    let inv: Vec<f64> = c.iter().map(|v| 1.0 / v).collect();
    Ok(LayerWeights {
        w_v: layer.w_v.scale_cols(c),
        w_o: layer.w_o.scale_rows(&inv),
        ..layer.clone()
    })
}

pub fn scale_pair_updown(layer: &LayerWeights, c: &[f64]) -> Result<LayerWeights> {
    check_scales(c, layer.w_up.cols())?;
    let inv: Vec<f64> = c.iter().map(|v| 1.0 / v).collect();
    Ok(LayerWeights {
        w_up: layer.w_up.scale_cols(c),
        w_down: layer.w_down.scale_rows(&inv),
        ..layer.clone()
    })
}

fn log_uniform(rng: &mut SeededRng, n: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|_| (a + rng.uniform() * (b - a)).exp()).collect()
}

fn obfuscate_layer(layer: &LayerWeights, index: usize, spec: &ObfuscationSpec) -> Result<LayerWeights> {
    let stream = |t: u64| SeededRng::derive(spec.seed, OBF_STREAM, &[index as u64, t]);
    let (d, p) = (layer.w_v.cols(), layer.w_gate.cols());
    let mut w = layer.clone();
    if spec.enable_mlp_perm {
        w = permute_mlp(&w, &random_permutation(&mut stream(0), p)?)?;
    }
    if spec.enable_attn_inner_perm {
        w = permute_attn_inner(&w, &random_permutation(&mut stream(1), d)?)?;
    }
    if spec.enable_qk_perm {
        w = permute_qk(&w, &random_permutation(&mut stream(2), d)?)?;
    }
    if spec.enable_vo_scaling {
        w = scale_pair_vo(&w, &log_uniform(&mut stream(3), d, spec.scaling_range))?;
    }
    if spec.enable_updown_scaling {
        w = scale_pair_updown(&w, &log_uniform(&mut stream(4), p, spec.scaling_range))?;
    }
    if spec.additive_noise > 0.0 {
        let noise = random_matrix(&mut stream(5), d, d, spec.additive_noise)?;
        w.w_v = w.w_v.add(&noise)?;
    }
    Ok(w)
}

/// Applies the enabled transforms to every layer, each layer on its own random stream.
pub fn obfuscate_model(model: &Model, spec: &ObfuscationSpec) -> Result<Model> {
    spec.validate()?;
    let layers = model
        .layers
        .par_iter()
        .enumerate()
        .map(|(i, l)| obfuscate_layer(l, i, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(Model { layers, ..model.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub single_token_inputs: usize,
    pub multi_token_inputs: usize,
    pub passed: bool,
}

/// Length of the multi-token sequences used by [`verify_equivalence`].
pub const MULTI_TOKEN_LEN: usize = 6;

/// Deterministic multi-token sequences drawn from the probe tokens.
pub fn multi_token_inputs(probes: &[usize], count: usize) -> Vec<Vec<usize>> {
    (0..count)
        .map(|k| {
            let mut rng = SeededRng::derive(0, VERIFY_STREAM, &[k as u64]);
            (0..MULTI_TOKEN_LEN).map(|_| probes[rng.below(probes.len())]).collect()
        })
        .collect()
}

/// Max elementwise difference of every layer's output, over single-token probes and
/// `n_multi` multi-token sequences.
pub fn verify_equivalence(
    a: &Model,
    b: &Model,
    probes: &[usize],
    n_multi: usize,
    tol: f64,
) -> Result<EquivalenceReport> {
    a.check_compatible(b)?;
    if probes.is_empty() {
        return Err(Error::EmptyInput("no probe tokens".into()));
    }
    let mut inputs: Vec<Vec<usize>> = probes.iter().map(|&t| vec![t]).collect();
    inputs.extend(multi_token_inputs(probes, n_multi));
    let diffs = inputs
        .par_iter()
        .map(|tokens| {
            let ta = forward_capture(a, tokens)?;
            let tb = forward_capture(b, tokens)?;
            Ok(ta
                .iter()
                .zip(&tb)
                .map(|(x, y)| x.z_out.max_abs_diff(&y.z_out))
                .fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    let max_abs_diff = diffs.into_iter().fold(0.0, f64::max);
    Ok(EquivalenceReport {
        max_abs_diff,
        tolerance: tol,
        single_token_inputs: probes.len(),
        multi_token_inputs: n_multi,
        passed: max_abs_diff <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attention, generate_model, layer_forward, mlp_forward, ModelConfig};
    use crate::numerics::{cosine, invert_permutation, Matrix};

    fn setup() -> (Model, Matrix) {
        let m = generate_model(&ModelConfig::new(64, 176, 2, 64), 17).unwrap();
        let x = m.embed(&[1, 9, 22, 40]).unwrap();
        (m, x)
    }

    #[test]
    fn identity_permutations_change_nothing() {
        let (m, _) = setup();
        let w = &m.layers[0];
        let id_d: Vec<usize> = (0..64).collect();
        let id_p: Vec<usize> = (0..176).collect();
        assert_eq!(&permute_mlp(w, &id_p).unwrap(), w);
        assert_eq!(&permute_attn_inner(w, &id_d).unwrap(), w);
        assert_eq!(&permute_qk(w, &id_d).unwrap(), w);
        assert_eq!(&scale_pair_vo(w, &[1.0; 64]).unwrap(), w);
        assert_eq!(&scale_pair_updown(w, &[1.0; 176]).unwrap(), w);
    }

    #[test]
    fn invalid_arguments() {
        let (m, _) = setup();
        let w = &m.layers[0];
        assert!(matches!(permute_mlp(w, &[0; 176]), Err(Error::InvalidPermutation(176))));
        assert!(permute_qk(w, &(0..63).collect::<Vec<_>>()).is_err());
        let mut c = vec![1.0; 64];
        c[3] = 0.0;
        assert!(matches!(scale_pair_vo(w, &c), Err(Error::InvalidParameter(_))));
        assert!(ObfuscationSpec { scaling_range: (2.0, 1.0), ..ObfuscationSpec::all(0) }
            .validate()
            .is_err());
    }

    #[test]
    fn mlp_permutation_preserves_output_and_inverts() {
        let (m, x) = setup();
        let w = &m.layers[0];
        let perm = random_permutation(&mut SeededRng::new(1, 0), 176).unwrap();
        let pw = permute_mlp(w, &perm).unwrap();
        assert!(mlp_forward(&x, &pw, &m.config).max_abs_diff(&mlp_forward(&x, w, &m.config)) < 1e-12);
        assert_eq!(&permute_mlp(&pw, &invert_permutation(&perm)).unwrap(), w);
    }

    #[test]
    fn attention_inner_permutation_keeps_vo_product() {
        let (m, x) = setup();
        let w = &m.layers[1];
        let perm = random_permutation(&mut SeededRng::new(2, 0), 64).unwrap();
        let pw = permute_attn_inner(w, &perm).unwrap();
        // Same products summed in a different order; equal to roundoff.
        assert!(pw.value_output_product().max_abs_diff(&w.value_output_product()) < 1e-15);
        let single = x.select_rows(&[0]);
        assert!(attention(&single, &pw, &m.config).max_abs_diff(&attention(&single, w, &m.config)) < 1e-12);
        assert!(pw.w_v.max_abs_diff(&w.w_v) > 0.0);
    }

    #[test]
    fn qk_permutation_preserves_multi_token_output() {
        let (m, x) = setup();
        let w = &m.layers[0];
        let perm = random_permutation(&mut SeededRng::new(3, 0), 64).unwrap();
        let pw = permute_qk(w, &perm).unwrap();
        let (_, z0) = layer_forward(&x, w, &m.config);
        let (_, z1) = layer_forward(&x, &pw, &m.config);
        assert!(z0.max_abs_diff(&z1) < 1e-12);
        assert!(cosine(pw.w_q.as_slice(), w.w_q.as_slice()) < 0.9);
    }

    #[test]
    fn paired_scalings_preserve_output() {
        let (m, x) = setup();
        let w = &m.layers[0];
        let mut rng = SeededRng::new(4, 0);
        let cd = log_uniform(&mut rng, 64, (0.5, 2.0));
        let cp = log_uniform(&mut rng, 176, (0.5, 2.0));
        let sw = scale_pair_updown(&scale_pair_vo(w, &cd).unwrap(), &cp).unwrap();
        let (y0, z0) = layer_forward(&x, w, &m.config);
        let (y1, z1) = layer_forward(&x, &sw, &m.config);
        assert!(y0.max_abs_diff(&y1) < 1e-10);
        assert!(z0.max_abs_diff(&z1) < 1e-10);
        assert!(cd.iter().chain(&cp).all(|c| (0.5..=2.0).contains(c)));
    }

    #[test]
    fn scaling_the_gate_breaks_equivalence() {
        let (m, x) = setup();
        let w = &m.layers[0];
        let cp = log_uniform(&mut SeededRng::new(5, 0), 176, (0.5, 2.0));
        let inv: Vec<f64> = cp.iter().map(|v| 1.0 / v).collect();
        let broken = LayerWeights {
            w_gate: w.w_gate.scale_cols(&cp),
            w_down: w.w_down.scale_rows(&inv),
            ..w.clone()
        };
        let diff = mlp_forward(&x, &broken, &m.config).max_abs_diff(&mlp_forward(&x, w, &m.config));
        assert!(diff > 1e-3, "gate scaling changed output by only {diff}");
    }

    #[test]
    fn whole_model_obfuscation() {
        let cfg = ModelConfig::new(64, 176, 8, 128);
        let m = generate_model(&cfg, 5).unwrap();
        let probes: Vec<usize> = (0..64).collect();

        let same = obfuscate_model(&m, &ObfuscationSpec::none(1)).unwrap();
        assert_eq!(same, m);
        assert_eq!(verify_equivalence(&m, &same, &probes, 8, 0.0).unwrap().max_abs_diff, 0.0);

        let obf = obfuscate_model(&m, &ObfuscationSpec::all(1)).unwrap();
        let report = verify_equivalence(&m, &obf, &probes, 8, 1e-9).unwrap();
        assert!(report.passed, "max diff {}", report.max_abs_diff);
        for (a, b) in m.layers.iter().zip(&obf.layers) {
            let flat = |w: &LayerWeights| {
                [&w.w_q, &w.w_k, &w.w_v, &w.w_o]
                    .iter()
                    .flat_map(|m| m.as_slice().to_vec())
                    .collect::<Vec<_>>()
            };
            assert!(cosine(&flat(a), &flat(b)) < 0.9);
        }
        assert_eq!(obf, obfuscate_model(&m, &ObfuscationSpec::all(1)).unwrap());
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let a = generate_model(&ModelConfig::new(8, 12, 1, 16), 0).unwrap();
        let b = generate_model(&ModelConfig::new(8, 12, 2, 16), 0).unwrap();
        assert!(matches!(verify_equivalence(&a, &b, &[0], 1, 1e-9), Err(Error::Incompatible(_))));
    }
}
