//! Per-layer LoRA rank extraction and aggregation into a provenance verdict.
//!
//! Each probe is a single token, so attention reduces to `y = x + h(x) W_v W_o`.
//! Feeding base and candidate layers the same input and subtracting the
//! post-attention states leaves `h(x) (W_v W_o − W̃_v W̃_o)`, whose rank is the
//! rank of the attention delta. The candidate's post-attention state is recovered
//! from its layer output by inverting the base MLP, which is unaffected by
//! function-preserving reparameterization of the candidate.

mod diagnostics;
mod spectral;

pub use diagnostics::*;
pub use spectral::*;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{attention, forward_capture, layer_forward, Model, ModelConfig};
use crate::numerics::{cosine, norm, sample_without_replacement, singular_values, Matrix, SeededRng, SingularSpectrum};
use crate::reconstruct::{invert_mlp, ReconstructionConfig};

const TRACE_STREAM: u64 = 0x7472_6163_0000_0005;

/// Probe tokens whose embeddings are treated as parallel above this `|cos|`.
pub const PARALLEL_COSINE: f64 = 1.0 - 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub cycles: usize,
    /// Rows per difference matrix; `d/2` when unset.
    pub subset_size: Option<usize>,
    /// Minimum peak log-ratio for a detection.
    pub ratio_floor: f64,
    /// `σ₁` below `abs_floor` times the mean norm of the base intermediates is a null layer.
    pub abs_floor: f64,
    pub top_fraction: f64,
    /// Number of probe tokens; `d` when unset.
    pub probe_count: Option<usize>,
    /// Inversion settings; [`ReconstructionConfig::for_hidden_size`] when unset.
    pub reconstruction: Option<ReconstructionConfig>,
    /// Use the candidate's own post-attention state instead of reconstructing it.
    pub assume_unobfuscated: bool,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            cycles: 16,
            subset_size: None,
            ratio_floor: 1e3f64.ln(),
            abs_floor: 1e-7,
            top_fraction: 0.10,
            probe_count: None,
            reconstruction: None,
            assume_unobfuscated: false,
            seed: 0,
        }
    }
}

/// [`TraceConfig`] with every default filled in for a concrete model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTraceConfig {
    pub cycles: usize,
    pub subset_size: usize,
    pub ratio_floor: f64,
    pub abs_floor: f64,
    pub top_fraction: f64,
    pub probe_count: usize,
    pub reconstruction: ReconstructionConfig,
    pub assume_unobfuscated: bool,
    pub seed: u64,
}

impl TraceConfig {
    pub fn resolve(&self, cfg: &ModelConfig) -> Result<ResolvedTraceConfig> {
        let d = cfg.hidden_size;
        let r = ResolvedTraceConfig {
            cycles: self.cycles,
            subset_size: self.subset_size.unwrap_or(d / 2),
            ratio_floor: self.ratio_floor,
            abs_floor: self.abs_floor,
            top_fraction: self.top_fraction,
            probe_count: self.probe_count.unwrap_or(d),
            reconstruction: self.reconstruction.clone().unwrap_or_else(|| ReconstructionConfig::for_hidden_size(d)),
            assume_unobfuscated: self.assume_unobfuscated,
            seed: self.seed,
        };
        r.validate(cfg)?;
        Ok(r)
    }
}

impl ResolvedTraceConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be at least 1".into()));
        }
        if self.subset_size == 0 || self.subset_size > self.probe_count {
            return Err(Error::Config(format!(
                "subset_size must lie in 1..={}, got {}",
                self.probe_count, self.subset_size
            )));
        }
        if self.probe_count > cfg.vocab_size {
            return Err(Error::Config(format!(
                "probe_count {} exceeds vocabulary size {}",
                self.probe_count, cfg.vocab_size
            )));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config(format!("top_fraction must lie in (0, 1], got {}", self.top_fraction)));
        }
        if !(self.ratio_floor.is_finite() && self.ratio_floor >= 0.0) {
            return Err(Error::Config(format!("ratio_floor must be finite and non-negative, got {}", self.ratio_floor)));
        }
        if !(self.abs_floor.is_finite() && self.abs_floor >= 0.0) {
            return Err(Error::Config(format!("abs_floor must be finite and non-negative, got {}", self.abs_floor)));
        }
        self.reconstruction.validate()
    }
}

/// `count` tokens in id order whose embeddings are pairwise non-parallel and jointly of
/// rank `min(count, d)`.
pub fn probe_set(model: &Model, count: usize) -> Result<Vec<usize>> {
    let vocab = model.config.vocab_size;
    if count == 0 {
        return Err(Error::Probe("probe count must be at least 1".into()));
    }
    if count > vocab {
        return Err(Error::Probe(format!("{count} probes requested from a vocabulary of {vocab}")));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    for t in 0..vocab {
        if chosen.len() == count {
            break;
        }
        let row = model.embedding.row(t);
        if norm(row) == 0.0 {
            continue;
        }
        if chosen.iter().all(|&c| cosine(row, model.embedding.row(c)).abs() < PARALLEL_COSINE) {
            chosen.push(t);
        }
    }
    if chosen.len() < count {
        return Err(Error::Probe(format!(
            "only {} pairwise non-parallel tokens available, {count} requested",
            chosen.len()
        )));
    }
    let want = count.min(model.config.hidden_size);
    let rank = singular_values(&model.embedding.select_rows(&chosen))?.numerical_rank(1e-10);
    if rank < want {
        return Err(Error::Probe(format!("probe embeddings have rank {rank}, expected {want}")));
    }
    Ok(chosen)
}

/// Single-token activations of one layer; row `j` belongs to probe `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerData {
    /// Base model's input to this layer.
    pub x_in: Matrix,
    /// Base layer's post-attention state.
    pub y_base: Matrix,
    /// Candidate layer output on `x_in`.
    pub z_cand: Matrix,
    /// Candidate layer's post-attention state on `x_in`.
    pub y_cand: Matrix,
}

/// Runs every probe through the base model and feeds each base layer input to the
/// matching candidate layer.
pub fn collect_intermediates(base: &Model, cand: &Model, probes: &[usize]) -> Result<Vec<LayerData>> {
    base.check_compatible(cand)?;
    if probes.is_empty() {
        return Err(Error::EmptyInput("no probe tokens".into()));
    }
    let cfg = &base.config;
    let d = cfg.hidden_size;
    let per_probe = probes
        .par_iter()
        .map(|&t| {
            let traces = forward_capture(base, &[t])?;
            Ok(traces
                .into_iter()
                .zip(&cand.layers)
                .map(|(tr, cw)| {
                    let (y_cand, z_cand) = layer_forward(&tr.x_in, cw, &cand.config);
                    LayerData { x_in: tr.x_in, y_base: tr.y_mid, z_cand, y_cand }
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;

    let n = probes.len();
    Ok((0..cfg.num_layers)
        .map(|l| {
            let stack = |pick: fn(&LayerData) -> &Matrix| {
                let mut m = Matrix::zeros(n, d);
                for (j, p) in per_probe.iter().enumerate() {
                    m.row_mut(j).copy_from_slice(pick(&p[l]).row(0));
                }
                m
            };
            LayerData {
                x_in: stack(|q| &q.x_in),
                y_base: stack(|q| &q.y_base),
                z_cand: stack(|q| &q.z_cand),
                y_cand: stack(|q| &q.y_cand),
            }
        })
        .collect())
}

/// Candidate post-attention states for one layer, with rows that failed to
/// reconstruct masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub y_star: Matrix,
    pub usable: Vec<bool>,
    pub final_losses: Vec<f64>,
}

impl Reconstruction {
    /// Uses known post-attention states as-is.
    pub fn direct(y: &Matrix) -> Self {
        Self { y_star: y.clone(), usable: vec![true; y.rows()], final_losses: vec![0.0; y.rows()] }
    }

    pub fn failures(&self) -> usize {
        self.usable.iter().filter(|u| !**u).count()
    }

    pub fn usable_indices(&self) -> Vec<usize> {
        self.usable.iter().enumerate().filter(|(_, u)| **u).map(|(i, _)| i).collect()
    }
}

/// Row-wise inversion of the base layer's MLP at each candidate output.
pub fn reconstruct_intermediates(
    base: &Model,
    layer: usize,
    z_cand: &Matrix,
    rcfg: &ReconstructionConfig,
) -> Result<Reconstruction> {
    let w = base
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidParameter(format!("layer {layer} out of range")))?;
    let results = (0..z_cand.rows())
        .into_par_iter()
        .map(|i| invert_mlp(w, &base.config, z_cand.row(i), rcfg))
        .collect::<Result<Vec<_>>>()?;
    let mut y_star = Matrix::zeros(z_cand.rows(), z_cand.cols());
    for (i, r) in results.iter().enumerate() {
        y_star.row_mut(i).copy_from_slice(&r.y_star);
    }
    Ok(Reconstruction {
        y_star,
        usable: results.iter().map(|r| r.converged).collect(),
        final_losses: results.iter().map(|r| r.final_loss).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEstimate {
    pub layer_index: usize,
    pub rank: Option<usize>,
    pub peak_log_ratio: f64,
    /// Spectrum of the cycle that produced `rank` (or the strongest cycle if every cycle was null).
    pub spectrum: SingularSpectrum,
    pub cycle_ranks: Vec<Option<usize>>,
    pub reconstruction_failures: usize,
    /// False when fewer than `subset_size` probes reconstructed.
    pub usable: bool,
}

/// `ln(σ_i / σ_{i+1})` of a layer's stored spectrum.
pub fn layer_log_ratios(layer: &LayerEstimate) -> Vec<f64> {
    log_ratios(&layer.spectrum)
}

fn mean_row_norm(m: &Matrix) -> f64 {
    (0..m.rows()).map(|i| norm(m.row(i))).sum::<f64>() / m.rows().max(1) as f64
}

/// Random-subset rank estimates over `cycles` cycles; the layer's rank is the smallest
/// non-null cycle rank.
pub fn run_layer(
    layer_index: usize,
    y_base: &Matrix,
    recon: &Reconstruction,
    cfg: &ResolvedTraceConfig,
) -> Result<LayerEstimate> {
    let pool = recon.usable_indices();
    let failures = recon.failures();
    if pool.len() < cfg.subset_size {
        return Ok(LayerEstimate {
            layer_index,
            rank: None,
            peak_log_ratio: 0.0,
            spectrum: SingularSpectrum::new(Vec::new())?,
            cycle_ranks: Vec::new(),
            reconstruction_failures: failures,
            usable: false,
        });
    }
    let reference = mean_row_norm(y_base);
    let cycles = (0..cfg.cycles)
        .map(|c| {
            let mut rng = SeededRng::derive(cfg.seed, TRACE_STREAM, &[layer_index as u64, c as u64]);
            let idx = sample_without_replacement(&mut rng, &pool, cfg.subset_size);
            let spectrum = singular_values(&difference_matrix(y_base, &recon.y_star, &idx, &recon.usable)?)?;
            let est = rank_from_spectrum(&spectrum, cfg.ratio_floor, cfg.abs_floor, reference);
            Ok((est, spectrum))
        })
        .collect::<Result<Vec<_>>>()?;

    let best = cycles
        .iter()
        .enumerate()
        .filter_map(|(i, (e, _))| e.rank.map(|r| (r, i)))
        .min()
        .map(|(_, i)| i)
        .unwrap_or_else(|| {
            let mut top = 0;
            for (i, (e, _)) in cycles.iter().enumerate() {
                if e.peak_log_ratio > cycles[top].0.peak_log_ratio {
                    top = i;
                }
            }
            top
        });
    let (est, spectrum) = cycles[best].clone();
    Ok(LayerEstimate {
        layer_index,
        rank: est.rank,
        peak_log_ratio: est.peak_log_ratio,
        spectrum,
        cycle_ranks: cycles.iter().map(|(e, _)| e.rank).collect(),
        reconstruction_failures: failures,
        usable: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    LoraDetected { rank: usize },
    NoDeltaDetected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub verdict: Verdict,
    pub aggregate_rank: Option<usize>,
    /// Max minus min rank over the selected non-null layers.
    pub aggregate_spread: Option<usize>,
    /// Layers with the highest peak log-ratio, strongest first.
    pub selected_layers: Vec<usize>,
    pub layers: Vec<LayerEstimate>,
    pub baseline_similarity: Vec<f64>,
    pub probes: Vec<usize>,
    pub config: ResolvedTraceConfig,
}

/// The `ceil(top_fraction · L)` layers with the largest peak log-ratio; ties go to the lower index.
pub fn select_layers(layers: &[LayerEstimate], top_fraction: f64) -> Vec<usize> {
    let k = ((top_fraction * layers.len() as f64).ceil() as usize).clamp(1, layers.len().max(1));
    let mut order: Vec<&LayerEstimate> = layers.iter().collect();
    order.sort_by(|a, b| b.peak_log_ratio.total_cmp(&a.peak_log_ratio).then(a.layer_index.cmp(&b.layer_index)));
    order.into_iter().take(k).map(|l| l.layer_index).collect()
}

/// Full pipeline: probes, per-layer intermediates, reconstruction, rank estimates, aggregation.
pub fn trace(base: &Model, cand: &Model, cfg: &TraceConfig) -> Result<TraceReport> {
    base.check_compatible(cand)?;
    let rcfg = cfg.resolve(&base.config)?;
    let probes = probe_set(base, rcfg.probe_count)?;
    let data = collect_intermediates(base, cand, &probes)?;
    let layers = data
        .par_iter()
        .enumerate()
        .map(|(l, ld)| {
            let recon = if rcfg.assume_unobfuscated {
                Reconstruction::direct(&ld.y_cand)
            } else {
                reconstruct_intermediates(base, l, &ld.z_cand, &rcfg.reconstruction)?
            };
            run_layer(l, &ld.y_base, &recon, &rcfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let selected_layers = select_layers(&layers, rcfg.top_fraction);
    let ranks: Vec<usize> = selected_layers.iter().filter_map(|&l| layers[l].rank).collect();
    let aggregate_rank = ranks.iter().copied().min();
    let aggregate_spread = aggregate_rank.map(|lo| ranks.iter().copied().max().unwrap_or(lo) - lo);
    let verdict = match aggregate_rank {
        Some(rank) => Verdict::LoraDetected { rank },
        None => Verdict::NoDeltaDetected,
    };
    Ok(TraceReport {
        verdict,
        aggregate_rank,
        aggregate_spread,
        selected_layers,
        layers,
        baseline_similarity: weight_similarity_baseline(base, cand)?,
        probes,
        config: rcfg,
    })
}

/// Candidate post-attention states computed directly, for checking reconstructions.
pub fn direct_intermediates(cand: &Model, layer: usize, x_in: &Matrix) -> Result<Matrix> {
    let w = cand
        .layers
        .get(layer)
        .ok_or_else(|| Error::InvalidParameter(format!("layer {layer} out of range")))?;
    let mut out = Matrix::zeros(x_in.rows(), x_in.cols());
    for i in 0..x_in.rows() {
        let x = Matrix::from_vec(1, x_in.cols(), x_in.row(i).to_vec())?;
        out.row_mut(i).copy_from_slice(attention(&x, w, &cand.config).row(0));
    }
    Ok(out)
}
