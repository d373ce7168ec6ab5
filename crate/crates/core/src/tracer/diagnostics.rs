//! Weight-similarity baseline, layer output norms, and CSV exports.

use std::path::Path;

use rayon::prelude::*;

use super::TraceReport;
use crate::error::{Error, Result};
use crate::model::{forward_capture, LayerWeights, Model};
use crate::numerics::{cosine, norm};

fn attention_flat(w: &LayerWeights) -> Vec<f64> {
    [&w.w_q, &w.w_k, &w.w_v, &w.w_o]
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect()
}

/// Per-layer cosine similarity of the concatenated, flattened `(W_q, W_k, W_v, W_o)`.
pub fn weight_similarity_baseline(base: &Model, cand: &Model) -> Result<Vec<f64>> {
    base.check_compatible(cand)?;
    Ok(base
        .layers
        .iter()
        .zip(&cand.layers)
        .map(|(a, b)| cosine(&attention_flat(a), &attention_flat(b)))
        .collect())
}

/// Mean over single-token probes of `‖z_out‖₂`, per layer.
pub fn layer_output_norms(model: &Model, probes: &[usize]) -> Result<Vec<f64>> {
    if probes.is_empty() {
        return Err(Error::EmptyInput("no probe tokens".into()));
    }
    let per_probe = probes
        .par_iter()
        .map(|&t| {
            forward_capture(model, &[t]).map(|traces| traces.iter().map(|tr| norm(tr.z_out.row(0))).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = probes.len() as f64;
    Ok((0..model.config.num_layers)
        .map(|l| per_probe.iter().map(|v| v[l]).sum::<f64>() / n)
        .collect())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `layer,index,singular_value` for each layer's selected spectrum (1-based index).
pub fn write_spectrum_csv(report: &TraceReport, path: &Path) -> Result<()> {
    let rows = report.layers.iter().flat_map(|l| {
        l.spectrum
            .values()
            .iter()
            .enumerate()
            .map(move |(i, v)| vec![l.layer_index.to_string(), (i + 1).to_string(), v.to_string()])
    });
    write_rows(path, &["layer", "index", "singular_value"], rows)
}

/// `layer,index,log_ratio` where row `i` is `ln(σ_i / σ_{i+1})`.
pub fn write_ratio_csv(report: &TraceReport, path: &Path) -> Result<()> {
    let rows = report.layers.iter().flat_map(|l| {
        super::layer_log_ratios(l)
            .into_iter()
            .enumerate()
            .map(move |(i, v)| vec![l.layer_index.to_string(), (i + 1).to_string(), v.to_string()])
    });
    write_rows(path, &["layer", "index", "log_ratio"], rows)
}

/// `layer,mean_l2_norm`.
pub fn write_norms_csv(norms: &[f64], path: &Path) -> Result<()> {
    let rows = norms.iter().enumerate().map(|(l, v)| vec![l.to_string(), v.to_string()]);
    write_rows(path, &["layer", "mean_l2_norm"], rows)
}

/// `layer,cosine`.
pub fn write_similarity_csv(similarity: &[f64], path: &Path) -> Result<()> {
    let rows = similarity.iter().enumerate().map(|(l, v)| vec![l.to_string(), v.to_string()]);
    write_rows(path, &["layer", "cosine"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{apply, make_delta, LoraSpec, Target};
    use crate::model::{generate_model, ModelConfig};
    use crate::numerics::Matrix;
    use crate::obfuscate::{obfuscate_model, ObfuscationSpec};

    #[test]
    fn similarity_baseline() {
        let cfg = ModelConfig::new(64, 176, 3, 64);
        let base = generate_model(&cfg, 1).unwrap();
        for s in weight_similarity_baseline(&base, &base).unwrap() {
            assert!((s - 1.0).abs() < 1e-15);
        }
        let lora = apply(&base, &make_delta(&LoraSpec::new(8, &[Target::V], 2), &cfg).unwrap()).unwrap();
        assert!(weight_similarity_baseline(&base, &lora).unwrap().iter().all(|s| *s > 0.99));
        let obf = obfuscate_model(&lora, &ObfuscationSpec::all(3)).unwrap();
        assert!(weight_similarity_baseline(&base, &obf).unwrap().iter().all(|s| *s < 0.9));
    }

    #[test]
    fn output_norms() {
        let cfg = ModelConfig::new(16, 40, 4, 32);
        let mut m = generate_model(&cfg, 1).unwrap();
        let probes = [0, 5, 9];
        let norms = layer_output_norms(&m, &probes).unwrap();
        assert_eq!(norms.len(), 4);
        assert!(norms.iter().all(|v| v.is_finite() && *v > 0.0));

        for l in &mut m.layers {
            for w in [&mut l.w_q, &mut l.w_k, &mut l.w_v, &mut l.w_o] {
                *w = Matrix::zeros(16, 16);
            }
            l.w_gate = Matrix::zeros(16, 40);
            l.w_up = Matrix::zeros(16, 40);
            l.w_down = Matrix::zeros(40, 16);
        }
        let expect = probes.iter().map(|&t| norm(m.embedding.row(t))).sum::<f64>() / 3.0;
        for v in layer_output_norms(&m, &probes).unwrap() {
            assert!((v - expect).abs() < 1e-15);
        }
        assert!(layer_output_norms(&m, &[]).is_err());
    }

    #[test]
    fn csv_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        write_norms_csv(&[1.5, 2.0], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "layer,mean_l2_norm\n0,1.5\n1,2\n");
        write_similarity_csv(&[0.25], &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "layer,cosine\n0,0.25\n");
    }
}
