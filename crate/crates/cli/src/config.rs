//! Run configuration for the end-to-end pipeline.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use lorarank::lora::LoraSpec;
use lorarank::model::ModelConfig;
use lorarank::numerics::stream_id;
use lorarank::obfuscate::ObfuscationSpec;
use lorarank::tracer::{ResolvedTraceConfig, TraceConfig};
use lorarank::weights_io::Dtype;

const SEED_DOMAIN: u64 = 0x7365_6564_0000_0006;

/// Reads a JSON document, naming the file in any error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    /// Single-token probes; hidden size when unset.
    pub probes: Option<usize>,
    pub multi_token_inputs: usize,
    pub tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { probes: None, multi_token_inputs: 8, tolerance: 1e-9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub lora: LoraSpec,
    /// `null` skips the obfuscation stage.
    #[serde(default)]
    pub obfuscation: Option<ObfuscationSpec>,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub storage_dtype: Dtype,
}

/// Per-stage seeds, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub model: u64,
    pub lora: u64,
    pub obfuscation: u64,
    pub trace: u64,
}

impl StageSeeds {
    pub fn derive(master: u64) -> Self {
        let s = |k| stream_id(SEED_DOMAIN, &[master, k]);
        Self { model: s(0), lora: s(1), obfuscation: s(2), trace: s(3) }
    }
}

/// [`RunConfig`] with derived seeds written into every stage and trace defaults filled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub master_seed: u64,
    pub seeds: StageSeeds,
    pub model: ModelConfig,
    pub lora: LoraSpec,
    pub obfuscation: Option<ObfuscationSpec>,
    pub trace: ResolvedTraceConfig,
    pub verify: VerifyConfig,
    pub storage_dtype: Dtype,
}

impl RunConfig {
    pub fn resolve(&self) -> Result<ResolvedRun> {
        self.model.validate().context("model config")?;
        let seeds = StageSeeds::derive(self.seed);
        let lora = LoraSpec { seed: seeds.lora, ..self.lora.clone() };
        if !lora.targets.is_empty() {
            lora.validate(&self.model).context("lora spec")?;
        }
        let obfuscation = self.obfuscation.clone().map(|o| ObfuscationSpec { seed: seeds.obfuscation, ..o });
        if let Some(o) = &obfuscation {
            o.validate().context("obfuscation spec")?;
        }
        let trace = TraceConfig { seed: seeds.trace, ..self.trace.clone() }.resolve(&self.model).context("trace config")?;
        if self.verify.tolerance.is_nan() || self.verify.tolerance < 0.0 {
            anyhow::bail!("verify tolerance must be non-negative, got {}", self.verify.tolerance);
        }
        Ok(ResolvedRun {
            master_seed: self.seed,
            seeds,
            model: self.model.clone(),
            lora,
            obfuscation,
            trace,
            verify: self.verify.clone(),
            storage_dtype: self.storage_dtype,
        })
    }
}
