//! Command suite for LoRA provenance experiments: model generation, LoRA injection,
//! obfuscation, equivalence checks, tracing and diagnostics.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lorarank::lora::{apply, make_delta, LoraSpec, Target};
use lorarank::model::{generate_model, Model, ModelConfig};
use lorarank::obfuscate::{obfuscate_model, verify_equivalence, EquivalenceReport, ObfuscationSpec};
use lorarank::tracer::{
    layer_output_norms, probe_set, trace, weight_similarity_baseline, write_norms_csv, write_ratio_csv,
    write_similarity_csv, write_spectrum_csv, TraceConfig, TraceReport, Verdict,
};
use lorarank::weights_io::{load_model, save_model, Dtype};

use config::{read_json, ResolvedRun, RunConfig};

pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "run.log";

#[derive(Debug, Parser)]
#[command(name = "lorarank", version, about = "Detect and size LoRA deltas between a base and a candidate model")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random base model.
    GenBase(GenBaseArgs),
    /// Inject a LoRA delta into a model.
    Finetune(FinetuneArgs),
    /// Apply function-preserving permutations and scalings.
    Obfuscate(ObfuscateArgs),
    /// Check two models produce the same layer outputs (exit 1 if not).
    VerifyEquiv(VerifyArgs),
    /// Estimate the LoRA rank separating a candidate from a base.
    Trace(TraceArgs),
    /// Diagnostic CSVs.
    #[command(subcommand)]
    Diag(DiagCommand),
    /// Generate, fine-tune, obfuscate, verify and trace from one run config.
    E2e(E2eArgs),
}

#[derive(Debug, Args)]
pub struct DtypeArg {
    /// Storage precision of written weights.
    #[arg(long, default_value = "f64", value_parser = parse_dtype)]
    pub dtype: Dtype,
}

fn parse_dtype(s: &str) -> Result<Dtype, String> {
    Dtype::parse(s).ok_or_else(|| format!("unknown dtype {s:?}, expected f32 or f64"))
}

fn parse_target(s: &str) -> Result<Target, String> {
    match s.to_ascii_lowercase().as_str() {
        "q" => Ok(Target::Q),
        "k" => Ok(Target::K),
        "v" => Ok(Target::V),
        "o" => Ok(Target::O),
        _ => Err(format!("unknown target {s:?}, expected q, k, v or o")),
    }
}

#[derive(Debug, Args)]
pub struct GenBaseArgs {
    /// Model config JSON; overrides the size flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub hidden_size: usize,
    #[arg(long, default_value_t = 176)]
    pub mlp_size: usize,
    #[arg(long, default_value_t = 8)]
    pub num_layers: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub dtype: DtypeArg,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// LoRA spec JSON; overrides --rank/--targets/--scale.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    /// Comma-separated subset of q,k,v,o.
    #[arg(long, value_delimiter = ',', default_value = "v", value_parser = parse_target)]
    pub targets: Vec<Target>,
    #[arg(long)]
    pub scale: Option<f64>,
    /// Overrides the seed in --spec when given.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub dtype: DtypeArg,
}

#[derive(Debug, Args)]
pub struct ObfuscateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Obfuscation spec JSON; every transform when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub dtype: DtypeArg,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Single-token probes (default: hidden size).
    #[arg(long)]
    pub probes: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub multi_token: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    /// Write the report here as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ExpectArgs {
    /// Exit 1 unless the verdict is a LoRA of exactly this rank.
    #[arg(long, conflicts_with = "expect_null")]
    pub expect_rank: Option<usize>,
    /// Exit 1 unless no delta is detected.
    #[arg(long)]
    pub expect_null: bool,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub cand: PathBuf,
    /// Trace config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip reconstruction and use the candidate's own intermediates.
    #[arg(long)]
    pub assume_unobfuscated: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub expect: ExpectArgs,
}

#[derive(Debug, Subcommand)]
pub enum DiagCommand {
    /// Mean layer output norm over single-token probes.
    Norms {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cosine similarity of attention weights per layer.
    Similarity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        other: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct E2eArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the master seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub expect: ExpectArgs,
}

/// Successful command outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// An expectation flag or equivalence check did not hold.
    Mismatch,
}

/// 0 on success, 1 on expectation mismatch, 2 on operational error.
pub fn exit_code(result: &Result<Status>) -> u8 {
    match result {
        Ok(Status::Ok) => 0,
        Ok(Status::Mismatch) => 1,
        Err(_) => 2,
    }
}

pub fn run(cli: Cli) -> Result<Status> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("building thread pool")?;
    pool.install(|| dispatch(cli.command))
}

fn dispatch(cmd: Command) -> Result<Status> {
    match cmd {
        Command::GenBase(a) => cmd_gen_base(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Obfuscate(a) => cmd_obfuscate(&a),
        Command::VerifyEquiv(a) => cmd_verify_equiv(&a),
        Command::Trace(a) => cmd_trace(&a),
        Command::Diag(d) => cmd_diag(&d),
        Command::E2e(a) => cmd_e2e(&a).map(|(s, _)| s),
    }
}

fn load(dir: &Path) -> Result<Model> {
    load_model(dir).with_context(|| format!("loading model from {}", dir.display()))
}

fn save(model: &Model, dir: &Path, dtype: Dtype) -> Result<()> {
    save_model(model, dir, dtype).with_context(|| format!("writing model to {}", dir.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Stage timings, kept out of reports so reports stay reproducible.
#[derive(Default)]
struct Timings(String);

impl Timings {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        let _ = writeln!(self.0, "{stage}\t{:.3}s", t.elapsed().as_secs_f64());
        Ok(out)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(LOG_FILE), &self.0).with_context(|| format!("writing {}", dir.join(LOG_FILE).display()))
    }
}

pub fn cmd_gen_base(a: &GenBaseArgs) -> Result<Status> {
    let cfg = match &a.config {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => ModelConfig::new(a.hidden_size, a.mlp_size, a.num_layers, a.vocab_size),
    };
    let model = generate_model(&cfg, a.seed).context("generating base model")?;
    save(&model, &a.out, a.dtype.dtype)?;
    eprintln!("base model ({} layers, d={}) written to {}", cfg.num_layers, cfg.hidden_size, a.out.display());
    Ok(Status::Ok)
}

pub fn cmd_finetune(a: &FinetuneArgs) -> Result<Status> {
    let base = load(&a.base)?;
    let mut spec = match &a.spec {
        Some(p) => read_json::<LoraSpec>(p)?,
        None => LoraSpec { scale: a.scale, ..LoraSpec::new(a.rank, &a.targets, 0) },
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let delta = make_delta(&spec, &base.config).context("building LoRA delta")?;
    save(&apply(&base, &delta)?, &a.out, a.dtype.dtype)?;
    eprintln!("rank-{} LoRA on {:?} written to {}", spec.rank, spec.targets, a.out.display());
    Ok(Status::Ok)
}

pub fn cmd_obfuscate(a: &ObfuscateArgs) -> Result<Status> {
    let model = load(&a.model)?;
    let mut spec = match &a.spec {
        Some(p) => read_json::<ObfuscationSpec>(p)?,
        None => ObfuscationSpec::all(0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    save(&obfuscate_model(&model, &spec).context("obfuscating")?, &a.out, a.dtype.dtype)?;
    eprintln!("obfuscated model written to {}", a.out.display());
    Ok(Status::Ok)
}

fn equivalence(a: &Model, b: &Model, probes: Option<usize>, multi: usize, tol: f64) -> Result<EquivalenceReport> {
    let count = probes.unwrap_or(a.config.hidden_size).min(a.config.vocab_size);
    let tokens = probe_set(a, count).context("choosing probe tokens")?;
    Ok(verify_equivalence(a, b, &tokens, multi, tol)?)
}

pub fn cmd_verify_equiv(a: &VerifyArgs) -> Result<Status> {
    let (ma, mb) = (load(&a.a)?, load(&a.b)?);
    let report = equivalence(&ma, &mb, a.probes, a.multi_token, a.tol)?;
    if let Some(out) = &a.out {
        write_json(&report, out)?;
    }
    eprintln!(
        "max abs diff {:.3e} over {} single-token and {} multi-token inputs (tol {:.1e}): {}",
        report.max_abs_diff,
        report.single_token_inputs,
        report.multi_token_inputs,
        report.tolerance,
        if report.passed { "equivalent" } else { "NOT equivalent" }
    );
    Ok(if report.passed { Status::Ok } else { Status::Mismatch })
}

fn check_expectation(verdict: Verdict, expect: &ExpectArgs) -> Status {
    let ok = match (expect.expect_rank, expect.expect_null) {
        (Some(r), _) => verdict == Verdict::LoraDetected { rank: r },
        (None, true) => verdict == Verdict::NoDeltaDetected,
        (None, false) => true,
    };
    if !ok {
        eprintln!("expectation not met: got {verdict:?}");
    }
    if ok {
        Status::Ok
    } else {
        Status::Mismatch
    }
}

fn describe(report: &TraceReport) {
    for l in &report.layers {
        eprintln!(
            "layer {:>3}: rank {:>5} peak ln-ratio {:>8.2} failures {}",
            l.layer_index,
            l.rank.map_or("-".to_string(), |r| r.to_string()),
            l.peak_log_ratio,
            l.reconstruction_failures
        );
    }
    match report.verdict {
        Verdict::LoraDetected { rank } => eprintln!(
            "verdict: LoRA detected, rank {rank} ± {} (layers {:?})",
            report.aggregate_spread.unwrap_or(0),
            report.selected_layers
        ),
        Verdict::NoDeltaDetected => eprintln!("verdict: no delta detected"),
    }
}

fn write_trace_csvs(report: &TraceReport, dir: &Path) -> Result<()> {
    write_spectrum_csv(report, &dir.join("spectrum.csv"))?;
    write_ratio_csv(report, &dir.join("ratios.csv"))?;
    write_similarity_csv(&report.baseline_similarity, &dir.join("similarity.csv"))?;
    Ok(())
}

pub fn cmd_trace(a: &TraceArgs) -> Result<Status> {
    let mut timings = Timings::default();
    let (base, cand) = timings.time("load", || Ok((load(&a.base)?, load(&a.cand)?)))?;
    let mut cfg = match &a.config {
        Some(p) => read_json::<TraceConfig>(p)?,
        None => TraceConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.assume_unobfuscated |= a.assume_unobfuscated;
    let report = timings.time("trace", || Ok(trace(&base, &cand, &cfg)?))?;
    create_dir(&a.out)?;
    write_json(&report, &a.out.join(REPORT_FILE))?;
    write_trace_csvs(&report, &a.out)?;
    timings.save(&a.out)?;
    describe(&report);
    Ok(check_expectation(report.verdict, &a.expect))
}

pub fn cmd_diag(d: &DiagCommand) -> Result<Status> {
    match d {
        DiagCommand::Norms { model, probes, out } => {
            let m = load(model)?;
            let tokens = probe_set(&m, probes.unwrap_or(m.config.hidden_size).min(m.config.vocab_size))?;
            write_norms_csv(&layer_output_norms(&m, &tokens)?, out)?;
        }
        DiagCommand::Similarity { model, other, out } => {
            let sim = weight_similarity_baseline(&load(model)?, &load(other)?)?;
            write_similarity_csv(&sim, out)?;
        }
    }
    Ok(Status::Ok)
}

/// Everything `e2e` writes to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eReport {
    pub config: ResolvedRun,
    /// Fine-tuned versus obfuscated candidate; absent when obfuscation is off.
    pub equivalence: Option<EquivalenceReport>,
    pub trace: TraceReport,
}

/// Runs the full pipeline, returning the status and the report.
pub fn cmd_e2e(a: &E2eArgs) -> Result<(Status, E2eReport)> {
    let mut rc: RunConfig = read_json(&a.config)?;
    if let Some(s) = a.seed {
        rc.seed = s;
    }
    if let Some(o) = &a.out {
        rc.output_dir = Some(o.clone());
    }
    let out = rc.output_dir.clone().context("no output directory: set output_dir or pass --out")?;
    let run = rc.resolve()?;
    let report = run_pipeline(&run, &out)?;
    write_json(&report, &out.join(REPORT_FILE))?;
    write_trace_csvs(&report.trace, &out)?;
    if let Some(eq) = &report.equivalence {
        if !eq.passed {
            eprintln!("warning: obfuscated candidate differs from the fine-tuned model by {:.3e}", eq.max_abs_diff);
        }
    }
    describe(&report.trace);
    Ok((check_expectation(report.trace.verdict, &a.expect), report))
}

/// Generate → fine-tune → obfuscate → verify → trace, round-tripping every model through disk.
pub fn run_pipeline(run: &ResolvedRun, out: &Path) -> Result<E2eReport> {
    create_dir(out)?;
    let mut t = Timings::default();
    let dtype = run.storage_dtype;
    let (base_dir, ft_dir, cand_dir) = (out.join("base"), out.join("finetuned"), out.join("candidate"));

    let base = t.time("gen_base", || {
        save(&generate_model(&run.model, run.seeds.model)?, &base_dir, dtype)?;
        load(&base_dir)
    })?;
    let finetuned = t.time("finetune", || {
        let delta = if run.lora.targets.is_empty() {
            lorarank::lora::LoraDelta::default()
        } else {
            make_delta(&run.lora, &run.model)?
        };
        save(&apply(&base, &delta)?, &ft_dir, dtype)?;
        load(&ft_dir)
    })?;
    let (cand, equivalence) = match &run.obfuscation {
        Some(spec) => {
            let cand = t.time("obfuscate", || {
                save(&obfuscate_model(&finetuned, spec)?, &cand_dir, dtype)?;
                load(&cand_dir)
            })?;
            let eq = t.time("verify", || {
                equivalence(&finetuned, &cand, run.verify.probes, run.verify.multi_token_inputs, run.verify.tolerance)
            })?;
            (cand, Some(eq))
        }
        None => (finetuned, None),
    };
    let trace_cfg = TraceConfig {
        cycles: run.trace.cycles,
        subset_size: Some(run.trace.subset_size),
        ratio_floor: run.trace.ratio_floor,
        abs_floor: run.trace.abs_floor,
        top_fraction: run.trace.top_fraction,
        probe_count: Some(run.trace.probe_count),
        reconstruction: Some(run.trace.reconstruction.clone()),
        assume_unobfuscated: run.trace.assume_unobfuscated,
        seed: run.trace.seed,
    };
    let trace_report = t.time("trace", || Ok(trace(&base, &cand, &trace_cfg)?))?;
    t.save(out)?;
    Ok(E2eReport { config: run.clone(), equivalence, trace: trace_report })
}
