//! Command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 config error,
//! 4 data or analysis input error, 5 training divergence, 6 gradient check
//! failure.

use std::ops::Range;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{
    capture, drift, load_probes, loss_at_step_csv, loss_at_wallclock_csv, special_mass, speedup_report,
};
use crate::data::{random_batch, training_pool, BatchStream, Vocab};
use crate::error::{Error, Result};
use crate::model::{count_cost, Model, TrainablePartition};
use crate::persist::{
    latest_checkpoint, load_checkpoint, load_config, read_record, write_echo, DirSink, RunConfig, RunHeader,
    VOCAB_FILE,
};
use crate::schedule::{RunRecord, StageSchedule, TrainOptions, Trainer, WallClock};
use crate::tensor::{GradCheckOptions, Mutation};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_DIVERGENCE: i32 = 5;
pub const EXIT_GRADCHECK: i32 = 6;

/// Largest model `gradcheck` accepts, in scalars.
pub const GRADCHECK_PARAM_CAP: usize = 50_000;
/// Noise added to every parameter before `gradcheck`.
pub const GRADCHECK_PERTURBATION: f64 = 0.2;
/// Central-difference step of `gradcheck`.
pub const GRADCHECK_EPS: f64 = 1e-4;
/// Global relative error at or above which `gradcheck` fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "mslt", version, about = "Layerwise staged training of small BERT encoders")]
pub struct Cli {
    /// Run configuration (flat key=value file). Required.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the stage schedule with per-stage analytic cost.
    Plan,
    /// Train according to the configured regime.
    Train {
        /// Continue from the latest stage-boundary checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Attention drift between two checkpoints on a probe set.
    AnalyzeAttention {
        checkpoint_a: PathBuf,
        checkpoint_b: PathBuf,
        /// Probe file (tab-separated sentence pairs); defaults to the configured one.
        #[arg(long)]
        probes: Option<PathBuf>,
        /// Layer range `A..B` to compare; required when depths differ.
        #[arg(long, value_parser = parse_range)]
        layers: Option<Range<usize>>,
        /// Vocabulary file; defaults to the one stored with the first checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Speedup and loss comparison of finished run directories.
    Compare {
        #[arg(required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck {
        /// Corrupt one backward rule to confirm the check catches it.
        #[arg(long)]
        mutate: bool,
    },
}

fn parse_range(s: &str) -> std::result::Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad start in {s:?}"))?;
    let b: usize = b.trim().parse().map_err(|_| format!("bad end in {s:?}"))?;
    if a >= b {
        return Err(format!("empty range {s:?}"));
    }
    Ok(a..b)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Index(_) | Error::Analysis(_) | Error::Record(_) => EXIT_DATA,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    if cli.config.is_none() {
        eprintln!("error: --config <PATH> is required");
        return EXIT_USAGE;
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<i32> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    match &cli.command {
        Command::Plan => plan_cmd(&cfg),
        Command::Train { resume } => train_cmd(&cfg, *resume),
        Command::AnalyzeAttention {
            checkpoint_a,
            checkpoint_b,
            probes,
            layers,
            vocab,
        } => analyze_cmd(&cfg, checkpoint_a, checkpoint_b, probes.as_deref(), layers.clone(), vocab.as_deref()),
        Command::Compare { runs } => compare_cmd(&cfg, runs),
        Command::Gradcheck { mutate } => gradcheck_cmd(&cfg, *mutate),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanRow {
    pub stage: String,
    pub depth: usize,
    pub growth: usize,
    pub trainable_layers: usize,
    pub steps: u64,
    pub lr_scale: f64,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub comm_bytes: u64,
    /// Per-step forward+backward FLOPs relative to full-depth joint training.
    pub relative_cost: f64,
}

/// Per-stage analytic cost rows for `plan`, plus the whole-plan FLOPs
/// relative to joint training for the same number of steps.
pub fn plan_rows(cfg: &RunConfig, plan: &StageSchedule) -> (Vec<PlanRow>, f64) {
    let n = cfg.model.num_layers;
    let scratch = count_cost(&cfg.model, n, &TrainablePartition::all(n), cfg.batch_size, cfg.seq_len);
    let scratch_step = (scratch.forward_flops + scratch.backward_flops) as f64;
    let mut total = 0u128;
    let rows = plan
        .stages
        .iter()
        .map(|s| {
            let c = count_cost(&cfg.model, s.depth_after_growth, &s.partition, cfg.batch_size, cfg.seq_len);
            let step = c.forward_flops + c.backward_flops;
            total += step as u128 * s.steps as u128;
            PlanRow {
                stage: s.name.clone(),
                depth: s.depth_after_growth,
                growth: s.growth,
                trainable_layers: s.partition.num_trainable_layers(),
                steps: s.steps,
                lr_scale: s.lr_scale,
                forward_flops: c.forward_flops,
                backward_flops: c.backward_flops,
                comm_bytes: c.comm_bytes,
                relative_cost: step as f64 / scratch_step,
            }
        })
        .collect();
    let whole = total as f64 / (scratch_step * plan.total_steps as f64);
    (rows, whole)
}

fn plan_cmd(cfg: &RunConfig) -> Result<i32> {
    let plan = cfg.plan()?;
    let (rows, whole) = plan_rows(cfg, &plan);
    let mut out = format!(
        "regime {} | {} layers, hidden {}, {} stages | batch {} x seq {} | {} steps\n",
        plan.regime,
        cfg.model.num_layers,
        cfg.model.hidden,
        cfg.model.num_stages,
        cfg.batch_size,
        cfg.seq_len,
        plan.total_steps
    );
    out.push_str(&format!(
        "{:<9} {:>5} {:>6} {:>9} {:>9} {:>8} {:>16} {:>16} {:>12} {:>8}\n",
        "stage", "depth", "growth", "trainable", "steps", "lr_scale", "fwd_flops/step", "bwd_flops/step",
        "comm_bytes", "rel_cost"
    ));
    for r in &rows {
        out.push_str(&format!(
            "{:<9} {:>5} {:>6} {:>9} {:>9} {:>8} {:>16} {:>16} {:>12} {:>8.4}\n",
            r.stage, r.depth, r.growth, r.trainable_layers, r.steps, r.lr_scale, r.forward_flops, r.backward_flops,
            r.comm_bytes, r.relative_cost
        ));
    }
    out.push_str(&format!("whole plan relative to joint training: {whole:.4}\n"));
    print!("{out}");
    write_file(&cfg.output_dir.join("plan.txt"), &out)?;
    write_file(&cfg.output_dir.join("plan.jsonl"), &jsonl(&rows)?)?;
    Ok(0)
}

fn log_every() -> u64 {
    std::env::var("MSLT_LOG_EVERY")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn train_cmd(cfg: &RunConfig, resume: bool) -> Result<i32> {
    let corpus = cfg
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("corpus: train needs a corpus file".into()))?;
    let text = std::fs::read_to_string(corpus).map_err(|e| Error::io(corpus, e))?;
    let plan = cfg.plan()?;
    let (vocab, pool) = training_pool(&text, cfg.model.vocab_size, cfg.seq_len, cfg.instance_pool, cfg.seed)?;
    let stream = BatchStream::new(pool, cfg.model.vocab_size, cfg.batch_size, cfg.seq_len, cfg.seed)?;
    let dir = &cfg.output_dir;
    write_echo(cfg, dir)?;
    let opts = TrainOptions {
        hyper: cfg.optimizer.clone(),
        seed: cfg.seed,
        carry_head_state: cfg.carry_head_state,
    };
    let header = RunHeader {
        regime: plan.regime.to_string(),
        total_steps: plan.total_steps,
        batch_size: cfg.batch_size,
        seq_len: cfg.seq_len,
        seed: cfg.seed,
    };
    let offsets = plan.stage_offsets();
    let stage_ends: Vec<u64> = plan.stages.iter().zip(&offsets).map(|(s, o)| o + s.steps).collect();
    let (trainer, history) = match resume.then(|| latest_checkpoint(dir)).transpose()?.flatten() {
        Some(ckpt) => {
            let (model, state, meta) = load_checkpoint(&ckpt)?;
            if model.config != cfg.model || model.seed() != cfg.seed {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different model config or seed",
                    ckpt.display()
                )));
            }
            let history = read_record(dir).unwrap_or_default();
            eprintln!("resuming from {} at step {}", ckpt.display(), meta.global_step);
            let t = Trainer::resume(plan, model, state, &meta, stream, opts, WallClock::new(), history)?;
            let h = t.record().clone();
            (t, h)
        }
        None => {
            if resume {
                eprintln!("no checkpoint in {}, starting fresh", dir.display());
            }
            (Trainer::new(plan, cfg.model.clone(), stream, opts, WallClock::new())?, RunRecord::default())
        }
    };
    let mut sink = DirSink::create(dir, &header, &history, log_every(), stage_ends, Some(vocab))?;
    let progress = (header.total_steps / 20).max(1);
    let mut trainer = trainer;
    while let Some(rec) = trainer.step(&mut sink)? {
        if rec.step % progress == 0 {
            eprintln!(
                "step {:>8}/{} stage {} loss {:.4} (mlm {:.4}, nsp {:.4}) lr {:.3e}",
                rec.step, header.total_steps, rec.stage, rec.loss, rec.mlm_loss, rec.nsp_loss, rec.lr
            );
        }
    }
    sink.flush()?;
    let record = trainer.record().clone();
    let report = speedup_report(&[(header.regime.clone(), record)])?;
    let table = report.to_table();
    print!("{table}");
    write_file(&dir.join("report.txt"), &table)?;
    write_file(&dir.join("report.jsonl"), &report.to_jsonl()?)?;
    Ok(0)
}

fn analyze_cmd(
    cfg: &RunConfig,
    a: &Path,
    b: &Path,
    probes: Option<&Path>,
    layers: Option<Range<usize>>,
    vocab: Option<&Path>,
) -> Result<i32> {
    let (ma, _, _) = load_checkpoint(a)?;
    let (mb, _, _) = load_checkpoint(b)?;
    let vocab_path = vocab.map_or_else(|| a.join(VOCAB_FILE), Path::to_path_buf);
    let va = Vocab::load(&vocab_path)?;
    if vocab.is_none() && b.join(VOCAB_FILE).exists() && Vocab::load(&b.join(VOCAB_FILE))? != va {
        return Err(Error::Analysis("the two checkpoints were trained with different vocabularies".into()));
    }
    if ma.config.vocab_size != mb.config.vocab_size || ma.config.heads != mb.config.heads {
        return Err(Error::Analysis("checkpoints differ in vocabulary size or head count".into()));
    }
    if va.len() > ma.config.vocab_size {
        return Err(Error::Analysis(format!(
            "vocabulary of {} tokens does not fit the model's {}",
            va.len(),
            ma.config.vocab_size
        )));
    }
    let probe_path = probes
        .map(Path::to_path_buf)
        .or_else(|| cfg.probes.clone())
        .ok_or_else(|| Error::Config("probes: no probe file given".into()))?;
    let max_len = ma.config.max_seq_len.min(mb.config.max_seq_len);
    let batch = load_probes(&probe_path, &va, max_len)?;
    let id = probe_path.display().to_string();
    let range = match layers {
        Some(r) => r,
        None if ma.depth() == mb.depth() => 0..ma.depth(),
        None => {
            return Err(Error::Analysis(format!(
                "depths differ ({} vs {}); pass --layers within 0..{}",
                ma.depth(),
                mb.depth(),
                ma.depth().min(mb.depth())
            )))
        }
    };
    let map_a = capture(&ma, &batch, &id)?;
    let map_b = capture(&mb, &batch, &id)?;
    let report = drift(&map_a, &map_b, range)?;
    let dir = cfg.output_dir.join("attention");
    let mut text = format!("mean JS divergence per head\n{}", report.to_table());
    text.push_str(&format!("overall mean {:.6}\n", report.mean()));
    let mut masses = String::new();
    for (tag, map) in [("a", &map_a), ("b", &map_b)] {
        text.push_str(&format!("\nattention mass on [CLS] / [SEP], checkpoint {tag}\n"));
        text.push_str("layer head      cls      sep\n");
        for m in special_mass(map) {
            text.push_str(&format!("{:>5} {:>4} {:>8.4} {:>8.4}\n", m.layer, m.head, m.cls, m.sep));
            let mut v = serde_json::to_value(&m)?;
            v["checkpoint"] = tag.into();
            masses.push_str(&v.to_string());
            masses.push('\n');
        }
    }
    print!("{text}");
    write_file(&dir.join("drift.txt"), &text)?;
    write_file(&dir.join("drift.jsonl"), &report.to_jsonl())?;
    write_file(&dir.join("special_mass.jsonl"), &masses)?;
    Ok(0)
}

fn compare_cmd(cfg: &RunConfig, runs: &[PathBuf]) -> Result<i32> {
    let runs: Vec<PathBuf> = if runs.len() == 1 { vec![runs[0].clone(), runs[0].clone()] } else { runs.to_vec() };
    let mut records = Vec::new();
    for (i, dir) in runs.iter().enumerate() {
        let base = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let label = if records.iter().any(|(l, _): &(String, RunRecord)| *l == base) { format!("{base}#{i}") } else { base };
        records.push((label, read_record(dir)?));
    }
    let report = speedup_report(&records)?;
    let table = report.to_table();
    print!("{table}");
    let dir = cfg.output_dir.join("compare");
    write_file(&dir.join("compare.txt"), &table)?;
    write_file(&dir.join("compare.jsonl"), &report.to_jsonl()?)?;
    write_file(&dir.join("loss_at_step.csv"), &loss_at_step_csv(&records))?;
    write_file(&dir.join("loss_at_wallclock.csv"), &loss_at_wallclock_csv(&records))?;
    Ok(0)
}

fn gradcheck_cmd(cfg: &RunConfig, mutate: bool) -> Result<i32> {
    let count = cfg.model.param_count(cfg.model.num_layers);
    if count > GRADCHECK_PARAM_CAP {
        return Err(Error::Config(format!(
            "gradcheck needs a tiny model: {count} parameters exceed the cap of {GRADCHECK_PARAM_CAP}; \
             try num_layers=4 hidden=16 heads=2 vocab_size=64 max_seq_len=16"
        )));
    }
    let mut model = Model::new(cfg.model.clone(), cfg.model.num_layers, cfg.seed)?;
    model.perturb(cfg.seed, GRADCHECK_PERTURBATION);
    let seq = cfg.seq_len.min(16);
    let batch = random_batch(cfg.model.vocab_size, 2, seq, cfg.seed);
    let opts = GradCheckOptions {
        eps: GRADCHECK_EPS,
        seed: cfg.seed,
        mutation: if mutate { Mutation::FlipGeluGrad } else { Mutation::None },
        ..Default::default()
    };
    let report = model.gradcheck(&batch, &opts)?;
    let mut text = format!("{:<48} {:>6} {:>12}\n", "parameter", "coords", "max_rel_err");
    for p in &report.per_param {
        text.push_str(&format!("{:<48} {:>6} {:>12.3e}\n", p.name, p.coords_checked, p.max_rel_error));
    }
    let pass = report.global_max_rel_error < GRADCHECK_TOLERANCE;
    text.push_str(&format!(
        "global max relative error {:.3e} (worst: {}) -> {}\n",
        report.global_max_rel_error,
        report.worst_param.as_deref().unwrap_or("-"),
        if pass { "PASS" } else { "FAIL" }
    ));
    print!("{text}");
    write_file(&cfg.output_dir.join("gradcheck.txt"), &text)?;
    write_file(&cfg.output_dir.join("gradcheck.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(if pass { 0 } else { EXIT_GRADCHECK })
}
