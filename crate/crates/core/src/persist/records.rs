//! Run directory layout:
//!
//! - `run.json`: regime, step count, batch geometry and seed;
//! - `losses.jsonl`: `{step, stage, loss, mlm_loss, nsp_loss, lr}` per
//!   logged step, free of timings so equal runs give equal bytes;
//! - `timings.jsonl`: `{step, forward_ms, backward_ms, elapsed_ms}`;
//! - `stages.jsonl`: one stage record with its cost report per stage;
//! - `checkpoints/NN-{start,end}/`: stage-boundary checkpoints,
//!   `checkpoints/diagnostic-step<N>/` on divergence;
//! - `vocab.txt`, copied into every checkpoint as well.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::LambState;
use crate::schedule::{CheckpointKind, CheckpointMeta, RunRecord, RunSink, StageRecord, StepRecord};

pub const RUN_FILE: &str = "run.json";
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const STAGES_FILE: &str = "stages.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub regime: String,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct LossLine {
    step: u64,
    stage: usize,
    loss: f64,
    mlm_loss: f64,
    nsp_loss: f64,
    lr: f64,
}

#[derive(Serialize, Deserialize)]
struct TimingLine {
    step: u64,
    forward_ms: f64,
    backward_ms: f64,
    elapsed_ms: f64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Streams a run into a directory.
pub struct DirSink {
    dir: PathBuf,
    log_every: u64,
    stage_ends: Vec<u64>,
    vocab: Option<Vocab>,
    losses: BufWriter<File>,
    timings: BufWriter<File>,
    stages: BufWriter<File>,
    /// Directories of the checkpoints written so far.
    pub checkpoints: Vec<PathBuf>,
}

impl DirSink {
    /// Starts the record files in `dir`, first replaying `history` (the
    /// already-completed part of a resumed run). Steps are logged every
    /// `log_every` steps and at the end of every stage, whose global end
    /// steps are `stage_ends`.
    pub fn create(
        dir: &Path,
        header: &RunHeader,
        history: &RunRecord,
        log_every: u64,
        stage_ends: Vec<u64>,
        vocab: Option<Vocab>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rp = dir.join(RUN_FILE);
        std::fs::write(&rp, serde_json::to_string_pretty(header)?).map_err(|e| Error::io(&rp, e))?;
        if let Some(v) = &vocab {
            v.save(&dir.join(VOCAB_FILE))?;
        }
        let mut sink = Self {
            dir: dir.to_path_buf(),
            log_every: log_every.max(1),
            stage_ends,
            vocab,
            losses: create(&dir.join(LOSSES_FILE))?,
            timings: create(&dir.join(TIMINGS_FILE))?,
            stages: create(&dir.join(STAGES_FILE))?,
            checkpoints: Vec::new(),
        };
        for s in &history.stages {
            sink.write_stage(s)?;
        }
        for s in &history.steps {
            sink.write_step(s)?;
        }
        sink.flush()?;
        Ok(sink)
    }

    fn write_stage(&mut self, s: &StageRecord) -> Result<()> {
        write_line(&mut self.stages, &self.dir.join(STAGES_FILE), s)
    }

    fn write_step(&mut self, s: &StepRecord) -> Result<()> {
        let loss = LossLine {
            step: s.step,
            stage: s.stage,
            loss: s.loss,
            mlm_loss: s.mlm_loss,
            nsp_loss: s.nsp_loss,
            lr: s.lr,
        };
        write_line(&mut self.losses, &self.dir.join(LOSSES_FILE), &loss)?;
        let t = TimingLine {
            step: s.step,
            forward_ms: s.forward_ms,
            backward_ms: s.backward_ms,
            elapsed_ms: s.elapsed_ms,
        };
        write_line(&mut self.timings, &self.dir.join(TIMINGS_FILE), &t)
    }

    pub fn flush(&mut self) -> Result<()> {
        for (w, f) in [
            (&mut self.losses, LOSSES_FILE),
            (&mut self.timings, TIMINGS_FILE),
            (&mut self.stages, STAGES_FILE),
        ] {
            w.flush().map_err(|e| Error::io(self.dir.join(f), e))?;
        }
        Ok(())
    }
}

impl RunSink for DirSink {
    fn on_stage(&mut self, stage: &StageRecord) -> Result<()> {
        self.write_stage(stage)?;
        self.flush()
    }

    fn on_step(&mut self, record: &StepRecord, _: &Model, _: &LambState) -> Result<()> {
        if record.step.is_multiple_of(self.log_every) || self.stage_ends.contains(&record.step) {
            self.write_step(record)?;
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, meta: &CheckpointMeta, model: &Model, state: &LambState) -> Result<()> {
        self.flush()?;
        let name = match meta.kind {
            CheckpointKind::StageStart => format!("{:02}-start", meta.stage),
            CheckpointKind::StageEnd => format!("{:02}-end", meta.stage),
            CheckpointKind::Diagnostic => format!("diagnostic-step{}", meta.global_step + 1),
        };
        let dir = self.dir.join(CHECKPOINT_DIR).join(name);
        save_checkpoint(&dir, model, state, meta)?;
        if let Some(v) = &self.vocab {
            v.save(&dir.join(VOCAB_FILE))?;
        }
        self.checkpoints.push(dir);
        Ok(())
    }
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Record(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Reassembles the run record stored in `dir`.
pub fn read_record(dir: &Path) -> Result<RunRecord> {
    let rp = dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&rp).map_err(|e| Error::io(&rp, e))?;
    let h: RunHeader = serde_json::from_str(&text)?;
    let losses: Vec<LossLine> = read_lines(&dir.join(LOSSES_FILE))?;
    let timings: Vec<TimingLine> = read_lines(&dir.join(TIMINGS_FILE))?;
    if losses.len() != timings.len() || losses.iter().zip(&timings).any(|(l, t)| l.step != t.step) {
        return Err(Error::Record(format!("{}: loss and timing lines disagree", dir.display())));
    }
    if losses.windows(2).any(|w| w[1].step <= w[0].step) {
        return Err(Error::Record(format!("{}: steps are not increasing", dir.display())));
    }
    let steps = losses
        .into_iter()
        .zip(timings)
        .map(|(l, t)| StepRecord {
            step: l.step,
            stage: l.stage,
            loss: l.loss,
            mlm_loss: l.mlm_loss,
            nsp_loss: l.nsp_loss,
            lr: l.lr,
            forward_ms: t.forward_ms,
            backward_ms: t.backward_ms,
            elapsed_ms: t.elapsed_ms,
        })
        .collect();
    Ok(RunRecord {
        regime: h.regime,
        total_steps: h.total_steps,
        batch_size: h.batch_size,
        seq_len: h.seq_len,
        seed: h.seed,
        stages: read_lines(&dir.join(STAGES_FILE))?,
        steps,
    })
}

/// Most recent stage-boundary checkpoint in a run directory.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let cdir = dir.join(CHECKPOINT_DIR);
    if !cdir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, u8, PathBuf)> = None;
    for entry in std::fs::read_dir(&cdir).map_err(|e| Error::io(&cdir, e))? {
        let path = entry.map_err(|e| Error::io(&cdir, e))?.path();
        let Ok(m) = super::checkpoint::read_manifest(&path) else {
            continue;
        };
        let rank = match m.meta.kind {
            CheckpointKind::StageEnd => 0,
            CheckpointKind::StageStart => 1,
            CheckpointKind::Diagnostic => continue,
        };
        let key = (m.meta.global_step, rank);
        if best.as_ref().is_none_or(|b| (b.0, b.1) < key) {
            best = Some((key.0, key.1, path));
        }
    }
    Ok(best.map(|b| b.2))
}

/// Appends a line to a JSONL file, creating it if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(value)?).map_err(|e| Error::io(path, e))
}
