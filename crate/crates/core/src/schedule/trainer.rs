use serde::{Deserialize, Serialize};

use super::{Stage, StageSchedule};
use crate::data::BatchStream;
use crate::error::{Error, Result};
use crate::model::{count_cost, CostReport, ForwardOptions, Model, ModelConfig};
use crate::optim::{lamb_step, rebuild_state, rebuild_state_carrying, LambHyper, LambState};
use crate::tensor::Tape;

/// Millisecond time source; swapped out where `std::time::Instant` is
/// unavailable.
pub trait Clock {
    fn now_ms(&self) -> f64;
}

pub struct WallClock(std::time::Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(std::time::Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> f64 {
        self.0.elapsed().as_secs_f64() * 1e3
    }
}

/// Always reads zero, for runs whose timings do not matter.
pub struct NullClock;

impl Clock for NullClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Peak rate, betas, eps, decay and warmup. `total_steps` is replaced by
    /// each stage's step count and warmup is clamped to it.
    pub hyper: LambHyper,
    pub seed: u64,
    /// Keep the heads' optimizer moments across stage boundaries.
    pub carry_head_state: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based global step.
    pub step: u64,
    pub stage: usize,
    pub loss: f64,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub lr: f64,
    pub forward_ms: f64,
    /// Backward pass plus optimizer update.
    pub backward_ms: f64,
    /// Cumulative training time at the end of this step.
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub index: usize,
    pub name: String,
    pub depth: usize,
    pub trainable_layers: usize,
    pub steps: u64,
    pub lr_scale: f64,
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub regime: String,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub steps: Vec<StepRecord>,
}

impl RunRecord {
    pub fn wall_ms(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.elapsed_ms)
    }

    pub fn stage_steps(&self, stage: usize) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.stage == stage)
    }

    /// Mean forward + backward time of the steps in `stage`.
    pub fn mean_step_ms(&self, stage: usize) -> f64 {
        let (n, t) = self
            .stage_steps(stage)
            .fold((0usize, 0.0), |(n, t), s| (n + 1, t + s.forward_ms + s.backward_ms));
        t / n.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// After growth and partitioning, before the first step of a stage.
    StageStart,
    StageEnd,
    /// Written when training aborts on a non-finite loss.
    Diagnostic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub stage: usize,
    /// Steps completed before this checkpoint.
    pub global_step: u64,
    pub regime: String,
}

/// Receives the products of a run as they appear.
pub trait RunSink {
    fn on_stage(&mut self, _stage: &StageRecord) -> Result<()> {
        Ok(())
    }

    fn on_step(&mut self, _record: &StepRecord, _model: &Model, _state: &LambState) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _meta: &CheckpointMeta, _model: &Model, _state: &LambState) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl RunSink for NullSink {}

/// Keeps every checkpoint in memory (models cloned), for tests and demos.
#[derive(Default)]
pub struct MemorySink {
    pub checkpoints: Vec<(CheckpointMeta, Model, LambState)>,
}

impl RunSink for MemorySink {
    fn on_checkpoint(&mut self, meta: &CheckpointMeta, model: &Model, state: &LambState) -> Result<()> {
        self.checkpoints.push((meta.clone(), model.clone(), state.clone()));
        Ok(())
    }
}

/// Executes a [`StageSchedule`] one step at a time.
pub struct Trainer<C: Clock = WallClock> {
    plan: StageSchedule,
    model: Model,
    state: LambState,
    stream: BatchStream,
    opts: TrainOptions,
    clock: C,
    stage: usize,
    step_in_stage: u64,
    global_step: u64,
    /// Whether the current stage's growth and partition are applied.
    prepared: bool,
    elapsed_ms: f64,
    record: RunRecord,
}

impl<C: Clock> Trainer<C> {
    /// A trainer at step 0 with a freshly initialized model of the plan's
    /// initial depth.
    pub fn new(plan: StageSchedule, config: ModelConfig, stream: BatchStream, opts: TrainOptions, clock: C) -> Result<Self> {
        plan.validate(&config)?;
        opts.hyper.validate()?;
        let model = Model::new(config, plan.initial_depth(), opts.seed)?;
        let state = rebuild_state(&model.store);
        let record = RunRecord {
            regime: plan.regime.to_string(),
            total_steps: plan.total_steps,
            batch_size: stream.batch_size(),
            seq_len: stream.seq_len(),
            seed: opts.seed,
            ..Default::default()
        };
        Ok(Self {
            plan,
            model,
            state,
            stream,
            opts,
            clock,
            stage: 0,
            step_in_stage: 0,
            global_step: 0,
            prepared: false,
            elapsed_ms: 0.0,
            record,
        })
    }

    /// Continues from a stage-boundary checkpoint. `stream` must be freshly
    /// constructed with the run's seed; it is advanced past the batches the
    /// checkpointed run already consumed. `history` holds the records of
    /// those steps, when available.
    pub fn resume(
        plan: StageSchedule,
        model: Model,
        state: LambState,
        meta: &CheckpointMeta,
        mut stream: BatchStream,
        opts: TrainOptions,
        clock: C,
        history: RunRecord,
    ) -> Result<Self> {
        plan.validate(&model.config)?;
        let offsets = plan.stage_offsets();
        let (stage, prepared) = match meta.kind {
            CheckpointKind::StageStart => (meta.stage, true),
            CheckpointKind::StageEnd => (meta.stage + 1, false),
            CheckpointKind::Diagnostic => {
                return Err(Error::Checkpoint("cannot resume from a diagnostic checkpoint".into()))
            }
        };
        let expected_step = offsets.get(stage).copied().unwrap_or(plan.total_steps);
        if meta.global_step != expected_step {
            return Err(Error::Checkpoint(format!(
                "checkpoint at step {} does not sit on the boundary of stage {stage}",
                meta.global_step
            )));
        }
        if prepared && model.depth() != plan.stages[stage].depth_after_growth {
            return Err(Error::Checkpoint("checkpoint depth does not match the plan".into()));
        }
        for _ in 0..meta.global_step {
            stream.next_batch();
        }
        let mut record = history;
        record.steps.retain(|s| s.step <= meta.global_step);
        record.stages.retain(|s| s.index < stage || (prepared && s.index == stage));
        let elapsed_ms = record.wall_ms();
        Ok(Self {
            plan,
            model,
            state,
            stream,
            opts,
            clock,
            stage,
            step_in_stage: 0,
            global_step: meta.global_step,
            prepared,
            elapsed_ms,
            record,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> &LambState {
        &self.state
    }

    pub fn plan(&self) -> &StageSchedule {
        &self.plan
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn current_stage(&self) -> usize {
        self.stage
    }

    pub fn is_done(&self) -> bool {
        self.stage >= self.plan.stages.len()
    }

    fn meta(&self, kind: CheckpointKind) -> CheckpointMeta {
        CheckpointMeta {
            kind,
            stage: self.stage,
            global_step: self.global_step,
            regime: self.plan.regime.to_string(),
        }
    }

    fn stage_hyper(&self, stage: &Stage) -> LambHyper {
        LambHyper {
            peak_lr: self.opts.hyper.peak_lr * stage.lr_scale,
            warmup_steps: self.opts.hyper.warmup_steps.min(stage.steps),
            total_steps: stage.steps,
            ..self.opts.hyper.clone()
        }
    }

    fn prepare_stage(&mut self, sink: &mut dyn RunSink) -> Result<()> {
        let stage = self.plan.stages[self.stage].clone();
        if stage.growth > 0 {
            self.model.grow(stage.growth)?;
        }
        self.model.set_partition(stage.partition.clone())?;
        self.state = if self.opts.carry_head_state {
            rebuild_state_carrying(&self.model.store, &self.state, &self.model.head_ids())
        } else {
            rebuild_state(&self.model.store)
        };
        let cfg = &self.model.config;
        let rec = StageRecord {
            index: self.stage,
            name: stage.name.clone(),
            depth: self.model.depth(),
            trainable_layers: stage.partition.num_trainable_layers(),
            steps: stage.steps,
            lr_scale: stage.lr_scale,
            cost: count_cost(cfg, self.model.depth(), &stage.partition, self.record.batch_size, self.record.seq_len),
        };
        sink.on_stage(&rec)?;
        self.record.stages.push(rec);
        self.prepared = true;
        sink.on_checkpoint(&self.meta(CheckpointKind::StageStart), &self.model, &self.state)
    }

    /// Runs one training step, entering and leaving stages as needed.
    /// Returns `None` once the plan is complete.
    pub fn step(&mut self, sink: &mut dyn RunSink) -> Result<Option<StepRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        if !self.prepared {
            self.prepare_stage(sink)?;
        }
        let stage = self.plan.stages[self.stage].clone();
        let hyper = self.stage_hyper(&stage);
        let batch = self.stream.next_batch();
        let local = self.step_in_stage + 1;
        let t0 = self.clock.now_ms();
        self.model.store.zero_grads();
        let (loss, mlm, nsp, t1, grads) = {
            let mut tape = Tape::new(&self.model.store);
            let fw = self.model.forward(
                &mut tape,
                &batch,
                &ForwardOptions {
                    capture_attention: false,
                    dropout_seed: Some(self.opts.seed ^ (self.global_step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
                },
            )?;
            let (loss, mlm, nsp) = (tape.scalar(fw.total), tape.scalar(fw.mlm), tape.scalar(fw.nsp));
            if !loss.is_finite() {
                drop(tape);
                let meta = self.meta(CheckpointKind::Diagnostic);
                sink.on_checkpoint(&meta, &self.model, &self.state)?;
                return Err(Error::Divergence {
                    step: self.global_step + 1,
                    detail: format!("loss {loss} (mlm {mlm}, nsp {nsp}) in stage {}", stage.name),
                });
            }
            let t1 = self.clock.now_ms();
            let grads = tape.backward(fw.total)?.grads;
            (loss, mlm, nsp, t1, grads)
        };
        self.model.store.accumulate(&grads)?;
        lamb_step(&mut self.model.store, &mut self.state, &hyper, local)?;
        let t2 = self.clock.now_ms();
        self.elapsed_ms += t2 - t0;
        self.global_step += 1;
        self.step_in_stage = local;
        let rec = StepRecord {
            step: self.global_step,
            stage: self.stage,
            loss,
            mlm_loss: mlm,
            nsp_loss: nsp,
            lr: crate::optim::lr_at(local, &hyper),
            forward_ms: t1 - t0,
            backward_ms: t2 - t1,
            elapsed_ms: self.elapsed_ms,
        };
        sink.on_step(&rec, &self.model, &self.state)?;
        self.record.steps.push(rec.clone());
        if local == stage.steps {
            sink.on_checkpoint(&self.meta(CheckpointKind::StageEnd), &self.model, &self.state)?;
            self.stage += 1;
            self.step_in_stage = 0;
            self.prepared = false;
        }
        Ok(Some(rec))
    }

    /// Runs to completion.
    pub fn run(mut self, sink: &mut dyn RunSink) -> Result<(Model, RunRecord)> {
        while self.step(sink)?.is_some() {}
        Ok((self.model, self.record))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, make_instances, parse_corpus, synthetic, Instance};
    use crate::rng::{self, Stream};
    use crate::schedule::{plan_mslt, plan_scratch};

    fn pool(cfg: &ModelConfig, seq: usize) -> Vec<Instance> {
        let text = synthetic::generate(3, 40);
        let vocab = build_vocab(&text, cfg.vocab_size).unwrap();
        make_instances(&parse_corpus(&text), &vocab, seq, rng::rng(3, Stream::Instances))
            .unwrap()
            .take(64)
            .collect()
    }

    fn opts() -> TrainOptions {
        TrainOptions {
            hyper: LambHyper {
                peak_lr: 0.01,
                warmup_steps: 2,
                ..Default::default()
            },
            seed: 5,
            carry_head_state: false,
        }
    }

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::tiny(4, 16, 2, 120, 24);
        c.num_stages = 2;
        c
    }

    fn trainer(plan: StageSchedule) -> Trainer<NullClock> {
        let c = cfg();
        let stream = BatchStream::new(pool(&c, 24), c.vocab_size, 4, 24, 9).unwrap();
        Trainer::new(plan, c, stream, opts(), NullClock).unwrap()
    }

    #[test]
    fn mslt_run_is_deterministic_and_checkpoints_boundaries() {
        let plan = plan_mslt(&cfg(), 10, 0.2, 0.1).unwrap();
        let mut sink = MemorySink::default();
        let (m, rec) = trainer(plan.clone()).run(&mut sink).unwrap();
        assert_eq!(m.depth(), 4);
        assert_eq!(rec.steps.len(), 10);
        assert_eq!(rec.stages.len(), 3);
        assert!(rec.steps.iter().enumerate().all(|(i, s)| s.step == i as u64 + 1));
        let kinds: Vec<_> = sink.checkpoints.iter().map(|c| (c.0.kind, c.0.global_step)).collect();
        assert_eq!(kinds.len(), 6);
        assert_eq!(kinds[3], (CheckpointKind::StageEnd, 8));
        let (_, rec2) = trainer(plan).run(&mut NullSink).unwrap();
        let losses = |r: &RunRecord| r.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&rec), losses(&rec2));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let plan = plan_mslt(&cfg(), 10, 0.2, 0.1).unwrap();
        let mut sink = MemorySink::default();
        let (_, full) = trainer(plan.clone()).run(&mut sink).unwrap();
        for (meta, model, state) in &sink.checkpoints {
            let c = cfg();
            let stream = BatchStream::new(pool(&c, 24), c.vocab_size, 4, 24, 9).unwrap();
            let t = Trainer::resume(plan.clone(), model.clone(), state.clone(), meta, stream, opts(), NullClock, full.clone())
                .unwrap();
            let (_, rec) = t.run(&mut NullSink).unwrap();
            assert_eq!(rec, full);
        }
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let plan = plan_scratch(&cfg(), 3).unwrap();
        let mut t = trainer(plan);
        let id = t.model.embeddings.ln_g;
        t.model.store.data_mut(id)[0] = f64::NAN;
        let mut sink = MemorySink::default();
        let err = t.step(&mut sink).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 1, .. }));
        assert_eq!(sink.checkpoints.last().unwrap().0.kind, CheckpointKind::Diagnostic);
    }
}
