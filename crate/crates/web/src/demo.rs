//! Demo logic without any JavaScript types, so it runs and tests natively.

use mslt::analysis::capture;
use mslt::data::{parse_corpus, synthetic, training_pool, Batch, BatchStream, Vocab};
use mslt::model::{count_cost, ModelConfig};
use mslt::optim::LambHyper;
use mslt::schedule::{plan_mslt, plan_scratch, NullSink, StageSchedule, TrainOptions, Trainer};
use mslt::{Error, Result};
use serde::Serialize;

#[cfg(target_arch = "wasm32")]
pub struct DemoClock(f64);

#[cfg(target_arch = "wasm32")]
impl DemoClock {
    pub fn new() -> Self {
        Self(js_sys::Date::now())
    }
}

#[cfg(target_arch = "wasm32")]
impl mslt::schedule::Clock for DemoClock {
    fn now_ms(&self) -> f64 {
        js_sys::Date::now() - self.0
    }
}

#[cfg(not(target_arch = "wasm32"))]
pub use mslt::schedule::WallClock as DemoClock;

/// Batch geometry the cost explorer assumes.
pub const COST_BATCH: usize = 256;
pub const COST_SEQ: usize = 128;

#[derive(Debug, Clone, Serialize)]
pub struct StageCost {
    pub name: String,
    pub depth: usize,
    pub trainable_layers: usize,
    pub steps: u64,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub comm_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanCost {
    pub stages: Vec<StageCost>,
    /// Whole-plan totals over the scratch plan of the same length.
    pub forward_ratio: f64,
    pub backward_ratio: f64,
    pub compute_ratio: f64,
    pub comm_ratio: f64,
}

fn totals(config: &ModelConfig, plan: &StageSchedule) -> (Vec<StageCost>, [u128; 3]) {
    let mut sum = [0u128; 3];
    let stages = plan
        .stages
        .iter()
        .map(|s| {
            let c = count_cost(config, s.depth_after_growth, &s.partition, COST_BATCH, COST_SEQ);
            let n = s.steps as u128;
            sum[0] += n * c.forward_flops as u128;
            sum[1] += n * c.backward_flops as u128;
            sum[2] += n * c.comm_bytes as u128;
            StageCost {
                name: s.name.clone(),
                depth: s.depth_after_growth,
                trainable_layers: s.partition.num_trainable_layers(),
                steps: s.steps,
                forward_flops: c.forward_flops,
                backward_flops: c.backward_flops,
                comm_bytes: c.comm_bytes,
            }
        })
        .collect();
    (stages, sum)
}

/// Per-stage analytic cost of a layerwise plan for a BERT-style model with
/// the given geometry, relative to training all layers from the start.
pub fn plan_costs(
    num_layers: usize,
    hidden: usize,
    heads: usize,
    num_stages: usize,
    total_steps: u64,
    retrain_fraction: f64,
) -> Result<PlanCost> {
    let config = ModelConfig {
        num_layers,
        hidden,
        heads,
        ffn_size: 4 * hidden,
        num_stages,
        ..ModelConfig::default()
    };
    config.validate()?;
    let (stages, m) = totals(&config, &plan_mslt(&config, total_steps, retrain_fraction, 0.1)?);
    let (_, s) = totals(&config, &plan_scratch(&config, total_steps)?);
    let ratio = |a: u128, b: u128| a as f64 / b.max(1) as f64;
    Ok(PlanCost {
        stages,
        forward_ratio: ratio(m[0], s[0]),
        backward_ratio: ratio(m[1], s[1]),
        compute_ratio: ratio(m[0] + m[1], s[0] + s[1]),
        comm_ratio: ratio(m[2], s[2]),
    })
}

/// Geometry of the models the race trains.
pub fn race_config() -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        hidden: 32,
        heads: 4,
        ffn_size: 128,
        vocab_size: 128,
        max_seq_len: 32,
        num_stages: 2,
        ..ModelConfig::default()
    }
}

const RACE_BATCH: usize = 8;

#[derive(Debug, Clone, Serialize)]
pub struct Point {
    pub step: u64,
    pub stage: usize,
    pub mlm_loss: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LaneUpdate {
    pub name: String,
    pub depth: usize,
    pub trainable_layers: usize,
    pub done: bool,
    pub points: Vec<Point>,
}

struct Lane {
    name: String,
    trainer: Trainer<DemoClock>,
}

/// A layerwise run and a scratch run on the same data, stepped in turns.
pub struct Race {
    lanes: Vec<Lane>,
    vocab: Vocab,
    probe: Batch,
}

impl Race {
    pub fn new(seed: u64, total_steps: u64) -> Result<Self> {
        let config = race_config();
        let text = synthetic::generate(seed, 120);
        let docs = parse_corpus(&text);
        let mut lanes = Vec::new();
        let mut vocab = None;
        for (name, plan) in [
            ("layerwise", plan_mslt(&config, total_steps, 0.2, 0.1)?),
            ("scratch", plan_scratch(&config, total_steps)?),
        ] {
            let (v, pool) = training_pool(&text, config.vocab_size, config.max_seq_len, 1000, seed)?;
            let stream = BatchStream::new(pool, config.vocab_size, RACE_BATCH, config.max_seq_len, seed)?;
            let opts = TrainOptions {
                hyper: LambHyper { peak_lr: 0.01, warmup_steps: 20, ..Default::default() },
                seed,
                carry_head_state: false,
            };
            let trainer = Trainer::new(plan, config.clone(), stream, opts, DemoClock::new())?;
            lanes.push(Lane { name: name.into(), trainer });
            vocab = Some(v);
        }
        let vocab = vocab.expect("two lanes");
        let first = docs.first().filter(|d| d.len() >= 2).ok_or_else(|| Error::Data("corpus too short".into()))?;
        let (mut a, mut b) = (vocab.encode(&first[0]), vocab.encode(&first[1]));
        // [CLS] a [SEP] b [SEP], trimmed to fit
        let budget = config.max_seq_len - 3;
        a.truncate(budget - b.len().min(budget / 2));
        b.truncate(budget - a.len());
        let probe = Batch::from_pairs(&[(a.clone(), b.clone())], a.len() + b.len() + 3)?;
        Ok(Self { lanes, vocab, probe })
    }

    pub fn done(&self) -> bool {
        self.lanes.iter().all(|l| l.trainer.is_done())
    }

    /// Up to `n` further steps of every unfinished lane.
    pub fn advance(&mut self, n: usize) -> Result<Vec<LaneUpdate>> {
        let mut out = Vec::new();
        for lane in &mut self.lanes {
            let mut points = Vec::new();
            for _ in 0..n {
                match lane.trainer.step(&mut NullSink)? {
                    Some(r) => points.push(Point {
                        step: r.step,
                        stage: r.stage,
                        mlm_loss: r.mlm_loss,
                        elapsed_ms: r.elapsed_ms,
                    }),
                    None => break,
                }
            }
            let m = lane.trainer.model();
            out.push(LaneUpdate {
                name: lane.name.clone(),
                depth: m.depth(),
                trainable_layers: m.partition().num_trainable_layers(),
                done: lane.trainer.is_done(),
                points,
            });
        }
        Ok(out)
    }

    /// Attention of one head of `lane`'s current model on the probe pair.
    pub fn attention(&self, lane: usize, layer: usize, head: usize) -> Result<Heatmap> {
        let l = self.lanes.get(lane).ok_or_else(|| Error::Config(format!("no lane {lane}")))?;
        let model = l.trainer.model();
        if layer >= model.depth() || head >= model.config.heads {
            return Err(Error::Config(format!(
                "layer {layer} head {head} outside a {}-layer, {}-head model",
                model.depth(),
                model.config.heads
            )));
        }
        let map = capture(model, &self.probe, "probe")?;
        let n = map.valid_len[0];
        let weights = (0..n).map(|q| map.row(0, layer, head, q).to_vec()).collect();
        let tokens = self.probe.token_ids[..n]
            .iter()
            .map(|&t| self.vocab.token(t).unwrap_or("?").to_string())
            .collect();
        Ok(Heatmap { lane: l.name.clone(), layer, head, depth: model.depth(), tokens, weights })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Heatmap {
    pub lane: String,
    pub layer: usize,
    pub head: usize,
    pub depth: usize,
    pub tokens: Vec<String>,
    /// Query-major rows over the valid key positions.
    pub weights: Vec<Vec<f64>>,
}
