//! Training plans for the three regimes and the stage-by-stage trainer.

mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use trainer::{
    CheckpointKind, CheckpointMeta, Clock, MemorySink, NullClock, NullSink, RunRecord, RunSink, StageRecord,
    StepRecord, TrainOptions, Trainer, WallClock,
};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TrainablePartition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Mslt,
    Stacking,
    Scratch,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Mslt => "mslt",
            Regime::Stacking => "stacking",
            Regime::Scratch => "scratch",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mslt" => Ok(Regime::Mslt),
            "stacking" => Ok(Regime::Stacking),
            "scratch" => Ok(Regime::Scratch),
            _ => Err(Error::Config(format!("unknown regime {s:?} (mslt, stacking, scratch)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub steps: u64,
    pub depth_after_growth: usize,
    /// Layers added at the start of the stage.
    pub growth: usize,
    pub partition: TrainablePartition,
    pub lr_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub regime: Regime,
    pub stages: Vec<Stage>,
    pub total_steps: u64,
}

impl StageSchedule {
    /// Depth the model is built at before the first stage.
    pub fn initial_depth(&self) -> usize {
        self.stages[0].depth_after_growth
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return fail("schedule has no stages".into());
        }
        if self.stages[0].growth != 0 {
            return fail("the first stage cannot grow the model".into());
        }
        let mut depth = self.stages[0].depth_after_growth;
        for (i, st) in self.stages.iter().enumerate() {
            if st.steps == 0 {
                return fail(format!("stage {} ({}) has no steps", i, st.name));
            }
            if i > 0 {
                depth += st.growth;
            }
            if depth != st.depth_after_growth {
                return fail(format!("stage {} depth {} inconsistent with growth", i, st.depth_after_growth));
            }
            if st.partition.trainable_layers.iter().any(|&l| l >= depth) {
                return fail(format!("stage {i} trains a layer above depth {depth}"));
            }
        }
        let sum: u64 = self.stages.iter().map(|s| s.steps).sum();
        if sum != self.total_steps {
            return fail(format!("stage steps sum to {sum}, not {}", self.total_steps));
        }
        if depth != config.num_layers {
            return fail(format!("schedule ends at depth {depth}, not {}", config.num_layers));
        }
        Ok(())
    }

    /// Global step (0-based) at which each stage starts.
    pub fn stage_offsets(&self) -> Vec<u64> {
        self.stages
            .iter()
            .scan(0, |acc, s| {
                let start = *acc;
                *acc += s.steps;
                Some(start)
            })
            .collect()
    }
}

fn single_stage(config: &ModelConfig, total_steps: u64, regime: Regime, name: &str) -> Result<StageSchedule> {
    config.validate()?;
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    Ok(StageSchedule {
        regime,
        stages: vec![Stage {
            name: name.into(),
            steps: total_steps,
            depth_after_growth: config.num_layers,
            growth: 0,
            partition: TrainablePartition::all(config.num_layers),
            lr_scale: 1.0,
        }],
        total_steps,
    })
}

/// Joint training of the full-depth model.
pub fn plan_scratch(config: &ModelConfig, total_steps: u64) -> Result<StageSchedule> {
    single_stage(config, total_steps, Regime::Scratch, "scratch")
}

/// `k` equal growth stages, each adding `N/k` layers of which only the new
/// ones (and the heads) train, then a joint retraining stage over
/// `retrain_fraction` of the steps at `retrain_lr_scale` times the peak rate.
/// With `k = 1` the plan is a single all-trainable stage.
pub fn plan_mslt(
    config: &ModelConfig,
    total_steps: u64,
    retrain_fraction: f64,
    retrain_lr_scale: f64,
) -> Result<StageSchedule> {
    config.validate()?;
    let k = config.num_stages as u64;
    if k == 1 {
        return single_stage(config, total_steps, Regime::Mslt, "stage1");
    }
    if !(0.0..1.0).contains(&retrain_fraction) {
        return Err(Error::Config(format!("retrain_fraction must lie in [0, 1), got {retrain_fraction}")));
    }
    if !(retrain_lr_scale > 0.0) {
        return Err(Error::Config(format!("retrain_lr_scale must be positive, got {retrain_lr_scale}")));
    }
    let exact = total_steps as f64 * retrain_fraction;
    let retrain = exact.round() as u64;
    if (exact - retrain as f64).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "retrain_fraction {retrain_fraction} of {total_steps} steps is not a whole number of steps"
        )));
    }
    let growth_steps = total_steps - retrain;
    if growth_steps == 0 || !growth_steps.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "{growth_steps} growth steps do not split evenly over {k} stages"
        )));
    }
    let per = growth_steps / k;
    let g = config.layers_per_stage();
    let mut stages: Vec<Stage> = (0..config.num_stages)
        .map(|s| Stage {
            name: format!("stage{}", s + 1),
            steps: per,
            depth_after_growth: (s + 1) * g,
            growth: if s == 0 { 0 } else { g },
            partition: if s == 0 {
                TrainablePartition::all(g)
            } else {
                TrainablePartition::top(s * g, (s + 1) * g)
            },
            lr_scale: 1.0,
        })
        .collect();
    if retrain > 0 {
        stages.push(Stage {
            name: "retrain".into(),
            steps: retrain,
            depth_after_growth: config.num_layers,
            growth: 0,
            partition: TrainablePartition::all(config.num_layers),
            lr_scale: retrain_lr_scale,
        });
    }
    let plan = StageSchedule {
        regime: Regime::Mslt,
        stages,
        total_steps,
    };
    plan.validate(config)?;
    Ok(plan)
}

/// Share of the steps given to the final full-depth stacking stage.
pub const STACKING_FINAL_PERCENT: u64 = 70;

/// Progressive stacking: `doublings` depth doublings ending at `N`, every
/// parameter trainable throughout. The final stage gets 70% of the steps;
/// earlier stages split the rest in proportion to their depth (10% / 20%
/// for two doublings).
pub fn plan_stacking(config: &ModelConfig, total_steps: u64, doublings: u32) -> Result<StageSchedule> {
    config.validate()?;
    if doublings == 0 {
        return plan_scratch(config, total_steps).map(|p| StageSchedule {
            regime: Regime::Stacking,
            ..p
        });
    }
    let n = config.num_layers;
    let div = 1usize << doublings;
    if !n.is_multiple_of(div) {
        return Err(Error::Config(format!(
            "num_layers {n} not divisible by 2^{doublings} for stacking"
        )));
    }
    let depths: Vec<usize> = (0..=doublings).map(|d| (n / div) << d).collect();
    let early_total = total_steps * (100 - STACKING_FINAL_PERCENT) / 100;
    let early_depth: usize = depths[..depths.len() - 1].iter().sum();
    let mut stages = Vec::new();
    let mut used = 0;
    for (i, &d) in depths.iter().enumerate() {
        let steps = if i + 1 == depths.len() {
            total_steps - used
        } else {
            early_total * d as u64 / early_depth as u64
        };
        used += steps;
        stages.push(Stage {
            name: format!("stack{}", i + 1),
            steps,
            depth_after_growth: d,
            growth: if i == 0 { 0 } else { d / 2 },
            partition: TrainablePartition::all(d),
            lr_scale: 1.0,
        });
    }
    let plan = StageSchedule {
        regime: Regime::Stacking,
        stages,
        total_steps,
    };
    plan.validate(config)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mslt_paper_setup() {
        let c = ModelConfig::default();
        let p = plan_mslt(&c, 1_000_000, 0.2, 0.1).unwrap();
        let depths: Vec<usize> = p.stages.iter().map(|s| s.depth_after_growth).collect();
        assert_eq!(depths, vec![3, 6, 9, 12, 12]);
        assert!(p.stages.iter().all(|s| s.steps == 200_000));
        for (i, s) in p.stages.iter().enumerate().skip(1).take(3) {
            assert_eq!(s.partition.trainable_layers, (3 * i..3 * i + 3).collect());
            assert!(!s.partition.embeddings_trainable);
        }
        assert_eq!(p.stages[4].partition, TrainablePartition::all(12));
        assert_eq!(p.stages[4].lr_scale, 0.1);
        assert_eq!(p.stage_offsets(), vec![0, 200_000, 400_000, 600_000, 800_000]);
    }

    #[test]
    fn mslt_errors_and_degenerate_case() {
        let mut c = ModelConfig::default();
        assert!(plan_mslt(&c, 1_000_001, 0.2, 0.1).is_err());
        c.num_stages = 1;
        let p = plan_mslt(&c, 1000, 0.2, 0.1).unwrap();
        assert_eq!(p.stages.len(), 1);
        assert_eq!(p.stages[0].partition, TrainablePartition::all(12));
        c.num_layers = 10;
        c.num_stages = 4;
        assert!(plan_mslt(&c, 1000, 0.2, 0.1).is_err());
    }

    #[test]
    fn stacking_split() {
        let c = ModelConfig::default();
        let p = plan_stacking(&c, 1_000_000, 2).unwrap();
        let got: Vec<(usize, u64)> = p.stages.iter().map(|s| (s.depth_after_growth, s.steps)).collect();
        assert_eq!(got, vec![(3, 100_000), (6, 200_000), (12, 700_000)]);
        assert!(p.stages.iter().all(|s| s.partition == TrainablePartition::all(s.depth_after_growth)));
        assert!(plan_stacking(&c, 1000, 3).is_err());
    }

    #[test]
    fn scratch_is_one_stage() {
        let p = plan_scratch(&ModelConfig::default(), 777).unwrap();
        assert_eq!(p.stages.len(), 1);
        assert_eq!(p.stages[0].steps, 777);
        assert_eq!(p.initial_depth(), 12);
    }

    #[test]
    fn regime_parses() {
        assert_eq!("stacking".parse::<Regime>().unwrap(), Regime::Stacking);
        assert!("joint".parse::<Regime>().is_err());
        assert_eq!(Regime::Mslt.to_string(), "mslt");
    }
}
