use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::RunRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub depth: usize,
    pub trainable_layers: usize,
    pub steps: u64,
    pub mean_step_ms: f64,
    pub mean_forward_ms: f64,
    pub mean_backward_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub label: String,
    pub regime: String,
    pub total_steps: u64,
    pub wall_ms: f64,
    pub forward_ms: f64,
    pub backward_ms: f64,
    /// Analytic totals over the whole plan.
    pub forward_flops: u128,
    pub backward_flops: u128,
    pub encoder_backward_flops: u128,
    pub comm_bytes: u128,
    /// Baseline wall-clock divided by this run's.
    pub speedup: f64,
    /// This run's analytic forward+backward FLOPs over the baseline's.
    pub relative_flops: f64,
    pub final_mlm_loss: f64,
    pub stages: Vec<StageTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub baseline: String,
    pub runs: Vec<RegimeSummary>,
}

/// Mean MLM loss over the last `window` steps.
fn tail_mlm(rec: &RunRecord, window: usize) -> f64 {
    let n = rec.steps.len().min(window).max(1);
    rec.steps.iter().rev().take(n).map(|s| s.mlm_loss).sum::<f64>() / n as f64
}

fn summarize(label: &str, rec: &RunRecord) -> RegimeSummary {
    let mut s = RegimeSummary {
        label: label.to_string(),
        regime: rec.regime.clone(),
        total_steps: rec.total_steps,
        wall_ms: rec.wall_ms(),
        forward_ms: rec.steps.iter().map(|s| s.forward_ms).sum(),
        backward_ms: rec.steps.iter().map(|s| s.backward_ms).sum(),
        forward_flops: 0,
        backward_flops: 0,
        encoder_backward_flops: 0,
        comm_bytes: 0,
        speedup: 1.0,
        relative_flops: 1.0,
        final_mlm_loss: tail_mlm(rec, 20),
        stages: Vec::new(),
    };
    for st in &rec.stages {
        let n = st.steps as u128;
        s.forward_flops += n * st.cost.forward_flops as u128;
        s.backward_flops += n * st.cost.backward_flops as u128;
        s.encoder_backward_flops += n * st.cost.encoder_backward_flops as u128;
        s.comm_bytes += n * st.cost.comm_bytes as u128;
        let steps: Vec<_> = rec.stage_steps(st.index).collect();
        let k = steps.len().max(1) as f64;
        s.stages.push(StageTiming {
            name: st.name.clone(),
            depth: st.depth,
            trainable_layers: st.trainable_layers,
            steps: st.steps,
            mean_step_ms: rec.mean_step_ms(st.index),
            mean_forward_ms: steps.iter().map(|x| x.forward_ms).sum::<f64>() / k,
            mean_backward_ms: steps.iter().map(|x| x.backward_ms).sum::<f64>() / k,
        });
    }
    s
}

/// Compares labelled run records against the scratch run (or the first
/// record when none is scratch). All records must cover the same number of
/// steps with the same batch geometry.
pub fn speedup_report(records: &[(String, RunRecord)]) -> Result<SpeedupReport> {
    let Some((_, first)) = records.first() else {
        return Err(Error::Analysis("no run records to compare".into()));
    };
    for (label, r) in records {
        let last = r.steps.last().map_or(0, |s| s.step);
        if r.total_steps != first.total_steps || last != r.total_steps {
            return Err(Error::Analysis(format!(
                "record {label} reaches step {last} of {}; all records need {} complete steps",
                r.total_steps, first.total_steps
            )));
        }
        if (r.batch_size, r.seq_len) != (first.batch_size, first.seq_len) {
            return Err(Error::Analysis(format!("record {label} uses a different batch geometry")));
        }
    }
    let base = records.iter().position(|(_, r)| r.regime == "scratch").unwrap_or(0);
    let mut runs: Vec<RegimeSummary> = records.iter().map(|(l, r)| summarize(l, r)).collect();
    let (bw, bf) = (runs[base].wall_ms, runs[base].forward_flops + runs[base].backward_flops);
    for r in &mut runs {
        r.speedup = if r.wall_ms > 0.0 { bw / r.wall_ms } else { 1.0 };
        r.relative_flops = (r.forward_flops + r.backward_flops) as f64 / bf.max(1) as f64;
    }
    Ok(SpeedupReport {
        baseline: records[base].0.clone(),
        runs,
    })
}

impl SpeedupReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("baseline: {}\n", self.baseline);
        out.push_str(&format!(
            "{:<16} {:<9} {:>8} {:>12} {:>12} {:>12} {:>9} {:>10} {:>9}\n",
            "run", "regime", "steps", "wall_ms", "fwd_ms", "bwd_ms", "speedup", "rel_flops", "mlm_loss"
        ));
        for r in &self.runs {
            out.push_str(&format!(
                "{:<16} {:<9} {:>8} {:>12.1} {:>12.1} {:>12.1} {:>8.3}x {:>10.4} {:>9.4}\n",
                r.label, r.regime, r.total_steps, r.wall_ms, r.forward_ms, r.backward_ms, r.speedup, r.relative_flops,
                r.final_mlm_loss
            ));
        }
        for r in &self.runs {
            out.push_str(&format!("\n{} stages\n", r.label));
            out.push_str(&format!(
                "  {:<10} {:>5} {:>9} {:>8} {:>10} {:>10} {:>10}\n",
                "stage", "depth", "trainable", "steps", "step_ms", "fwd_ms", "bwd_ms"
            ));
            for s in &r.stages {
                out.push_str(&format!(
                    "  {:<10} {:>5} {:>9} {:>8} {:>10.3} {:>10.3} {:>10.3}\n",
                    s.name, s.depth, s.trainable_layers, s.steps, s.mean_step_ms, s.mean_forward_ms, s.mean_backward_ms
                ));
            }
        }
        out
    }

    /// One JSON object per run.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.runs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// `step,<label>_loss,<label>_mlm,...` with one row per logged step.
pub fn loss_at_step_csv(records: &[(String, RunRecord)]) -> String {
    let mut out = String::from("step");
    for (l, _) in records {
        out.push_str(&format!(",{l}_loss,{l}_mlm"));
    }
    out.push('\n');
    let max = records.iter().map(|(_, r)| r.steps.len()).max().unwrap_or(0);
    for i in 0..max {
        let step = records.iter().find_map(|(_, r)| r.steps.get(i)).map_or(0, |s| s.step);
        out.push_str(&step.to_string());
        for (_, r) in records {
            match r.steps.get(i) {
                Some(s) => out.push_str(&format!(",{},{}", s.loss, s.mlm_loss)),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// `label,elapsed_ms,loss,mlm` rows, one per step of every run.
pub fn loss_at_wallclock_csv(records: &[(String, RunRecord)]) -> String {
    let mut out = String::from("run,elapsed_ms,loss,mlm\n");
    for (l, r) in records {
        for s in &r.steps {
            out.push_str(&format!("{l},{:.3},{},{}\n", s.elapsed_ms, s.loss, s.mlm_loss));
        }
    }
    out
}

/// Mean MLM loss of the `window` steps ending at the last step completed
/// by `t_ms` of training time.
pub fn mlm_loss_at_time(rec: &RunRecord, t_ms: f64, window: usize) -> Option<f64> {
    let end = rec.steps.iter().take_while(|s| s.elapsed_ms <= t_ms).count();
    if end == 0 {
        return None;
    }
    let start = end.saturating_sub(window.max(1));
    let w = &rec.steps[start..end];
    Some(w.iter().map(|s| s.mlm_loss).sum::<f64>() / w.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{StageRecord, StepRecord};

    fn record(regime: &str, ms: f64) -> RunRecord {
        RunRecord {
            regime: regime.into(),
            total_steps: 4,
            batch_size: 2,
            seq_len: 8,
            seed: 0,
            stages: vec![StageRecord {
                index: 0,
                name: "s".into(),
                depth: 2,
                trainable_layers: 2,
                steps: 4,
                lr_scale: 1.0,
                cost: Default::default(),
            }],
            steps: (1..=4)
                .map(|i| StepRecord {
                    step: i,
                    stage: 0,
                    loss: 1.0,
                    mlm_loss: 5.0 - i as f64,
                    nsp_loss: 0.0,
                    lr: 0.0,
                    forward_ms: ms / 2.0,
                    backward_ms: ms / 2.0,
                    elapsed_ms: ms * i as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn self_comparison_is_unit_speedup() {
        let r = record("mslt", 2.0);
        let rep = speedup_report(&[("a".into(), r.clone()), ("b".into(), r)]).unwrap();
        assert!(rep.runs.iter().all(|x| x.speedup == 1.0));
        assert!(rep.to_table().contains("1.000x"));
        assert_eq!(rep.to_jsonl().unwrap().lines().count(), 2);
    }

    #[test]
    fn baseline_is_scratch_and_mismatch_errors() {
        let rep = speedup_report(&[("m".into(), record("mslt", 1.0)), ("s".into(), record("scratch", 2.0))]).unwrap();
        assert_eq!(rep.baseline, "s");
        assert_eq!(rep.runs[0].speedup, 2.0);
        let mut short = record("scratch", 1.0);
        short.steps.pop();
        assert!(speedup_report(&[("m".into(), record("mslt", 1.0)), ("s".into(), short)]).is_err());
    }

    #[test]
    fn csv_rows_and_time_lookup() {
        let recs = [("a".to_string(), record("mslt", 1.0)), ("b".to_string(), record("scratch", 2.0))];
        assert_eq!(loss_at_step_csv(&recs).lines().count(), 5);
        assert_eq!(loss_at_wallclock_csv(&recs).lines().count(), 9);
        assert_eq!(mlm_loss_at_time(&recs[1].1, 4.0, 1), Some(3.0));
        assert_eq!(mlm_loss_at_time(&recs[1].1, 1.0, 1), None);
    }
}
