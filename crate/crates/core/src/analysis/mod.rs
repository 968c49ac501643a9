//! Attention capture, Jensen-Shannon drift between checkpoints, and the
//! cost/speedup comparison of training runs.

mod attention;
mod speedup;

pub use attention::{
    capture, drift, js_divergence, load_probes, special_mass, AttentionMap, DriftReport, SpecialMass,
};
pub use speedup::{
    loss_at_step_csv, loss_at_wallclock_csv, mlm_loss_at_time, speedup_report, RegimeSummary, SpeedupReport, StageTiming,
};
