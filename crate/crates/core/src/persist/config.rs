//! Flat `key=value` run configuration.
//!
//! Tokens are separated by whitespace or newlines; `#` starts a comment that
//! runs to the end of the line. Values cannot contain whitespace. Unknown
//! keys are rejected. Relative paths are resolved against the directory of
//! the config file. `ffn_size` defaults to `4 * hidden`, and the default
//! warmup is clamped to `total_steps`.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{EmbeddingFreeze, ModelConfig, Sharing};
use crate::optim::LambHyper;
use crate::schedule::{plan_mslt, plan_scratch, plan_stacking, Regime, StageSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub regime: Regime,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// `total_steps` here always mirrors the run's `total_steps`.
    pub optimizer: LambHyper,
    pub retrain_fraction: f64,
    pub retrain_lr_scale: f64,
    pub stacking_doublings: u32,
    pub carry_head_state: bool,
    /// Training instances drawn into the fixed pool.
    pub instance_pool: usize,
    pub corpus: Option<PathBuf>,
    pub probes: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            regime: Regime::Mslt,
            total_steps: 1_000_000,
            batch_size: 1024,
            seq_len: 128,
            seed: 0,
            optimizer: LambHyper::default(),
            retrain_fraction: 0.2,
            retrain_lr_scale: 0.1,
            stacking_doublings: 2,
            carry_head_state: false,
            instance_pool: 10_000,
            corpus: None,
            probes: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn resolve(base: &Path, value: &str) -> Option<PathBuf> {
    if value.is_empty() {
        return None;
    }
    let p = PathBuf::from(value);
    Some(if p.is_absolute() { p } else { base.join(p) })
}

impl RunConfig {
    /// Parses `text`, applying defaults for absent keys and validating the
    /// result. Relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        c.output_dir = base.join(&c.output_dir);
        let mut warmup_set = false;
        let mut ffn_set = false;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("");
            for tok in line.split_whitespace() {
                let Some((key, v)) = tok.split_once('=') else {
                    return Err(Error::Config(format!("expected key=value, got {tok:?}")));
                };
                let m = &mut c.model;
                match key {
                    "num_layers" => m.num_layers = parse(key, v)?,
                    "hidden" => m.hidden = parse(key, v)?,
                    "heads" => m.heads = parse(key, v)?,
                    "ffn_size" => {
                        m.ffn_size = parse(key, v)?;
                        ffn_set = true;
                    }
                    "vocab_size" => m.vocab_size = parse(key, v)?,
                    "max_seq_len" => m.max_seq_len = parse(key, v)?,
                    "num_stages" => m.num_stages = parse(key, v)?,
                    "sharing" => {
                        m.sharing = match v {
                            "none" => Sharing::None,
                            "grouped" => Sharing::Grouped,
                            _ => return Err(Error::Config(format!("sharing: expected none or grouped, got {v:?}"))),
                        }
                    }
                    "layernorm_eps" => m.layernorm_eps = parse(key, v)?,
                    "dropout" => m.dropout = parse(key, v)?,
                    "freeze_embeddings" => {
                        m.embedding_freeze = match v {
                            "all" => EmbeddingFreeze::All,
                            "word" => EmbeddingFreeze::Word,
                            _ => return Err(Error::Config(format!("freeze_embeddings: expected all or word, got {v:?}"))),
                        }
                    }
                    "regime" => c.regime = v.parse()?,
                    "total_steps" => c.total_steps = parse(key, v)?,
                    "batch_size" => c.batch_size = parse(key, v)?,
                    "seq_len" => c.seq_len = parse(key, v)?,
                    "seed" => c.seed = parse(key, v)?,
                    "peak_lr" => c.optimizer.peak_lr = parse(key, v)?,
                    "beta1" => c.optimizer.beta1 = parse(key, v)?,
                    "beta2" => c.optimizer.beta2 = parse(key, v)?,
                    "adam_eps" => c.optimizer.eps = parse(key, v)?,
                    "weight_decay" => c.optimizer.weight_decay = parse(key, v)?,
                    "warmup_steps" => {
                        c.optimizer.warmup_steps = parse(key, v)?;
                        warmup_set = true;
                    }
                    "retrain_fraction" => c.retrain_fraction = parse(key, v)?,
                    "retrain_lr_scale" => c.retrain_lr_scale = parse(key, v)?,
                    "stacking_doublings" => c.stacking_doublings = parse(key, v)?,
                    "carry_head_state" => c.carry_head_state = parse_bool(key, v)?,
                    "instance_pool" => c.instance_pool = parse(key, v)?,
                    "corpus" => c.corpus = resolve(base, v),
                    "probes" => c.probes = resolve(base, v),
                    "output_dir" => c.output_dir = resolve(base, v).unwrap_or_else(|| base.to_path_buf()),
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            }
        }
        c.optimizer.total_steps = c.total_steps;
        if !ffn_set {
            c.model.ffn_size = 4 * c.model.hidden;
        }
        if !warmup_set {
            c.optimizer.warmup_steps = c.optimizer.warmup_steps.min(c.total_steps);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return fail("total_steps must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.seq_len < 5 || self.seq_len > self.model.max_seq_len {
            return fail(format!(
                "seq_len {} must lie in 5..={} (max_seq_len)",
                self.seq_len, self.model.max_seq_len
            ));
        }
        if self.instance_pool == 0 {
            return fail("instance_pool must be positive".into());
        }
        if self.optimizer.total_steps != self.total_steps {
            return fail("optimizer total_steps must equal total_steps".into());
        }
        self.optimizer.validate()?;
        for (key, p) in [("corpus", &self.corpus), ("probes", &self.probes)] {
            if let Some(p) = p {
                if !p.exists() {
                    return fail(format!("{key}: {} does not exist", p.display()));
                }
            }
        }
        self.plan().map(|_| ())
    }

    pub fn plan(&self) -> Result<StageSchedule> {
        match self.regime {
            Regime::Mslt => plan_mslt(&self.model, self.total_steps, self.retrain_fraction, self.retrain_lr_scale),
            Regime::Stacking => plan_stacking(&self.model, self.total_steps, self.stacking_doublings),
            Regime::Scratch => plan_scratch(&self.model, self.total_steps),
        }
    }

    /// The effective configuration, one `key=value` per line, in a form
    /// [`RunConfig::parse`] reads back to an equal value.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let o = &self.optimizer;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let lines = [
            format!("num_layers={}", m.num_layers),
            format!("hidden={}", m.hidden),
            format!("heads={}", m.heads),
            format!("ffn_size={}", m.ffn_size),
            format!("vocab_size={}", m.vocab_size),
            format!("max_seq_len={}", m.max_seq_len),
            format!("num_stages={}", m.num_stages),
            format!("sharing={}", match m.sharing {
                Sharing::None => "none",
                Sharing::Grouped => "grouped",
            }),
            format!("layernorm_eps={:?}", m.layernorm_eps),
            format!("dropout={:?}", m.dropout),
            format!("freeze_embeddings={}", match m.embedding_freeze {
                EmbeddingFreeze::All => "all",
                EmbeddingFreeze::Word => "word",
            }),
            format!("regime={}", self.regime),
            format!("total_steps={}", self.total_steps),
            format!("batch_size={}", self.batch_size),
            format!("seq_len={}", self.seq_len),
            format!("seed={}", self.seed),
            format!("peak_lr={:?}", o.peak_lr),
            format!("beta1={:?}", o.beta1),
            format!("beta2={:?}", o.beta2),
            format!("adam_eps={:?}", o.eps),
            format!("weight_decay={:?}", o.weight_decay),
            format!("warmup_steps={}", o.warmup_steps),
            format!("retrain_fraction={:?}", self.retrain_fraction),
            format!("retrain_lr_scale={:?}", self.retrain_lr_scale),
            format!("stacking_doublings={}", self.stacking_doublings),
            format!("carry_head_state={}", self.carry_head_state),
            format!("instance_pool={}", self.instance_pool),
            format!("corpus={}", path(&self.corpus)),
            format!("probes={}", path(&self.probes)),
            format!("output_dir={}", self.output_dir.display()),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

/// Reads and validates the config file at `path`.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let base = if base.as_os_str().is_empty() { PathBuf::from(".") } else { base };
    RunConfig::parse(&text, &base)
}

/// Writes the effective configuration to `dir/config.echo`.
pub fn write_echo(config: &RunConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.echo");
    std::fs::write(&path, config.echo()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("", Path::new("/tmp")).unwrap();
        assert_eq!(c.model.num_stages, 4);
        assert_eq!(c.optimizer.peak_lr, 0.00088);
        assert_eq!(c.optimizer.warmup_steps, 10_000);
        assert_eq!((c.seq_len, c.total_steps, c.batch_size), (128, 1_000_000, 1024));
    }

    #[test]
    fn indivisible_depth_is_rejected() {
        let err = RunConfig::parse("num_layers=10 num_stages=4", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("not divisible"), "{err}");
    }

    #[test]
    fn unknown_key_and_bad_value() {
        assert!(RunConfig::parse("num_layer=4", Path::new(".")).unwrap_err().to_string().contains("num_layer"));
        assert!(RunConfig::parse("hidden=big", Path::new(".")).unwrap_err().to_string().contains("hidden"));
        assert!(RunConfig::parse("hidden", Path::new(".")).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let text = "# toy\nnum_layers=4 num_stages=2 hidden=32 heads=4\nvocab_size=200 max_seq_len=32 seq_len=32\n\
                    total_steps=100 warmup_steps=10 peak_lr=0.003 sharing=grouped dropout=0.1 carry_head_state=true\n";
        let c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("/base/runs/default"));
        let again = RunConfig::parse(&c.echo(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn missing_corpus_is_an_error() {
        let err = RunConfig::parse("corpus=/no/such/file.txt", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("corpus"));
    }

    #[test]
    fn small_run_clamps_default_warmup() {
        let c = RunConfig::parse("total_steps=100 num_stages=1", Path::new(".")).unwrap();
        assert_eq!(c.optimizer.warmup_steps, 100);
    }
}
