//! Post-layernorm BERT encoder with MLM and NSP heads, the layer-copying
//! growth operator and the trainable/frozen partition.

mod config;
pub mod cost;

use std::collections::BTreeSet;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use config::{EmbeddingFreeze, ModelConfig, Sharing};
pub use cost::{count_cost, CostReport};

use crate::analysis::AttentionMap;
use crate::data::{Batch, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamId, ParamStore, Tape, Var};

const INIT_STD: f64 = 0.02;

/// Parameter handles of one encoder layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub value_w: ParamId,
    pub value_b: ParamId,
    pub attn_out_w: ParamId,
    pub attn_out_b: ParamId,
    pub attn_ln_g: ParamId,
    pub attn_ln_b: ParamId,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
    pub ffn_ln_g: ParamId,
    pub ffn_ln_b: ParamId,
}

impl LayerParams {
    pub fn ids(&self) -> [ParamId; 16] {
        [
            self.query_w,
            self.query_b,
            self.key_w,
            self.key_b,
            self.value_w,
            self.value_b,
            self.attn_out_w,
            self.attn_out_b,
            self.attn_ln_g,
            self.attn_ln_b,
            self.ffn_in_w,
            self.ffn_in_b,
            self.ffn_out_w,
            self.ffn_out_b,
            self.ffn_ln_g,
            self.ffn_ln_b,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Embeddings {
    /// Also the MLM decoder weight.
    pub word: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct MlmHead {
    pub dense_w: ParamId,
    pub dense_b: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub out_bias: ParamId,
}

impl MlmHead {
    /// The decoder weight, tied to the word embedding.
    pub fn decoder(&self, emb: &Embeddings) -> ParamId {
        emb.word
    }
}

#[derive(Debug, Clone)]
pub struct NspHead {
    pub pooler_w: ParamId,
    pub pooler_b: ParamId,
    pub cls_w: ParamId,
    pub cls_b: ParamId,
}

/// Which parts of the model receive gradients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainablePartition {
    pub trainable_layers: BTreeSet<usize>,
    pub embeddings_trainable: bool,
    pub heads_trainable: bool,
}

impl TrainablePartition {
    pub fn all(depth: usize) -> Self {
        Self {
            trainable_layers: (0..depth).collect(),
            embeddings_trainable: true,
            heads_trainable: true,
        }
    }

    /// Only layers `from..to` and the heads; embeddings frozen.
    pub fn top(from: usize, to: usize) -> Self {
        Self {
            trainable_layers: (from..to).collect(),
            embeddings_trainable: false,
            heads_trainable: true,
        }
    }

    pub fn frozen() -> Self {
        Self {
            trainable_layers: BTreeSet::new(),
            embeddings_trainable: false,
            heads_trainable: false,
        }
    }

    pub fn num_trainable_layers(&self) -> usize {
        self.trainable_layers.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub capture_attention: bool,
    /// Seed for dropout masks; dropout is skipped when `None` or rate is 0.
    pub dropout_seed: Option<u64>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub total: Var,
    pub mlm: Var,
    pub nsp: Var,
    /// Embedding output followed by the output of every encoder layer.
    pub hidden: Vec<Var>,
    /// Attention probabilities `[B, A, S, S]` per layer.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub total_loss: f64,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub attention: Option<AttentionMap>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embeddings: Embeddings,
    pub mlm: MlmHead,
    pub nsp: NspHead,
    layers: Vec<LayerParams>,
    partition: TrainablePartition,
    seed: u64,
}

fn truncated_normal(rng: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * INIT_STD;
            }
        })
        .collect()
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    /// Allocate zeros instead of drawing random values (checkpoint loading).
    zeros: bool,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: Vec<usize>) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = if self.zeros {
            vec![0.0; n]
        } else {
            truncated_normal(&mut rng::labeled_rng(self.seed, &name), n)
        };
        self.store.add(name, shape, data, true)
    }

    fn fill(&mut self, name: String, n: usize, value: f64) -> Result<ParamId> {
        self.store.add(name, vec![n], vec![value; n], false)
    }

    fn layer(&mut self, prefix: &str, cfg: &ModelConfig) -> Result<LayerParams> {
        let (h, f) = (cfg.hidden, cfg.ffn_size);
        Ok(LayerParams {
            query_w: self.weight(format!("{prefix}.attn.query.weight"), vec![h, h])?,
            query_b: self.fill(format!("{prefix}.attn.query.bias"), h, 0.0)?,
            key_w: self.weight(format!("{prefix}.attn.key.weight"), vec![h, h])?,
            key_b: self.fill(format!("{prefix}.attn.key.bias"), h, 0.0)?,
            value_w: self.weight(format!("{prefix}.attn.value.weight"), vec![h, h])?,
            value_b: self.fill(format!("{prefix}.attn.value.bias"), h, 0.0)?,
            attn_out_w: self.weight(format!("{prefix}.attn.output.weight"), vec![h, h])?,
            attn_out_b: self.fill(format!("{prefix}.attn.output.bias"), h, 0.0)?,
            attn_ln_g: self.fill(format!("{prefix}.attn.layernorm.gamma"), h, 1.0)?,
            attn_ln_b: self.fill(format!("{prefix}.attn.layernorm.beta"), h, 0.0)?,
            ffn_in_w: self.weight(format!("{prefix}.ffn.intermediate.weight"), vec![h, f])?,
            ffn_in_b: self.fill(format!("{prefix}.ffn.intermediate.bias"), f, 0.0)?,
            ffn_out_w: self.weight(format!("{prefix}.ffn.output.weight"), vec![f, h])?,
            ffn_out_b: self.fill(format!("{prefix}.ffn.output.bias"), h, 0.0)?,
            ffn_ln_g: self.fill(format!("{prefix}.ffn.layernorm.gamma"), h, 1.0)?,
            ffn_ln_b: self.fill(format!("{prefix}.ffn.layernorm.beta"), h, 0.0)?,
        })
    }
}

/// Parameter-path prefix of the parameter set used by `layer`.
fn layer_prefix(cfg: &ModelConfig, layer: usize) -> String {
    match cfg.sharing {
        Sharing::None => format!("encoder.layer{layer}"),
        Sharing::Grouped => format!("encoder.group{}", layer / cfg.layers_per_stage()),
    }
}

/// Builds the full-depth model described by `config`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(config.clone(), config.num_layers, seed)
}

impl Model {
    /// A freshly initialized model of `depth` layers, all trainable.
    /// Initialization is keyed by parameter path, so the same seed gives the
    /// same values for a parameter whatever the depth.
    pub fn new(config: ModelConfig, depth: usize, seed: u64) -> Result<Self> {
        Self::construct(config, depth, seed, false)
    }

    /// Model with every parameter zeroed, to be filled from a checkpoint.
    pub(crate) fn skeleton(config: ModelConfig, depth: usize, seed: u64) -> Result<Self> {
        Self::construct(config, depth, seed, true)
    }

    fn construct(config: ModelConfig, depth: usize, seed: u64, zeros: bool) -> Result<Self> {
        config.validate()?;
        if depth == 0 || depth > config.num_layers {
            return Err(Error::Config(format!(
                "depth {depth} outside 1..={}",
                config.num_layers
            )));
        }
        if config.sharing == Sharing::Grouped && !depth.is_multiple_of(config.layers_per_stage()) {
            return Err(Error::Config(format!(
                "grouped sharing needs depth {depth} to be a multiple of the group size {}",
                config.layers_per_stage()
            )));
        }
        let (h, v) = (config.hidden, config.vocab_size);
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, seed, zeros };
        let embeddings = Embeddings {
            word: b.weight("embeddings.word".into(), vec![v, h])?,
            position: b.weight("embeddings.position".into(), vec![config.max_seq_len, h])?,
            segment: b.weight("embeddings.segment".into(), vec![config.type_vocab, h])?,
            ln_g: b.fill("embeddings.layernorm.gamma".into(), h, 1.0)?,
            ln_b: b.fill("embeddings.layernorm.beta".into(), h, 0.0)?,
        };
        let mut layers: Vec<LayerParams> = Vec::with_capacity(depth);
        for l in 0..depth {
            let prefix = layer_prefix(&config, l);
            let params = match b.store.find(&format!("{prefix}.attn.query.weight")) {
                Some(_) => layers[l - 1].clone(),
                None => b.layer(&prefix, &config)?,
            };
            layers.push(params);
        }
        let mlm = MlmHead {
            dense_w: b.weight("heads.mlm.transform.weight".into(), vec![h, h])?,
            dense_b: b.fill("heads.mlm.transform.bias".into(), h, 0.0)?,
            ln_g: b.fill("heads.mlm.layernorm.gamma".into(), h, 1.0)?,
            ln_b: b.fill("heads.mlm.layernorm.beta".into(), h, 0.0)?,
            out_bias: b.fill("heads.mlm.output.bias".into(), v, 0.0)?,
        };
        let nsp = NspHead {
            pooler_w: b.weight("heads.nsp.pooler.weight".into(), vec![h, h])?,
            pooler_b: b.fill("heads.nsp.pooler.bias".into(), h, 0.0)?,
            cls_w: b.weight("heads.nsp.classifier.weight".into(), vec![h, 2])?,
            cls_b: b.fill("heads.nsp.classifier.bias".into(), 2, 0.0)?,
        };
        Ok(Self {
            config,
            store,
            embeddings,
            mlm,
            nsp,
            layers,
            partition: TrainablePartition::all(depth),
            seed,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layer(&self, l: usize) -> &LayerParams {
        &self.layers[l]
    }

    pub fn partition(&self) -> &TrainablePartition {
        &self.partition
    }

    /// Group index of `layer` under grouped sharing.
    pub fn group_of(&self, layer: usize) -> Option<usize> {
        match self.config.sharing {
            Sharing::None => None,
            Sharing::Grouped => Some(layer / self.config.layers_per_stage()),
        }
    }

    fn embedding_ids(&self) -> [ParamId; 5] {
        let e = &self.embeddings;
        [e.word, e.position, e.segment, e.ln_g, e.ln_b]
    }

    pub fn head_ids(&self) -> [ParamId; 9] {
        let (m, n) = (&self.mlm, &self.nsp);
        [
            m.dense_w, m.dense_b, m.ln_g, m.ln_b, m.out_bias, n.pooler_w, n.pooler_b, n.cls_w, n.cls_b,
        ]
    }

    /// Distinct parameter handles used by encoder layers in `layers`.
    pub fn layer_param_ids(&self, layers: impl IntoIterator<Item = usize>) -> BTreeSet<ParamId> {
        layers
            .into_iter()
            .flat_map(|l| self.layers[l].ids())
            .collect()
    }

    /// Appends `n_new` layers on top, each a deep copy of the current top
    /// `n_new` layers in order. Only the new layers and the heads stay
    /// trainable afterwards.
    pub fn grow(&mut self, n_new: usize) -> Result<()> {
        let depth = self.depth();
        if n_new == 0 {
            return Err(Error::Config("grow needs at least one new layer".into()));
        }
        if n_new > depth {
            return Err(Error::Config(format!(
                "cannot copy {n_new} layers from a {depth}-layer model"
            )));
        }
        if depth + n_new > self.config.num_layers {
            return Err(Error::Config(format!(
                "growing {depth} by {n_new} exceeds num_layers {}",
                self.config.num_layers
            )));
        }
        if self.config.sharing == Sharing::Grouped && !n_new.is_multiple_of(self.config.layers_per_stage()) {
            return Err(Error::Config(format!(
                "grouped sharing grows by whole groups of {}, not {n_new}",
                self.config.layers_per_stage()
            )));
        }
        for i in 0..n_new {
            let src = depth - n_new + i;
            let dst = depth + i;
            let prefix = layer_prefix(&self.config, dst);
            let src_prefix = layer_prefix(&self.config, src);
            let new = if self.store.find(&format!("{prefix}.attn.query.weight")).is_some() {
                // a later layer of a group created earlier in this loop
                self.layers[dst - 1].clone()
            } else {
                let src_params = self.layers[src].clone();
                let mut copy = |id: ParamId| -> Result<ParamId> {
                    let p = self.store.get(id);
                    let name = p.name.replacen(&src_prefix, &prefix, 1);
                    let (shape, data, decay) = (p.shape.clone(), p.data.clone(), p.decay);
                    self.store.add(name, shape, data, decay)
                };
                LayerParams {
                    query_w: copy(src_params.query_w)?,
                    query_b: copy(src_params.query_b)?,
                    key_w: copy(src_params.key_w)?,
                    key_b: copy(src_params.key_b)?,
                    value_w: copy(src_params.value_w)?,
                    value_b: copy(src_params.value_b)?,
                    attn_out_w: copy(src_params.attn_out_w)?,
                    attn_out_b: copy(src_params.attn_out_b)?,
                    attn_ln_g: copy(src_params.attn_ln_g)?,
                    attn_ln_b: copy(src_params.attn_ln_b)?,
                    ffn_in_w: copy(src_params.ffn_in_w)?,
                    ffn_in_b: copy(src_params.ffn_in_b)?,
                    ffn_out_w: copy(src_params.ffn_out_w)?,
                    ffn_out_b: copy(src_params.ffn_out_b)?,
                    ffn_ln_g: copy(src_params.ffn_ln_g)?,
                    ffn_ln_b: copy(src_params.ffn_ln_b)?,
                }
            };
            self.layers.push(new);
        }
        self.set_partition(TrainablePartition::top(depth, depth + n_new))
    }

    /// Applies `partition` to every parameter's trainable flag. Frozen
    /// parameters lose their gradient buffers. A shared parameter set is
    /// trainable when any layer using it is.
    pub fn set_partition(&mut self, partition: TrainablePartition) -> Result<()> {
        let depth = self.depth();
        if let Some(&bad) = partition.trainable_layers.iter().find(|&&l| l >= depth) {
            return Err(Error::Index(format!("layer {bad} out of range for depth {depth}")));
        }
        let word_only = self.config.embedding_freeze == EmbeddingFreeze::Word;
        let emb = self.embedding_ids();
        for (i, id) in emb.into_iter().enumerate() {
            let on = partition.embeddings_trainable || (i > 0 && word_only);
            self.store.set_trainable(id, on);
        }
        for id in self.head_ids() {
            self.store.set_trainable(id, partition.heads_trainable);
        }
        let trainable = self.layer_param_ids(partition.trainable_layers.iter().copied());
        for id in self.layer_param_ids(0..depth) {
            self.store.set_trainable(id, trainable.contains(&id));
        }
        self.partition = partition;
        Ok(())
    }

    /// Records the forward pass for `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &Batch, opts: &ForwardOptions) -> Result<Forward> {
        self.forward_impl(tape, batch, opts, None)
    }

    /// Like [`Model::forward`], but feeds `input` (a `[B*S, H]` hidden
    /// state) into layer `start` instead of running the embeddings and the
    /// layers below it. `hidden` then begins with `input`.
    pub fn forward_from(
        &self,
        tape: &mut Tape<'_>,
        batch: &Batch,
        opts: &ForwardOptions,
        start: usize,
        input: Var,
    ) -> Result<Forward> {
        let want = [batch.batch_size * batch.seq_len, self.config.hidden];
        if start > self.depth() || tape.shape(input) != want {
            return Err(Error::Shape(format!(
                "input {:?} at layer {start} (want {want:?}, depth {})",
                tape.shape(input),
                self.depth()
            )));
        }
        self.forward_impl(tape, batch, opts, Some((start, input)))
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<'_>,
        batch: &Batch,
        opts: &ForwardOptions,
        from: Option<(usize, Var)>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let (b, s) = (batch.batch_size, batch.seq_len);
        let (h, a) = (cfg.hidden, cfg.heads);
        let dh = cfg.head_dim();
        if s > cfg.max_seq_len {
            return Err(Error::Index(format!(
                "sequence length {s} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = batch.token_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Index(format!("token id {bad} out of range for vocab {}", cfg.vocab_size)));
        }
        let mut drop_rng = match opts.dropout_seed {
            Some(seed) if cfg.dropout > 0.0 => Some(rng::rng(seed, Stream::Dropout)),
            _ => None,
        };
        let mut dropout = |tape: &mut Tape<'_>, x: Var| match drop_rng.as_mut() {
            Some(r) => tape.dropout(x, cfg.dropout, r),
            None => x,
        };

        let t = b * s;
        let e = &self.embeddings;
        let (start, mut x) = match from {
            Some(f) => f,
            None => {
                let words: Vec<usize> = batch.token_ids.iter().map(|&i| i as usize).collect();
                let positions: Vec<usize> = (0..t).map(|i| i % s).collect();
                let segments: Vec<usize> = batch.segment_ids.iter().map(|&i| i as usize).collect();
                let (we, pe, se) = (tape.param(e.word), tape.param(e.position), tape.param(e.segment));
                let x_w = tape.gather_rows(we, &words)?;
                let x_p = tape.gather_rows(pe, &positions)?;
                let x_s = tape.gather_rows(se, &segments)?;
                let x = tape.add(x_w, x_p)?;
                let x = tape.add(x, x_s)?;
                let (g, bt) = (tape.param(e.ln_g), tape.param(e.ln_b));
                let x = tape.layer_norm(x, g, bt, cfg.layernorm_eps)?;
                (0, dropout(tape, x))
            }
        };

        let mut hidden = vec![x];
        let mut attention = Vec::with_capacity(self.depth());
        let scale = 1.0 / (dh as f64).sqrt();
        for lp in &self.layers[start..] {
            let heads = |tape: &mut Tape<'_>, w: ParamId, bias: ParamId| -> Result<Var> {
                let (w, bias) = (tape.param(w), tape.param(bias));
                let y = tape.matmul(x, w)?;
                let y = tape.add_bias(y, bias)?;
                let y = tape.reshape(y, vec![b, s, a, dh])?;
                tape.permute(y, &[0, 2, 1, 3])
            };
            let q = heads(tape, lp.query_w, lp.query_b)?;
            let k = heads(tape, lp.key_w, lp.key_b)?;
            let v = heads(tape, lp.value_w, lp.value_b)?;
            let scores = tape.matmul_ext(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.key_mask(scores, &batch.attention_mask)?;
            let probs = tape.softmax(scores, 3)?;
            attention.push(probs);
            let probs = dropout(tape, probs);
            let ctx = tape.matmul(probs, v)?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, vec![t, h])?;
            let (wo, bo) = (tape.param(lp.attn_out_w), tape.param(lp.attn_out_b));
            let o = tape.matmul(ctx, wo)?;
            let o = tape.add_bias(o, bo)?;
            let o = dropout(tape, o);
            let r = tape.add(x, o)?;
            let (g, bt) = (tape.param(lp.attn_ln_g), tape.param(lp.attn_ln_b));
            let x1 = tape.layer_norm(r, g, bt, cfg.layernorm_eps)?;

            let (w1, b1) = (tape.param(lp.ffn_in_w), tape.param(lp.ffn_in_b));
            let f = tape.matmul(x1, w1)?;
            let f = tape.add_bias(f, b1)?;
            let f = tape.gelu(f);
            let (w2, b2) = (tape.param(lp.ffn_out_w), tape.param(lp.ffn_out_b));
            let f = tape.matmul(f, w2)?;
            let f = tape.add_bias(f, b2)?;
            let f = dropout(tape, f);
            let r = tape.add(x1, f)?;
            let (g, bt) = (tape.param(lp.ffn_ln_g), tape.param(lp.ffn_ln_b));
            x = tape.layer_norm(r, g, bt, cfg.layernorm_eps)?;
            hidden.push(x);
        }

        // MLM over masked positions only.
        let rows: Vec<usize> = (0..t).filter(|&i| batch.mlm_labels[i] != IGNORE_INDEX).collect();
        let mlm = if rows.is_empty() {
            tape.constant(vec![0.0], vec![1])?
        } else {
            let targets: Vec<i64> = rows.iter().map(|&i| batch.mlm_labels[i]).collect();
            let m = &self.mlm;
            let hm = tape.gather_rows(x, &rows)?;
            let (w, bias) = (tape.param(m.dense_w), tape.param(m.dense_b));
            let y = tape.matmul(hm, w)?;
            let y = tape.add_bias(y, bias)?;
            let y = tape.gelu(y);
            let (g, bt) = (tape.param(m.ln_g), tape.param(m.ln_b));
            let y = tape.layer_norm(y, g, bt, cfg.layernorm_eps)?;
            let dec = tape.param(m.decoder(e));
            let logits = tape.matmul_ext(y, dec, true)?;
            let ob = tape.param(m.out_bias);
            let logits = tape.add_bias(logits, ob)?;
            tape.cross_entropy(logits, &targets, IGNORE_INDEX)?
        };

        let n = &self.nsp;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * s).collect();
        let cls = tape.gather_rows(x, &cls_rows)?;
        let (w, bias) = (tape.param(n.pooler_w), tape.param(n.pooler_b));
        let p = tape.matmul(cls, w)?;
        let p = tape.add_bias(p, bias)?;
        let p = tape.tanh(p);
        let (w, bias) = (tape.param(n.cls_w), tape.param(n.cls_b));
        let logits = tape.matmul(p, w)?;
        let logits = tape.add_bias(logits, bias)?;
        let labels: Vec<i64> = batch.nsp_labels.iter().map(|&l| l as i64).collect();
        let nsp = tape.cross_entropy(logits, &labels, IGNORE_INDEX)?;

        let total = tape.add(mlm, nsp)?;
        Ok(Forward {
            total,
            mlm,
            nsp,
            hidden,
            attention,
        })
    }

    /// Forward pass without gradient bookkeeping kept around.
    pub fn evaluate(&self, batch: &Batch, capture_attention: bool) -> Result<ModelOutput> {
        let mut tape = Tape::new(&self.store);
        let fw = self.forward(
            &mut tape,
            batch,
            &ForwardOptions {
                capture_attention,
                dropout_seed: None,
            },
        )?;
        let attention = if capture_attention {
            Some(AttentionMap::from_tape(&tape, &fw.attention, batch, self.config.heads)?)
        } else {
            None
        };
        Ok(ModelOutput {
            total_loss: tape.scalar(fw.total),
            mlm_loss: tape.scalar(fw.mlm),
            nsp_loss: tape.scalar(fw.nsp),
            attention,
        })
    }

    /// Adds `N(0, std^2)` noise to every parameter (layernorm gains, biases
    /// and the decoder bias included), so gradient checks run away from the
    /// near-symmetric initial point where many gradients are tiny.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut r = rng::rng(seed, Stream::GradCheck);
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            for x in self.store.data_mut(id).iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *x += std * z;
            }
        }
    }

    /// Finite-difference check of the total loss on `batch` with respect to
    /// every trainable parameter.
    pub fn gradcheck(&mut self, batch: &Batch, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let mut store = std::mem::take(&mut self.store);
        let ids = store.trainable_ids();
        let fo = ForwardOptions::default();
        let report = finite_diff_check(&mut store, &ids, opts, |tape| Ok(self.forward(tape, batch, &fo)?.total));
        self.store = store;
        report
    }

    /// Hidden states (embedding output, then each layer) for `batch`.
    pub fn hidden_states(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.store);
        let fw = self.forward(&mut tape, batch, &ForwardOptions::default())?;
        Ok(fw.hidden.iter().map(|&v| tape.value(v).to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_batch;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny(4, 8, 2, 32, 16)
    }

    #[test]
    fn closed_form_parameter_count() {
        // embeddings (32 + 16 + 2) * 8 + 16 = 416
        // layer 4 * (64 + 8) + 2 * 8 * 32 + 32 + 8 + 32 = 872, four of them
        // mlm 64 + 8 + 16 + 32 = 120, nsp 64 + 8 + 16 + 2 = 90
        let m = build_model(&cfg(), 1).unwrap();
        assert_eq!(m.store.num_scalars(), 416 + 4 * 872 + 120 + 90);
        assert_eq!(cfg().param_count(4), m.store.num_scalars());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&cfg(), 9).unwrap();
        let b = build_model(&cfg(), 9).unwrap();
        for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.name, q.name);
            assert!(p.data.iter().zip(&q.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = build_model(&cfg(), 10).unwrap();
        assert_ne!(a.store.get(a.embeddings.word).data, c.store.get(c.embeddings.word).data);
    }

    #[test]
    fn init_is_truncated_normal() {
        let m = build_model(&cfg(), 3).unwrap();
        let w = &m.store.get(m.embeddings.word).data;
        assert!(w.iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let sd = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.012..0.02).contains(&sd), "{sd}");
        assert!(m.store.get(m.mlm.out_bias).data.iter().all(|&v| v == 0.0));
        assert!(m.store.get(m.layer(0).attn_ln_g).data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grouped_sharing_aliases_group_members() {
        let mut c = cfg();
        c.num_stages = 2;
        c.sharing = Sharing::Grouped;
        let m = build_model(&c, 1).unwrap();
        assert_eq!(m.layer(0), m.layer(1));
        assert_eq!(m.layer(2), m.layer(3));
        assert_ne!(m.layer(1), m.layer(2));
        assert_eq!(m.store.num_scalars(), c.param_count(4));
        assert_eq!(c.param_count(4), 416 + 2 * 872 + 120 + 90);
    }

    #[test]
    fn tied_decoder_is_word_embedding() {
        let m = build_model(&cfg(), 1).unwrap();
        assert_eq!(m.mlm.decoder(&m.embeddings), m.embeddings.word);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg();
        c.heads = 3;
        assert!(matches!(build_model(&c, 0), Err(Error::Config(_))));
        let mut c = cfg();
        c.num_stages = 3;
        let msg = build_model(&c, 0).unwrap_err().to_string();
        assert!(msg.contains("divisible"), "{msg}");
    }

    #[test]
    fn grow_copies_top_layers() {
        let mut c = ModelConfig::tiny(12, 8, 2, 32, 16);
        c.num_stages = 4;
        let mut m = Model::new(c, 9, 5).unwrap();
        m.grow(3).unwrap();
        assert_eq!(m.depth(), 12);
        for i in 0..3 {
            for (new, old) in m.layer(9 + i).ids().iter().zip(m.layer(6 + i).ids()) {
                assert_ne!(*new, old);
                assert_eq!(m.store.get(*new).data, m.store.get(old).data);
            }
        }
        let p = m.partition();
        assert_eq!(p.trainable_layers, (9..12).collect());
        assert!(!p.embeddings_trainable && p.heads_trainable);
        assert!(!m.store.get(m.embeddings.word).trainable());
        assert!(m.store.get(m.mlm.out_bias).trainable());
        assert!(matches!(m.grow(1), Err(Error::Config(_))));
    }

    #[test]
    fn grow_rejects_too_many_layers() {
        let mut c = ModelConfig::tiny(12, 8, 2, 32, 16);
        c.num_stages = 4;
        let mut m = Model::new(c, 3, 5).unwrap();
        assert!(m.grow(4).is_err());
        m.grow(3).unwrap();
        for i in 0..3 {
            assert_eq!(m.store.get(m.layer(3 + i).query_w).data, m.store.get(m.layer(i).query_w).data);
        }
    }

    #[test]
    fn partitions_set_flags() {
        let mut m = build_model(&cfg(), 1).unwrap();
        assert_eq!(m.store.trainable_scalars(), m.store.num_scalars());
        m.set_partition(TrainablePartition::top(2, 4)).unwrap();
        let frozen: Vec<_> = m.layer_param_ids(0..2).into_iter().collect();
        assert!(frozen.iter().all(|&id| !m.store.get(id).trainable()));
        assert!(m.layer_param_ids(2..4).iter().all(|&id| m.store.get(id).trainable()));
        assert!(!m.store.get(m.embeddings.position).trainable());
        assert!(matches!(
            m.set_partition(TrainablePartition::top(3, 5)),
            Err(Error::Index(_))
        ));
        m.set_partition(TrainablePartition::all(4)).unwrap();
        assert_eq!(m.store.trainable_scalars(), m.store.num_scalars());
    }

    #[test]
    fn word_only_freeze_keeps_other_embeddings_trainable() {
        let mut c = cfg();
        c.embedding_freeze = EmbeddingFreeze::Word;
        let mut m = build_model(&c, 1).unwrap();
        m.set_partition(TrainablePartition::top(2, 4)).unwrap();
        assert!(!m.store.get(m.embeddings.word).trainable());
        assert!(m.store.get(m.embeddings.position).trainable());
        assert!(m.store.get(m.embeddings.ln_g).trainable());
    }

    #[test]
    fn losses_add_up_and_empty_mask_gives_zero_mlm() {
        let m = build_model(&cfg(), 1).unwrap();
        let mut batch = random_batch(32, 3, 10, 7);
        let out = m.evaluate(&batch, false).unwrap();
        assert!((out.total_loss - out.mlm_loss - out.nsp_loss).abs() < 1e-12);
        batch.mlm_labels.iter_mut().for_each(|l| *l = IGNORE_INDEX);
        let out = m.evaluate(&batch, false).unwrap();
        assert_eq!(out.mlm_loss, 0.0);
        assert_eq!(out.total_loss, out.nsp_loss);
    }

    #[test]
    fn out_of_range_token_is_an_index_error() {
        let m = build_model(&cfg(), 1).unwrap();
        let mut batch = random_batch(32, 2, 8, 1);
        batch.token_ids[3] = 32;
        assert!(matches!(m.evaluate(&batch, false), Err(Error::Index(_))));
    }
}
