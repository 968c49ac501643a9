use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{Instance, CLS, IGNORE_INDEX, MASK, MLM_RATE, NUM_SPECIAL, PAD, SEP};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};

/// A padded training batch; every per-token field is `[batch_size, seq_len]`
/// row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub mlm_labels: Vec<i64>,
    pub nsp_labels: Vec<u8>,
}

/// Counts of masking decisions, for checking the replacement mix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaskStats {
    pub maskable: u64,
    pub selected: u64,
    pub replaced_mask: u64,
    pub replaced_random: u64,
    pub kept: u64,
    pub forced: u64,
}

fn maskable(t: u32) -> bool {
    t != CLS && t != SEP && t != PAD
}

/// Selects each maskable position with probability 0.15 (forcing one when
/// none is drawn); a selected token becomes `[MASK]` 80% of the time, a
/// random non-special token 10%, and stays unchanged 10%. Labels hold the
/// original id at selected positions and [`IGNORE_INDEX`] elsewhere.
pub fn apply_mlm_mask(tokens: &[u32], vocab_size: usize, rng: &mut Rng) -> (Vec<u32>, Vec<i64>) {
    apply_mlm_mask_counted(tokens, vocab_size, rng, &mut MaskStats::default())
}

pub(crate) fn apply_mlm_mask_counted(
    tokens: &[u32],
    vocab_size: usize,
    rng: &mut Rng,
    stats: &mut MaskStats,
) -> (Vec<u32>, Vec<i64>) {
    let candidates: Vec<usize> = (0..tokens.len()).filter(|&i| maskable(tokens[i])).collect();
    let mut chosen: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random_bool(MLM_RATE))
        .collect();
    if chosen.is_empty() && !candidates.is_empty() {
        chosen.push(candidates[rng.random_range(0..candidates.len())]);
        stats.forced += 1;
    }
    stats.maskable += candidates.len() as u64;
    stats.selected += chosen.len() as u64;
    let mut out = tokens.to_vec();
    let mut labels = vec![IGNORE_INDEX; tokens.len()];
    for i in chosen {
        labels[i] = tokens[i] as i64;
        let r: f64 = rng.random();
        if r < 0.8 {
            out[i] = MASK;
            stats.replaced_mask += 1;
        } else if r < 0.9 {
            out[i] = rng.random_range(NUM_SPECIAL as u32..vocab_size as u32);
            stats.replaced_random += 1;
        } else {
            stats.kept += 1;
        }
    }
    (out, labels)
}

impl Batch {
    /// Pads and masks `instances` into one batch.
    pub fn from_instances(
        instances: &[&Instance],
        seq_len: usize,
        vocab_size: usize,
        rng: &mut Rng,
        stats: &mut MaskStats,
    ) -> Result<Self> {
        let b = instances.len();
        let mut batch = Self::empty(b, seq_len);
        for (row, inst) in instances.iter().enumerate() {
            if inst.tokens.len() > seq_len {
                return Err(Error::Data(format!(
                    "instance of {} tokens exceeds seq_len {seq_len}",
                    inst.tokens.len()
                )));
            }
            let (masked, labels) = apply_mlm_mask_counted(&inst.tokens, vocab_size, rng, stats);
            let off = row * seq_len;
            let n = masked.len();
            batch.token_ids[off..off + n].copy_from_slice(&masked);
            batch.segment_ids[off..off + n].copy_from_slice(&inst.segments);
            batch.attention_mask[off..off + n].iter_mut().for_each(|m| *m = 1);
            batch.mlm_labels[off..off + n].copy_from_slice(&labels);
            batch.nsp_labels[row] = inst.nsp_label;
        }
        Ok(batch)
    }

    fn empty(b: usize, s: usize) -> Self {
        Self {
            batch_size: b,
            seq_len: s,
            token_ids: vec![PAD; b * s],
            segment_ids: vec![0; b * s],
            attention_mask: vec![0; b * s],
            mlm_labels: vec![IGNORE_INDEX; b * s],
            nsp_labels: vec![0; b],
        }
    }

    /// Unmasked batch of fixed sentence pairs, used as attention probes.
    pub fn from_pairs(pairs: &[(Vec<u32>, Vec<u32>)], seq_len: usize) -> Result<Self> {
        let mut batch = Self::empty(pairs.len(), seq_len);
        for (row, (a, b)) in pairs.iter().enumerate() {
            let n = a.len() + b.len() + 3;
            if n > seq_len {
                return Err(Error::Data(format!("probe of {n} tokens exceeds seq_len {seq_len}")));
            }
            let off = row * seq_len;
            let mut toks = vec![CLS];
            toks.extend(a);
            toks.push(SEP);
            let seg_a = toks.len();
            toks.extend(b);
            toks.push(SEP);
            batch.token_ids[off..off + n].copy_from_slice(&toks);
            batch.segment_ids[off + seg_a..off + n].iter_mut().for_each(|s| *s = 1);
            batch.attention_mask[off..off + n].iter_mut().for_each(|m| *m = 1);
            batch.nsp_labels[row] = 1;
        }
        Ok(batch)
    }

    /// Number of non-pad positions in row `b`.
    pub fn valid_len(&self, b: usize) -> usize {
        self.attention_mask[b * self.seq_len..(b + 1) * self.seq_len]
            .iter()
            .filter(|&&m| m == 1)
            .count()
    }

    /// Checks the structural invariants of a training batch.
    pub fn validate(&self) -> Result<()> {
        let (b, s) = (self.batch_size, self.seq_len);
        let n = b * s;
        if self.token_ids.len() != n
            || self.segment_ids.len() != n
            || self.attention_mask.len() != n
            || self.mlm_labels.len() != n
            || self.nsp_labels.len() != b
        {
            return Err(Error::Data("batch field shapes disagree".into()));
        }
        for row in 0..b {
            let r = row * s..(row + 1) * s;
            let toks = &self.token_ids[r.clone()];
            let mask = &self.attention_mask[r.clone()];
            let labels = &self.mlm_labels[r.clone()];
            let valid = self.valid_len(row);
            if toks[0] != CLS || mask[..valid].iter().any(|&m| m != 1) {
                return Err(Error::Data(format!("row {row} does not start with [CLS] or has holes")));
            }
            if toks[..valid].iter().filter(|&&t| t == SEP).count() != 2 || toks[valid - 1] != SEP {
                return Err(Error::Data(format!("row {row} does not contain exactly two [SEP]")));
            }
            if toks[valid..].iter().any(|&t| t != PAD) {
                return Err(Error::Data(format!("row {row} has non-pad tokens after its end")));
            }
            if labels[valid..].iter().any(|&l| l != IGNORE_INDEX) {
                return Err(Error::Data(format!("row {row} masks a pad position")));
            }
            if self.segment_ids[r].iter().any(|&g| g > 1) || self.nsp_labels[row] > 1 {
                return Err(Error::Data(format!("row {row} has labels outside {{0, 1}}")));
            }
        }
        Ok(())
    }
}

/// Endless batch stream over a fixed instance pool, reshuffled every epoch
/// and masked on the fly.
#[derive(Debug, Clone)]
pub struct BatchStream {
    pool: Vec<Instance>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    batch_size: usize,
    seq_len: usize,
    vocab_size: usize,
    shuffle_rng: Rng,
    mask_rng: Rng,
    stats: MaskStats,
}

impl BatchStream {
    pub fn new(pool: Vec<Instance>, vocab_size: usize, batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if pool.is_empty() {
            return Err(Error::Data("empty instance pool".into()));
        }
        let mut s = Self {
            order: (0..pool.len()).collect(),
            pool,
            cursor: 0,
            epoch: 0,
            batch_size,
            seq_len,
            vocab_size,
            shuffle_rng: rng::rng(seed, Stream::Shuffle),
            mask_rng: rng::rng(seed, Stream::Masking),
            stats: MaskStats::default(),
        };
        s.order.shuffle(&mut s.shuffle_rng);
        Ok(s)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn stats(&self) -> MaskStats {
        self.stats
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut picked = Vec::with_capacity(self.batch_size);
        while picked.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.shuffle_rng);
                self.cursor = 0;
                self.epoch += 1;
            }
            picked.push(&self.pool[self.order[self.cursor]]);
            self.cursor += 1;
        }
        Batch::from_instances(&picked, self.seq_len, self.vocab_size, &mut self.mask_rng, &mut self.stats)
            .expect("pool instances fit seq_len by construction")
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// A structurally valid batch of uniformly random tokens, for smoke tests
/// and gradient checks that need no corpus.
pub fn random_batch(vocab_size: usize, batch_size: usize, seq_len: usize, seed: u64) -> Batch {
    let mut r = rng::rng(seed, Stream::Instances);
    let instances: Vec<Instance> = (0..batch_size)
        .map(|_| {
            let len = r.random_range(5.min(seq_len)..=seq_len);
            let a_len = r.random_range(1..=len - 4);
            let b_len = len - 3 - a_len;
            let mut tokens = vec![CLS];
            tokens.extend((0..a_len).map(|_| r.random_range(NUM_SPECIAL as u32..vocab_size as u32)));
            tokens.push(SEP);
            let mut segments = vec![0u8; tokens.len()];
            tokens.extend((0..b_len).map(|_| r.random_range(NUM_SPECIAL as u32..vocab_size as u32)));
            tokens.push(SEP);
            segments.resize(tokens.len(), 1);
            Instance {
                tokens,
                segments,
                nsp_label: r.random_range(0..2),
            }
        })
        .collect();
    let refs: Vec<&Instance> = instances.iter().collect();
    Batch::from_instances(&refs, seq_len, vocab_size, &mut r, &mut MaskStats::default())
        .expect("generated instances fit")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, make_instances, parse_corpus, synthetic};

    #[test]
    fn degenerate_sequence_has_no_selection() {
        let mut r = rng::rng(0, Stream::Masking);
        let toks = [CLS, SEP, SEP, PAD, PAD];
        let (out, labels) = apply_mlm_mask(&toks, 50, &mut r);
        assert_eq!(out, toks);
        assert!(labels.iter().all(|&l| l == IGNORE_INDEX));
    }

    #[test]
    fn forces_one_selection() {
        let mut r = rng::rng(0, Stream::Masking);
        for _ in 0..200 {
            let (_, labels) = apply_mlm_mask(&[CLS, 9, SEP, 10, SEP], 50, &mut r);
            assert!(labels.iter().any(|&l| l != IGNORE_INDEX));
            assert_eq!(labels[0], IGNORE_INDEX);
            assert_eq!(labels[2], IGNORE_INDEX);
            assert_eq!(labels[4], IGNORE_INDEX);
        }
    }

    #[test]
    fn stream_shapes_and_determinism() {
        let text = synthetic::generate(1, 30);
        let v = build_vocab(&text, 300).unwrap();
        let docs = parse_corpus(&text);
        let pool: Vec<_> = make_instances(&docs, &v, 24, rng::rng(1, Stream::Instances))
            .unwrap()
            .take(37)
            .collect();
        let a: Vec<Batch> = BatchStream::new(pool.clone(), v.len(), 8, 24, 5).unwrap().take(12).collect();
        let b: Vec<Batch> = BatchStream::new(pool, v.len(), 8, 24, 5).unwrap().take(12).collect();
        assert_eq!(a, b);
        for batch in &a {
            batch.validate().unwrap();
            assert_eq!(batch.token_ids.len(), 8 * 24);
            assert_eq!(batch.nsp_labels.len(), 8);
            for (i, &m) in batch.attention_mask.iter().enumerate() {
                if m == 0 {
                    assert_eq!(batch.token_ids[i], PAD);
                    assert_eq!(batch.mlm_labels[i], IGNORE_INDEX);
                }
            }
        }
    }

    #[test]
    fn probes_are_unmasked() {
        let b = Batch::from_pairs(&[(vec![7, 8], vec![9]), (vec![7], vec![9, 9, 9])], 10).unwrap();
        b.validate().unwrap();
        assert_eq!(b.valid_len(0), 6);
        assert_eq!(b.valid_len(1), 7);
        assert!(b.mlm_labels.iter().all(|&l| l == IGNORE_INDEX));
        assert!(Batch::from_pairs(&[(vec![7; 8], vec![9])], 10).is_err());
    }

    #[test]
    fn random_batches_are_valid() {
        for seed in 0..20 {
            random_batch(40, 3, 12, seed).validate().unwrap();
        }
    }
}
