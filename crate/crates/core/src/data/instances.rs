use rand::Rng as _;

use super::{Vocab, CLS, SEP};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One `[CLS] A [SEP] B [SEP]` sequence before padding and masking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    pub tokens: Vec<u32>,
    pub segments: Vec<u8>,
    /// 1 when B is the sentence that follows A.
    pub nsp_label: u8,
}

/// Endless, seeded stream of sentence-pair instances.
#[derive(Debug, Clone)]
pub struct InstanceGenerator {
    docs: Vec<Vec<Vec<u32>>>,
    pairable: Vec<usize>,
    seq_len: usize,
    rng: Rng,
}

/// Builds the instance stream over tokenized `documents`. Half of the
/// pairs (in expectation) use the true next sentence, the rest draw B from
/// a different document. Pairs are truncated longest-first to fit.
pub fn make_instances(
    documents: &[Vec<String>],
    vocab: &Vocab,
    seq_len: usize,
    rng: Rng,
) -> Result<InstanceGenerator> {
    if seq_len < 5 {
        return Err(Error::Config(format!("seq_len {seq_len} cannot hold a sentence pair")));
    }
    let docs: Vec<Vec<Vec<u32>>> = documents
        .iter()
        .map(|d| {
            d.iter()
                .map(|s| vocab.encode(s))
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>()
        })
        .filter(|d: &Vec<Vec<u32>>| !d.is_empty())
        .collect();
    if docs.len() < 2 {
        return Err(Error::Data(format!(
            "need at least two documents for negative next-sentence pairs, found {}",
            docs.len()
        )));
    }
    let pairable: Vec<usize> = (0..docs.len()).filter(|&i| docs[i].len() >= 2).collect();
    if pairable.is_empty() {
        return Err(Error::Data("no document has two sentences".into()));
    }
    Ok(InstanceGenerator {
        docs,
        pairable,
        seq_len,
        rng,
    })
}

fn truncate_pair(a: &mut Vec<u32>, b: &mut Vec<u32>, budget: usize) {
    while a.len() + b.len() > budget {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

impl Iterator for InstanceGenerator {
    type Item = Instance;

    fn next(&mut self) -> Option<Instance> {
        let d = self.pairable[self.rng.random_range(0..self.pairable.len())];
        let doc = &self.docs[d];
        let i = self.rng.random_range(0..doc.len() - 1);
        let mut a = doc[i].clone();
        let (mut b, nsp_label) = if self.rng.random_bool(0.5) {
            (doc[i + 1].clone(), 1)
        } else {
            let other = loop {
                let o = self.rng.random_range(0..self.docs.len());
                if o != d {
                    break o;
                }
            };
            let od = &self.docs[other];
            (od[self.rng.random_range(0..od.len())].clone(), 0)
        };
        truncate_pair(&mut a, &mut b, self.seq_len - 3);
        let mut tokens = Vec::with_capacity(a.len() + b.len() + 3);
        tokens.push(CLS);
        tokens.extend(&a);
        tokens.push(SEP);
        let mut segments = vec![0u8; tokens.len()];
        tokens.extend(&b);
        tokens.push(SEP);
        segments.resize(tokens.len(), 1);
        Some(Instance {
            tokens,
            segments,
            nsp_label,
        })
    }
}
