use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Vocab, CLS, SEP};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Tape, Var};

/// Attention probabilities of every layer for a fixed probe batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub probe_id: String,
    pub probes: usize,
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    /// `[probes, layers, heads, seq_len, seq_len]`, query-major rows.
    pub values: Vec<f64>,
    pub valid_len: Vec<usize>,
    pub token_ids: Vec<u32>,
}

impl AttentionMap {
    pub(crate) fn from_tape(tape: &Tape<'_>, layers: &[Var], batch: &Batch, heads: usize) -> Result<Self> {
        let (b, s) = (batch.batch_size, batch.seq_len);
        let slice = heads * s * s;
        let mut values = vec![0.0; b * layers.len() * slice];
        for (l, &v) in layers.iter().enumerate() {
            if tape.shape(v) != [b, heads, s, s] {
                return Err(Error::Shape(format!(
                    "attention of layer {l} has shape {:?}, expected {:?}",
                    tape.shape(v),
                    [b, heads, s, s]
                )));
            }
            let data = tape.value(v);
            for p in 0..b {
                let dst = (p * layers.len() + l) * slice;
                values[dst..dst + slice].copy_from_slice(&data[p * slice..(p + 1) * slice]);
            }
        }
        Ok(Self {
            probe_id: String::new(),
            probes: b,
            layers: layers.len(),
            heads,
            seq_len: s,
            values,
            valid_len: (0..b).map(|p| batch.valid_len(p)).collect(),
            token_ids: batch.token_ids.clone(),
        })
    }

    /// Attention of `query` over the valid keys of probe `p`.
    pub fn row(&self, p: usize, layer: usize, head: usize, query: usize) -> &[f64] {
        let s = self.seq_len;
        let off = (((p * self.layers + layer) * self.heads + head) * s + query) * s;
        &self.values[off..off + self.valid_len[p]]
    }
}

/// Runs `probes` through `model` and returns the attention maps. The model
/// is only read.
pub fn capture(model: &Model, probes: &Batch, probe_id: &str) -> Result<AttentionMap> {
    let out = model.evaluate(probes, true)?;
    let mut map = out.attention.expect("attention requested");
    map.probe_id = probe_id.to_string();
    Ok(map)
}

/// Reads tab-separated sentence pairs (`A<TAB>B`, one per line, `#`
/// comments) into an unmasked probe batch padded to the longest pair.
pub fn load_probes(path: &Path, vocab: &Vocab, max_seq_len: usize) -> Result<Batch> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((a, b)) = line.split_once('\t') else {
            return Err(Error::Data(format!("{}:{}: expected two tab-separated sentences", path.display(), i + 1)));
        };
        pairs.push((vocab.encode(a), vocab.encode(b)));
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{} holds no probes", path.display())));
    }
    let longest = pairs.iter().map(|(a, b)| a.len() + b.len() + 3).max().unwrap_or(0);
    if longest > max_seq_len {
        return Err(Error::Data(format!(
            "probe of {longest} tokens exceeds max_seq_len {max_seq_len}"
        )));
    }
    Batch::from_pairs(&pairs, longest)
}

const NORM_TOL: f64 = 1e-6;

/// Jensen-Shannon divergence in nats, with `0 ln 0 = 0`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Analysis(format!("lengths differ: {} vs {}", p.len(), q.len())));
    }
    for (name, x) in [("p", p), ("q", q)] {
        let sum: f64 = x.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL || x.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Analysis(format!("{name} is not a probability vector (sum {sum})")));
        }
    }
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Mean JS divergence per (layer, head) over all valid probe query rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub layers: Vec<usize>,
    pub heads: usize,
    /// `values[i][h]` belongs to `layers[i]`, head `h`.
    pub values: Vec<Vec<f64>>,
}

impl DriftReport {
    pub fn mean(&self) -> f64 {
        let n = self.values.iter().map(Vec::len).sum::<usize>();
        self.values.iter().flatten().sum::<f64>() / n.max(1) as f64
    }

    pub fn layer_mean(&self, i: usize) -> f64 {
        self.values[i].iter().sum::<f64>() / self.heads as f64
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("layer");
        for h in 0..self.heads {
            out.push_str(&format!("  head{h:<4}"));
        }
        out.push_str("  mean\n");
        for (i, l) in self.layers.iter().enumerate() {
            out.push_str(&format!("{l:>5}"));
            for v in &self.values[i] {
                out.push_str(&format!("  {v:>8.6}"));
            }
            out.push_str(&format!("  {:>8.6}\n", self.layer_mean(i)));
        }
        out
    }

    /// One JSON object per (layer, head).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (h, v) in self.values[i].iter().enumerate() {
                out.push_str(&serde_json::json!({"layer": l, "head": h, "js": v}).to_string());
                out.push('\n');
            }
        }
        out
    }
}

/// Compares the attention of `a` and `b` over `layers`, pairing heads by
/// position.
pub fn drift(a: &AttentionMap, b: &AttentionMap, layers: Range<usize>) -> Result<DriftReport> {
    if a.token_ids != b.token_ids || a.valid_len != b.valid_len || a.seq_len != b.seq_len {
        return Err(Error::Analysis("attention maps were captured on different probes".into()));
    }
    if a.heads != b.heads {
        return Err(Error::Analysis(format!("head counts differ: {} vs {}", a.heads, b.heads)));
    }
    if layers.is_empty() || layers.end > a.layers || layers.end > b.layers {
        return Err(Error::Analysis(format!(
            "layer range {layers:?} outside the shared depth {}",
            a.layers.min(b.layers)
        )));
    }
    let rows: usize = a.valid_len.iter().sum();
    let mut values = Vec::with_capacity(layers.len());
    for l in layers.clone() {
        let mut per_head = Vec::with_capacity(a.heads);
        for h in 0..a.heads {
            let mut total = 0.0;
            for p in 0..a.probes {
                for q in 0..a.valid_len[p] {
                    total += js_divergence(a.row(p, l, h, q), b.row(p, l, h, q))?;
                }
            }
            per_head.push(total / rows as f64);
        }
        values.push(per_head);
    }
    Ok(DriftReport {
        layers: layers.collect(),
        heads: a.heads,
        values,
    })
}

/// Mean attention mass each head puts on `[CLS]` and `[SEP]` keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecialMass {
    pub layer: usize,
    pub head: usize,
    pub cls: f64,
    pub sep: f64,
}

pub fn special_mass(map: &AttentionMap) -> Vec<SpecialMass> {
    let rows: usize = map.valid_len.iter().sum();
    let mut out = Vec::new();
    for layer in 0..map.layers {
        for head in 0..map.heads {
            let (mut cls, mut sep) = (0.0, 0.0);
            for p in 0..map.probes {
                let toks = &map.token_ids[p * map.seq_len..(p + 1) * map.seq_len];
                for q in 0..map.valid_len[p] {
                    for (k, w) in map.row(p, layer, head, q).iter().enumerate() {
                        match toks[k] {
                            CLS => cls += w,
                            SEP => sep += w,
                            _ => {}
                        }
                    }
                }
            }
            out.push(SpecialMass {
                layer,
                head,
                cls: cls / rows as f64,
                sep: sep / rows as f64,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn cfg(layers: usize) -> ModelConfig {
        let mut c = ModelConfig::tiny(layers, 8, 2, 32, 16);
        c.num_stages = 1;
        c
    }

    fn probes() -> Batch {
        Batch::from_pairs(&[(vec![7, 8, 9], vec![10, 11]), (vec![12], vec![13, 14, 15, 16])], 10).unwrap()
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        let d = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn capture_shapes_and_rows_normalized() {
        let m = build_model(&cfg(3), 2).unwrap();
        let map = capture(&m, &probes(), "p").unwrap();
        assert_eq!(map.layers, 3);
        assert_eq!(map.valid_len, vec![8, 8]);
        for l in 0..3 {
            for h in 0..2 {
                for q in 0..8 {
                    let s: f64 = map.row(1, l, h, q).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
        assert_eq!(map, capture(&m, &probes(), "p").unwrap());
    }

    #[test]
    fn drift_identity_and_distinct_models() {
        let c = cfg(2);
        let a = capture(&build_model(&c, 1).unwrap(), &probes(), "p").unwrap();
        let b = capture(&build_model(&c, 2).unwrap(), &probes(), "p").unwrap();
        assert!(drift(&a, &a, 0..2).unwrap().values.iter().flatten().all(|&v| v == 0.0));
        let r = drift(&a, &b, 0..2).unwrap();
        assert!(r.values.iter().flatten().all(|&v| v > 0.0 && v <= std::f64::consts::LN_2));
        assert!(drift(&a, &b, 1..3).is_err());
        let other = Batch::from_pairs(&[(vec![7], vec![8])], 10).unwrap();
        let c2 = capture(&build_model(&c, 1).unwrap(), &other, "q").unwrap();
        assert!(drift(&a, &c2, 0..1).is_err());
    }

    #[test]
    fn special_mass_is_a_fraction() {
        let m = build_model(&cfg(1), 2).unwrap();
        let map = capture(&m, &probes(), "p").unwrap();
        for s in special_mass(&map) {
            assert!(s.cls > 0.0 && s.sep > 0.0 && s.cls + s.sep < 1.0);
        }
    }
}
