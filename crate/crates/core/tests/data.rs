use mslt::data::{
    build_vocab, make_instances, parse_corpus, synthetic, training_pool, BatchStream, CLS, IGNORE_INDEX, PAD, SEP,
};
use mslt::rng::{rng, Stream};
use proptest::prelude::*;

/// Random corpus over a small alphabet of words: `docs` documents of
/// `sentences` sentences each.
fn corpus(words: &[String], docs: &[Vec<Vec<usize>>]) -> String {
    docs.iter()
        .map(|d| {
            d.iter()
                .map(|s| s.iter().map(|&w| words[w % words.len()].as_str()).collect::<Vec<_>>().join(" ") + "\n")
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn doc_strategy() -> impl Strategy<Value = Vec<Vec<Vec<usize>>>> {
    let sentence = prop::collection::vec(0usize..50, 1..30);
    let doc = prop::collection::vec(sentence, 2..6);
    prop::collection::vec(doc, 2..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_batch_is_structurally_valid(
        docs in doc_strategy(),
        seq_len in 5usize..40,
        batch in 1usize..6,
        cap in 8usize..60,
        seed in 0u64..1000,
    ) {
        let words: Vec<String> = (0..50).map(|i| format!("w{i}")).collect();
        let text = corpus(&words, &docs);
        let vocab = build_vocab(&text, cap).unwrap();
        prop_assert!(vocab.len() <= cap);
        let pool: Vec<_> = make_instances(&parse_corpus(&text), &vocab, seq_len, rng(seed, Stream::Instances))
            .unwrap()
            .take(20)
            .collect();
        let mut stream = BatchStream::new(pool, vocab.len(), batch, seq_len, seed).unwrap();
        for _ in 0..12 {
            let b = stream.next_batch();
            prop_assert!(b.validate().is_ok(), "{:?}", b.validate());
            prop_assert_eq!(b.token_ids.len(), batch * seq_len);
            prop_assert_eq!(b.nsp_labels.len(), batch);
            for i in 0..batch * seq_len {
                if b.attention_mask[i] == 0 {
                    prop_assert_eq!(b.token_ids[i], PAD);
                    prop_assert_eq!(b.mlm_labels[i], IGNORE_INDEX);
                }
                if b.mlm_labels[i] != IGNORE_INDEX {
                    prop_assert!(b.mlm_labels[i] as u32 != CLS && b.mlm_labels[i] as u32 != SEP);
                }
            }
        }
    }
}

#[test]
fn stream_is_deterministic_across_epochs() {
    let text = synthetic::generate(5, 30);
    let make = || {
        let (vocab, pool) = training_pool(&text, 200, 24, 10, 3).unwrap();
        BatchStream::new(pool, vocab.len(), 4, 24, 9).unwrap()
    };
    let (mut a, mut b) = (make(), make());
    for _ in 0..10 {
        assert_eq!(a.next_batch(), b.next_batch());
    }
    assert!(a.epoch() >= 2);
    let mut c = {
        let (vocab, pool) = training_pool(&text, 200, 24, 10, 3).unwrap();
        BatchStream::new(pool, vocab.len(), 4, 24, 10).unwrap()
    };
    let mut a = make();
    assert_ne!(a.next_batch(), c.next_batch());
}

#[test]
fn label_one_fraction_is_balanced() {
    let text = synthetic::generate(11, 200);
    let vocab = build_vocab(&text, 500).unwrap();
    let n = 10_000;
    let ones: usize = make_instances(&parse_corpus(&text), &vocab, 64, rng(4, Stream::Instances))
        .unwrap()
        .take(n)
        .map(|i| i.nsp_label as usize)
        .sum();
    let frac = ones as f64 / n as f64;
    assert!((0.47..=0.53).contains(&frac), "{frac}");
}

#[test]
fn masking_rates_converge() {
    let text = synthetic::generate(12, 300);
    let (vocab, pool) = training_pool(&text, 500, 128, 2000, 6).unwrap();
    let mut stream = BatchStream::new(pool, vocab.len(), 32, 128, 6).unwrap();
    while stream.stats().maskable < 100_000 {
        stream.next_batch();
    }
    let s = stream.stats();
    let sel = s.selected as f64 / s.maskable as f64;
    let mask = s.replaced_mask as f64 / s.selected as f64;
    assert!((0.145..=0.155).contains(&sel), "{sel}");
    assert!((0.78..=0.82).contains(&mask), "{mask}");
}
