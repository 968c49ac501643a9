//! Writes the synthetic toy corpus: `make_toy_corpus [SEED] [DOCS] > corpus.txt`

fn main() {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(17, |s| s.parse().expect("seed must be an integer"));
    let docs = args.next().map_or(1500, |s| s.parse().expect("doc count must be an integer"));
    print!("{}", mslt::data::synthetic::generate(seed, docs));
}
