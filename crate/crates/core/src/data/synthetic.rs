//! Seeded generator for a small topic-structured English-like corpus.
//!
//! Each document sticks to one topic, and each sentence picks up the object
//! of the previous one as its subject, so both masked-token prediction and
//! next-sentence prediction have signal to learn from.

use rand::Rng as _;

use crate::rng::labeled_rng;

struct Topic {
    nouns: &'static [&'static str],
    verbs: &'static [&'static str],
    adjectives: &'static [&'static str],
    places: &'static [&'static str],
}

const TOPICS: &[Topic] = &[
    Topic {
        nouns: &["sailor", "boat", "whale", "net", "gull", "captain", "anchor", "wave", "fish", "harbor"],
        verbs: &["rows", "pulls", "watches", "follows", "drags", "ties"],
        adjectives: &["salty", "wet", "grey", "rough", "calm", "blue"],
        places: &["shore", "deck", "bay", "reef"],
    },
    Topic {
        nouns: &["fox", "owl", "hunter", "deer", "branch", "mushroom", "wolf", "acorn", "moss", "bear"],
        verbs: &["chases", "hides", "finds", "sniffs", "climbs", "gathers"],
        adjectives: &["dark", "green", "quiet", "wild", "old", "tall"],
        places: &["forest", "clearing", "creek", "den"],
    },
    Topic {
        nouns: &["driver", "bus", "taxi", "tower", "clerk", "bridge", "crowd", "signal", "train", "mayor"],
        verbs: &["passes", "stops", "honks", "crosses", "builds", "paints"],
        adjectives: &["busy", "loud", "bright", "crowded", "modern", "narrow"],
        places: &["street", "station", "square", "avenue"],
    },
    Topic {
        nouns: &["farmer", "cow", "tractor", "goat", "hen", "barn", "seed", "fence", "pig", "field"],
        verbs: &["feeds", "plows", "milks", "plants", "fixes", "waters"],
        adjectives: &["muddy", "golden", "fresh", "dusty", "sunny", "ripe"],
        places: &["farm", "meadow", "orchard", "stable"],
    },
    Topic {
        nouns: &["pilot", "rocket", "planet", "comet", "robot", "probe", "star", "moon", "engine", "satellite"],
        verbs: &["launches", "orbits", "scans", "repairs", "signals", "tracks"],
        adjectives: &["distant", "frozen", "silent", "shiny", "huge", "strange"],
        places: &["orbit", "crater", "galaxy", "capsule"],
    },
    Topic {
        nouns: &["cook", "pan", "onion", "knife", "soup", "oven", "spoon", "bread", "sauce", "kettle"],
        verbs: &["stirs", "chops", "bakes", "tastes", "boils", "serves"],
        adjectives: &["hot", "spicy", "sweet", "crisp", "warm", "sticky"],
        places: &["kitchen", "pantry", "table", "stove"],
    },
    Topic {
        nouns: &["teacher", "pupil", "book", "pencil", "lesson", "chalk", "desk", "map", "bell", "poem"],
        verbs: &["reads", "writes", "explains", "copies", "draws", "studies"],
        adjectives: &["clever", "curious", "patient", "neat", "young", "strict"],
        places: &["classroom", "library", "hall", "garden"],
    },
    Topic {
        nouns: &["merchant", "basket", "coin", "apple", "scale", "buyer", "cloth", "spice", "cart", "stall"],
        verbs: &["sells", "weighs", "trades", "counts", "carries", "offers"],
        adjectives: &["cheap", "rare", "heavy", "colorful", "small", "fine"],
        places: &["market", "bazaar", "shop", "corner"],
    },
];

const CONNECTORS: &[&str] = &["then", "later", "soon", "again", "slowly", "quickly"];

fn pick<'a>(rng: &mut crate::rng::Rng, xs: &'a [&'a str]) -> &'a str {
    xs[rng.random_range(0..xs.len())]
}

fn sentence(rng: &mut crate::rng::Rng, topic: &Topic, subject: &str) -> (String, String) {
    let object = loop {
        let o = pick(rng, topic.nouns);
        if o != subject {
            break o;
        }
    };
    let verb = pick(rng, topic.verbs);
    let adj = pick(rng, topic.adjectives);
    let place = pick(rng, topic.places);
    let conn = pick(rng, CONNECTORS);
    let s = match rng.random_range(0..4) {
        0 => format!("the {subject} {verb} the {adj} {object} near the {place} ."),
        1 => format!("{conn} the {subject} {verb} a {adj} {object} ."),
        2 => format!("in the {place} , the {adj} {subject} {verb} the {object} ."),
        _ => format!("the {subject} {conn} {verb} the {object} at the {adj} {place} ."),
    };
    (s, object.to_string())
}

/// `num_docs` documents of 4 to 8 sentences, blank-line separated.
pub fn generate(seed: u64, num_docs: usize) -> String {
    let mut rng = labeled_rng(seed, "synthetic-corpus");
    let mut out = String::new();
    for d in 0..num_docs {
        if d > 0 {
            out.push('\n');
        }
        let topic = &TOPICS[rng.random_range(0..TOPICS.len())];
        let mut subject = pick(&mut rng, topic.nouns).to_string();
        for _ in 0..rng.random_range(4..=8) {
            let (s, obj) = sentence(&mut rng, topic, &subject);
            out.push_str(&s);
            out.push('\n');
            subject = obj;
        }
    }
    out
}
