//! Seeded toy corpora for sanity checks and benchmarks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::corpus::{Example, LabeledCorpus, LITERAL, METAPHOR};

pub const MARKER: &str = "marker";
pub const VERB: &str = "verb";

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

/// 32 sentences over a 40-word vocabulary with coin-flip labels. Only
/// memorisation can fit it.
pub fn overfit_corpus(seed: u64) -> LabeledCorpus {
    let vocab = words("v", 40);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..32)
        .map(|_| {
            let len = rng.random_range(5..=15);
            let tokens = (0..len).map(|_| vocab.choose(&mut rng).unwrap().clone()).collect();
            Example {
                tokens,
                label: rng.random_range(0..2),
            }
        })
        .collect();
    LabeledCorpus {
        examples,
        source: "synthetic:overfit".into(),
    }
}

/// The 50 words of [`learnable_corpus`]: marker, verb and 48 fillers.
pub fn learnable_vocabulary() -> Vec<String> {
    let mut v = vec![MARKER.to_string(), VERB.to_string()];
    v.extend(words("w", 48));
    v
}

/// Sentences of 5–15 tokens labelled metaphor iff both [`MARKER`] and
/// [`VERB`] occur. Negatives are split evenly between marker-only,
/// verb-only and neither, so no single token decides the label.
pub fn learnable_corpus(n: usize, seed: u64) -> LabeledCorpus {
    let fillers = words("w", 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| {
            let len = rng.random_range(5..=15);
            let mut tokens: Vec<String> = (0..len).map(|_| fillers.choose(&mut rng).unwrap().clone()).collect();
            let positive = rng.random_bool(0.5);
            let (marker, verb) = if positive {
                (true, true)
            } else {
                match rng.random_range(0..3) {
                    0 => (true, false),
                    1 => (false, true),
                    _ => (false, false),
                }
            };
            let a = rng.random_range(0..len);
            let b = (a + rng.random_range(1..len)) % len;
            if marker {
                tokens[a] = MARKER.into();
            }
            if verb {
                tokens[b] = VERB.into();
            }
            Example {
                tokens,
                label: if positive { METAPHOR } else { LITERAL },
            }
        })
        .collect();
    LabeledCorpus {
        examples,
        source: "synthetic:learnable".into(),
    }
}

/// Random vectors with no relation to the words' roles.
pub fn random_vectors(words: &[String], dim: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    words
        .iter()
        .map(|w| (w.clone(), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}
