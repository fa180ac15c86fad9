use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Document;

/// Marker token that decides each class of [`keyword_corpus`].
pub const MARKERS: [&str; 2] = ["alpha", "omega"];

/// A balanced two-class corpus of filler words in which exactly one marker
/// token per document decides the label (`alpha` → 0, `omega` → 1).
pub fn keyword_corpus(n: usize, seed: u64) -> Vec<Document> {
    const FILLER: [&str; 16] = [
        "the", "a", "of", "and", "to", "in", "is", "it", "that", "was", "for", "on", "with",
        "as", "at", "by",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let len = rng.gen_range(4..=12);
            let mut words: Vec<&str> = (0..len).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
            let at = rng.gen_range(0..=words.len());
            words.insert(at, MARKERS[label]);
            Document {
                text: words.join(" "),
                label,
            }
        })
        .collect()
}
