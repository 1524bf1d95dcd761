//! Distinct-n diversity scores.
//!
//! [`dist_n`] pools n-grams across every given sequence (the corpus-level
//! score of an attribute task); [`passage_dist`] scores one passage and is
//! what the ranked variants filter on.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::lm::TokenId;

/// Distinct n-grams divided by total n-grams across `sequences`.
/// Sequences shorter than `n` contribute nothing; 0 when no n-gram exists.
pub fn dist_n<T: AsRef<[TokenId]>>(sequences: &[T], n: usize) -> f64 {
    assert!(n >= 1, "dist_n needs n ≥ 1");
    let mut seen: HashSet<&[TokenId]> = HashSet::new();
    let mut total = 0usize;
    for s in sequences {
        for gram in s.as_ref().windows(n) {
            seen.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistScores {
    pub dist1: f64,
    pub dist2: f64,
    pub dist3: f64,
}

impl DistScores {
    pub fn mean(&self) -> f64 {
        (self.dist1 + self.dist2 + self.dist3) / 3.0
    }
}

pub fn corpus_dist<T: AsRef<[TokenId]>>(sequences: &[T]) -> DistScores {
    DistScores { dist1: dist_n(sequences, 1), dist2: dist_n(sequences, 2), dist3: dist_n(sequences, 3) }
}

pub fn passage_dist(tokens: &[TokenId]) -> DistScores {
    corpus_dist(&[tokens])
}
