//! Bag-of-words attribute model: `log Σ_{w ∈ bag} p_{t+1}[w]`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, LOG_CLAMP};
use crate::error::{Error, Result};
use crate::lm::{TokenId, Tokenizer};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagOfWords {
    pub name: String,
    /// Sorted, de-duplicated single-token ids.
    pub token_ids: Vec<TokenId>,
    pub source_words: Vec<String>,
    /// Words that do not map to exactly one known token.
    pub dropped_words: Vec<String>,
}

/// Words of a list file: one per line, `#` starts a comment, blank lines
/// are ignored.
pub fn parse_word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

impl BagOfWords {
    pub fn from_words(name: &str, words: Vec<String>, tokenizer: &Tokenizer) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut dropped = Vec::new();
        for w in &words {
            match tokenizer.single_token(w) {
                Some(id) => {
                    ids.insert(id);
                }
                None => dropped.push(w.clone()),
            }
        }
        if !dropped.is_empty() {
            log::warn!("bag `{name}`: dropped {} words without a single-token encoding", dropped.len());
        }
        if ids.is_empty() {
            return Err(Error::Attribute(format!(
                "bag `{name}` has no single-token words under this tokenizer ({} dropped)",
                dropped.len()
            )));
        }
        Ok(Self {
            name: name.to_string(),
            token_ids: ids.into_iter().collect(),
            source_words: words,
            dropped_words: dropped,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.token_ids.binary_search(&token).is_ok()
    }

    /// Total next-token probability on the bag.
    pub fn mass<S: Scalar>(&self, p: &[S]) -> S {
        self.token_ids.iter().filter_map(|&i| p.get(i)).copied().sum()
    }
}

/// Loads a word-list file; the bag is named after the file stem.
pub fn load_bow(path: &Path, tokenizer: &Tokenizer) -> Result<BagOfWords> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    BagOfWords::from_words(&name, parse_word_list(&fs::read_to_string(path)?), tokenizer)
}

/// `log(max(Σ_{i ∈ bag} p[i], 1e-12))`.
pub fn bow_log_likelihood<S: Scalar>(p: &[S], bag: &BagOfWords) -> S {
    bag.mass(p).max(S::lit(LOG_CLAMP)).ln()
}

/// Differentiable form over a probability row on `g`.
pub fn bow_log_likelihood_var<S: Scalar>(g: &mut Graph<S>, probs: Var, bag: &BagOfWords) -> Result<Var> {
    let mass = g.sum_indices(probs, &bag.token_ids)?;
    g.log(mass)
}
