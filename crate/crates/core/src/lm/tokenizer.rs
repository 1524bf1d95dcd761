//! Byte-level and whitespace/punctuation word-level tokenizers.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Byte,
    Word,
}

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

#[derive(Clone, Debug, PartialEq)]
pub enum Tokenizer {
    /// One token per UTF-8 byte, vocabulary of 256.
    Byte,
    Word(WordVocab),
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    unk: TokenId,
}

impl WordVocab {
    /// Builds a vocabulary from an explicit word list. `<unk>` is appended
    /// when the list does not already contain it.
    pub fn from_words(words: Vec<String>) -> Self {
        let mut words = words;
        if !words.iter().any(|w| w == UNK) {
            words.push(UNK.to_string());
        }
        let index: HashMap<String, TokenId> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let unk = index[UNK];
        Self { words, index, unk }
    }

    /// Collects every word of `text`, most frequent first (ties sorted
    /// lexicographically), after the reserved `<unk>`, `<bos>`, `<eos>`.
    pub fn build(text: &str) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in split_words(text) {
            *counts.entry(w).or_default() += 1;
        }
        let mut entries: Vec<(&str, usize)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut words = vec![UNK.to_string(), BOS.to_string(), EOS.to_string()];
        words.extend(entries.into_iter().map(|(w, _)| w.to_string()).filter(|w| !words_reserved(w)));
        Self::from_words(words)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn unk(&self) -> TokenId {
        self.unk
    }
}

fn words_reserved(w: &str) -> bool {
    w == UNK || w == BOS || w == EOS
}

/// Splits into runs of alphanumerics and single punctuation characters.
pub fn split_words(text: &str) -> impl Iterator<Item = &str> {
    let mut pieces = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() || c == '\'' && start.is_some() {
            if start.is_none() {
                start = Some(i);
            }
            continue;
        }
        if let Some(s) = start.take() {
            pieces.push(&text[s..i]);
        }
        if !c.is_whitespace() {
            pieces.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = start {
        pieces.push(&text[s..]);
    }
    pieces.into_iter()
}

impl Tokenizer {
    pub fn kind(&self) -> TokenizerKind {
        match self {
            Tokenizer::Byte => TokenizerKind::Byte,
            Tokenizer::Word(_) => TokenizerKind::Word,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => 256,
            Tokenizer::Word(v) => v.words.len(),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        match self {
            Tokenizer::Byte => text.bytes().map(TokenId::from).collect(),
            Tokenizer::Word(v) => split_words(text).map(|w| v.get(w).unwrap_or(v.unk)).collect(),
        }
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        match self {
            Tokenizer::Byte => {
                let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Word(_) => {
                let mut out = String::new();
                for (i, &t) in tokens.iter().enumerate() {
                    let piece = self.token_text(t);
                    if i > 0 && !attaches_left(&piece) {
                        out.push(' ');
                    }
                    out.push_str(&piece);
                }
                out
            }
        }
    }

    /// Surface form of one token as it appears when streamed after earlier
    /// tokens: word mode prepends the joining space, byte mode is the raw byte.
    pub fn token_piece(&self, token: TokenId, is_first: bool) -> String {
        match self {
            Tokenizer::Byte => self.decode(&[token]),
            Tokenizer::Word(_) => {
                let text = self.token_text(token);
                if is_first || attaches_left(&text) {
                    text
                } else {
                    format!(" {text}")
                }
            }
        }
    }

    fn token_text(&self, token: TokenId) -> String {
        match self {
            Tokenizer::Byte => self.decode(&[token]),
            Tokenizer::Word(v) => v.words.get(token).cloned().unwrap_or_else(|| UNK.to_string()),
        }
    }

    /// Single-token id of `word`, if it encodes to exactly one known token.
    pub fn single_token(&self, word: &str) -> Option<TokenId> {
        match self {
            Tokenizer::Byte => match word.as_bytes() {
                [b] => Some(TokenId::from(*b)),
                _ => None,
            },
            Tokenizer::Word(v) => {
                let mut pieces = split_words(word);
                let first = pieces.next()?;
                if pieces.next().is_some() {
                    return None;
                }
                v.get(first).filter(|&id| id != v.unk)
            }
        }
    }

    pub fn vocab_words(&self) -> Option<&[String]> {
        match self {
            Tokenizer::Byte => None,
            Tokenizer::Word(v) => Some(v.words()),
        }
    }
}

fn attaches_left(piece: &str) -> bool {
    matches!(piece, "." | "," | ";" | ":" | "!" | "?" | ")" | "'")
}
