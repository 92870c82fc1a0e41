//! Whitespace pre-tokenization plus greedy longest-match subwords.
//!
//! The subword inventory is learned by pair merging over the training corpus'
//! word counts. Word-internal pieces carry a `##` marker so that
//! [`Tokenizer::detokenize`] can glue them back together.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const START: &str = "[START]";
pub const END: &str = "[END]";

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

/// Ids of the reserved tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub start: u32,
    pub end: u32,
    /// First prefix token; the prefix occupies `prefix..prefix + prefix_len`.
    pub prefix: u32,
}

/// Discrete token ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.ids
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self::new(ids)
    }
}

/// Token inventory and the subword encoder over it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    prefix_len: usize,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

fn special_names(prefix_len: usize) -> Vec<String> {
    let mut names: Vec<String> = [PAD, UNK, CLS, SEP, START, END]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((1..=prefix_len).map(|i| format!("[PRE_{i}]")));
    names
}

fn word_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 {
                c.to_string()
            } else {
                format!("{CONTINUATION}{c}")
            }
        })
        .collect()
}

fn merge_symbols(a: &str, b: &str) -> String {
    format!("{a}{}", b.strip_prefix(CONTINUATION).unwrap_or(b))
}

impl Tokenizer {
    /// Builds a tokenizer from an explicit token list (specials first).
    pub fn from_tokens(tokens: Vec<String>, prefix_len: usize) -> Result<Self> {
        let specials = special_names(prefix_len);
        if tokens.len() < specials.len() || tokens[..specials.len()] != specials[..] {
            return Err(Error::Config(
                "token list must start with the special tokens".into(),
            ));
        }
        let mut t = Self {
            tokens,
            prefix_len,
            index: HashMap::new(),
        };
        t.rebuild_index()?;
        Ok(t)
    }

    /// Restores the lookup table after deserialization.
    pub fn rebuild_index(&mut self) -> Result<()> {
        self.index.clear();
        for (i, tok) in self.tokens.iter().enumerate() {
            if self.index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate token {tok:?}")));
            }
        }
        Ok(())
    }

    /// Learns up to `vocab_size` tokens from the corpus by repeatedly merging
    /// the most frequent adjacent pair (ties broken lexicographically).
    pub fn train<'a, I>(texts: I, vocab_size: usize, prefix_len: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for text in texts {
            for w in text.split_whitespace() {
                if w.chars().count() <= MAX_WORD_CHARS {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(Vec<String>, u64)> = counts
            .into_iter()
            .map(|(w, c)| (word_symbols(w), c))
            .collect();
        let mut tokens = special_names(prefix_len);
        let mut alphabet: Vec<String> = words
            .iter()
            .flat_map(|(s, _)| s.iter().cloned())
            .flat_map(|sym| {
                let body = sym.strip_prefix(CONTINUATION).unwrap_or(&sym).to_string();
                [format!("{CONTINUATION}{body}"), body]
            })
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        tokens.append(&mut alphabet);
        let mut known: std::collections::HashSet<String> = tokens.iter().cloned().collect();

        while tokens.len() < vocab_size {
            let mut pairs: HashMap<(&str, &str), u64> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .filter(|(_, c)| *c >= 2)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|((a, b), _)| (a.to_string(), b.to_string()));
            let Some((a, b)) = best else { break };
            let merged = merge_symbols(&a, &b);
            for (syms, _) in words.iter_mut() {
                let mut i = 0;
                while i + 1 < syms.len() {
                    if syms[i] == a && syms[i + 1] == b {
                        syms[i] = merged.clone();
                        syms.remove(i + 1);
                    }
                    i += 1;
                }
            }
            if known.insert(merged.clone()) {
                tokens.push(merged);
            }
        }
        Self::from_tokens(tokens, prefix_len).expect("trained vocabulary is well formed")
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn specials(&self) -> SpecialIds {
        SpecialIds {
            pad: 0,
            unk: 1,
            cls: 2,
            sep: 3,
            start: 4,
            end: 5,
            prefix: 6,
        }
    }

    pub fn prefix_ids(&self) -> Vec<u32> {
        let first = self.specials().prefix;
        (0..self.prefix_len as u32).map(|i| first + i).collect()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < 6 + self.prefix_len
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// SHA-256 over the token list, recorded in checkpoint manifests.
    pub fn vocab_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.specials().unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let body: String = chars[start..end].iter().collect();
                let piece = if start == 0 {
                    body
                } else {
                    format!("{CONTINUATION}{body}")
                };
                if let Some(&id) = self.index.get(&piece) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.specials().unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::new();
        for w in text.split_whitespace() {
            self.encode_word(w, &mut ids);
        }
        TokenSequence::new(ids)
    }

    /// Inverse of [`Tokenizer::tokenize`] up to whitespace normalization.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !out.is_empty() && !self.is_special(id) => out.push_str(rest),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CORPUS: &[&str] = &[
        "Professor Henry Jones Sr is Indiana Jones's father",
        "Indiana Jones (minifigure) is a minifigure from the Indiana Jones theme",
        "the turkey leg is a food item",
    ];

    fn tok() -> Tokenizer {
        Tokenizer::train(CORPUS.iter().copied(), 200, 3)
    }

    fn normalize(s: &str) -> String {
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(tok().tokenize("").is_empty());
        assert!(tok().tokenize("   ").is_empty());
    }

    #[test]
    fn deterministic() {
        let t = tok();
        assert_eq!(t.tokenize(CORPUS[1]), t.tokenize(CORPUS[1]));
        assert_eq!(tok(), t);
    }

    #[test]
    fn round_trip_on_fixture_texts() {
        let t = tok();
        for text in CORPUS {
            let ids = t.tokenize(text);
            assert!(!ids.ids().contains(&t.specials().unk));
            assert_eq!(t.detokenize(ids.ids()), normalize(text));
        }
        assert_eq!(t.detokenize(t.tokenize("  Jones   leg\tfood ").ids()), "Jones leg food");
    }

    #[test]
    fn frequent_words_merge_into_single_tokens() {
        let t = tok();
        assert_eq!(t.tokenize("Jones").len(), 1);
        assert_eq!(t.tokenize("Indiana").len(), 1);
    }

    #[test]
    fn unseen_words_fall_back_to_pieces_or_unk() {
        let t = tok();
        // "Jonesleg" decomposes into known pieces
        let ids = t.tokenize("Jonesleg");
        assert!(ids.len() >= 2);
        assert_eq!(t.detokenize(ids.ids()), "Jonesleg");
        // a character never seen in training
        assert_eq!(t.tokenize("Ω").ids(), &[t.specials().unk]);
    }

    #[test]
    fn specials_are_distinct_and_prefix_sized() {
        let t = tok();
        let s = t.specials();
        let mut ids = vec![s.pad, s.unk, s.cls, s.sep, s.start, s.end];
        ids.extend(t.prefix_ids());
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(t.prefix_ids().len(), 3);
        assert_eq!(t.token(s.start), Some(START));
        assert_eq!(t.token(t.prefix_ids()[2]), Some("[PRE_3]"));
    }

    #[test]
    fn vocab_hash_tracks_tokens() {
        let a = tok();
        let b = Tokenizer::train(CORPUS.iter().copied(), 50, 3);
        assert_eq!(a.vocab_hash(), tok().vocab_hash());
        assert_ne!(a.vocab_hash(), b.vocab_hash());
    }
}
