//! BM25 candidate generation.
//!
//! One [`InvertedIndex`] per domain over title + description; mentions query
//! their own domain with the surface string. Scores use Okapi BM25 with the
//! smoothed, always-positive idf `ln(1 + (N - n + 0.5) / (n + 0.5))`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, KnowledgeBase, MentionRecord};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerConfig {
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

impl AnalyzerConfig {
    /// Splits text into index terms.
    pub fn analyze(&self, text: &str) -> Vec<String> {
        let text = if self.lowercase {
            text.to_lowercase()
        } else {
            text.to_string()
        };
        if self.strip_punctuation {
            text.split(|c: char| !c.is_alphanumeric())
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect()
        } else {
            text.split_whitespace().map(str::to_string).collect()
        }
    }
}

pub fn idf(n_docs: usize, doc_freq: usize) -> f64 {
    let (n, df) = (n_docs as f64, doc_freq as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: usize,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    analyzer: AnalyzerConfig,
    postings: BTreeMap<String, Vec<Posting>>,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_len: f64,
}

impl InvertedIndex {
    pub fn build(kb: &KnowledgeBase, analyzer: AnalyzerConfig) -> Result<Self> {
        if kb.is_empty() {
            return Err(Error::EmptyKb(kb.domain().to_string()));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(kb.len());
        let mut doc_lens = Vec::with_capacity(kb.len());
        for (doc, e) in kb.entities().iter().enumerate() {
            let terms = analyzer.analyze(&format!("{} {}", e.title, e.description));
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                // docs are visited in order, so lists stay sorted by doc
                postings.entry(term).or_default().push(Posting { doc, tf: count });
            }
            doc_ids.push(e.entity_id.clone());
            doc_lens.push(terms.len() as u32);
        }
        let avg_len = doc_lens.iter().map(|&l| l as f64).sum::<f64>() / doc_lens.len() as f64;
        Ok(Self {
            analyzer,
            postings,
            doc_ids,
            doc_lens,
            avg_len,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, doc: usize) -> u32 {
        self.doc_lens[doc]
    }

    pub fn doc_id(&self, doc: usize) -> &str {
        &self.doc_ids[doc]
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map_or(&[], Vec::as_slice)
    }

    pub fn analyzer(&self) -> &AnalyzerConfig {
        &self.analyzer
    }

    /// BM25 score of every document that matches at least one query term.
    pub fn score_all(&self, query: &str, params: Bm25Params) -> HashMap<usize, f64> {
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in self.analyzer.analyze(query) {
            let list = self.postings(&term);
            if list.is_empty() {
                continue;
            }
            let w = idf(self.n_docs(), list.len());
            for p in list {
                let tf = p.tf as f64;
                let norm = 1.0 - params.b + params.b * self.doc_lens[p.doc] as f64 / self.avg_len;
                *scores.entry(p.doc).or_default() += w * tf * (params.k1 + 1.0) / (tf + params.k1 * norm);
            }
        }
        scores
    }

    /// Top-`k` documents, ties broken by ascending entity id.
    pub fn retrieve_topk(
        &self,
        mention_id: &str,
        query: &str,
        k: usize,
        params: Bm25Params,
    ) -> CandidateSet {
        let mut ranked: Vec<Candidate> = self
            .score_all(query, params)
            .into_iter()
            .map(|(doc, score)| Candidate {
                entity_id: self.doc_ids[doc].clone(),
                score,
            })
            .collect();
        ranked.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.entity_id.cmp(&b.entity_id))
        });
        ranked.truncate(k);
        CandidateSet {
            mention_id: mention_id.to_string(),
            candidates: ranked,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity_id: String,
    pub score: f64,
}

/// Ranked retrieval output for one mention; this is the on-disk record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub mention_id: String,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn position(&self, entity_id: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.entity_id == entity_id)
    }

    pub fn truncated(&self, k: usize) -> CandidateSet {
        CandidateSet {
            mention_id: self.mention_id.clone(),
            candidates: self.candidates.iter().take(k).cloned().collect(),
        }
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.entity_id.as_str())
    }
}

/// Candidate sets keyed by mention id.
pub type CandidateMap = HashMap<String, CandidateSet>;

pub fn index_by_mention(sets: Vec<CandidateSet>) -> CandidateMap {
    sets.into_iter().map(|c| (c.mention_id.clone(), c)).collect()
}

/// Retrieves candidates for every mention of the dataset, in mention order.
pub fn retrieve_all(
    dataset: &Dataset,
    k: usize,
    params: Bm25Params,
    analyzer: AnalyzerConfig,
) -> Result<Vec<CandidateSet>> {
    let mut indexes: HashMap<&str, InvertedIndex> = HashMap::new();
    for kb in dataset.kbs() {
        indexes.insert(kb.domain(), InvertedIndex::build(kb, analyzer)?);
    }
    dataset
        .mentions()
        .iter()
        .map(|m| {
            let index = indexes
                .get(m.domain.as_str())
                .ok_or_else(|| Error::EmptyKb(m.domain.clone()))?;
            Ok(index.retrieve_topk(&m.mention_id, &m.surface, k, params))
        })
        .collect()
}

/// Fraction of mentions whose gold entity is within the top `k` candidates.
pub fn recall_at_k<'a, I>(candidates: &CandidateMap, mentions: I, k: usize) -> Result<f64>
where
    I: IntoIterator<Item = &'a MentionRecord>,
{
    let mut total = 0usize;
    let mut hits = 0usize;
    for m in mentions {
        let set = candidates
            .get(&m.mention_id)
            .ok_or_else(|| Error::MissingCandidates(m.mention_id.clone()))?;
        total += 1;
        if set.entity_ids().take(k).any(|id| id == m.gold_entity_id) {
            hits += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    })
}

pub fn write_candidates(path: &Path, sets: &[CandidateSet]) -> Result<()> {
    io::write_jsonl(path, sets)
}

pub fn read_candidates(path: &Path) -> Result<Vec<CandidateSet>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityRecord;

    fn kb(docs: &[(&str, &str, &str)]) -> KnowledgeBase {
        KnowledgeBase::new(
            "d",
            docs.iter()
                .map(|(id, title, desc)| EntityRecord {
                    entity_id: id.to_string(),
                    title: title.to_string(),
                    description: desc.to_string(),
                    domain: "d".into(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn term_frequencies_and_lengths() {
        let idx = InvertedIndex::build(&kb(&[("E1", "Flag", "red red blue")]), Default::default())
            .unwrap();
        assert_eq!(idx.postings("red"), &[Posting { doc: 0, tf: 2 }]);
        assert_eq!(idx.postings("blue"), &[Posting { doc: 0, tf: 1 }]);
        assert_eq!(idx.postings("flag"), &[Posting { doc: 0, tf: 1 }]);
        assert_eq!(idx.doc_len(0), 4);
    }

    #[test]
    fn identical_documents_tie_by_id() {
        let idx = InvertedIndex::build(
            &kb(&[("E2", "Turkey", "a bird"), ("E1", "Turkey", "a bird"), ("E3", "Goose", "x")]),
            Default::default(),
        )
        .unwrap();
        assert_eq!(idx.doc_len(0), idx.doc_len(1));
        assert_eq!(idx.postings("bird").len(), 2);
        let set = idx.retrieve_topk("m", "turkey", 5, Bm25Params::default());
        assert_eq!(set.len(), 2);
        assert_eq!(set.candidates[0].score, set.candidates[1].score);
        assert_eq!(set.candidates[0].entity_id, "E1");
    }

    #[test]
    fn no_overlap_gives_empty_set() {
        let idx = InvertedIndex::build(&kb(&[("E1", "Flag", "red")]), Default::default()).unwrap();
        assert!(idx.retrieve_topk("m", "zebra", 3, Bm25Params::default()).is_empty());
    }

    #[test]
    fn empty_kb_is_an_error() {
        let empty = KnowledgeBase::new("d", vec![]).unwrap();
        assert!(matches!(
            InvertedIndex::build(&empty, Default::default()),
            Err(Error::EmptyKb(_))
        ));
    }

    #[test]
    fn analyzer_lowercases_and_strips() {
        let a = AnalyzerConfig::default();
        assert_eq!(a.analyze("Indiana Jones (minifigure)!"), ["indiana", "jones", "minifigure"]);
    }

    #[test]
    fn idf_stays_positive() {
        for n in 1..20 {
            for df in 1..=n {
                assert!(idf(n, df) > 0.0);
            }
        }
    }

    fn mention(id: &str, gold: &str) -> MentionRecord {
        MentionRecord {
            mention_id: id.into(),
            surface: "x".into(),
            left_context: String::new(),
            right_context: String::new(),
            gold_entity_id: gold.into(),
            domain: "d".into(),
        }
    }

    fn set(id: &str, ents: &[&str]) -> CandidateSet {
        CandidateSet {
            mention_id: id.into(),
            candidates: ents
                .iter()
                .enumerate()
                .map(|(i, e)| Candidate {
                    entity_id: e.to_string(),
                    score: 10.0 - i as f64,
                })
                .collect(),
        }
    }

    #[test]
    fn recall_fixture_matches_reported_fraction() {
        // 17 of 25 gold entities retrieved within the top 64
        let mut sets = Vec::new();
        let mut mentions = Vec::new();
        for i in 0..25 {
            let id = format!("m{i}");
            let gold = format!("g{i}");
            let mut ents: Vec<String> = (0..64).map(|j| format!("n{i}_{j}")).collect();
            if i < 17 {
                ents[i * 3] = gold.clone();
            }
            let refs: Vec<&str> = ents.iter().map(String::as_str).collect();
            sets.push(set(&id, &refs));
            mentions.push(mention(&id, &gold));
        }
        let map = index_by_mention(sets);
        assert!((recall_at_k(&map, &mentions, 64).unwrap() - 0.68).abs() < 1e-12);
    }

    #[test]
    fn recall_extremes_and_missing() {
        let map = index_by_mention(vec![set("a", &["g", "x"]), set("b", &["y", "z"])]);
        assert_eq!(recall_at_k(&map, &[mention("a", "g")], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&map, &[mention("b", "g")], 2).unwrap(), 0.0);
        assert!(matches!(
            recall_at_k(&map, &[mention("c", "g")], 2),
            Err(Error::MissingCandidates(_))
        ));
    }
}
