//! Scorer-agnostic ranking of retrieved candidates.

use std::path::Path;

use rayon::prelude::*;

use crate::baselines::{cross_encoder_logits, max_pool, reading_only_probs};
use crate::corpus::{Dataset, EntityRecord, MentionRecord};
use crate::encoder::{Model, System};
use crate::error::{Error, Result};
use crate::io;
use crate::retrieval::{CandidateMap, CandidateSet};
use crate::selecting::{rank, res_token_scores, RankedPrediction};
use crate::tensor::Graph;

/// Anything that orders a mention's candidate set.
pub trait Ranker {
    fn rank(&self, mention: &MentionRecord, candidates: &CandidateSet) -> Result<RankedPrediction>;
}

/// Ranks with a trained [`Model`], resolving candidate ids against the dataset.
pub struct ModelRanker<'a> {
    pub model: &'a Model,
    pub dataset: &'a Dataset,
}

impl<'a> ModelRanker<'a> {
    pub fn new(model: &'a Model, dataset: &'a Dataset) -> Self {
        Self { model, dataset }
    }

    fn entities(&self, mention: &MentionRecord, candidates: &CandidateSet) -> Result<Vec<&'a EntityRecord>> {
        candidates
            .entity_ids()
            .map(|id| {
                self.dataset.entity(&mention.domain, id).ok_or_else(|| {
                    Error::InvalidRecord(format!(
                        "candidate {id} of mention {} is not in domain {}",
                        mention.mention_id, mention.domain
                    ))
                })
            })
            .collect()
    }

    /// Pooled score per candidate, in the given order.
    pub fn pooled_scores(&self, mention: &MentionRecord, entities: &[&EntityRecord]) -> Result<Vec<f64>> {
        let model = self.model;
        match model.system {
            System::Res => {
                let order: Vec<usize> = (0..entities.len()).collect();
                Ok(res_token_scores(model, mention, entities, &order)?.pooled())
            }
            System::ResNoSelect => {
                let mut g = Graph::new(&model.store);
                let probs = reading_only_probs(model, &mut g, mention, entities)?;
                let lp = model.config().prefix_len;
                Ok(g.value(probs).data().chunks(lp).map(max_pool).collect())
            }
            System::CrossEncoder => {
                let mut g = Graph::new(&model.store);
                let logits = cross_encoder_logits(model, &mut g, mention, entities)?;
                Ok(g.value(logits).data().to_vec())
            }
        }
    }
}

impl Ranker for ModelRanker<'_> {
    fn rank(&self, mention: &MentionRecord, candidates: &CandidateSet) -> Result<RankedPrediction> {
        if candidates.is_empty() {
            return Ok(rank(&mention.mention_id, &[], &[]));
        }
        let entities = self.entities(mention, candidates)?;
        let pooled = self.pooled_scores(mention, &entities)?;
        let ids: Vec<String> = candidates.entity_ids().map(str::to_string).collect();
        Ok(rank(&mention.mention_id, &ids, &pooled))
    }
}

/// Ranks every mention's candidate set (truncated to `k`), in mention order.
pub fn predict_all<'m, R, I>(
    ranker: &R,
    mentions: I,
    candidates: &CandidateMap,
    k: usize,
) -> Result<Vec<RankedPrediction>>
where
    R: Ranker + Sync + ?Sized,
    I: IntoIterator<Item = &'m MentionRecord>,
{
    let mentions: Vec<&MentionRecord> = mentions.into_iter().collect();
    mentions
        .par_iter()
        .map(|m| {
            let set = candidates
                .get(&m.mention_id)
                .ok_or_else(|| Error::MissingCandidates(m.mention_id.clone()))?;
            ranker.rank(m, &set.truncated(k))
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[RankedPrediction]) -> Result<()> {
    io::write_jsonl(path, preds)
}

pub fn read_predictions(path: &Path) -> Result<Vec<RankedPrediction>> {
    io::read_jsonl(path)
}
