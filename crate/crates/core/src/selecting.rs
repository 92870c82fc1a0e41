//! Fusion of the mention with every candidate block, token labeling, and
//! max-pooled ranking.
//!
//! The fused sequence is `[H^m; P^{e_1}; ...; P^{e_k}]`. Mention rows take
//! positions `0..L_m`; every candidate block reuses the same positions
//! `L_m..L_m + L_p`, so the encoder output is equivariant to block order and
//! the prediction does not depend on how candidates are listed.

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityRecord, MentionRecord};
use crate::encoder::{EmbeddingSequence, Encoder, Head, Model};
use crate::error::{Error, Result};
use crate::reading::{build_entity_input, build_mention_input, read_on_graph, MentionAwareEntityRep};
use crate::tensor::{bce_value, Graph, Matrix, Var};

/// Probability clamp applied before logs in the labeling loss.
pub const BCE_EPS: f64 = 1e-7;

/// What a fused row holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowRole {
    Mention(usize),
    /// `token`-th prefix row of original candidate `candidate`.
    Candidate { candidate: usize, token: usize },
}

/// Row roles and position ids of a fused sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedLayout {
    pub mention_len: usize,
    pub prefix_len: usize,
    pub order: Vec<usize>,
    pub roles: Vec<RowRole>,
    pub positions: Vec<usize>,
}

impl FusedLayout {
    /// Layout for blocks placed in `order` (block `b` holds candidate `order[b]`).
    pub fn new(mention_len: usize, prefix_len: usize, order: &[usize]) -> Result<Self> {
        let k = order.len();
        if k == 0 {
            return Err(Error::InvalidRecord("fusion needs at least one candidate".into()));
        }
        let mut seen = vec![false; k];
        for &j in order {
            if j >= k || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidRecord(format!(
                    "candidate order {order:?} is not a permutation"
                )));
            }
        }
        let mut roles: Vec<RowRole> = (0..mention_len).map(RowRole::Mention).collect();
        let mut positions: Vec<usize> = (0..mention_len).collect();
        for &candidate in order {
            for token in 0..prefix_len {
                roles.push(RowRole::Candidate { candidate, token });
                positions.push(mention_len + token);
            }
        }
        Ok(Self {
            mention_len,
            prefix_len,
            order: order.to_vec(),
            roles,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn num_candidates(&self) -> usize {
        self.order.len()
    }

    /// Fused row indices of all candidate rows, in fused order.
    pub fn candidate_rows(&self) -> Vec<usize> {
        (self.mention_len..self.len()).collect()
    }

    /// 0/1 labels for the candidate rows, in fused order.
    pub fn labels(&self, gold: usize) -> Vec<f64> {
        self.roles[self.mention_len..]
            .iter()
            .map(|r| match r {
                RowRole::Candidate { candidate, .. } if *candidate == gold => 1.0,
                _ => 0.0,
            })
            .collect()
    }

    fn check_capacity(&self, max_positions: usize) -> Result<()> {
        if self.len() > max_positions {
            return Err(Error::FusedTooLong {
                len: self.len(),
                limit: max_positions,
            });
        }
        Ok(())
    }
}

/// Materialized fused input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedInput {
    pub rows: EmbeddingSequence,
    pub layout: FusedLayout,
}

/// Concatenates `H^m` with the candidate blocks arranged by `order`.
pub fn fuse(
    mention: &EmbeddingSequence,
    candidates: &[MentionAwareEntityRep],
    order: &[usize],
    max_positions: usize,
) -> Result<FusedInput> {
    if order.len() != candidates.len() {
        return Err(Error::LengthMismatch(format!(
            "order of length {} for {} candidates",
            order.len(),
            candidates.len()
        )));
    }
    let d = mention.width();
    let lp = candidates.first().map_or(0, MentionAwareEntityRep::rows);
    for c in candidates {
        if c.0.width() != d {
            return Err(Error::WidthMismatch {
                expected: d,
                got: c.0.width(),
            });
        }
        if c.rows() != lp {
            return Err(Error::LengthMismatch("candidate blocks differ in length".into()));
        }
    }
    let layout = FusedLayout::new(mention.len(), lp, order)?;
    layout.check_capacity(max_positions)?;
    let mut data = Vec::with_capacity(layout.len() * d);
    data.extend_from_slice(mention.matrix().data());
    for &j in order {
        data.extend_from_slice(candidates[j].matrix().data());
    }
    Ok(FusedInput {
        rows: EmbeddingSequence::new(Matrix::from_vec(layout.len(), d, data)),
        layout,
    })
}

/// Tape version of [`fuse`].
pub fn fuse_on_graph(
    g: &mut Graph,
    mention: Var,
    prefixes: &[Var],
    order: &[usize],
    max_positions: usize,
) -> Result<(Var, FusedLayout)> {
    if order.len() != prefixes.len() {
        return Err(Error::LengthMismatch("order and candidate count differ".into()));
    }
    let lp = prefixes.first().map_or(0, |&p| g.value(p).rows());
    let layout = FusedLayout::new(g.value(mention).rows(), lp, order)?;
    layout.check_capacity(max_positions)?;
    let mut parts = vec![mention];
    parts.extend(order.iter().map(|&j| prefixes[j]));
    Ok((g.concat_rows(&parts), layout))
}

/// Selecting pass: encoder over the fused rows, head + sigmoid on candidate rows.
/// Returns probabilities for the candidate rows in fused order.
pub fn select_on_graph(
    encoder: &Encoder,
    head: &Head,
    g: &mut Graph,
    fused: Var,
    layout: &FusedLayout,
) -> Result<Var> {
    let out = encoder.forward(g, fused, &layout.positions, &[(0, layout.len())])?;
    let cand = g.rows(out, &layout.candidate_rows());
    let logits = head.logits(g, cand);
    Ok(g.sigmoid(logits))
}

/// Per-candidate token scores, indexed by original candidate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub per_candidate: Vec<Vec<f64>>,
}

impl TokenScores {
    /// Regroups fused-order candidate-row scores by original candidate.
    pub fn from_fused(values: &[f64], layout: &FusedLayout) -> Self {
        let mut per_candidate = vec![vec![0.0; layout.prefix_len]; layout.num_candidates()];
        for (v, role) in values.iter().zip(&layout.roles[layout.mention_len..]) {
            if let RowRole::Candidate { candidate, token } = role {
                per_candidate[*candidate][*token] = *v;
            }
        }
        Self { per_candidate }
    }

    pub fn num_candidates(&self) -> usize {
        self.per_candidate.len()
    }

    /// Max-pooled score of each candidate.
    pub fn pooled(&self) -> Vec<f64> {
        self.per_candidate
            .iter()
            .map(|t| t.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// Mean clamped BCE with all tokens of `gold` labeled 1 and all others 0.
pub fn bce_loss(scores: &TokenScores, gold: usize) -> Result<f64> {
    let n = scores.num_candidates();
    if gold >= n {
        return Err(Error::GoldOutOfRange { index: gold, count: n });
    }
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for (j, toks) in scores.per_candidate.iter().enumerate() {
        for &p in toks {
            probs.push(p);
            labels.push(if j == gold { 1.0 } else { 0.0 });
        }
    }
    Ok(bce_value(&probs, &labels, BCE_EPS))
}

/// Ranked output for one mention; also the prediction-dump record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub mention_id: String,
    pub predicted: Option<String>,
    pub entity_ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Ranks candidates (given in retrieval order) by pooled score; ties go to
/// the better retrieval rank.
pub fn rank(mention_id: &str, candidate_ids: &[String], pooled: &[f64]) -> RankedPrediction {
    let mut order: Vec<usize> = (0..candidate_ids.len().min(pooled.len())).collect();
    order.sort_by(|&a, &b| pooled[b].total_cmp(&pooled[a]).then(a.cmp(&b)));
    RankedPrediction {
        mention_id: mention_id.to_string(),
        predicted: order.first().map(|&j| candidate_ids[j].clone()),
        entity_ids: order.iter().map(|&j| candidate_ids[j].clone()).collect(),
        scores: order.iter().map(|&j| pooled[j]).collect(),
    }
}

/// Inference-mode token scores for one materialized fused input.
pub fn score_tokens(model: &Model, fused: &FusedInput) -> Result<TokenScores> {
    let mut g = Graph::new(&model.store);
    let x = g.input(fused.rows.matrix().clone());
    let probs = select_on_graph(&model.encoder, &model.head, &mut g, x, &fused.layout)?;
    Ok(TokenScores::from_fused(g.value(probs).data(), &fused.layout))
}

/// Full read-and-select forward on the tape; returns candidate-row
/// probabilities in fused order and the layout.
pub fn res_forward(
    model: &Model,
    g: &mut Graph,
    mention: &MentionRecord,
    entities: &[&EntityRecord],
    order: &[usize],
) -> Result<(Var, FusedLayout)> {
    let seg = model.config().segment_len;
    let mi = build_mention_input(&model.tokenizer, mention, seg)?;
    let reads: Vec<_> = entities
        .iter()
        .map(|e| build_entity_input(&model.tokenizer, e, &mi, seg))
        .collect();
    let out = read_on_graph(&model.encoder, g, Some(&mi), &reads)?;
    let hm = out.mention.expect("mention was read");
    let (fused, layout) = fuse_on_graph(g, hm, &out.prefixes, order, model.config().max_positions)?;
    let probs = select_on_graph(&model.encoder, &model.head, g, fused, &layout)?;
    Ok((probs, layout))
}

/// Inference-mode token scores for a mention against its candidates.
pub fn res_token_scores(
    model: &Model,
    mention: &MentionRecord,
    entities: &[&EntityRecord],
    order: &[usize],
) -> Result<TokenScores> {
    let mut g = Graph::new(&model.store);
    let (probs, layout) = res_forward(model, &mut g, mention, entities, order)?;
    Ok(TokenScores::from_fused(g.value(probs).data(), &layout))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, d: usize, base: f64) -> EmbeddingSequence {
        EmbeddingSequence::new(Matrix::from_vec(
            rows,
            d,
            (0..rows * d).map(|i| base + i as f64).collect(),
        ))
    }

    fn rep(rows: usize, d: usize, base: f64) -> MentionAwareEntityRep {
        MentionAwareEntityRep(seq(rows, d, base))
    }

    #[test]
    fn fused_length_and_shared_positions() {
        let hm = seq(10, 4, 0.0);
        let reps: Vec<_> = (0..4).map(|j| rep(3, 4, 100.0 * (j + 1) as f64)).collect();
        let f = fuse(&hm, &reps, &[0, 1, 2, 3], 64).unwrap();
        assert_eq!(f.rows.len(), 22);
        assert_eq!(&f.layout.positions[..10], &(0..10).collect::<Vec<_>>()[..]);
        for b in 0..4 {
            assert_eq!(&f.layout.positions[10 + 3 * b..13 + 3 * b], &[10, 11, 12]);
        }
        let single = fuse(&hm, &reps[..1], &[0], 64).unwrap();
        assert_eq!(single.rows.len(), 13);
    }

    #[test]
    fn orders_permute_blocks_and_track_candidates() {
        let hm = seq(2, 3, 0.0);
        let reps: Vec<_> = (0..3).map(|j| rep(2, 3, 10.0 * (j + 1) as f64)).collect();
        let a = fuse(&hm, &reps, &[0, 1, 2], 64).unwrap();
        let b = fuse(&hm, &reps, &[2, 0, 1], 64).unwrap();
        let mut ra: Vec<Vec<u64>> = (0..a.rows.len())
            .map(|i| a.rows.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut rb: Vec<Vec<u64>> = (0..b.rows.len())
            .map(|i| b.rows.row(i).iter().map(|v| v.to_bits()).collect())
            .collect();
        ra.sort();
        rb.sort();
        assert_eq!(ra, rb);
        assert_eq!(b.layout.roles[2], RowRole::Candidate { candidate: 2, token: 0 });
        assert_eq!(b.rows.row(2), reps[2].matrix().row(0));
    }

    #[test]
    fn fuse_errors() {
        let hm = seq(10, 4, 0.0);
        let reps: Vec<_> = (0..4).map(|_| rep(3, 4, 0.0)).collect();
        assert!(matches!(
            fuse(&hm, &reps, &[0, 1, 2, 3], 21),
            Err(Error::FusedTooLong { len: 22, limit: 21 })
        ));
        let narrow = vec![rep(3, 5, 0.0)];
        assert!(matches!(fuse(&hm, &narrow, &[0], 64), Err(Error::WidthMismatch { .. })));
        assert!(fuse(&hm, &reps[..2], &[0, 0], 64).is_err());
        assert!(fuse(&hm, &[], &[], 64).is_err());
    }

    #[test]
    fn labels_follow_gold_candidate() {
        let layout = FusedLayout::new(2, 2, &[1, 0, 2]).unwrap();
        assert_eq!(layout.labels(0), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn loss_reference_values() {
        let half = TokenScores {
            per_candidate: vec![vec![0.5; 3]; 4],
        };
        assert!((bce_loss(&half, 2).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = TokenScores {
            per_candidate: vec![vec![0.0; 3], vec![1.0; 3], vec![0.0; 3]],
        };
        assert!(bce_loss(&perfect, 1).unwrap() <= 1e-6);
        assert!(matches!(
            bce_loss(&perfect, 3),
            Err(Error::GoldOutOfRange { index: 3, count: 3 })
        ));
    }

    #[test]
    fn loss_drops_as_gold_token_rises() {
        let mut s = TokenScores {
            per_candidate: vec![vec![0.3, 0.4], vec![0.6, 0.2]],
        };
        let mut prev = bce_loss(&s, 0).unwrap();
        for p in [0.5, 0.7, 0.9, 0.99] {
            s.per_candidate[0][1] = p;
            let l = bce_loss(&s, 0).unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn rank_max_pools_and_breaks_ties_by_retrieval() {
        let s = TokenScores {
            per_candidate: vec![vec![0.2, 0.9, 0.4], vec![0.5, 0.5, 0.5], vec![0.9, 0.1, 0.1]],
        };
        assert_eq!(s.pooled(), vec![0.9, 0.5, 0.9]);
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = rank("m", &ids, &s.pooled());
        assert_eq!(r.predicted.as_deref(), Some("a"));
        assert_eq!(r.entity_ids, vec!["a", "c", "b"]);
        let one = rank("m", &ids[..1], &[0.01]);
        assert_eq!(one.predicted.as_deref(), Some("a"));
    }
}
