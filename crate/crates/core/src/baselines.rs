//! Comparison systems sharing the corpus, tokenizer and encoder code.
//!
//! * Cross-encoder: `[CLS] mention-core entity [SEP]` per pair, scored by a
//!   linear head on the `[CLS]` row and trained with softmax cross entropy
//!   over the candidate list.
//! * Reading-only: the entity reads of the full system, with the head applied
//!   directly to each candidate's prefix rows and max-pooled; no fusion.
//!
//! Both score each candidate independently of the others.

use crate::corpus::{EntityRecord, MentionRecord};
use crate::encoder::{Model, TokenSequence, Tokenizer};
use crate::error::Result;
use crate::reading::{build_entity_input, build_mention_input, entity_text, read_on_graph, MentionInput};
use crate::tensor::{Graph, Var};

/// `[CLS] ctxt_l [START] m [END] ctxt_r [SEP] entity [SEP]`.
pub fn build_cross_input(
    tokenizer: &Tokenizer,
    mention: &MentionInput,
    entity: &EntityRecord,
    segment_len: usize,
) -> TokenSequence {
    let s = tokenizer.specials();
    let ent = tokenizer.tokenize(&entity_text(entity));
    let keep = ent.len().min(segment_len.saturating_sub(1));
    let mut ids = Vec::with_capacity(mention.len() + keep + 1);
    ids.push(s.cls);
    ids.extend_from_slice(mention.core());
    ids.extend_from_slice(&ent.ids()[..keep]);
    ids.push(s.sep);
    TokenSequence::new(ids)
}

/// One logit per candidate from the `[CLS]` rows of independent pair encodings.
pub fn cross_encoder_logits(
    model: &Model,
    g: &mut Graph,
    mention: &MentionRecord,
    entities: &[&EntityRecord],
) -> Result<Var> {
    let seg = model.config().segment_len;
    let mi = build_mention_input(&model.tokenizer, mention, seg)?;
    let inputs: Vec<TokenSequence> = entities
        .iter()
        .map(|e| build_cross_input(&model.tokenizer, &mi, e, seg))
        .collect();
    let seqs: Vec<&[u32]> = inputs.iter().map(TokenSequence::ids).collect();
    let (out, segments) = model.encoder.forward_tokens(g, &seqs)?;
    let cls_rows: Vec<usize> = segments.iter().map(|s| s.0).collect();
    let cls = g.rows(out, &cls_rows);
    Ok(model.head.logits(g, cls))
}

/// Sigmoid token scores of each candidate's prefix rows, candidate-major.
pub fn reading_only_probs(
    model: &Model,
    g: &mut Graph,
    mention: &MentionRecord,
    entities: &[&EntityRecord],
) -> Result<Var> {
    let seg = model.config().segment_len;
    let mi = build_mention_input(&model.tokenizer, mention, seg)?;
    let reads: Vec<_> = entities
        .iter()
        .map(|e| build_entity_input(&model.tokenizer, e, &mi, seg))
        .collect();
    let out = read_on_graph(&model.encoder, g, None, &reads)?;
    let stacked = g.concat_rows(&out.prefixes);
    let logits = model.head.logits(g, stacked);
    Ok(g.sigmoid(logits))
}

/// Cross-encoder score of a single (mention, entity) pair.
pub fn cross_encoder_score(model: &Model, mention: &MentionRecord, entity: &EntityRecord) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let logits = cross_encoder_logits(model, &mut g, mention, &[entity])?;
    Ok(g.value(logits).get(0, 0))
}

/// Max-pooled reading-only score of a single (mention, entity) pair.
pub fn reading_only_score(model: &Model, mention: &MentionRecord, entity: &EntityRecord) -> Result<f64> {
    let mut g = Graph::new(&model.store);
    let probs = reading_only_probs(model, &mut g, mention, &[entity])?;
    Ok(max_pool(g.value(probs).data()))
}

pub fn max_pool(scores: &[f64]) -> f64 {
    scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, System};

    fn model(system: System) -> Model {
        let tok = Tokenizer::train(
            ["Indiana Jones is a minifigure", "Henry Jones is a professor", "the father of"],
            200,
            3,
        );
        let mut cfg = EncoderConfig::desk(0);
        cfg.hidden = 16;
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.ffn = 32;
        cfg.segment_len = 16;
        cfg.max_positions = 64;
        Model::init(system, tok, cfg, 4).unwrap()
    }

    fn mention() -> MentionRecord {
        MentionRecord {
            mention_id: "m".into(),
            surface: "Indiana Jones".into(),
            left_context: "the father of".into(),
            right_context: "is a professor".into(),
            gold_entity_id: "a".into(),
            domain: "d".into(),
        }
    }

    fn entities() -> Vec<EntityRecord> {
        ["Indiana Jones is a minifigure", "Henry Jones is a professor", "Jones"]
            .iter()
            .enumerate()
            .map(|(i, d)| EntityRecord {
                entity_id: format!("e{i}"),
                title: d.split(" is").next().unwrap().to_string(),
                description: d.to_string(),
                domain: "d".into(),
            })
            .collect()
    }

    #[test]
    fn cross_input_layout() {
        let m = model(System::CrossEncoder);
        let t = &m.tokenizer;
        let mi = build_mention_input(t, &mention(), 16).unwrap();
        let ents = entities();
        let x = build_cross_input(t, &mi, &ents[0], 16);
        let s = t.specials();
        assert_eq!(x.ids()[0], s.cls);
        assert_eq!(*x.ids().last().unwrap(), s.sep);
        assert_eq!(x.ids().iter().filter(|&&i| i == s.sep).count(), 2);
        assert_eq!(&x.ids()[1..mi.len()], mi.core());
    }

    #[test]
    fn cross_encoder_scores_each_pair_independently() {
        let m = model(System::CrossEncoder);
        let ents = entities();
        let refs: Vec<&EntityRecord> = ents.iter().collect();
        let mut g = Graph::new(&m.store);
        let logits = cross_encoder_logits(&m, &mut g, &mention(), &refs).unwrap();
        assert_eq!(g.value(logits).rows(), 3);
        for (j, e) in ents.iter().enumerate() {
            let alone = cross_encoder_score(&m, &mention(), e).unwrap();
            assert!((alone - g.value(logits).get(j, 0)).abs() < 1e-12);
            assert_eq!(alone, cross_encoder_score(&m, &mention(), e).unwrap());
        }
    }

    #[test]
    fn reading_only_is_candidate_set_independent() {
        let m = model(System::ResNoSelect);
        let ents = entities();
        let all: Vec<&EntityRecord> = ents.iter().collect();
        let mut g = Graph::new(&m.store);
        let probs = reading_only_probs(&m, &mut g, &mention(), &all).unwrap();
        let p = g.value(probs).data().to_vec();
        assert_eq!(p.len(), 9);
        let mut g2 = Graph::new(&m.store);
        let sub = reading_only_probs(&m, &mut g2, &mention(), &all[1..]).unwrap();
        for (a, b) in p[3..].iter().zip(g2.value(sub).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let s = reading_only_score(&m, &mention(), &ents[0]).unwrap();
        assert!((s - max_pool(&p[..3])).abs() < 1e-12);
    }

    #[test]
    fn max_pool_picks_largest_token() {
        assert_eq!(max_pool(&[0.1, 0.7, 0.3]), 0.7);
    }
}
