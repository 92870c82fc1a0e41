//! Input layouts and the reading pass.
//!
//! Mention input: `[CLS] ctxt_l [START] m [END] ctxt_r [SEP]`.
//! Entity read:   `[PRE_1..PRE_Lp] entity [SEP] ctxt_l [START] m [END] ctxt_r [SEP]`,
//! i.e. the prefix, the entity text, then the mention input minus its `[CLS]`.
//! The first `L_p` output rows of an entity read are the candidate's
//! mention-aware representation.

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityRecord, MentionRecord};
use crate::encoder::{EmbeddingSequence, Encoder, Model, PositionPolicy, TokenSequence, Tokenizer};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, Var};

/// Token layout of one mention with the positions of its markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionInput {
    tokens: TokenSequence,
    start_marker: usize,
    end_marker: usize,
}

impl MentionInput {
    pub fn tokens(&self) -> &TokenSequence {
        &self.tokens
    }

    pub fn ids(&self) -> &[u32] {
        self.tokens.ids()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn start_marker(&self) -> usize {
        self.start_marker
    }

    pub fn end_marker(&self) -> usize {
        self.end_marker
    }

    /// Everything after `[CLS]`.
    pub fn core(&self) -> &[u32] {
        &self.tokens.ids()[1..]
    }
}

/// Token layout `[Prefix; entity; mention]` for one candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityReadInput {
    tokens: TokenSequence,
    prefix_len: usize,
}

impl EntityReadInput {
    pub fn ids(&self) -> &[u32] {
        self.tokens.ids()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }
}

/// `L_p x d` prefix rows of an entity read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MentionAwareEntityRep(pub EmbeddingSequence);

impl MentionAwareEntityRep {
    pub fn rows(&self) -> usize {
        self.0.len()
    }

    pub fn matrix(&self) -> &Matrix {
        self.0.matrix()
    }
}

/// Text fed for an entity: its description, led by the title unless the
/// description already starts with it.
pub fn entity_text(entity: &EntityRecord) -> String {
    if entity.description.starts_with(&entity.title) {
        entity.description.clone()
    } else {
        format!("{} {}", entity.title, entity.description)
    }
}

/// Builds the mention layout within `budget` tokens, trimming context from
/// the far ends so the kept window stays centered on the mention.
pub fn build_mention_input(
    tokenizer: &Tokenizer,
    mention: &MentionRecord,
    budget: usize,
) -> Result<MentionInput> {
    let surface = tokenizer.tokenize(&mention.surface);
    if surface.len() + 4 > budget {
        return Err(Error::TooLong {
            len: surface.len() + 4,
            limit: budget,
        });
    }
    let left = tokenizer.tokenize(&mention.left_context);
    let right = tokenizer.tokenize(&mention.right_context);
    let avail = budget - 4 - surface.len();
    let (nl, nr) = (left.len(), right.len());
    let mut keep_left = nl.min(avail / 2);
    let keep_right = nr.min(avail - keep_left);
    keep_left = nl.min(avail - keep_right);

    let s = tokenizer.specials();
    let mut ids = Vec::with_capacity(keep_left + keep_right + surface.len() + 4);
    ids.push(s.cls);
    ids.extend_from_slice(&left.ids()[nl - keep_left..]);
    let start_marker = ids.len();
    ids.push(s.start);
    ids.extend_from_slice(surface.ids());
    let end_marker = ids.len();
    ids.push(s.end);
    ids.extend_from_slice(&right.ids()[..keep_right]);
    ids.push(s.sep);
    Ok(MentionInput {
        tokens: TokenSequence::new(ids),
        start_marker,
        end_marker,
    })
}

/// Builds `[PRE_1..PRE_Lp] entity [SEP] mention-core`; the entity segment is
/// cut to `segment_len - 1` tokens so it fits with its `[SEP]`.
pub fn build_entity_input(
    tokenizer: &Tokenizer,
    entity: &EntityRecord,
    mention: &MentionInput,
    segment_len: usize,
) -> EntityReadInput {
    let prefix = tokenizer.prefix_ids();
    let ent = tokenizer.tokenize(&entity_text(entity));
    let keep = ent.len().min(segment_len.saturating_sub(1));
    let mut ids = Vec::with_capacity(prefix.len() + keep + 1 + mention.core().len());
    ids.extend_from_slice(&prefix);
    ids.extend_from_slice(&ent.ids()[..keep]);
    ids.push(tokenizer.specials().sep);
    ids.extend_from_slice(mention.core());
    EntityReadInput {
        tokens: TokenSequence::new(ids),
        prefix_len: prefix.len(),
    }
}

/// Checks the mention layout by scanning ids.
pub fn check_mention_layout(tokenizer: &Tokenizer, ids: &[u32]) -> bool {
    let s = tokenizer.specials();
    let starts: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == s.start).map(|(i, _)| i).collect();
    let ends: Vec<usize> = ids.iter().enumerate().filter(|(_, &t)| t == s.end).map(|(i, _)| i).collect();
    ids.first() == Some(&s.cls)
        && ids.last() == Some(&s.sep)
        && starts.len() == 1
        && ends.len() == 1
        && starts[0] + 1 < ends[0]
}

/// Checks the entity-read layout by scanning ids.
pub fn check_entity_layout(tokenizer: &Tokenizer, ids: &[u32]) -> bool {
    let prefix = tokenizer.prefix_ids();
    let lp = prefix.len();
    if ids.len() < lp || ids[..lp] != prefix[..] {
        return false;
    }
    if ids[lp..].iter().any(|t| prefix.contains(t)) {
        return false;
    }
    let sep = tokenizer.specials().sep;
    let Some(first_sep) = ids[lp..].iter().position(|&t| t == sep) else {
        return false;
    };
    let mut core = vec![tokenizer.specials().cls];
    core.extend_from_slice(&ids[lp + first_sep + 1..]);
    check_mention_layout(tokenizer, &core)
}

/// Token ids paired with their surface strings, for layout debugging.
pub fn describe_layout(tokenizer: &Tokenizer, ids: &[u32]) -> Vec<(u32, String)> {
    ids.iter()
        .map(|&id| (id, tokenizer.token(id).unwrap_or("?").to_string()))
        .collect()
}

/// Tape handles produced by one packed reading pass.
pub struct ReadOutput {
    /// All `L_m` rows of the mention encoding, if a mention was read.
    pub mention: Option<Var>,
    /// One `L_p`-row block per entity read.
    pub prefixes: Vec<Var>,
}

/// Encodes the mention (optional) and every entity read in one packed pass.
pub fn read_on_graph(
    encoder: &Encoder,
    g: &mut Graph,
    mention: Option<&MentionInput>,
    entities: &[EntityReadInput],
) -> Result<ReadOutput> {
    let mut seqs: Vec<&[u32]> = Vec::with_capacity(entities.len() + 1);
    if let Some(m) = mention {
        seqs.push(m.ids());
    }
    seqs.extend(entities.iter().map(|e| e.ids()));
    if seqs.is_empty() {
        return Ok(ReadOutput {
            mention: None,
            prefixes: Vec::new(),
        });
    }
    let (out, segments) = encoder.forward_tokens(g, &seqs)?;
    let mut segs = segments.into_iter();
    let mention = match mention {
        Some(_) => {
            let (start, len) = segs.next().expect("mention segment");
            let rows: Vec<usize> = (start..start + len).collect();
            Some(g.rows(out, &rows))
        }
        None => None,
    };
    let prefixes = segs
        .zip(entities)
        .map(|((start, _), e)| {
            let rows: Vec<usize> = (start..start + e.prefix_len()).collect();
            g.rows(out, &rows)
        })
        .collect();
    Ok(ReadOutput { mention, prefixes })
}

/// `H^m` for one mention input, in inference mode.
pub fn read_mention(model: &Model, input: &MentionInput) -> Result<EmbeddingSequence> {
    model
        .encoder
        .encode_tokens(&model.store, input.ids(), &PositionPolicy::Sequential)
}

/// `P^e` for one (entity, mention) pair, in inference mode.
pub fn read_entity(
    model: &Model,
    entity: &EntityRecord,
    mention: &MentionRecord,
) -> Result<MentionAwareEntityRep> {
    let seg = model.config().segment_len;
    let m = build_mention_input(&model.tokenizer, mention, seg)?;
    let input = build_entity_input(&model.tokenizer, entity, &m, seg);
    let h = model
        .encoder
        .encode_tokens(&model.store, input.ids(), &PositionPolicy::Sequential)?;
    let rows: Vec<usize> = (0..input.prefix_len()).collect();
    Ok(MentionAwareEntityRep(EmbeddingSequence::new(
        h.matrix().select_rows(&rows),
    )))
}
