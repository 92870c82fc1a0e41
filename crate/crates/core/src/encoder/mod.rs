//! The shared transformer encoder.
//!
//! One parameter set serves every pass: token inputs (mention and entity
//! reads) and continuous inputs (the fused selecting pass). Sequences are
//! packed row-wise; each segment attends only within itself, so a batch of
//! variable-length inputs needs no padding.

mod checkpoint;
mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, CHECKPOINT_VERSION};
pub use tokenizer::{SpecialIds, TokenSequence, Tokenizer, CLS, END, PAD, SEP, START, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    /// Number of prefix tokens (L_p).
    pub prefix_len: usize,
    /// Token budget of one mention or entity segment.
    pub segment_len: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// 4 layers, width 128, 4 heads, 512 positions, L_p = 3, 64-token segments.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 128,
            layers: 4,
            heads: 4,
            ffn: 512,
            max_positions: 512,
            prefix_len: 3,
            segment_len: 64,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    /// Base-size shape with 256-token segments.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden: 768,
            layers: 12,
            heads: 12,
            ffn: 3072,
            max_positions: 1024,
            prefix_len: 3,
            segment_len: 256,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    /// Longest entity-read input: prefix, entity segment, mention segment.
    pub fn max_read_len(&self) -> usize {
        self.prefix_len + 2 * self.segment_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} must be a positive multiple of head count {}",
                self.hidden, self.heads
            )));
        }
        if self.prefix_len == 0 {
            return Err(Error::Config("prefix length must be at least 1".into()));
        }
        if self.segment_len < 5 {
            return Err(Error::Config("segment budget must be at least 5".into()));
        }
        if self.max_positions < self.max_read_len() {
            return Err(Error::Config(format!(
                "max positions {} below entity-read length {}",
                self.max_positions,
                self.max_read_len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-token vectors of width d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSequence(Matrix);

impl EmbeddingSequence {
    pub fn new(m: Matrix) -> Self {
        Self(m)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// How positions are assigned to token inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PositionPolicy {
    /// `0..len` within each segment.
    Sequential,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-norm transformer encoder; parameters live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerParams>,
    final_ln_g: ParamId,
    final_ln_b: ParamId,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

fn ones(cols: usize) -> Matrix {
    Matrix::from_vec(1, cols, vec![1.0; cols])
}

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl Encoder {
    /// Registers freshly initialized weights in `store`.
    pub fn init(config: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.hidden, config.ffn);
        let std = 0.02;
        let tok_emb = store.add("encoder.tok_emb", normal(rng, config.vocab_size, d, 1.0));
        let pos_emb = store.add("encoder.pos_emb", normal(rng, config.max_positions, d, std));
        let emb_ln_g = store.add("encoder.emb_ln.g", ones(d));
        let emb_ln_b = store.add("encoder.emb_ln.b", Matrix::zeros(1, d));
        let layers = (0..config.layers)
            .map(|l| {
                let mut add = |name: &str, m: Matrix| store.add(format!("encoder.layer{l}.{name}"), m);
                LayerParams {
                    ln1_g: add("ln1.g", ones(d)),
                    ln1_b: add("ln1.b", Matrix::zeros(1, d)),
                    wq: add("attn.wq", normal(rng, d, d, fan_in_std(d))),
                    bq: add("attn.bq", Matrix::zeros(1, d)),
                    wk: add("attn.wk", normal(rng, d, d, fan_in_std(d))),
                    bk: add("attn.bk", Matrix::zeros(1, d)),
                    wv: add("attn.wv", normal(rng, d, d, fan_in_std(d))),
                    bv: add("attn.bv", Matrix::zeros(1, d)),
                    wo: add("attn.wo", normal(rng, d, d, fan_in_std(d))),
                    bo: add("attn.bo", Matrix::zeros(1, d)),
                    ln2_g: add("ln2.g", ones(d)),
                    ln2_b: add("ln2.b", Matrix::zeros(1, d)),
                    w1: add("ffn.w1", normal(rng, d, f, fan_in_std(d))),
                    b1: add("ffn.b1", Matrix::zeros(1, f)),
                    w2: add("ffn.w2", normal(rng, f, d, fan_in_std(f))),
                    b2: add("ffn.b2", Matrix::zeros(1, d)),
                }
            })
            .collect();
        let final_ln_g = store.add("encoder.final_ln.g", ones(d));
        let final_ln_b = store.add("encoder.final_ln.b", Matrix::zeros(1, d));
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            final_ln_g,
            final_ln_b,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.tok_emb
    }

    /// Parameter ids of one attention block, in (wq, wk, wv, wo) order.
    pub fn attention_param_ids(&self, layer: usize) -> [ParamId; 4] {
        let l = &self.layers[layer];
        [l.wq, l.wk, l.wv, l.wo]
    }

    pub fn ffn_param_ids(&self, layer: usize) -> [ParamId; 2] {
        let l = &self.layers[layer];
        [l.w1, l.w2]
    }

    /// Input-layer token embeddings (no positions yet).
    pub fn embed_tokens(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::InvalidRecord(format!("token id {bad} outside vocabulary")));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(g.gather(self.tok_emb, &idx))
    }

    /// Runs the encoder over packed continuous inputs.
    ///
    /// `x` holds one row per token; `positions` assigns each row a position id;
    /// `segments` lists `(start, len)` blocks that attend only within themselves.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        positions: &[usize],
        segments: &[(usize, usize)],
    ) -> Result<Var> {
        let xm = g.value(x);
        if xm.cols() != self.config.hidden {
            return Err(Error::WidthMismatch {
                expected: self.config.hidden,
                got: xm.cols(),
            });
        }
        if positions.len() != xm.rows() {
            return Err(Error::LengthMismatch(format!(
                "{} positions for {} rows",
                positions.len(),
                xm.rows()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::TooLong {
                len: p + 1,
                limit: self.config.max_positions,
            });
        }
        let mut covered = 0;
        for &(start, len) in segments {
            if start != covered || len == 0 {
                return Err(Error::LengthMismatch("segments must tile the rows".into()));
            }
            covered += len;
        }
        if covered != xm.rows() {
            return Err(Error::LengthMismatch("segments must tile the rows".into()));
        }
        let eps = self.config.layer_norm_eps;
        let pos = g.gather(self.pos_emb, positions);
        let h = g.add(x, pos);
        let h = g.layer_norm(h, self.emb_ln_g, self.emb_ln_b, eps);
        let mut h = g.dropout(h);
        for l in &self.layers {
            let n = g.layer_norm(h, l.ln1_g, l.ln1_b, eps);
            let q = g.linear(n, l.wq, l.bq);
            let k = g.linear(n, l.wk, l.bk);
            let v = g.linear(n, l.wv, l.bv);
            let a = g.attention(q, k, v, self.config.heads, segments);
            let a = g.linear(a, l.wo, l.bo);
            let a = g.dropout(a);
            h = g.add(h, a);
            let n = g.layer_norm(h, l.ln2_g, l.ln2_b, eps);
            let f = g.linear(n, l.w1, l.b1);
            let f = g.gelu(f);
            let f = g.linear(f, l.w2, l.b2);
            let f = g.dropout(f);
            h = g.add(h, f);
        }
        Ok(g.layer_norm(h, self.final_ln_g, self.final_ln_b, eps))
    }

    /// Encodes several token sequences packed into one pass.
    pub fn forward_tokens(&self, g: &mut Graph, seqs: &[&[u32]]) -> Result<(Var, Vec<(usize, usize)>)> {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() > self.config.max_positions {
                return Err(Error::TooLong {
                    len: s.len(),
                    limit: self.config.max_positions,
                });
            }
            segments.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        let x = self.embed_tokens(g, &ids)?;
        let out = self.forward(g, x, &positions, &segments)?;
        Ok((out, segments))
    }

    /// Inference-mode encoding of one token sequence.
    pub fn encode_tokens(
        &self,
        store: &ParamStore,
        ids: &[u32],
        policy: &PositionPolicy,
    ) -> Result<EmbeddingSequence> {
        if ids.len() > self.config.max_positions {
            return Err(Error::TooLong {
                len: ids.len(),
                limit: self.config.max_positions,
            });
        }
        if ids.is_empty() {
            return Ok(EmbeddingSequence(Matrix::zeros(0, self.config.hidden)));
        }
        let positions: Vec<usize> = match policy {
            PositionPolicy::Sequential => (0..ids.len()).collect(),
            PositionPolicy::Explicit(p) => p.clone(),
        };
        let mut g = Graph::new(store);
        let x = self.embed_tokens(&mut g, ids)?;
        let out = self.forward(&mut g, x, &positions, &[(0, ids.len())])?;
        Ok(EmbeddingSequence(g.value(out).clone()))
    }

    /// Inference-mode encoding of continuous inputs with caller-chosen positions.
    pub fn encode_embeddings(
        &self,
        store: &ParamStore,
        input: &EmbeddingSequence,
        positions: &[usize],
    ) -> Result<EmbeddingSequence> {
        if input.width() != self.config.hidden {
            return Err(Error::WidthMismatch {
                expected: self.config.hidden,
                got: input.width(),
            });
        }
        if input.is_empty() {
            return Ok(input.clone());
        }
        let mut g = Graph::new(store);
        let x = g.input(input.matrix().clone());
        let out = self.forward(&mut g, x, positions, &[(0, input.len())])?;
        Ok(EmbeddingSequence(g.value(out).clone()))
    }
}

/// Linear scoring head d -> 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Head {
    pub fn init(hidden: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str) -> Self {
        Self {
            weight: store.add(format!("{name}.w"), normal(rng, hidden, 1, 0.02)),
            bias: store.add(format!("{name}.b"), Matrix::zeros(1, 1)),
        }
    }

    /// One logit per row of `x`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.weight, self.bias)
    }
}

/// Which ranking system a model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    /// Reading then selecting.
    Res,
    /// Reading only: prefix rows scored without fusion.
    ResNoSelect,
    /// [CLS]-scored pairwise cross-encoder.
    CrossEncoder,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Res => "res",
            System::ResNoSelect => "res-no-select",
            System::CrossEncoder => "cross-encoder",
        }
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "res" => Ok(System::Res),
            "res-no-select" => Ok(System::ResNoSelect),
            "cross-encoder" => Ok(System::CrossEncoder),
            other => Err(Error::Config(format!("unknown system {other:?}"))),
        }
    }
}

/// Tokenizer, encoder, head and the weights they index.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub system: System,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub head: Head,
    pub store: ParamStore,
}

impl Model {
    pub fn init(system: System, tokenizer: Tokenizer, mut config: EncoderConfig, seed: u64) -> Result<Self> {
        config.vocab_size = tokenizer.vocab_size();
        if config.prefix_len != tokenizer.prefix_len() {
            return Err(Error::Config(format!(
                "encoder prefix length {} differs from tokenizer's {}",
                config.prefix_len,
                tokenizer.prefix_len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(config, &mut store, &mut rng)?;
        let head = Head::init(encoder.hidden(), &mut store, &mut rng, "head");
        Ok(Self {
            system,
            tokenizer,
            encoder,
            head,
            store,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        self.encoder.config()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Gradients;

    fn tiny(layers: usize, hidden: usize) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = EncoderConfig {
            vocab_size: 20,
            hidden,
            layers,
            heads: 2,
            ffn: 2 * hidden,
            max_positions: 40,
            prefix_len: 2,
            segment_len: 8,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        };
        let enc = Encoder::init(cfg, &mut store, &mut rng).unwrap();
        // spread the weights so outputs are far from degenerate
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".g") {
                continue;
            }
            for (i, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                *v += 0.3 * ((i * 7 + id.0 * 13) as f64).sin();
            }
        }
        (enc, store)
    }

    #[test]
    fn output_shape_matches_input() {
        let (enc, store) = tiny(2, 8);
        let out = enc
            .encode_tokens(&store, &[1, 2, 3, 4, 5, 6, 7], &PositionPolicy::Sequential)
            .unwrap();
        assert_eq!((out.len(), out.width()), (7, 8));
        let again = enc
            .encode_tokens(&store, &[1, 2, 3, 4, 5, 6, 7], &PositionPolicy::Sequential)
            .unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn overlong_input_is_rejected() {
        let (enc, store) = tiny(1, 8);
        let ids = vec![3u32; 41];
        assert!(matches!(
            enc.encode_tokens(&store, &ids, &PositionPolicy::Sequential),
            Err(Error::TooLong { .. })
        ));
    }

    #[test]
    fn swapping_tokens_with_shared_positions_swaps_outputs() {
        let (enc, store) = tiny(2, 8);
        let pos = PositionPolicy::Explicit(vec![0, 1, 2, 2, 3]);
        let a = enc.encode_tokens(&store, &[2, 9, 10, 11, 3], &pos).unwrap();
        let b = enc.encode_tokens(&store, &[2, 9, 11, 10, 3], &pos).unwrap();
        for c in 0..8 {
            assert!((a.row(2)[c] - b.row(3)[c]).abs() < 1e-12);
            assert!((a.row(3)[c] - b.row(2)[c]).abs() < 1e-12);
            assert!((a.row(0)[c] - b.row(0)[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn embeddings_feed_back_through_the_same_weights() {
        let (enc, store) = tiny(2, 8);
        let h = enc
            .encode_tokens(&store, &[2, 5, 6, 3], &PositionPolicy::Sequential)
            .unwrap();
        let again = enc.encode_embeddings(&store, &h, &[0, 1, 2, 3]).unwrap();
        assert_eq!((again.len(), again.width()), (4, 8));
        let zero = EmbeddingSequence::new(Matrix::zeros(1, 8));
        assert!(enc.encode_embeddings(&store, &zero, &[0]).unwrap().matrix().is_finite());
        let narrow = EmbeddingSequence::new(Matrix::zeros(2, 7));
        assert!(matches!(
            enc.encode_embeddings(&store, &narrow, &[0, 1]),
            Err(Error::WidthMismatch { .. })
        ));
    }

    #[test]
    fn packed_segments_match_separate_passes() {
        let (enc, store) = tiny(2, 8);
        let mut g = Graph::new(&store);
        let (out, segs) = enc.forward_tokens(&mut g, &[&[2, 5, 3], &[2, 7, 8, 9, 3]]).unwrap();
        let packed = g.value(out).clone();
        let a = enc.encode_tokens(&store, &[2, 5, 3], &PositionPolicy::Sequential).unwrap();
        let b = enc
            .encode_tokens(&store, &[2, 7, 8, 9, 3], &PositionPolicy::Sequential)
            .unwrap();
        assert_eq!(segs, vec![(0, 3), (3, 5)]);
        for r in 0..3 {
            for c in 0..8 {
                assert!((packed.get(r, c) - a.matrix().get(r, c)).abs() < 1e-12);
            }
        }
        for r in 0..5 {
            for c in 0..8 {
                assert!((packed.get(r + 3, c) - b.matrix().get(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_is_seeded() {
        let (enc, store) = tiny(1, 8);
        let run = |seed| {
            let mut g = Graph::with_dropout(&store, 0.1, ChaCha8Rng::seed_from_u64(seed));
            let (out, _) = enc.forward_tokens(&mut g, &[&[2, 5, 6, 3]]).unwrap();
            g.value(out).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    /// Central differences on every block of a 2-layer, width-16 encoder.
    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (enc, mut store) = tiny(2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = Head::init(16, &mut store, &mut rng, "head");
        let loss_of = |store: &ParamStore| -> (f64, Gradients) {
            let mut g = Graph::new(store);
            let (h, _) = enc.forward_tokens(&mut g, &[&[2, 5, 6, 3], &[2, 9, 3]]).unwrap();
            let logits = head.logits(&mut g, h);
            let p = g.sigmoid(logits);
            let labels = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0];
            let loss = g.bce(p, &labels, 1e-7);
            (g.value(loss).get(0, 0), g.backward(loss))
        };
        let (_, grads) = loss_of(&store);
        let mut checked = Vec::new();
        checked.extend(enc.attention_param_ids(0));
        checked.extend(enc.ffn_param_ids(1));
        checked.push(enc.token_embedding_id());
        checked.push(head.weight);
        let h = 1e-5;
        for id in checked {
            let n = store.get(id).data().len();
            for i in (0..n).step_by((n / 12).max(1)) {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + h;
                let up = loss_of(&store).0;
                store.get_mut(id).data_mut()[i] = orig - h;
                let down = loss_of(&store).0;
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.get(id).map_or(0.0, |m| m.data()[i]);
                let denom = analytic.abs().max(numeric.abs());
                if denom < 1e-9 {
                    continue;
                }
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "{}[{i}] analytic {analytic} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }
}
