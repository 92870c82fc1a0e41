//! Instance construction, the AdamW optimizer and the training loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{cross_encoder_logits, reading_only_probs};
use crate::corpus::{Dataset, EntityRecord, MentionRecord, Split};
use crate::encoder::{save_checkpoint, EncoderConfig, Model, System, Tokenizer};
use crate::error::{Error, Result};
use crate::evaluation::{index_predictions, normalized_accuracy};
use crate::io;
use crate::predict::{predict_all, ModelRanker};
use crate::reading::entity_text;
use crate::retrieval::CandidateMap;
use crate::selecting::{res_forward, BCE_EPS};
use crate::tensor::{Gradients, Graph, ParamStore};

pub const BEST_CHECKPOINT: &str = "model.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const LOSS_FILE: &str = "loss.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";

/// Encoder shape chosen by a training config; the vocabulary size comes from
/// the tokenizer and the prefix length from [`TrainConfig::prefix_len`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub segment_len: usize,
    pub dropout: f64,
}

impl ModelShape {
    fn from_encoder(c: &EncoderConfig) -> Self {
        Self {
            hidden: c.hidden,
            layers: c.layers,
            heads: c.heads,
            ffn: c.ffn,
            max_positions: c.max_positions,
            segment_len: c.segment_len,
            dropout: c.dropout,
        }
    }

    pub fn encoder_config(&self, vocab_size: usize, prefix_len: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            max_positions: self.max_positions,
            prefix_len,
            segment_len: self.segment_len,
            dropout: self.dropout,
            layer_norm_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub system: System,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Candidates per training instance (gold plus N-1 negatives).
    pub num_candidates: usize,
    pub prefix_len: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Fraction of all steps spent in linear warmup; the rate then decays
    /// linearly to zero.
    pub warmup_frac: f64,
    /// Validate and write checkpoints every this many epochs.
    pub checkpoint_every: usize,
    /// Candidate count used when scoring the validation split.
    pub eval_k: usize,
    /// Validation mentions scored per round (0 = all).
    pub valid_mentions: usize,
    pub vocab_size: usize,
    pub model: ModelShape,
}

impl TrainConfig {
    /// Small random-init encoder sized for a single CPU.
    pub fn desk() -> Self {
        let mut enc = EncoderConfig::desk(0);
        enc.hidden = 64;
        enc.layers = 2;
        enc.heads = 4;
        enc.ffn = 256;
        enc.segment_len = 32;
        enc.max_positions = 128;
        enc.dropout = 0.0;
        Self {
            system: System::Res,
            learning_rate: 2e-3,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 10,
            num_candidates: 8,
            prefix_len: 3,
            seed: 0,
            grad_clip: 1.0,
            warmup_frac: 0.1,
            checkpoint_every: 1,
            eval_k: 16,
            valid_mentions: 400,
            vocab_size: 2000,
            model: ModelShape::from_encoder(&enc),
        }
    }

    /// Reference hyperparameters at base-encoder scale.
    pub fn paper() -> Self {
        Self {
            system: System::Res,
            learning_rate: 4e-5,
            weight_decay: 0.01,
            batch_size: 4,
            epochs: 4,
            num_candidates: 56,
            prefix_len: 3,
            seed: 0,
            grad_clip: 1.0,
            warmup_frac: 0.1,
            checkpoint_every: 1,
            eval_k: 64,
            valid_mentions: 0,
            vocab_size: 30000,
            model: ModelShape::from_encoder(&EncoderConfig::paper(0)),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }

    /// Parses a TOML config. An optional top-level `preset` key names the
    /// base config; every other key overrides it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut overrides: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        let base = match overrides.remove("preset") {
            Some(toml::Value::String(name)) => Self::preset(&name)?,
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => Self::desk(),
        };
        let mut merged = toml::Table::try_from(&base).expect("config serializes");
        merge_tables(&mut merged, overrides);
        let config: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("bad config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&io::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_candidates < 2 {
            return Err(Error::Config(format!(
                "num_candidates must be at least 2, got {}",
                self.num_candidates
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.eval_k == 0 {
            return Err(Error::Config(
                "batch_size, checkpoint_every and eval_k must be positive".into(),
            ));
        }
        if self.prefix_len == 0 {
            return Err(Error::Config("prefix_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1)".into()));
        }
        self.encoder_config(self.vocab_size).validate()
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        self.model.encoder_config(vocab_size, self.prefix_len)
    }
}

fn merge_tables(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// One (mention, candidate list) training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainInstance {
    pub mention_id: String,
    pub gold_entity_id: String,
    pub negatives: Vec<String>,
    pub shuffle_seed: u64,
}

impl TrainInstance {
    /// Gold first, then negatives in retrieval order.
    pub fn entity_ids(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.gold_entity_id.as_str()).chain(self.negatives.iter().map(String::as_str))
    }
}

/// Gold plus the `n - 1` best-ranked non-gold candidates per mention.
/// Mentions whose gold is not retrieved are skipped.
pub fn build_instances<'m, I>(mentions: I, candidates: &CandidateMap, n: usize, seed: u64) -> Vec<TrainInstance>
where
    I: IntoIterator<Item = &'m MentionRecord>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for m in mentions {
        let Some(set) = candidates.get(&m.mention_id) else {
            continue;
        };
        if set.position(&m.gold_entity_id).is_none() {
            continue;
        }
        let mut negatives: Vec<String> = Vec::new();
        for id in set.entity_ids() {
            if negatives.len() + 1 >= n {
                break;
            }
            if id != m.gold_entity_id && !negatives.iter().any(|x| x == id) {
                negatives.push(id.to_string());
            }
        }
        out.push(TrainInstance {
            mention_id: m.mention_id.clone(),
            gold_entity_id: m.gold_entity_id.clone(),
            negatives,
            shuffle_seed: rng.gen(),
        });
    }
    out
}

/// Adam with decoupled weight decay. Decay skips single-row parameters
/// (biases and normalization gains).
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).data().len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let param = store.get_mut(id);
            let decay = if param.rows() > 1 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, (w, &gi)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
            }
        }
    }
}

/// Linear warmup then linear decay to zero.
pub fn learning_rate_at(config: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let warmup = (config.warmup_frac * total_steps as f64).ceil() as usize;
    let s = step as f64 + 1.0;
    if step < warmup {
        config.learning_rate * s / warmup as f64
    } else {
        let remaining = (total_steps - warmup).max(1) as f64;
        config.learning_rate * (1.0 - (s - 1.0 - warmup as f64) / remaining).max(0.0)
    }
}

/// Loss of one instance with candidates in the given order.
pub fn instance_loss<'s>(
    model: &'s Model,
    g: &mut Graph<'s>,
    mention: &MentionRecord,
    entities: &[&EntityRecord],
    gold: usize,
) -> Result<crate::tensor::Var> {
    match model.system {
        System::Res => {
            let order: Vec<usize> = (0..entities.len()).collect();
            let (probs, layout) = res_forward(model, g, mention, entities, &order)?;
            Ok(g.bce(probs, &layout.labels(gold), BCE_EPS))
        }
        System::ResNoSelect => {
            let probs = reading_only_probs(model, g, mention, entities)?;
            let lp = model.config().prefix_len;
            let labels: Vec<f64> = (0..entities.len() * lp)
                .map(|r| if r / lp == gold { 1.0 } else { 0.0 })
                .collect();
            Ok(g.bce(probs, &labels, BCE_EPS))
        }
        System::CrossEncoder => {
            let logits = cross_encoder_logits(model, g, mention, entities)?;
            Ok(g.softmax_ce(logits, gold))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub step: usize,
    pub micro_normalized_accuracy: f64,
}

pub struct TrainOutcome {
    /// The best model by validation accuracy (the last one without a
    /// validation split).
    pub model: Model,
    pub losses: Vec<LossRecord>,
    pub validation: Vec<ValidationRecord>,
    pub best_epoch: usize,
    pub instances: usize,
}

impl TrainOutcome {
    /// Mean loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.losses {
            let e = acc.entry(r.epoch).or_default();
            e.0 += r.loss;
            e.1 += 1;
        }
        acc.values().map(|(s, n)| s / *n as f64).collect()
    }
}

/// Trains a tokenizer on training-split text only.
pub fn train_tokenizer(dataset: &Dataset, config: &TrainConfig) -> Tokenizer {
    let train_domains = dataset.partition().domains(Split::Train);
    let mut texts: Vec<String> = dataset
        .kbs()
        .filter(|kb| train_domains.contains(kb.domain()))
        .flat_map(|kb| kb.entities().iter().map(entity_text))
        .collect();
    for m in dataset.mentions_in(Split::Train) {
        texts.push(format!("{} {} {}", m.left_context, m.surface, m.right_context));
    }
    Tokenizer::train(texts.iter().map(String::as_str), config.vocab_size, config.prefix_len)
}

/// Builds a fresh model from `config` and trains it.
pub fn train(
    dataset: &Dataset,
    candidates: &CandidateMap,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let tokenizer = train_tokenizer(dataset, config);
    let enc = config.encoder_config(tokenizer.vocab_size());
    let model = Model::init(config.system, tokenizer, enc, config.seed)?;
    train_model(model, dataset, candidates, config, out_dir)
}

/// Micro-averaged normalized accuracy of `model` on the first `limit`
/// validation mentions (all when `limit` is 0).
pub fn validate(
    model: &Model,
    dataset: &Dataset,
    candidates: &CandidateMap,
    k: usize,
    limit: usize,
) -> Result<Option<f64>> {
    let mut mentions: Vec<&MentionRecord> = dataset
        .mentions_in(Split::Valid)
        .into_iter()
        .filter(|m| candidates.contains_key(&m.mention_id))
        .collect();
    if limit > 0 {
        mentions.truncate(limit);
    }
    if mentions.is_empty() {
        return Ok(None);
    }
    let ranker = ModelRanker::new(model, dataset);
    let preds = predict_all(&ranker, mentions.iter().copied(), candidates, k)?;
    let per = normalized_accuracy(&index_predictions(&preds), mentions.iter().copied(), candidates, k)?;
    let subset: usize = per.iter().map(|d| d.subset_size).sum();
    let correct: usize = per.iter().map(|d| d.correct).sum();
    Ok((subset > 0).then(|| correct as f64 / subset as f64))
}

/// Trains `model` in place of a fresh one; its system decides the loss.
pub fn train_model(
    mut model: Model,
    dataset: &Dataset,
    candidates: &CandidateMap,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_mentions = dataset.mentions_in(Split::Train);
    let by_id: BTreeMap<&str, &MentionRecord> =
        train_mentions.iter().map(|m| (m.mention_id.as_str(), *m)).collect();
    let instances = build_instances(
        train_mentions.iter().copied(),
        candidates,
        config.num_candidates,
        config.seed,
    );
    if instances.is_empty() {
        return Err(Error::InvalidRecord(
            "no training mention has its gold entity among its candidates".into(),
        ));
    }
    let paths = out_dir.map(|d| {
        (
            d.join(BEST_CHECKPOINT),
            d.join(LAST_CHECKPOINT),
            d.join(LOSS_FILE),
            d.join(VALIDATION_FILE),
        )
    });
    if let Some(d) = out_dir {
        io::write_atomic(&d.join("train_config.toml"), config.to_toml().as_bytes())?;
    }

    let steps_per_epoch = instances.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut opt = AdamW::new(&model.store, config.weight_decay);
    let mut losses = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let model_ref = &model;
            let per_instance: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let inst = &instances[i];
                    let mention = by_id[inst.mention_id.as_str()];
                    let mut ents: Vec<(bool, &EntityRecord)> = inst
                        .entity_ids()
                        .enumerate()
                        .map(|(j, id)| {
                            let e = dataset.entity(&mention.domain, id).ok_or_else(|| {
                                Error::InvalidRecord(format!(
                                    "candidate {id} of mention {} is not in domain {}",
                                    mention.mention_id, mention.domain
                                ))
                            })?;
                            Ok((j == 0, e))
                        })
                        .collect::<Result<_>>()?;
                    let mut inst_rng = ChaCha8Rng::seed_from_u64(
                        inst.shuffle_seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                    );
                    ents.shuffle(&mut inst_rng);
                    let gold = ents.iter().position(|(g, _)| *g).expect("gold present");
                    let refs: Vec<&EntityRecord> = ents.iter().map(|(_, e)| *e).collect();
                    let mut g = Graph::with_dropout(&model_ref.store, model_ref.config().dropout, inst_rng);
                    let loss = instance_loss(model_ref, &mut g, mention, &refs, gold)?;
                    let value = g.value(loss).get(0, 0);
                    if !value.is_finite() {
                        return Err(Error::NonFiniteLoss { step, loss: value });
                    }
                    Ok((value, g.backward(loss)))
                })
                .collect();
            let mut grads = Gradients::zeros_like(&model.store);
            let mut batch_loss = 0.0;
            for r in per_instance {
                let (value, g) = r?;
                batch_loss += value;
                grads.merge(&g);
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss: norm });
            }
            if config.grad_clip > 0.0 && norm > config.grad_clip {
                grads.scale(config.grad_clip / norm);
            }
            let lr = learning_rate_at(config, step, total_steps);
            opt.step(&mut model.store, &grads, lr);
            losses.push(LossRecord {
                step,
                epoch,
                loss: batch_loss / n,
            });
            step += 1;
        }

        let last_epoch = epoch + 1 == config.epochs;
        if (epoch + 1) % config.checkpoint_every == 0 || last_epoch {
            let score = validate(&model, dataset, candidates, config.eval_k, config.valid_mentions)?;
            if let Some(acc) = score {
                validation.push(ValidationRecord {
                    epoch,
                    step,
                    micro_normalized_accuracy: acc,
                });
            }
            let improved = match (&best, score) {
                (None, _) => true,
                (Some((b, _, _)), Some(acc)) => acc > *b,
                (Some(_), None) => true,
            };
            if improved {
                best = Some((score.unwrap_or(f64::NEG_INFINITY), epoch, model.store.clone()));
            }
            if let Some((best_path, last_path, loss_path, valid_path)) = &paths {
                save_checkpoint(last_path, &model)?;
                if improved {
                    save_checkpoint(best_path, &model)?;
                }
                io::write_jsonl(loss_path, &losses)?;
                io::write_jsonl(valid_path, &validation)?;
            }
        }
    }

    let (_, best_epoch, store) = best.expect("at least one validation round");
    model.store = store;
    Ok(TrainOutcome {
        model,
        losses,
        validation,
        best_epoch,
        instances: instances.len(),
    })
}

/// Where [`train`] writes its artifacts under `out_dir`.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join(BEST_CHECKPOINT)
}
