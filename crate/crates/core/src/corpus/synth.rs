//! Seeded synthetic worlds shaped like ZESHEL, small enough for CPU training.
//!
//! All domains draw from the same closed word lists, so subword units are
//! shared across splits while entity ids are not. Titles pair a first name
//! that is unique within the domain with a last name from a small shared
//! pool, so retrieval returns look-alikes that differ in one rare token. In
//! `easy` worlds the mention surface equals the gold title. In `hard`
//! worlds entities come in groups that share a base title and differ only by a
//! parenthesized qualifier ("Indiana Jones (minifigure)" style); the mention
//! surface is the bare base, and only a cue word copied from the gold
//! description into the context tells the group apart. Every member carries
//! two cue words, and every hard mention also carries its group's decoy cue,
//! which appears in the descriptions of two or three members. Read one at a
//! time, a decoy holder looks as well supported as the gold; only a comparison
//! across candidates exposes the decoy as uninformative.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, DomainPartition, EntityRecord, MentionRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confusability {
    Easy,
    Hard,
}

impl std::str::FromStr for Confusability {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Self::Easy),
            "hard" => Ok(Self::Hard),
            other => Err(Error::Config(format!(
                "confusability must be easy or hard, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_domains: usize,
    pub entities_per_domain: usize,
    pub mentions_per_domain: usize,
    pub confusability: Confusability,
}

const NAMES: &[&str] = &[
    "Aldor", "Brivan", "Corrow", "Dastre", "Elvin", "Farrow", "Galen", "Halvar", "Istra", "Jorund",
    "Kestrel", "Lorne", "Marek", "Nyssa", "Orrin", "Perrin", "Quill", "Rowan", "Sorrel", "Tamsin",
    "Ulric", "Varen", "Wystan", "Xander", "Yorick", "Zephyr", "Ansel", "Bram", "Cedric", "Doran",
    "Evander", "Fenwick", "Gideon", "Hollis", "Ivo", "Jasper", "Kael", "Leoric", "Merrin",
    "Nestor", "Osric", "Pell", "Quentin", "Rhys", "Silas", "Theron", "Uther", "Vance", "Wren",
    "Yates", "Zane", "Aric", "Belen", "Cato", "Drake", "Emrys", "Finn", "Garth", "Hale", "Idris",
    "Joss", "Korin", "Lyle", "Milo",
];

const SURNAMES: &[&str] = &[
    "Ashdown", "Blackmere", "Coldwell", "Dunmore", "Everly", "Fairholm", "Greystone", "Hartwell",
    "Ironwood", "Kingsley", "Larkspur", "Moorcroft", "Northgate", "Oakhurst", "Ravenscar", "Thornbury",
];

const QUALIFIERS: &[&str] = &[
    "minifigure", "character", "set", "game", "film", "novel", "ship", "planet", "album",
    "episode", "weapon", "city", "comic", "card", "vehicle", "song",
];

const CUES: &[&str] = &[
    "amber", "basalt", "cobalt", "dune", "ember", "fjord", "garnet", "harbor", "ivory", "jade",
    "kiln", "lagoon", "marble", "nectar", "onyx", "pewter", "quartz", "russet", "saffron",
    "tundra", "umber", "velvet", "walnut", "yarrow", "zinc", "anvil", "bramble", "cinder",
    "delta", "falcon", "glacier", "hemlock", "iris", "juniper", "kelp", "lantern", "meadow",
    "nettle", "orchid", "pylon",
];

const FILLERS: &[&str] = &[
    "the", "a", "of", "in", "was", "with", "and", "known", "for", "appears", "later", "during",
    "after", "from", "this", "that", "many", "first", "seen", "story", "part", "team", "old",
    "new", "great", "small", "often", "there", "where", "then",
];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str], n: usize) -> Vec<&'a str> {
    (0..n).map(|_| *words.choose(rng).expect("non-empty")).collect()
}

fn fillers(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<&'static str> {
    let n = rng.gen_range(lo..=hi);
    pick(rng, FILLERS, n)
}

/// `n` titles "First Last": first names are distinct within the call, last
/// names come from a small shared pool and repeat.
fn titles(rng: &mut ChaCha8Rng, n: usize) -> Result<Vec<String>> {
    if n > NAMES.len() {
        return Err(Error::Config(format!(
            "at most {} distinct titles per domain, asked for {n}",
            NAMES.len()
        )));
    }
    let firsts: Vec<&str> = NAMES.choose_multiple(rng, n).copied().collect();
    Ok(firsts
        .into_iter()
        .map(|f| format!("{f} {}", SURNAMES.choose(rng).expect("surnames")))
        .collect())
}

fn partition_domains(names: &[String]) -> DomainPartition {
    let n = names.len();
    let (n_valid, n_test) = match n {
        1 => (0, 0),
        2 => (0, 1),
        3 => (1, 1),
        _ => ((n / 4).max(1), (n / 4).max(1)),
    };
    let n_train = n - n_valid - n_test;
    DomainPartition {
        train: names[..n_train].iter().cloned().collect(),
        valid: names[n_train..n_train + n_valid].iter().cloned().collect(),
        test: names[n_train + n_valid..].iter().cloned().collect(),
    }
}

/// Splits `n` entities into same-base groups of four to eight members.
fn group_sizes(n: usize) -> Vec<usize> {
    let mut sizes = vec![5; n / 5];
    let rem = n % 5;
    if sizes.is_empty() {
        return vec![n];
    }
    if rem >= 4 {
        sizes.push(rem);
    } else {
        for i in 0..rem {
            let len = sizes.len();
            sizes[len - 1 - (i % len)] += 1;
        }
    }
    sizes
}

fn insert_randomly(rng: &mut ChaCha8Rng, left: &mut Vec<&'static str>, right: &mut Vec<&'static str>, word: &'static str) {
    let side = if rng.gen_bool(0.5) { left } else { right };
    let pos = rng.gen_range(0..=side.len());
    side.insert(pos, word);
}

struct HardEntity {
    group: usize,
    cue: &'static str,
}

fn easy_domain(
    rng: &mut ChaCha8Rng,
    domain: &str,
    cfg: &SynthConfig,
) -> Result<(Vec<EntityRecord>, Vec<MentionRecord>)> {
    let titles = titles(rng, cfg.entities_per_domain)?;
    let entities: Vec<EntityRecord> = titles
        .iter()
        .enumerate()
        .map(|(i, title)| {
            let mut body = fillers(rng, 3, 5);
            body.push(CUES.choose(rng).expect("cues"));
            body.shuffle(rng);
            EntityRecord {
                entity_id: format!("{domain}-e{i:05}"),
                title: title.clone(),
                description: format!("{title} is a {}", body.join(" ")),
                domain: domain.to_string(),
            }
        })
        .collect();
    let mentions = (0..cfg.mentions_per_domain)
        .map(|i| {
            let gold = entities.choose(rng).expect("entities");
            MentionRecord {
                mention_id: format!("{domain}-m{i:05}"),
                surface: gold.title.clone(),
                left_context: fillers(rng, 2, 4).join(" "),
                right_context: fillers(rng, 2, 4).join(" "),
                gold_entity_id: gold.entity_id.clone(),
                domain: domain.to_string(),
            }
        })
        .collect();
    Ok((entities, mentions))
}

fn hard_domain(
    rng: &mut ChaCha8Rng,
    domain: &str,
    cfg: &SynthConfig,
) -> Result<(Vec<EntityRecord>, Vec<MentionRecord>)> {
    if cfg.entities_per_domain < 4 {
        return Err(Error::Config(
            "hard worlds need at least 4 entities per domain".into(),
        ));
    }
    let sizes = group_sizes(cfg.entities_per_domain);
    let bases = titles(rng, sizes.len())?;
    let mut entities = Vec::new();
    let mut meta = Vec::new();
    let mut group_decoys = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (g, (&size, base)) in sizes.iter().zip(&bases).enumerate() {
        let mut qualifiers = QUALIFIERS.to_vec();
        qualifiers.shuffle(rng);
        let mut cues = CUES.to_vec();
        cues.shuffle(rng);
        let decoy = cues[size];
        let n_shared = if size >= 5 { 3 } else { 2 };
        let mut order: Vec<usize> = (0..size).collect();
        order.shuffle(rng);
        let shared: BTreeSet<usize> = order[..n_shared].iter().copied().collect();
        let mut ids = Vec::with_capacity(size);
        for (j, (&qual, &cue)) in qualifiers.iter().zip(&cues).take(size).enumerate() {
            let title = format!("{base} ({qual})");
            let mut body = fillers(rng, 3, 4);
            body.push(cue);
            body.push(if shared.contains(&j) { decoy } else { cues[size + 1 + j] });
            body.shuffle(rng);
            ids.push(entities.len());
            entities.push(EntityRecord {
                entity_id: format!("{domain}-e{:05}", entities.len()),
                title: title.clone(),
                description: format!("{title} is a {qual} {}", body.join(" ")),
                domain: domain.to_string(),
            });
            meta.push(HardEntity { group: g, cue });
        }
        members.push(ids);
        group_decoys.push(decoy);
    }
    let mentions = (0..cfg.mentions_per_domain)
        .map(|i| {
            let gi = rng.gen_range(0..entities.len());
            let (gold, info) = (&entities[gi], &meta[gi]);
            let mut left = fillers(rng, 2, 4);
            let mut right = fillers(rng, 2, 4);
            insert_randomly(rng, &mut left, &mut right, info.cue);
            insert_randomly(rng, &mut left, &mut right, group_decoys[info.group]);
            MentionRecord {
                mention_id: format!("{domain}-m{i:05}"),
                surface: bases[info.group].clone(),
                left_context: left.join(" "),
                right_context: right.join(" "),
                gold_entity_id: gold.entity_id.clone(),
                domain: domain.to_string(),
            }
        })
        .collect();
    debug_assert!(members.iter().all(|m| m.len() >= 4));
    Ok((entities, mentions))
}

/// Generates a deterministic world for `cfg.seed`.
pub fn generate_synthetic_world(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_domains == 0 || cfg.entities_per_domain == 0 || cfg.mentions_per_domain == 0 {
        return Err(Error::Config(
            "domain, entity and mention counts must all be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = (0..cfg.n_domains).map(|i| format!("world_{i:02}")).collect();
    let mut entities = Vec::new();
    let mut mentions = Vec::new();
    for name in &names {
        let (e, m) = match cfg.confusability {
            Confusability::Easy => easy_domain(&mut rng, name, cfg)?,
            Confusability::Hard => hard_domain(&mut rng, name, cfg)?,
        };
        entities.extend(e);
        mentions.extend(m);
    }
    Dataset::new(entities, mentions, partition_domains(&names))
}
