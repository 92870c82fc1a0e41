//! Entities, mentions and the domain partition that makes linking zero-shot.
//!
//! A [`Dataset`] holds one [`KnowledgeBase`] per domain, every labeled mention,
//! and the [`DomainPartition`] assigning domains to train/valid/test. Every
//! constructor path validates the zero-shot contract: splits share no domain
//! and no entity id.

mod synth;
mod zeshel;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub use synth::{generate_synthetic_world, Confusability, SynthConfig};
pub use zeshel::load_zeshel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: String,
    pub title: String,
    pub description: String,
    pub domain: String,
}

impl EntityRecord {
    pub fn validate(&self) -> Result<()> {
        if self.entity_id.is_empty() {
            return Err(Error::InvalidRecord("entity with empty id".into()));
        }
        if self.title.trim().is_empty() || self.description.trim().is_empty() {
            return Err(Error::InvalidRecord(format!(
                "entity {} has an empty title or description",
                self.entity_id
            )));
        }
        Ok(())
    }
}

/// A mention with its context already split around the surface string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub mention_id: String,
    pub surface: String,
    pub left_context: String,
    pub right_context: String,
    pub gold_entity_id: String,
    pub domain: String,
}

impl MentionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.surface.trim().is_empty() {
            return Err(Error::InvalidRecord(format!(
                "mention {} has an empty surface",
                self.mention_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "val" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Disjoint train/valid/test domain sets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainPartition {
    pub train: BTreeSet<String>,
    pub valid: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

#[derive(Deserialize)]
struct PartitionFile {
    partition: DomainPartition,
}

#[derive(Serialize)]
struct PartitionFileRef<'a> {
    partition: &'a DomainPartition,
}

impl DomainPartition {
    pub fn new<I, S>(train: I, valid: I, test: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let p = Self {
            train: train.into_iter().map(Into::into).collect(),
            valid: valid.into_iter().map(Into::into).collect(),
            test: test.into_iter().map(Into::into).collect(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (a, b) in [
            (Split::Train, Split::Valid),
            (Split::Train, Split::Test),
            (Split::Valid, Split::Test),
        ] {
            if let Some(d) = self.domains(a).intersection(self.domains(b)).next() {
                return Err(Error::Partition(format!(
                    "domain {d:?} appears in both {} and {}",
                    a.name(),
                    b.name()
                )));
            }
        }
        Ok(())
    }

    pub fn domains(&self, split: Split) -> &BTreeSet<String> {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, domain: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|s| self.domains(*s).contains(domain))
    }

    /// Parses the `[partition]` table of a TOML config.
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: PartitionFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("partition config: {e}")))?;
        f.partition.validate()?;
        Ok(f.partition)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&PartitionFileRef { partition: self }).expect("partition serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&io::read_to_string(path)?)
    }
}

/// Entities of a single domain, addressable by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    domain: String,
    entities: Vec<EntityRecord>,
    by_id: HashMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(domain: impl Into<String>, entities: Vec<EntityRecord>) -> Result<Self> {
        let domain = domain.into();
        let mut by_id = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            e.validate()?;
            if e.domain != domain {
                return Err(Error::InvalidRecord(format!(
                    "entity {} belongs to {} but was added to {domain}",
                    e.entity_id, e.domain
                )));
            }
            if by_id.insert(e.entity_id.clone(), i).is_some() {
                return Err(Error::InvalidRecord(format!(
                    "duplicate entity id {} in domain {domain}",
                    e.entity_id
                )));
            }
        }
        Ok(Self {
            domain,
            entities,
            by_id,
        })
    }

    pub fn domain(&self) -> &str {
        &self.domain
    }

    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn get(&self, entity_id: &str) -> Option<&EntityRecord> {
        self.by_id.get(entity_id).map(|&i| &self.entities[i])
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }
}

/// All domains, mentions and their split assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    kbs: BTreeMap<String, KnowledgeBase>,
    mentions: Vec<MentionRecord>,
    partition: DomainPartition,
}

pub const ENTITIES_FILE: &str = "entities.jsonl";
pub const MENTIONS_FILE: &str = "mentions.jsonl";
pub const PARTITION_FILE: &str = "partition.toml";

impl Dataset {
    /// Groups entities by domain and checks every zero-shot invariant.
    pub fn new(
        entities: Vec<EntityRecord>,
        mentions: Vec<MentionRecord>,
        partition: DomainPartition,
    ) -> Result<Self> {
        partition.validate()?;
        let mut grouped: BTreeMap<String, Vec<EntityRecord>> = BTreeMap::new();
        for e in entities {
            grouped.entry(e.domain.clone()).or_default().push(e);
        }
        let mut kbs = BTreeMap::new();
        for (domain, ents) in grouped {
            if partition.split_of(&domain).is_none() {
                return Err(Error::Partition(format!(
                    "domain {domain:?} is not assigned to any split"
                )));
            }
            kbs.insert(domain.clone(), KnowledgeBase::new(domain, ents)?);
        }
        let ds = Self {
            kbs,
            mentions,
            partition,
        };
        ds.check_entity_disjointness()?;
        for m in &ds.mentions {
            m.validate()?;
            if ds.partition.split_of(&m.domain).is_none() {
                return Err(Error::Partition(format!(
                    "mention {} is in unassigned domain {:?}",
                    m.mention_id, m.domain
                )));
            }
            if ds.entity(&m.domain, &m.gold_entity_id).is_none() {
                return Err(Error::UnresolvedGold {
                    mention_id: m.mention_id.clone(),
                    entity_id: m.gold_entity_id.clone(),
                    domain: m.domain.clone(),
                });
            }
        }
        Ok(ds)
    }

    fn check_entity_disjointness(&self) -> Result<()> {
        let mut owner: HashMap<&str, Split> = HashMap::new();
        for kb in self.kbs.values() {
            let split = self
                .partition
                .split_of(kb.domain())
                .expect("domains validated against partition");
            for e in kb.entities() {
                if let Some(prev) = owner.insert(&e.entity_id, split) {
                    if prev != split {
                        return Err(Error::Partition(format!(
                            "entity id {} shared between {} and {}",
                            e.entity_id,
                            prev.name(),
                            split.name()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn partition(&self) -> &DomainPartition {
        &self.partition
    }

    pub fn kb(&self, domain: &str) -> Option<&KnowledgeBase> {
        self.kbs.get(domain)
    }

    pub fn kbs(&self) -> impl Iterator<Item = &KnowledgeBase> {
        self.kbs.values()
    }

    pub fn entity(&self, domain: &str, entity_id: &str) -> Option<&EntityRecord> {
        self.kbs.get(domain).and_then(|kb| kb.get(entity_id))
    }

    pub fn mentions(&self) -> &[MentionRecord] {
        &self.mentions
    }

    pub fn mentions_in(&self, split: Split) -> Vec<&MentionRecord> {
        let domains = self.partition.domains(split);
        self.mentions
            .iter()
            .filter(|m| domains.contains(&m.domain))
            .collect()
    }

    /// Entity ids per split, used to assert the zero-shot property.
    pub fn entity_ids(&self, split: Split) -> HashSet<&str> {
        self.partition
            .domains(split)
            .iter()
            .filter_map(|d| self.kbs.get(d))
            .flat_map(|kb| kb.entities().iter().map(|e| e.entity_id.as_str()))
            .collect()
    }

    pub fn all_entities(&self) -> impl Iterator<Item = &EntityRecord> {
        self.kbs.values().flat_map(|kb| kb.entities().iter())
    }

    /// Writes `entities.jsonl`, `mentions.jsonl` and `partition.toml`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let entities: Vec<&EntityRecord> = self.all_entities().collect();
        io::write_jsonl(&dir.join(ENTITIES_FILE), &entities)?;
        io::write_jsonl(&dir.join(MENTIONS_FILE), &self.mentions)?;
        io::write_atomic(
            &dir.join(PARTITION_FILE),
            self.partition.to_toml().as_bytes(),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let entities = io::read_jsonl(&dir.join(ENTITIES_FILE))?;
        let mentions = io::read_jsonl(&dir.join(MENTIONS_FILE))?;
        let partition = DomainPartition::load(&dir.join(PARTITION_FILE))?;
        Self::new(entities, mentions, partition)
    }
}
