//! Loader for ZESHEL-style document and mention files.
//!
//! Documents are line-delimited JSON objects with `document_id`, `title` and
//! `text`. They are read either from a directory holding one file per domain
//! (the file stem names the domain) or from a single file whose records carry a
//! `domain` (or `corpus`) field.
//!
//! Mentions are accepted in two shapes: already split (`surface`,
//! `left_context`, `right_context`) or as ZESHEL word offsets
//! (`context_document_id`, `start_index`, `end_index`, inclusive), which are
//! split once here against the whitespace-tokenized context document.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{Dataset, DomainPartition, EntityRecord, MentionRecord};
use crate::error::{Error, Result};
use crate::io;

#[derive(Deserialize)]
struct RawDocument {
    #[serde(alias = "entity_id")]
    document_id: String,
    title: String,
    #[serde(alias = "description")]
    text: String,
    #[serde(default, alias = "corpus")]
    domain: Option<String>,
}

#[derive(Deserialize)]
struct RawMention {
    mention_id: String,
    #[serde(alias = "corpus")]
    domain: String,
    #[serde(alias = "label_document_id")]
    gold_entity_id: String,
    #[serde(default)]
    surface: Option<String>,
    #[serde(default)]
    left_context: Option<String>,
    #[serde(default)]
    right_context: Option<String>,
    #[serde(default)]
    context_document_id: Option<String>,
    #[serde(default)]
    start_index: Option<usize>,
    #[serde(default)]
    end_index: Option<usize>,
}

fn record_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("json") | Some("jsonl")
                )
            })
            .collect();
        files.sort();
        Ok(files)
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

fn load_documents(path: &Path) -> Result<Vec<EntityRecord>> {
    let per_domain_files = path.is_dir();
    let mut out = Vec::new();
    for file in record_files(path)? {
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        for doc in io::read_jsonl::<RawDocument>(&file)? {
            let domain = match (doc.domain, per_domain_files) {
                (Some(d), _) => d,
                (None, true) => stem.clone(),
                (None, false) => {
                    return Err(Error::InvalidRecord(format!(
                        "document {} has no domain field",
                        doc.document_id
                    )))
                }
            };
            // Some source pages have no body text; the title stands in.
            let description = if doc.text.trim().is_empty() {
                doc.title.clone()
            } else {
                doc.text
            };
            out.push(EntityRecord {
                entity_id: doc.document_id,
                title: doc.title,
                description,
                domain,
            });
        }
    }
    Ok(out)
}

fn split_context(
    raw: &RawMention,
    docs: &HashMap<(&str, &str), &EntityRecord>,
) -> Result<MentionRecord> {
    if let Some(surface) = &raw.surface {
        return Ok(MentionRecord {
            mention_id: raw.mention_id.clone(),
            surface: surface.clone(),
            left_context: raw.left_context.clone().unwrap_or_default(),
            right_context: raw.right_context.clone().unwrap_or_default(),
            gold_entity_id: raw.gold_entity_id.clone(),
            domain: raw.domain.clone(),
        });
    }
    let (Some(doc_id), Some(start), Some(end)) =
        (&raw.context_document_id, raw.start_index, raw.end_index)
    else {
        return Err(Error::InvalidRecord(format!(
            "mention {} has neither a surface nor context offsets",
            raw.mention_id
        )));
    };
    let doc = docs
        .get(&(raw.domain.as_str(), doc_id.as_str()))
        .ok_or_else(|| {
            Error::InvalidRecord(format!(
                "mention {}: context document {doc_id} not found",
                raw.mention_id
            ))
        })?;
    let words: Vec<&str> = doc.description.split_whitespace().collect();
    if start > end || end >= words.len() {
        return Err(Error::InvalidRecord(format!(
            "mention {}: offsets {start}..={end} outside document of {} words",
            raw.mention_id,
            words.len()
        )));
    }
    Ok(MentionRecord {
        mention_id: raw.mention_id.clone(),
        surface: words[start..=end].join(" "),
        left_context: words[..start].join(" "),
        right_context: words[end + 1..].join(" "),
        gold_entity_id: raw.gold_entity_id.clone(),
        domain: raw.domain.clone(),
    })
}

/// Loads documents and mentions and validates them against `partition`.
pub fn load_zeshel(
    documents_path: &Path,
    mentions_path: &Path,
    partition: &DomainPartition,
) -> Result<Dataset> {
    partition.validate()?;
    let entities = load_documents(documents_path)?;
    let mut raw_mentions = Vec::new();
    for file in record_files(mentions_path)? {
        raw_mentions.extend(io::read_jsonl::<RawMention>(&file)?);
    }
    let mentions = {
        let docs: HashMap<(&str, &str), &EntityRecord> = entities
            .iter()
            .map(|e| ((e.domain.as_str(), e.entity_id.as_str()), e))
            .collect();
        raw_mentions
            .iter()
            .map(|m| split_context(m, &docs))
            .collect::<Result<Vec<_>>>()?
    };
    Dataset::new(entities, mentions, partition.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;

    fn write(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    fn fixture(dir: &Path) -> DomainPartition {
        fs::create_dir_all(dir.join("documents")).unwrap();
        write(
            &dir.join("documents/lego.json"),
            concat!(
                "{\"document_id\":\"L1\",\"title\":\"Indiana Jones (minifigure)\",\"text\":\"Indiana Jones is a minifigure\"}\n",
                "{\"document_id\":\"L2\",\"title\":\"Henry Jones\",\"text\":\"Professor Henry Jones Sr is Indiana Jones 's father\"}\n",
            ),
        );
        write(
            &dir.join("documents/star_trek.json"),
            "{\"document_id\":\"S1\",\"title\":\"Turkey\",\"text\":\"\"}\n",
        );
        DomainPartition::new(vec!["lego"], vec![], vec!["star_trek"]).unwrap()
    }

    #[test]
    fn splits_offsets_once_at_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let partition = fixture(dir.path());
        write(
            &dir.path().join("mentions.json"),
            "{\"mention_id\":\"M1\",\"corpus\":\"lego\",\"context_document_id\":\"L2\",\"start_index\":5,\"end_index\":6,\"label_document_id\":\"L1\"}\n",
        );
        let ds = load_zeshel(
            &dir.path().join("documents"),
            &dir.path().join("mentions.json"),
            &partition,
        )
        .unwrap();
        let m = &ds.mentions()[0];
        assert_eq!(m.surface, "Indiana Jones");
        assert_eq!(m.left_context, "Professor Henry Jones Sr is");
        assert_eq!(m.right_context, "'s father");
        // empty body falls back to the title
        assert_eq!(ds.entity("star_trek", "S1").unwrap().description, "Turkey");
    }

    #[test]
    fn empty_mentions_file_still_loads_kbs() {
        let dir = tempfile::tempdir().unwrap();
        let partition = fixture(dir.path());
        write(&dir.path().join("mentions.json"), "");
        let ds = load_zeshel(
            &dir.path().join("documents"),
            &dir.path().join("mentions.json"),
            &partition,
        )
        .unwrap();
        assert!(ds.mentions().is_empty());
        assert_eq!(ds.kb("lego").unwrap().len(), 2);
        assert_eq!(ds.entity_ids(Split::Test).len(), 1);
    }

    #[test]
    fn unresolvable_gold_is_a_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let partition = fixture(dir.path());
        write(
            &dir.path().join("mentions.json"),
            "{\"mention_id\":\"M9\",\"domain\":\"lego\",\"surface\":\"x\",\"gold_entity_id\":\"NOPE\"}\n",
        );
        let err = load_zeshel(
            &dir.path().join("documents"),
            &dir.path().join("mentions.json"),
            &partition,
        )
        .unwrap_err();
        assert!(err.to_string().contains("M9"), "{err}");
    }

    #[test]
    fn shared_entity_across_splits_is_a_partition_error() {
        let dir = tempfile::tempdir().unwrap();
        let partition = fixture(dir.path());
        write(
            &dir.path().join("documents/star_trek.json"),
            "{\"document_id\":\"L1\",\"title\":\"Turkey\",\"text\":\"a bird\"}\n",
        );
        write(&dir.path().join("mentions.json"), "");
        let err = load_zeshel(
            &dir.path().join("documents"),
            &dir.path().join("mentions.json"),
            &partition,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Partition(_)), "{err}");
    }
}
