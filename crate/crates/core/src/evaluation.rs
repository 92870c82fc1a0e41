//! Normalized / unnormalized accuracy, domain averaging, overlap categories
//! and candidate-count scaling.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, MentionRecord, Split};
use crate::error::{Error, Result};
use crate::predict::{predict_all, Ranker};
use crate::retrieval::CandidateMap;
use crate::selecting::RankedPrediction;

/// Surface/title overlap class of a mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MentionCategory {
    /// Surface identical to the gold title.
    #[serde(rename = "HO")]
    HighOverlap,
    /// Title is the surface followed by a disambiguation phrase.
    #[serde(rename = "MC")]
    MultipleCategories,
    /// Surface is a proper substring of the title.
    #[serde(rename = "AS")]
    AmbiguousSubstring,
    #[serde(rename = "LO")]
    LowOverlap,
}

impl MentionCategory {
    pub const ALL: [MentionCategory; 4] = [
        MentionCategory::HighOverlap,
        MentionCategory::MultipleCategories,
        MentionCategory::AmbiguousSubstring,
        MentionCategory::LowOverlap,
    ];

    pub fn code(self) -> &'static str {
        match self {
            MentionCategory::HighOverlap => "HO",
            MentionCategory::MultipleCategories => "MC",
            MentionCategory::AmbiguousSubstring => "AS",
            MentionCategory::LowOverlap => "LO",
        }
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// First matching rule wins: HO, then MC, then AS, else LO.
pub fn categorize(surface: &str, title: &str) -> MentionCategory {
    let (s, t) = (normalize(surface), normalize(title));
    if s == t {
        MentionCategory::HighOverlap
    } else if !s.is_empty() && t.starts_with(&s) {
        MentionCategory::MultipleCategories
    } else if !s.is_empty() && t.contains(&s) {
        MentionCategory::AmbiguousSubstring
    } else {
        MentionCategory::LowOverlap
    }
}

/// Returns `(macro, micro)`: the unweighted and size-weighted means.
pub fn aggregate(accuracies: &[f64], sizes: &[usize]) -> Result<(f64, f64)> {
    if accuracies.len() != sizes.len() {
        return Err(Error::LengthMismatch(format!(
            "{} accuracies for {} subset sizes",
            accuracies.len(),
            sizes.len()
        )));
    }
    if accuracies.is_empty() {
        return Err(Error::LengthMismatch("nothing to aggregate".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidRecord("subset sizes must be positive".into()));
    }
    let macro_avg = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let total: usize = sizes.iter().sum();
    let micro = accuracies
        .iter()
        .zip(sizes)
        .map(|(a, &n)| a * n as f64)
        .sum::<f64>()
        / total as f64;
    Ok((macro_avg, micro))
}

pub type PredictionMap<'a> = HashMap<&'a str, &'a RankedPrediction>;

pub fn index_predictions(preds: &[RankedPrediction]) -> PredictionMap<'_> {
    preds.iter().map(|p| (p.mention_id.as_str(), p)).collect()
}

fn in_subset(m: &MentionRecord, candidates: &CandidateMap, k: usize) -> Result<bool> {
    let set = candidates
        .get(&m.mention_id)
        .ok_or_else(|| Error::MissingCandidates(m.mention_id.clone()))?;
    Ok(set.entity_ids().take(k).any(|id| id == m.gold_entity_id))
}

fn is_correct(m: &MentionRecord, preds: &PredictionMap) -> Option<bool> {
    preds
        .get(m.mention_id.as_str())
        .map(|p| p.predicted.as_deref() == Some(m.gold_entity_id.as_str()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainResult {
    pub domain: String,
    pub mentions: usize,
    pub subset_size: usize,
    pub correct: usize,
    pub normalized_accuracy: f64,
}

/// Top-1 accuracy per domain over mentions whose gold is in the top `k`.
pub fn normalized_accuracy<'m, I>(
    preds: &PredictionMap,
    mentions: I,
    candidates: &CandidateMap,
    k: usize,
) -> Result<Vec<DomainResult>>
where
    I: IntoIterator<Item = &'m MentionRecord>,
{
    let mut per: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for m in mentions {
        let entry = per.entry(m.domain.as_str()).or_default();
        entry.0 += 1;
        if !in_subset(m, candidates, k)? {
            continue;
        }
        entry.1 += 1;
        match is_correct(m, preds) {
            Some(true) => entry.2 += 1,
            Some(false) => {}
            None => return Err(Error::MissingPrediction(m.mention_id.clone())),
        }
    }
    Ok(per
        .into_iter()
        .map(|(domain, (mentions, subset_size, correct))| DomainResult {
            domain: domain.to_string(),
            mentions,
            subset_size,
            correct,
            normalized_accuracy: if subset_size == 0 {
                0.0
            } else {
                correct as f64 / subset_size as f64
            },
        })
        .collect())
}

/// Correct / total over every mention; missing predictions count as wrong.
pub fn unnormalized_accuracy<'m, I>(preds: &PredictionMap, mentions: I) -> f64
where
    I: IntoIterator<Item = &'m MentionRecord>,
{
    let (mut total, mut correct) = (0usize, 0usize);
    for m in mentions {
        total += 1;
        if is_correct(m, preds) == Some(true) {
            correct += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: MentionCategory,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Accuracy per overlap category, pooled over the normalized subset.
pub fn category_accuracy<'m, I>(
    dataset: &Dataset,
    preds: &PredictionMap,
    mentions: I,
    candidates: &CandidateMap,
    k: usize,
) -> Result<Vec<CategoryResult>>
where
    I: IntoIterator<Item = &'m MentionRecord>,
{
    let mut counts: BTreeMap<MentionCategory, (usize, usize)> = BTreeMap::new();
    for m in mentions {
        if !in_subset(m, candidates, k)? {
            continue;
        }
        let title = &dataset
            .entity(&m.domain, &m.gold_entity_id)
            .ok_or_else(|| Error::UnresolvedGold {
                mention_id: m.mention_id.clone(),
                entity_id: m.gold_entity_id.clone(),
                domain: m.domain.clone(),
            })?
            .title;
        let entry = counts.entry(categorize(&m.surface, title)).or_default();
        entry.0 += 1;
        match is_correct(m, preds) {
            Some(true) => entry.1 += 1,
            Some(false) => {}
            None => return Err(Error::MissingPrediction(m.mention_id.clone())),
        }
    }
    Ok(counts
        .into_iter()
        .map(|(category, (count, correct))| CategoryResult {
            category,
            count,
            correct,
            accuracy: correct as f64 / count as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub k: usize,
    pub subset_size: usize,
    pub mentions: usize,
    pub normalized_accuracy: f64,
    pub unnormalized_accuracy: f64,
}

/// Re-ranks candidate sets truncated to each `k` (by retrieval rank) and
/// records normalized and unnormalized accuracy.
pub fn scaling_curve<R: Ranker + Sync + ?Sized>(
    ranker: &R,
    mentions: &[&MentionRecord],
    candidates: &CandidateMap,
    k_values: &[usize],
) -> Result<Vec<ScalingPoint>> {
    k_values
        .iter()
        .map(|&k| {
            let preds = predict_all(ranker, mentions.iter().copied(), candidates, k)?;
            let map = index_predictions(&preds);
            let per = normalized_accuracy(&map, mentions.iter().copied(), candidates, k)?;
            let subset_size: usize = per.iter().map(|d| d.subset_size).sum();
            let correct: usize = per.iter().map(|d| d.correct).sum();
            Ok(ScalingPoint {
                k,
                subset_size,
                mentions: mentions.len(),
                normalized_accuracy: if subset_size == 0 {
                    0.0
                } else {
                    correct as f64 / subset_size as f64
                },
                unnormalized_accuracy: unnormalized_accuracy(&map, mentions.iter().copied()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub k: usize,
    pub mentions: usize,
    pub subset_size: usize,
    pub recall_at_k: f64,
    pub domains: Vec<DomainResult>,
    pub macro_accuracy: f64,
    pub micro_accuracy: f64,
    pub unnormalized_accuracy: f64,
    pub categories: Vec<CategoryResult>,
    pub scaling: Vec<ScalingPoint>,
}

/// Scores `preds` on one split of `dataset`.
pub fn evaluate(
    dataset: &Dataset,
    split: Split,
    preds: &[RankedPrediction],
    candidates: &CandidateMap,
    k: usize,
) -> Result<EvalReport> {
    let mentions = dataset.mentions_in(split);
    let map = index_predictions(preds);
    let domains = normalized_accuracy(&map, mentions.iter().copied(), candidates, k)?;
    let scored: Vec<&DomainResult> = domains.iter().filter(|d| d.subset_size > 0).collect();
    let (macro_accuracy, micro_accuracy) = if scored.is_empty() {
        (0.0, 0.0)
    } else {
        let accs: Vec<f64> = scored.iter().map(|d| d.normalized_accuracy).collect();
        let sizes: Vec<usize> = scored.iter().map(|d| d.subset_size).collect();
        aggregate(&accs, &sizes)?
    };
    let subset_size: usize = domains.iter().map(|d| d.subset_size).sum();
    Ok(EvalReport {
        split,
        k,
        mentions: mentions.len(),
        subset_size,
        recall_at_k: if mentions.is_empty() {
            0.0
        } else {
            subset_size as f64 / mentions.len() as f64
        },
        macro_accuracy,
        micro_accuracy,
        unnormalized_accuracy: unnormalized_accuracy(&map, mentions.iter().copied()),
        categories: category_accuracy(dataset, &map, mentions.iter().copied(), candidates, k)?,
        domains,
        scaling: Vec::new(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "split {}  k={}  mentions={}  subset={}  recall@k={:.4}",
            self.split.name(),
            self.k,
            self.mentions,
            self.subset_size,
            self.recall_at_k
        );
        let _ = writeln!(out, "{:<24} {:>8} {:>8} {:>10}", "domain", "subset", "correct", "norm.acc");
        for d in &self.domains {
            let _ = writeln!(
                out,
                "{:<24} {:>8} {:>8} {:>10.2}",
                d.domain,
                d.subset_size,
                d.correct,
                100.0 * d.normalized_accuracy
            );
        }
        let _ = writeln!(out, "macro acc.   {:.2}", 100.0 * self.macro_accuracy);
        let _ = writeln!(out, "micro acc.   {:.2}", 100.0 * self.micro_accuracy);
        let _ = writeln!(out, "unnorm. acc. {:.2}", 100.0 * self.unnormalized_accuracy);
        for c in &self.categories {
            let _ = writeln!(
                out,
                "  {}  {:>6} mentions  {:.2}",
                c.category.code(),
                c.count,
                100.0 * c.accuracy
            );
        }
        if !self.scaling.is_empty() {
            let _ = writeln!(out, "{:>6} {:>8} {:>10} {:>10}", "k", "subset", "norm.acc", "unnorm.acc");
            for p in &self.scaling {
                let _ = writeln!(
                    out,
                    "{:>6} {:>8} {:>10.2} {:>10.2}",
                    p.k,
                    p.subset_size,
                    100.0 * p.normalized_accuracy,
                    100.0 * p.unnormalized_accuracy
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub mention_id: String,
    pub left: Option<String>,
    pub right: Option<String>,
}

/// Mentions whose top-1 prediction differs between two prediction sets.
pub fn disagreements(left: &[RankedPrediction], right: &[RankedPrediction]) -> Vec<Disagreement> {
    let rmap = index_predictions(right);
    left.iter()
        .filter_map(|l| {
            let r = rmap.get(l.mention_id.as_str())?;
            (l.predicted != r.predicted).then(|| Disagreement {
                mention_id: l.mention_id.clone(),
                left: l.predicted.clone(),
                right: r.predicted.clone(),
            })
        })
        .collect()
}

/// Minimal SVG line chart of accuracy against candidate count (log2 x axis).
pub fn scaling_svg(title: &str, series: &[(String, Vec<(usize, f64)>)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let xs: Vec<f64> = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| (p.0.max(1) as f64).log2()))
        .collect();
    let xmax = xs.iter().cloned().fold(1.0, f64::max);
    let sx = |k: usize| PAD + (k.max(1) as f64).log2() / xmax * (W - 2.0 * PAD);
    let sy = |a: f64| H - PAD - a.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(svg, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>", W / 2.0);
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD,
        H - PAD
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>",
        H - PAD
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.2}</text>",
            PAD - 4.0,
            sy(tick) + 4.0,
            tick
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(k, a)| format!("{:.1},{:.1}", sx(k), sy(a)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        for &(k, _) in pts {
            if i == 0 {
                let _ = writeln!(
                    svg,
                    "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{k}</text>",
                    sx(k),
                    H - PAD + 14.0
                );
            }
        }
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
            W - PAD - 90.0,
            PAD + 14.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}
