//! Retrieval evaluation: rank-based metrics, caption-side embedding
//! consistency, judge-score aggregation, and the score histogram export.
//!
//! A heads-up on naming: `mean_ap` is the mean of reciprocal ground-truth
//! ranks. Under single-positive labels that is exactly mean reciprocal
//! rank, and it is reported here under the "map" key to keep the output
//! tables' layout; it is NOT the multi-positive average-precision mAP of
//! the broader IR literature.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoder::TextEmbedder;
use crate::error::{Error, Result};
use crate::segment::SegmentSpec;

/// One evaluation query: a caption with exactly one ground-truth segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub query_id: String,
    pub caption: String,
    #[serde(flatten)]
    pub gt: SegmentSpec,
}

/// The fixed query set shared by every method under evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    pub entries: Vec<QueryEntry>,
}

impl QuerySet {
    pub fn new(entries: Vec<QueryEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("query set is empty".into()));
        }
        if let Some(e) = entries.iter().find(|e| e.caption.trim().is_empty()) {
            return Err(Error::InvalidInput(format!(
                "query '{}' has an empty caption",
                e.query_id
            )));
        }
        let mut ids = BTreeSet::new();
        for e in &entries {
            if !ids.insert(&e.query_id) {
                return Err(Error::InvalidInput(format!(
                    "duplicate query id '{}'",
                    e.query_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One judge verdict for a (query, rank) cell: a 1–5 relevance score and a
/// binary match label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutput {
    pub query_id: String,
    pub rank: usize,
    pub score: u8,
    pub label: u8,
}

impl JudgeOutput {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.score) {
            return Err(Error::InvalidInput(format!(
                "judge score {} for ({}, rank {}) outside 1..=5",
                self.score, self.query_id, self.rank
            )));
        }
        if self.label > 1 {
            return Err(Error::InvalidInput(format!(
                "judge label {} for ({}, rank {}) is not binary",
                self.label, self.query_id, self.rank
            )));
        }
        if self.rank == 0 {
            return Err(Error::InvalidInput("judge rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fraction of queries whose ground truth lands in the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidInput("recall over an empty rank list".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if ranks.iter().any(|&r| r == 0) {
        return Err(Error::InvalidInput("ranks are 1-based; found 0".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean reciprocal ground-truth rank (reported as "map"; see module docs).
pub fn mean_ap(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidInput("mean_ap over an empty rank list".into()));
    }
    if ranks.iter().any(|&r| r == 0) {
        return Err(Error::InvalidInput("ranks are 1-based; found 0".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

fn normalized(v: ndarray::Array1<f64>) -> Result<ndarray::Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(v / norm)
}

/// Mean cosine between the query caption and the captions of the top-K
/// retrieved segments, under a pluggable sentence embedder whose outputs
/// are normalized here.
pub fn mean_sbert_at_k(
    query_caption: &str,
    retrieved_captions: &[String],
    embedder: &dyn TextEmbedder,
) -> Result<f64> {
    if retrieved_captions.is_empty() {
        return Err(Error::InvalidInput(
            "mean_sbert_at_k needs at least one retrieved caption".into(),
        ));
    }
    let q = normalized(embedder.embed(query_caption)?)?;
    let mut total = 0.0;
    for caption in retrieved_captions {
        let c = normalized(embedder.embed(caption)?)?;
        total += q.dot(&c);
    }
    Ok(total / retrieved_captions.len() as f64)
}

/// Double averages of judge outputs over an exactly complete
/// `n_queries x k` grid: (mean 1–5 score, mean binary precision).
pub fn vlm_aggregate(
    judgments: &[JudgeOutput],
    query_ids: &[String],
    k: usize,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if query_ids.is_empty() {
        return Err(Error::InvalidInput("no queries to aggregate".into()));
    }
    for j in judgments {
        j.validate()?;
    }
    let mut grid: std::collections::HashMap<(&str, usize), &JudgeOutput> =
        std::collections::HashMap::with_capacity(judgments.len());
    for j in judgments {
        if grid.insert((j.query_id.as_str(), j.rank), j).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate judgment for ({}, rank {})",
                j.query_id, j.rank
            )));
        }
    }
    let mut gaps = Vec::new();
    let mut score_total = 0.0;
    let mut label_total = 0.0;
    for q in query_ids {
        let mut score_q = 0.0;
        let mut label_q = 0.0;
        for rank in 1..=k {
            match grid.get(&(q.as_str(), rank)) {
                Some(j) => {
                    score_q += f64::from(j.score);
                    label_q += f64::from(j.label);
                }
                None => gaps.push((q.clone(), rank)),
            }
        }
        score_total += score_q / k as f64;
        label_total += label_q / k as f64;
    }
    if !gaps.is_empty() {
        return Err(Error::IncompleteJudgments { gaps });
    }
    let n = query_ids.len() as f64;
    Ok((score_total / n, label_total / n))
}

/// Histogram of per-query mean judge scores over [1, 5].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges, evenly spaced over [1, 5].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Two-column CSV (`bin_start,bin_end,count`), suitable for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, count) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], count));
        }
        out
    }
}

/// Bins per-query mean scores into `bins` uniform buckets over [1, 5]; the
/// top edge is inclusive.
pub fn score_histogram(per_query_means: &[f64], bins: usize) -> Result<Histogram> {
    if per_query_means.is_empty() {
        return Err(Error::InvalidInput("histogram over an empty sample".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidInput("histogram needs at least one bin".into()));
    }
    const LO: f64 = 1.0;
    const HI: f64 = 5.0;
    if let Some(v) = per_query_means
        .iter()
        .find(|v| !v.is_finite() || **v < LO || **v > HI)
    {
        return Err(Error::InvalidInput(format!(
            "score {v} outside the [1, 5] judge scale"
        )));
    }
    let width = (HI - LO) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| LO + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    for &v in per_query_means {
        let mut bin = ((v - LO) / width) as usize;
        if bin >= bins {
            bin = bins - 1; // v == HI lands in the last bin
        }
        counts[bin] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// One metrics row, mirroring the output tables' layout. The judge-backed
/// fields are present only when judge data was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pool: usize,
    pub method: String,
    #[serde(rename = "recall@1")]
    pub recall_at_1: f64,
    #[serde(rename = "recall@5")]
    pub recall_at_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_at_10: f64,
    pub map: f64,
    #[serde(rename = "sbert@10", skip_serializing_if = "Option::is_none")]
    pub sbert_at_10: Option<f64>,
    #[serde(rename = "vlm_score@10", skip_serializing_if = "Option::is_none")]
    pub vlm_score_at_10: Option<f64>,
    #[serde(rename = "vlm_precision@10", skip_serializing_if = "Option::is_none")]
    pub vlm_precision_at_10: Option<f64>,
}
