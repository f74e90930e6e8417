//! Segment-embedding index, query-specific candidate pools, and top-K
//! scoring.
//!
//! Scoring is exact: a matrix–vector product over the pool plus a partial
//! selection for the returned top-K. The ground-truth rank uses the strict
//! inequality `1 + #{score > score_gt}`, so ties never push the truth down.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::encoder::{pool_segment, project_and_normalize, FrameEncoder, ProjectionHead, SharedEmbedding};
use crate::error::{Error, Result};
use crate::segment::SegmentSpec;

/// All candidate segments embedded into the shared space, in a
/// deterministic row order (sorted by window id, then boundaries).
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    specs: Vec<SegmentSpec>,
    rows: Array2<f64>,
    window_membership: HashMap<String, Vec<usize>>,
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn specs(&self) -> &[SegmentSpec] {
        &self.specs
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn window_ids(&self) -> impl Iterator<Item = &String> {
        self.window_membership.keys()
    }

    /// Row index of an exact spec, if present.
    pub fn position(&self, spec: &SegmentSpec) -> Option<usize> {
        self.specs.binary_search(spec).ok()
    }

    /// Assembles an index from externally produced embeddings. Specs must be
    /// unique; rows must be unit-norm and row `i` must embed `specs[i]`.
    pub fn from_parts(specs: Vec<SegmentSpec>, rows: Array2<f64>) -> Result<Self> {
        if specs.len() != rows.nrows() {
            return Err(Error::InvalidInput(format!(
                "{} spec(s) but {} embedding row(s)",
                specs.len(),
                rows.nrows()
            )));
        }
        let mut order: Vec<usize> = (0..specs.len()).collect();
        order.sort_by(|&a, &b| specs[a].cmp(&specs[b]));
        if order.windows(2).any(|w| specs[w[0]] == specs[w[1]]) {
            return Err(Error::InvalidInput("duplicate specs in index input".into()));
        }
        let mut sorted_specs = Vec::with_capacity(specs.len());
        let mut sorted_rows = Array2::zeros(rows.dim());
        for (dst, &src) in order.iter().enumerate() {
            let row = rows.row(src);
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "embedding row {src} has norm {norm}, expected 1"
                )));
            }
            sorted_rows.row_mut(dst).assign(&row);
            sorted_specs.push(specs[src].clone());
        }
        let mut membership: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, spec) in sorted_specs.iter().enumerate() {
            membership.entry(spec.window_id.clone()).or_default().push(i);
        }
        Ok(Self {
            specs: sorted_specs,
            rows: sorted_rows,
            window_membership: membership,
        })
    }
}

/// Embeds every spec through the same featurize → pool → project →
/// normalize path used in training. Duplicate specs are dropped with a
/// warning; a spec whose window is missing is an error naming it.
pub fn build_index(
    specs: &[SegmentSpec],
    windows: &HashMap<String, Window>,
    featurizer: &dyn FrameEncoder,
    seg_head: &ProjectionHead,
) -> Result<EmbeddingIndex> {
    let mut unique: Vec<SegmentSpec> = Vec::with_capacity(specs.len());
    {
        let mut seen = BTreeSet::new();
        for spec in specs {
            if seen.insert(spec.clone()) {
                unique.push(spec.clone());
            } else {
                log::warn!(
                    "duplicate segment ({}, {}, {}) dropped from index input",
                    spec.window_id,
                    spec.a,
                    spec.b
                );
            }
        }
    }
    unique.sort();

    let dim = seg_head.output_dim();
    let mut rows = Array2::<f64>::zeros((unique.len(), dim));
    let mut membership: HashMap<String, Vec<usize>> = HashMap::new();
    let mut cached: Option<(String, crate::encoder::FrameFeatures)> = None;
    for (i, spec) in unique.iter().enumerate() {
        // specs arrive sorted by window, so one cached featurization per window suffices
        let stale = !matches!(&cached, Some((id, _)) if *id == spec.window_id);
        if stale {
            let window = windows.get(&spec.window_id).ok_or_else(|| Error::MissingWindow {
                window_id: spec.window_id.clone(),
                a: spec.a,
                b: spec.b,
            })?;
            cached = Some((spec.window_id.clone(), featurizer.encode(window)?));
        }
        let features = &cached.as_ref().expect("encoded above").1;
        let pooled = pool_segment(features, spec.a, spec.b)?;
        let embedding = project_and_normalize(&pooled.view(), seg_head)?;
        rows.row_mut(i).assign(embedding.vector());
        membership
            .entry(spec.window_id.clone())
            .or_default()
            .push(i);
    }
    Ok(EmbeddingIndex {
        specs: unique,
        rows,
        window_membership: membership,
    })
}

/// A query's candidate set: segments of `pool_size` windows, always
/// including the ground truth's parent window.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub query_id: String,
    pub window_ids: BTreeSet<String>,
    /// Index rows that constitute the candidate set, in index order.
    pub candidate_rows: Vec<usize>,
    /// Position of the ground-truth spec within `candidate_rows`.
    pub gt_position: usize,
}

/// Builds the pool for one query: the ground truth's window plus
/// `pool_size - 1` windows sampled uniformly without replacement from the
/// rest, then every index spec living in those windows.
pub fn make_pool(
    query_id: &str,
    gt: &SegmentSpec,
    test_window_ids: &[String],
    pool_size: usize,
    seed: u64,
    index: &EmbeddingIndex,
) -> Result<CandidatePool> {
    if pool_size == 0 {
        return Err(Error::InvalidInput("pool_size must be >= 1".into()));
    }
    if pool_size > test_window_ids.len() {
        return Err(Error::InvalidInput(format!(
            "pool_size {pool_size} exceeds the {} available window(s)",
            test_window_ids.len()
        )));
    }
    if !test_window_ids.contains(&gt.window_id) {
        return Err(Error::InvalidInput(format!(
            "ground-truth window '{}' is not among the candidate windows",
            gt.window_id
        )));
    }

    let mut pool: BTreeSet<String> = BTreeSet::new();
    pool.insert(gt.window_id.clone());
    let mut others: Vec<&String> = test_window_ids
        .iter()
        .filter(|w| **w != gt.window_id)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    others.shuffle(&mut rng);
    for w in others.into_iter().take(pool_size - 1) {
        pool.insert(w.clone());
    }

    let mut candidate_rows = Vec::new();
    for (row, spec) in index.specs.iter().enumerate() {
        if pool.contains(&spec.window_id) {
            candidate_rows.push(row);
        }
    }
    let gt_row = index.position(gt).ok_or_else(|| Error::InvalidInput(format!(
        "ground-truth segment ({}, {}, {}) is not in the index",
        gt.window_id, gt.a, gt.b
    )))?;
    let gt_position = candidate_rows
        .iter()
        .position(|&r| r == gt_row)
        .expect("gt window is in the pool, so its rows are candidates");

    Ok(CandidatePool {
        query_id: query_id.to_string(),
        window_ids: pool,
        candidate_rows,
        gt_position,
    })
}

/// One scored candidate in a ranked list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    #[serde(flatten)]
    pub spec: SegmentSpec,
    pub score: f64,
}

/// Top-K list plus the ground truth's rank over the whole pool.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
    pub gt_rank: usize,
}

/// Ranks scored candidates: top-`k` positions in descending score (ties
/// broken by candidate order), and the strict-inequality rank of the
/// candidate at `gt_position`. Candidate order means index-row order here,
/// which is how [`make_pool`] emits candidates.
pub fn rank_scores(scores: &[f64], gt_position: usize, k: usize) -> (Vec<usize>, usize) {
    let gt_score = scores[gt_position];
    let gt_rank = 1 + scores.iter().filter(|&&s| s > gt_score).count();

    let take = k.min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let by_score_then_pos = |&a: &usize, &b: &usize| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    };
    if take < scores.len() {
        order.select_nth_unstable_by(take - 1, by_score_then_pos);
        order.truncate(take);
    }
    order.sort_by(by_score_then_pos);
    (order, gt_rank)
}

/// Scores one query against a pool and returns the top-K with the
/// ground-truth rank.
pub fn score_and_rank(
    query_embedding: &SharedEmbedding,
    pool: &CandidatePool,
    index: &EmbeddingIndex,
    k: usize,
) -> Result<RankedResult> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    if pool.candidate_rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "query '{}' has an empty candidate pool",
            pool.query_id
        )));
    }
    if query_embedding.dim() != index.dim() {
        return Err(Error::InvalidInput(format!(
            "query dim {} != index dim {}",
            query_embedding.dim(),
            index.dim()
        )));
    }
    let q: &Array1<f64> = query_embedding.vector();
    let scores: Vec<f64> = pool
        .candidate_rows
        .iter()
        .map(|&row| index.rows.row(row).dot(q))
        .collect();
    let (top, gt_rank) = rank_scores(&scores, pool.gt_position, k);
    let entries = top
        .into_iter()
        .map(|pos| RankedEntry {
            spec: index.specs[pool.candidate_rows[pos]].clone(),
            score: scores[pos],
        })
        .collect();
    Ok(RankedResult {
        query_id: pool.query_id.clone(),
        entries,
        gt_rank,
    })
}

/// The random baseline: ranks the candidate list by a seeded permutation.
pub fn rank_random(pool: &CandidatePool, index: &EmbeddingIndex, k: usize, seed: u64) -> Result<RankedResult> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let n = pool.candidate_rows.len();
    if n == 0 {
        return Err(Error::InvalidInput(format!(
            "query '{}' has an empty candidate pool",
            pool.query_id
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    // pseudo-scores descend along the permutation so ranks are unambiguous
    let gt_rank = 1 + perm.iter().position(|&p| p == pool.gt_position).expect("gt in pool");
    let entries = perm
        .iter()
        .take(k.min(n))
        .enumerate()
        .map(|(i, &pos)| RankedEntry {
            spec: index.specs[pool.candidate_rows[pos]].clone(),
            score: (n - i) as f64 / n as f64,
        })
        .collect();
    Ok(RankedResult {
        query_id: pool.query_id.clone(),
        entries,
        gt_rank,
    })
}

// ---------------------------------------------------------------------------
// index file format: binary rows + NDJSON spec sidecar
// ---------------------------------------------------------------------------

const INDEX_MAGIC: &[u8; 8] = b"SGEIDX01";

/// Writes `<path>` (header + little-endian f32 rows) and `<path>.specs.ndjson`
/// (one spec per row, in row order).
pub fn write_index(path: &Path, index: &EmbeddingIndex) -> Result<()> {
    let display = path.display().to_string();
    let mut blob = Vec::with_capacity(16 + index.len() * index.dim() * 4);
    blob.extend_from_slice(INDEX_MAGIC);
    blob.extend_from_slice(&1u32.to_le_bytes()); // version
    blob.extend_from_slice(&(index.len() as u64).to_le_bytes());
    blob.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    for v in index.rows.iter() {
        blob.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    file.write_all(&blob).map_err(|e| Error::io(&display, e))?;

    let sidecar = sidecar_path(path);
    let mut text = String::new();
    for spec in &index.specs {
        text.push_str(&serde_json::to_string(spec).expect("spec serialization cannot fail"));
        text.push('\n');
    }
    std::fs::write(&sidecar, text).map_err(|e| Error::io(sidecar.display().to_string(), e))?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".specs.ndjson");
    std::path::PathBuf::from(name)
}

pub fn read_index(path: &Path) -> Result<EmbeddingIndex> {
    let display = path.display().to_string();
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(&display, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(&display, e))?;
    if data.len() < 24 || &data[..8] != INDEX_MAGIC {
        return Err(Error::MalformedFile {
            path: display,
            message: "not an index file (bad magic)".into(),
        });
    }
    let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
    if version != 1 {
        return Err(Error::MalformedFile {
            path: display,
            message: format!("unsupported index version {version}"),
        });
    }
    let count = u64::from_le_bytes(data[12..20].try_into().expect("8 bytes")) as usize;
    let dim = u32::from_le_bytes(data[20..24].try_into().expect("4 bytes")) as usize;
    let expected = 24 + count * dim * 4;
    if data.len() != expected {
        return Err(Error::MalformedFile {
            path: display,
            message: format!("expected {expected} bytes for {count} x {dim} rows, found {}", data.len()),
        });
    }
    let values: Vec<f64> = data[24..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let rows = Array2::from_shape_vec((count, dim), values).expect("length checked above");

    let sidecar = sidecar_path(path);
    let sidecar_display = sidecar.display().to_string();
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar_display, e))?;
    let mut specs = Vec::with_capacity(count);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let spec: SegmentSpec = serde_json::from_str(line).map_err(|e| Error::MalformedFile {
            path: sidecar_display.clone(),
            message: format!("line {}: {e}", i + 1),
        })?;
        specs.push(spec);
    }
    if specs.len() != count {
        return Err(Error::MalformedFile {
            path: sidecar_display,
            message: format!("sidecar has {} spec(s), index has {count} row(s)", specs.len()),
        });
    }
    let mut membership: HashMap<String, Vec<usize>> = HashMap::new();
    for (i, spec) in specs.iter().enumerate() {
        membership.entry(spec.window_id.clone()).or_default().push(i);
    }
    Ok(EmbeddingIndex {
        specs,
        rows,
        window_membership: membership,
    })
}
