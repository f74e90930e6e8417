//! Frame-level window encoding, boundary-interval pooling, text embedding,
//! projection heads into the shared space, and the symmetric contrastive
//! loss.
//!
//! The window featurizer and text embedder are pluggable behind traits; the
//! built-ins are deterministic so every pipeline stage runs offline. Row t
//! of the frame matrix always describes input frame t, which is what makes
//! boundary-interval pooling meaningful.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::Deserialize;

use crate::data::Window;
use crate::error::{Error, Result};

/// Dimension of the shared embedding space.
pub const EMBED_DIM: usize = 128;
/// Buckets in the hashing text embedder.
pub const TEXT_DIM: usize = 256;
/// Per-frame features from the built-in featurizer.
pub const FEATURE_DIM: usize = 8;

/// Frame-aligned representation of one window: row t describes frame t.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    rows: Array2<f64>,
}

impl FrameFeatures {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::InvalidInput("frame features must be non-empty".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("frame features must be finite".into()));
        }
        Ok(Self { rows })
    }

    pub fn frames(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }
}

/// Anything that turns a normalized window into frame-aligned features.
pub trait FrameEncoder: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn encode(&self, window: &Window) -> Result<FrameFeatures>;
}

/// Built-in deterministic featurizer: per frame, the value itself, its first
/// difference, a centered rolling mean/std/OLS-slope (width 31), distance to
/// the window mean, normalized position, and a centered rolling range
/// (width 101). Edge frames use truncated windows.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceFeaturizer;

const ROLLING_WIDTH: usize = 31;
const RANGE_WIDTH: usize = 101;

impl FrameEncoder for ReferenceFeaturizer {
    fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    fn encode(&self, window: &Window) -> Result<FrameFeatures> {
        let v = &window.values;
        let len = v.len();
        if len < 3 {
            return Err(Error::InvalidInput("featurizer needs at least 3 frames".into()));
        }

        // prefix sums for O(1) window statistics
        let mut p1 = vec![0.0; len + 1]; // sum v
        let mut p2 = vec![0.0; len + 1]; // sum v^2
        let mut pt = vec![0.0; len + 1]; // sum t*v
        for t in 0..len {
            p1[t + 1] = p1[t] + v[t];
            p2[t + 1] = p2[t] + v[t] * v[t];
            pt[t + 1] = pt[t] + t as f64 * v[t];
        }
        let global_mean = p1[len] / len as f64;
        // sum of t^2 for t in 0..=k
        let sq = |k: i64| -> f64 {
            if k < 0 {
                0.0
            } else {
                let k = k as f64;
                k * (k + 1.0) * (2.0 * k + 1.0) / 6.0
            }
        };

        let half_roll = ROLLING_WIDTH / 2;
        let half_range = RANGE_WIDTH / 2;
        let mut rows = Array2::<f64>::zeros((len, FEATURE_DIM));
        for t in 0..len {
            let lo = t.saturating_sub(half_roll);
            let hi = (t + half_roll).min(len - 1);
            let n = (hi - lo + 1) as f64;
            let sum_v = p1[hi + 1] - p1[lo];
            let sum_vv = p2[hi + 1] - p2[lo];
            let sum_tv = pt[hi + 1] - pt[lo];
            let mean = sum_v / n;
            let var = (sum_vv / n - mean * mean).max(0.0);
            let sum_t = (lo + hi) as f64 * n / 2.0;
            let sum_tt = sq(hi as i64) - sq(lo as i64 - 1);
            let denom = sum_tt - sum_t * sum_t / n;
            let slope = if denom > 0.0 {
                (sum_tv - sum_t * sum_v / n) / denom
            } else {
                0.0
            };

            let rlo = t.saturating_sub(half_range);
            let rhi = (t + half_range).min(len - 1);
            let mut rmin = f64::INFINITY;
            let mut rmax = f64::NEG_INFINITY;
            for &x in &v[rlo..=rhi] {
                rmin = rmin.min(x);
                rmax = rmax.max(x);
            }

            rows[[t, 0]] = v[t];
            rows[[t, 1]] = if t == 0 { 0.0 } else { v[t] - v[t - 1] };
            rows[[t, 2]] = mean;
            rows[[t, 3]] = var.sqrt();
            rows[[t, 4]] = slope;
            rows[[t, 5]] = v[t] - global_mean;
            rows[[t, 6]] = t as f64 / len as f64;
            rows[[t, 7]] = rmax - rmin;
        }
        FrameFeatures::new(rows)
    }
}

/// Mean of rows `a..=b` (1-based inclusive): the segment feature.
pub fn pool_segment(features: &FrameFeatures, a: usize, b: usize) -> Result<Array1<f64>> {
    let len = features.frames();
    if a < 1 || a > b || b > len {
        return Err(Error::InvalidInput(format!(
            "pooling interval ({a}, {b}) invalid for {len} frames"
        )));
    }
    let slab = features.rows.slice(ndarray::s![a - 1..b, ..]);
    Ok(&slab.sum_axis(Axis(0)) / (b - a + 1) as f64)
}

/// Anything that turns a caption into a raw feature vector.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, caption: &str) -> Result<Array1<f64>>;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Feature-hashing bag of words with sign hashing, l2-normalized. Fully
/// deterministic across platforms (FNV-1a, not the std hasher).
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: TEXT_DIM }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &str) -> Result<Array1<f64>> {
        if caption.trim().is_empty() {
            return Err(Error::InvalidInput("cannot embed an empty caption".into()));
        }
        let mut out = Array1::<f64>::zeros(self.dim);
        let mut tokens = 0usize;
        for token in caption
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            out[bucket] += sign;
            tokens += 1;
        }
        if tokens == 0 {
            return Err(Error::InvalidInput(format!(
                "caption has no alphanumeric tokens: {caption:?}"
            )));
        }
        let norm = out.dot(&out).sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        Ok(out / norm)
    }
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    caption: String,
    vector: Vec<f64>,
}

/// Precomputed embeddings keyed by exact caption text, loaded from NDJSON
/// lines `{"caption": ..., "vector": [...]}`. Vectors are returned verbatim.
pub struct FileEmbedder {
    map: HashMap<String, Array1<f64>>,
    dim: usize,
}

impl FileEmbedder {
    pub fn from_ndjson(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
        let mut map = HashMap::new();
        let mut dim = 0usize;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&display, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord =
                serde_json::from_str(&line).map_err(|e| Error::MalformedFile {
                    path: display.clone(),
                    message: format!("line {}: {e}", i + 1),
                })?;
            if dim == 0 {
                dim = rec.vector.len();
            } else if rec.vector.len() != dim {
                return Err(Error::MalformedFile {
                    path: display.clone(),
                    message: format!(
                        "line {}: vector dim {} differs from {}",
                        i + 1,
                        rec.vector.len(),
                        dim
                    ),
                });
            }
            map.insert(rec.caption, Array1::from_vec(rec.vector));
        }
        if map.is_empty() {
            return Err(Error::MalformedFile {
                path: display,
                message: "no embedding records".into(),
            });
        }
        Ok(Self { map, dim })
    }
}

impl TextEmbedder for FileEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, caption: &str) -> Result<Array1<f64>> {
        self.map
            .get(caption)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(caption.to_string()))
    }
}

/// Two affine layers with a ReLU between; maps either modality into the
/// shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w1: Array2<f64>, // hidden x input
    pub b1: Array1<f64>,
    pub w2: Array2<f64>, // output x hidden
    pub b2: Array1<f64>,
}

impl ProjectionHead {
    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut layer = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..=limit))
        };
        Self {
            w1: layer(hidden, input),
            b1: Array1::zeros(hidden),
            w2: layer(output, hidden),
            b2: Array1::zeros(output),
        }
    }

    /// Passthrough head for tests: identity first layer (hidden = input) and
    /// an identity-padded second layer. Faithful only for nonnegative
    /// inputs, since the ReLU sits between the layers.
    pub fn identity(input: usize, output: usize) -> Self {
        Self {
            w1: Array2::eye(input),
            b1: Array1::zeros(input),
            w2: Array2::from_shape_fn((output, input), |(i, j)| f64::from(i == j)),
            b2: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// Raw (unnormalized) head output for one vector.
    pub fn project(&self, v: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::InvalidInput(format!(
                "projection input dim {} != head input dim {}",
                v.len(),
                self.input_dim()
            )));
        }
        let a1 = self.w1.dot(v) + &self.b1;
        let r1 = a1.mapv(|x| x.max(0.0));
        Ok(self.w2.dot(&r1) + &self.b2)
    }

    /// Batch forward pass keeping the intermediates needed for backprop.
    pub(crate) fn forward_batch(&self, x: &Array2<f64>) -> HeadActivations {
        let a1 = x.dot(&self.w1.t()) + &self.b1;
        let r1 = a1.mapv(|v| v.max(0.0));
        let out = r1.dot(&self.w2.t()) + &self.b2;
        HeadActivations { a1, r1, out }
    }
}

/// Intermediates of a batch forward pass through one head.
pub(crate) struct HeadActivations {
    pub a1: Array2<f64>,
    pub r1: Array2<f64>,
    pub out: Array2<f64>,
}

/// Gradients for one head, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Backprop through one head given the gradient at its raw output.
pub(crate) fn head_backward(
    head: &ProjectionHead,
    x: &Array2<f64>,
    acts: &HeadActivations,
    d_out: &Array2<f64>,
) -> HeadGradients {
    let d_w2 = d_out.t().dot(&acts.r1);
    let d_b2 = d_out.sum_axis(Axis(0));
    let d_r1 = d_out.dot(&head.w2);
    let gate = acts.a1.mapv(|v| f64::from(v > 0.0));
    let d_a1 = &d_r1 * &gate;
    let d_w1 = d_a1.t().dot(x);
    let d_b1 = d_a1.sum_axis(Axis(0));
    HeadGradients {
        w1: d_w1,
        b1: d_b1,
        w2: d_w2,
        b2: d_b2,
    }
}

/// A unit-norm vector in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedEmbedding(Array1<f64>);

impl SharedEmbedding {
    /// Validates unit norm (within 1e-6) and finiteness.
    pub fn new(v: Array1<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("embedding must be finite".into()));
        }
        let norm = v.dot(&v).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "embedding norm {norm} is not within 1e-6 of 1"
            )));
        }
        Ok(Self(v))
    }

    pub fn vector(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &SharedEmbedding) -> f64 {
        self.0.dot(&other.0)
    }
}

/// Projects through the head and l2-normalizes; a (numerically) zero output
/// cannot be normalized and is an error.
pub fn project_and_normalize(v: &ArrayView1<f64>, head: &ProjectionHead) -> Result<SharedEmbedding> {
    let out = head.project(v)?;
    let norm = out.dot(&out).sqrt();
    if !norm.is_finite() || norm < 1e-30 {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(SharedEmbedding(out / norm))
}

/// Normalizes each row of a raw output batch; used by the trainer.
pub(crate) fn normalize_rows(out: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = out.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if norms.iter().any(|n| !n.is_finite() || *n < 1e-30) {
        return Err(Error::DegenerateEmbedding);
    }
    let mut z = out.clone();
    for (mut row, &n) in z.axis_iter_mut(Axis(0)).zip(norms.iter()) {
        row /= n;
    }
    Ok((z, norms))
}

/// Backprop through row normalization: `d_out = (d_z - z (z . d_z)) / norm`.
pub(crate) fn normalize_rows_backward(
    z: &Array2<f64>,
    norms: &Array1<f64>,
    d_z: &Array2<f64>,
) -> Array2<f64> {
    let mut d_out = d_z.clone();
    for ((mut row, (z_row, dz_row)), &n) in d_out
        .axis_iter_mut(Axis(0))
        .zip(z.axis_iter(Axis(0)).zip(d_z.axis_iter(Axis(0))))
        .zip(norms.iter())
    {
        let proj = z_row.dot(&dz_row);
        for (j, r) in row.iter_mut().enumerate() {
            *r = (dz_row[j] - z_row[j] * proj) / n;
        }
    }
    d_out
}

/// Temperature-scaled pairwise similarities `z_i . u_j / tau`.
pub fn similarity_matrix(z: &Array2<f64>, u: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::InvalidInput(format!("tau must be > 0, got {tau}")));
    }
    if z.nrows() != u.nrows() || z.ncols() != u.ncols() {
        return Err(Error::InvalidInput(format!(
            "similarity shape mismatch: {:?} vs {:?}",
            z.dim(),
            u.dim()
        )));
    }
    Ok(z.dot(&u.t()) / tau)
}

/// One full forward/backward pass of the contrastive objective for a paired
/// batch: pooled segment features and raw text features go through their
/// heads, rows are normalized, and the symmetric loss backpropagates into
/// both heads. Returns the loss and both heads' parameter gradients.
pub fn contrastive_batch_gradients(
    seg_head: &ProjectionHead,
    text_head: &ProjectionHead,
    x_seg: &Array2<f64>,
    x_text: &Array2<f64>,
    tau: f64,
) -> Result<(f64, HeadGradients, HeadGradients)> {
    let seg_acts = seg_head.forward_batch(x_seg);
    let text_acts = text_head.forward_batch(x_text);
    let (z, z_norms) = normalize_rows(&seg_acts.out)?;
    let (u, u_norms) = normalize_rows(&text_acts.out)?;
    let psi = similarity_matrix(&z, &u, tau)?;
    let (loss, d_psi) = infonce_loss(&psi)?;
    let d_z = d_psi.dot(&u) / tau;
    let d_u = d_psi.t().dot(&z) / tau;
    let d_seg_out = normalize_rows_backward(&z, &z_norms, &d_z);
    let d_text_out = normalize_rows_backward(&u, &u_norms, &d_u);
    let g_seg = head_backward(seg_head, x_seg, &seg_acts, &d_seg_out);
    let g_text = head_backward(text_head, x_text, &text_acts, &d_text_out);
    Ok((loss, g_seg, g_text))
}

/// Symmetric contrastive loss over a square similarity matrix with positives
/// on the diagonal: the mean of the row-wise and column-wise cross-entropy,
/// averaged over the batch. Also returns the analytic gradient w.r.t. the
/// matrix.
pub fn infonce_loss(psi: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let b = psi.nrows();
    if b == 0 || psi.ncols() != b {
        return Err(Error::InvalidInput(format!(
            "similarity matrix must be square and non-empty, got {:?}",
            psi.dim()
        )));
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("similarity matrix must be finite".into()));
    }

    let bf = b as f64;
    let mut grad = Array2::<f64>::zeros((b, b));
    let mut loss = 0.0;

    // rows: each segment against all captions
    for i in 0..b {
        let row = psi.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += (lse - psi[[i, i]]) / (2.0 * bf);
        for j in 0..b {
            grad[[i, j]] += ((psi[[i, j]] - lse).exp() - f64::from(i == j)) / (2.0 * bf);
        }
    }
    // columns: each caption against all segments
    for j in 0..b {
        let col = psi.column(j);
        let max = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += (lse - psi[[j, j]]) / (2.0 * bf);
        for i in 0..b {
            grad[[i, j]] += ((psi[[i, j]] - lse).exp() - f64::from(i == j)) / (2.0 * bf);
        }
    }
    Ok((loss, grad))
}
