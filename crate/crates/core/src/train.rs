//! Contrastive training of the two projection heads.
//!
//! The featurizer and text embedder stay frozen; the heads are optimized
//! with decoupled weight decay, linear warmup, and global gradient-norm
//! clipping. Model selection is by validation Acc@1: within each validation
//! batch, a segment counts as correct when its paired caption is the
//! top-scoring caption of that batch (ties go to the lowest index).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::SegmentRecord;
use crate::data::Window;
use crate::encoder::{
    contrastive_batch_gradients, normalize_rows, pool_segment, similarity_matrix, FrameEncoder,
    ProjectionHead, TextEmbedder, EMBED_DIM,
};
use crate::error::{Error, Result};

/// Optimization hyperparameters. Defaults are the full-scale settings;
/// desk-scale runs shrink `batch_size`/`epochs` and raise the learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub rng_seed: u64,
    /// Projection-head hidden width; `None` means the head's input width.
    pub hidden_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            batch_size: 512,
            epochs: 100,
            learning_rate: 1e-4,
            weight_decay: 0.05,
            warmup_steps: 500,
            grad_clip_norm: 1.0,
            rng_seed: 0,
            hidden_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::InvalidInput("tau must be > 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidInput("batch_size must be >= 2".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidInput("epochs must be >= 1".into()));
        }
        if !self.learning_rate.is_finite()
            || self.learning_rate < 0.0
            || !self.weight_decay.is_finite()
            || self.weight_decay < 0.0
        {
            return Err(Error::InvalidInput(
                "learning_rate and weight_decay must be finite and >= 0".into(),
            ));
        }
        if !self.grad_clip_norm.is_finite() || self.grad_clip_norm <= 0.0 {
            return Err(Error::InvalidInput("grad_clip_norm must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-epoch training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_acc1: f64,
}

/// Trained heads plus the training trace; the heads are the best-Acc@1
/// epoch's, not the final ones.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub seg_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_acc1: f64,
    pub cfg: TrainConfig,
    pub feature_dim: usize,
    pub text_dim: usize,
}

struct AdamState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    mb: Vec<Array1<f64>>,
    vb: Vec<Array1<f64>>,
    step: usize,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One cached, embedded pair: pooled segment features, raw text features,
/// and the caption itself (validation compares caption identity).
struct Prepared {
    pooled: Array1<f64>,
    text: Array1<f64>,
    caption: String,
}

fn prepare_pairs(
    pairs: &[SegmentRecord],
    windows: &HashMap<String, Window>,
    featurizer: &dyn FrameEncoder,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<Prepared>> {
    let mut feature_cache: HashMap<&str, std::rc::Rc<crate::encoder::FrameFeatures>> =
        HashMap::new();
    let mut text_cache: HashMap<&str, Array1<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for record in pairs {
        let spec = &record.spec;
        let features = match feature_cache.get(spec.window_id.as_str()) {
            Some(f) => std::rc::Rc::clone(f),
            None => {
                let window = windows.get(&spec.window_id).ok_or_else(|| Error::MissingWindow {
                    window_id: spec.window_id.clone(),
                    a: spec.a,
                    b: spec.b,
                })?;
                let f = std::rc::Rc::new(featurizer.encode(window)?);
                feature_cache.insert(spec.window_id.as_str(), std::rc::Rc::clone(&f));
                f
            }
        };
        let pooled = pool_segment(&features, spec.a, spec.b)?;
        let text = match text_cache.get(record.caption.as_str()) {
            Some(t) => t.clone(),
            None => {
                let t = embedder.embed(&record.caption)?;
                text_cache.insert(record.caption.as_str(), t.clone());
                t
            }
        };
        out.push(Prepared {
            pooled,
            text,
            caption: record.caption.clone(),
        });
    }
    Ok(out)
}

fn stack(rows: &[&Array1<f64>]) -> Array2<f64> {
    let dim = rows[0].len();
    let mut out = Array2::zeros((rows.len(), dim));
    for (mut row, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        row.assign(src);
    }
    out
}

/// In-batch Acc@1: a segment is correct when the caption at its row-argmax
/// is its own paired caption. Comparing caption identity (not the column
/// index) means duplicated caption texts inside a batch cannot count
/// against the model; exact score ties between distinct captions break to
/// the lowest index.
fn batch_acc1(
    z: &Array2<f64>,
    u: &Array2<f64>,
    captions: &[&str],
    tau: f64,
) -> Result<(usize, usize)> {
    let psi = similarity_matrix(z, u, tau)?;
    let mut correct = 0;
    for i in 0..psi.nrows() {
        let row = psi.row(i);
        let mut best = 0usize;
        let mut best_v = row[0];
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if captions[best] == captions[i] {
            correct += 1;
        }
    }
    Ok((correct, psi.nrows()))
}

/// Trains the projection heads on segment–caption pairs. `train_pairs` and
/// `val_pairs` must be disjoint; there must be at least one full training
/// batch. Returns the parameters of the best-validation epoch.
pub fn train(
    train_pairs: &[SegmentRecord],
    val_pairs: &[SegmentRecord],
    windows: &HashMap<String, Window>,
    featurizer: &dyn FrameEncoder,
    embedder: &dyn TextEmbedder,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_pairs.len() < cfg.batch_size {
        return Err(Error::InvalidInput(format!(
            "{} training pair(s) but batch_size is {}",
            train_pairs.len(),
            cfg.batch_size
        )));
    }
    if val_pairs.is_empty() {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }
    {
        let train_keys: std::collections::HashSet<_> =
            train_pairs.iter().map(|r| &r.spec).collect();
        if let Some(dup) = val_pairs.iter().find(|r| train_keys.contains(&r.spec)) {
            return Err(Error::InvalidInput(format!(
                "validation pair ({}, {}, {}) also appears in the training split",
                dup.spec.window_id, dup.spec.a, dup.spec.b
            )));
        }
    }

    let prepared_train = prepare_pairs(train_pairs, windows, featurizer, embedder)?;
    let prepared_val = prepare_pairs(val_pairs, windows, featurizer, embedder)?;
    let feature_dim = featurizer.feature_dim();
    let text_dim = embedder.dim();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let seg_hidden = cfg.hidden_dim.unwrap_or(feature_dim);
    let text_hidden = cfg.hidden_dim.unwrap_or(text_dim);
    let mut seg_head = ProjectionHead::glorot(feature_dim, seg_hidden, EMBED_DIM, &mut rng);
    let mut text_head = ProjectionHead::glorot(text_dim, text_hidden, EMBED_DIM, &mut rng);

    let mut adam = AdamState {
        m: vec![
            Array2::zeros(seg_head.w1.dim()),
            Array2::zeros(seg_head.w2.dim()),
            Array2::zeros(text_head.w1.dim()),
            Array2::zeros(text_head.w2.dim()),
        ],
        v: vec![
            Array2::zeros(seg_head.w1.dim()),
            Array2::zeros(seg_head.w2.dim()),
            Array2::zeros(text_head.w1.dim()),
            Array2::zeros(text_head.w2.dim()),
        ],
        mb: vec![
            Array1::zeros(seg_head.b1.len()),
            Array1::zeros(seg_head.b2.len()),
            Array1::zeros(text_head.b1.len()),
            Array1::zeros(text_head.b2.len()),
        ],
        vb: vec![
            Array1::zeros(seg_head.b1.len()),
            Array1::zeros(seg_head.b2.len()),
            Array1::zeros(text_head.b1.len()),
            Array1::zeros(text_head.b2.len()),
        ],
        step: 0,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ProjectionHead, ProjectionHead)> = None;
    // one seeded shuffle fixes the batch composition for the whole run, so a
    // run with learning_rate = 0 reports the same loss every epoch
    let mut order: Vec<usize> = (0..prepared_train.len()).collect();
    order.shuffle(&mut rng);

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks_exact(cfg.batch_size).enumerate() {
            let pooled: Vec<&Array1<f64>> = chunk.iter().map(|&i| &prepared_train[i].pooled).collect();
            let text: Vec<&Array1<f64>> = chunk.iter().map(|&i| &prepared_train[i].text).collect();
            let x_seg = stack(&pooled);
            let x_text = stack(&text);

            let (loss, mut g_seg, mut g_text) =
                contrastive_batch_gradients(&seg_head, &text_head, &x_seg, &x_text, cfg.tau)?;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    step: batch_idx,
                    message: format!("loss became {loss}"),
                });
            }
            loss_sum += loss;
            batches += 1;

            // global norm clip over every tensor
            let sq = |a: &Array2<f64>| a.iter().map(|v| v * v).sum::<f64>();
            let sqb = |a: &Array1<f64>| a.iter().map(|v| v * v).sum::<f64>();
            let total = (sq(&g_seg.w1)
                + sq(&g_seg.w2)
                + sq(&g_text.w1)
                + sq(&g_text.w2)
                + sqb(&g_seg.b1)
                + sqb(&g_seg.b2)
                + sqb(&g_text.b1)
                + sqb(&g_text.b2))
            .sqrt();
            if total > cfg.grad_clip_norm {
                let scale = cfg.grad_clip_norm / total;
                for g in [&mut g_seg.w1, &mut g_seg.w2, &mut g_text.w1, &mut g_text.w2] {
                    *g *= scale;
                }
                for g in [&mut g_seg.b1, &mut g_seg.b2, &mut g_text.b1, &mut g_text.b2] {
                    *g *= scale;
                }
            }

            // AdamW with linear warmup; decay applies to weights, not biases
            adam.step += 1;
            let warm = if cfg.warmup_steps == 0 {
                1.0
            } else {
                (adam.step as f64 / cfg.warmup_steps as f64).min(1.0)
            };
            let lr = cfg.learning_rate * warm;
            let bc1 = 1.0 - ADAM_BETA1.powi(adam.step as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(adam.step as i32);

            let weights = [
                (&mut seg_head.w1, &g_seg.w1),
                (&mut seg_head.w2, &g_seg.w2),
                (&mut text_head.w1, &g_text.w1),
                (&mut text_head.w2, &g_text.w2),
            ];
            for (k, (param, grad)) in weights.into_iter().enumerate() {
                let m = &mut adam.m[k];
                let v = &mut adam.v[k];
                azip_update(param, grad, m, v, lr, cfg.weight_decay, bc1, bc2);
            }
            let biases = [
                (&mut seg_head.b1, &g_seg.b1),
                (&mut seg_head.b2, &g_seg.b2),
                (&mut text_head.b1, &g_text.b1),
                (&mut text_head.b2, &g_text.b2),
            ];
            for (k, (param, grad)) in biases.into_iter().enumerate() {
                let m = &mut adam.mb[k];
                let v = &mut adam.vb[k];
                for i in 0..param.len() {
                    let g = grad[i];
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                    param[i] -= lr * update;
                }
            }
        }

        let val_acc1 = validate(&prepared_val, &seg_head, &text_head, cfg)?;
        history.push(EpochMetrics {
            epoch,
            mean_train_loss: if batches > 0 { loss_sum / batches as f64 } else { 0.0 },
            val_acc1,
        });
        let improved = best.as_ref().map_or(true, |(acc, ..)| val_acc1 > *acc);
        if improved {
            best = Some((val_acc1, epoch, seg_head.clone(), text_head.clone()));
        }
    }

    let (best_acc1, best_epoch, seg_head, text_head) = best.expect("epochs >= 1");
    Ok(TrainOutput {
        seg_head,
        text_head,
        history,
        best_epoch,
        best_acc1,
        cfg: cfg.clone(),
        feature_dim,
        text_dim,
    })
}

fn azip_update(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    weight_decay: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            *p -= lr * (update + weight_decay * *p);
        });
}

fn validate(
    prepared_val: &[Prepared],
    seg_head: &ProjectionHead,
    text_head: &ProjectionHead,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in prepared_val.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue; // a singleton batch is trivially correct; skip it
        }
        let pooled: Vec<&Array1<f64>> = chunk.iter().map(|p| &p.pooled).collect();
        let text: Vec<&Array1<f64>> = chunk.iter().map(|p| &p.text).collect();
        let captions: Vec<&str> = chunk.iter().map(|p| p.caption.as_str()).collect();
        let (z, _) = normalize_rows(&seg_head.forward_batch(&stack(&pooled)).out)?;
        let (u, _) = normalize_rows(&text_head.forward_batch(&stack(&text)).out)?;
        let (c, t) = batch_acc1(&z, &u, &captions, cfg.tau)?;
        correct += c;
        total += t;
    }
    if total == 0 {
        return Err(Error::InvalidInput(
            "validation split yields no batch of size >= 2".into(),
        ));
    }
    Ok(correct as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// checkpoint file format
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"SGCKPT01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    feature_dim: usize,
    text_dim: usize,
    embed_dim: usize,
    seg_hidden: usize,
    text_hidden: usize,
    cfg: TrainConfig,
    best_epoch: usize,
    best_acc1: f64,
}

/// A trained model loaded back from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub seg_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub cfg: TrainConfig,
    pub best_epoch: usize,
    pub best_acc1: f64,
    pub feature_dim: usize,
    pub text_dim: usize,
}

fn push_f32(blob: &mut Vec<u8>, values: impl Iterator<Item = f64>) {
    for v in values {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn head_blob(blob: &mut Vec<u8>, head: &ProjectionHead) {
    push_f32(blob, head.w1.iter().copied());
    push_f32(blob, head.b1.iter().copied());
    push_f32(blob, head.w2.iter().copied());
    push_f32(blob, head.b2.iter().copied());
}

/// Writes a checkpoint: magic, JSON header, then all head parameters as
/// little-endian f32 in a fixed order.
pub fn write_checkpoint(path: &Path, output: &TrainOutput) -> Result<()> {
    let display = path.display().to_string();
    let header = CheckpointHeader {
        version: 1,
        feature_dim: output.feature_dim,
        text_dim: output.text_dim,
        embed_dim: output.seg_head.output_dim(),
        seg_hidden: output.seg_head.hidden_dim(),
        text_hidden: output.text_head.hidden_dim(),
        cfg: output.cfg.clone(),
        best_epoch: output.best_epoch,
        best_acc1: output.best_acc1,
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization cannot fail");
    let mut blob = Vec::new();
    blob.extend_from_slice(CHECKPOINT_MAGIC);
    blob.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    blob.extend_from_slice(&header_json);
    head_blob(&mut blob, &output.seg_head);
    head_blob(&mut blob, &output.text_head);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    file.write_all(&blob).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

struct F32Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> F32Reader<'a> {
    fn take(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = count * 4;
        if self.pos + bytes > self.data.len() {
            return Err(Error::MalformedFile {
                path: self.path.to_string(),
                message: "parameter blob truncated".into(),
            });
        }
        let out = self.data[self.pos..self.pos + bytes]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        self.pos += bytes;
        Ok(out)
    }

    fn head(&mut self, input: usize, hidden: usize, output: usize) -> Result<ProjectionHead> {
        let w1 = Array2::from_shape_vec((hidden, input), self.take(hidden * input)?)
            .expect("shape matches take");
        let b1 = Array1::from_vec(self.take(hidden)?);
        let w2 = Array2::from_shape_vec((output, hidden), self.take(output * hidden)?)
            .expect("shape matches take");
        let b2 = Array1::from_vec(self.take(output)?);
        Ok(ProjectionHead { w1, b1, w2, b2 })
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let display = path.display().to_string();
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(&display, e))?
        .read_to_end(&mut data)
        .map_err(|e| Error::io(&display, e))?;
    if data.len() < 12 || &data[..8] != CHECKPOINT_MAGIC {
        return Err(Error::MalformedFile {
            path: display,
            message: "not a checkpoint file (bad magic)".into(),
        });
    }
    let header_len = u32::from_le_bytes([data[8], data[9], data[10], data[11]]) as usize;
    if data.len() < 12 + header_len {
        return Err(Error::MalformedFile {
            path: display,
            message: "header truncated".into(),
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&data[12..12 + header_len]).map_err(|e| Error::MalformedFile {
            path: display.clone(),
            message: format!("bad header: {e}"),
        })?;
    if header.version != 1 {
        return Err(Error::MalformedFile {
            path: display,
            message: format!("unsupported checkpoint version {}", header.version),
        });
    }
    let mut reader = F32Reader {
        data: &data[12 + header_len..],
        pos: 0,
        path: &display,
    };
    let seg_head = reader.head(header.feature_dim, header.seg_hidden, header.embed_dim)?;
    let text_head = reader.head(header.text_dim, header.text_hidden, header.embed_dim)?;
    Ok(Checkpoint {
        seg_head,
        text_head,
        cfg: header.cfg,
        best_epoch: header.best_epoch,
        best_acc1: header.best_acc1,
        feature_dim: header.feature_dim,
        text_dim: header.text_dim,
    })
}
