//! End-to-end pipeline stages over a directory layout, driven by one config
//! file.
//!
//! Inputs live under `data_dir` (one directory per subset of raw series)
//! with train/val/test subset lists alongside. Every stage writes
//! deterministic artifacts under `out_dir`:
//!
//! ```text
//! windows/<subset>.ndjson      segments/<subset>.ndjson   pairs/<subset>.ndjson
//! plots/<window>.svg           checkpoint.bin             train_metrics.ndjson
//! index.bin (+ .specs.ndjson)  queries.ndjson             results/ranked_<m>_<p>.ndjson
//! metrics/metrics_<m>_<p>.json metrics/vlm_hist_<m>_<p>.csv manifest.json
//! ```
//!
//! Identical config + seed reproduces every byte; nothing here writes
//! timestamps or iterates hash maps into files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::{
    render_window_plot, synthesize_caption, CaptionSource, PlotSpec, SegmentRecord,
};
use crate::data::{read_series_file, sample_subset, SamplingConfig, Window};
use crate::encoder::{
    project_and_normalize, FileEmbedder, HashEmbedder, ReferenceFeaturizer, TextEmbedder,
};
use crate::error::{Error, Result};
use crate::eval::{
    mean_ap, mean_sbert_at_k, recall_at_k, score_histogram, vlm_aggregate, JudgeOutput,
    MetricsReport, QueryEntry, QuerySet,
};
use crate::retrieval::{
    build_index, make_pool, rank_random, read_index, score_and_rank, write_index, RankedResult,
};
use crate::segment::{segment_window, SegmentSpec, SegmentationConfig};
use crate::train::{read_checkpoint, train, write_checkpoint, TrainConfig};
use crate::trend::Tv2Options;
use crate::vlm::{caption_via_vlm, VlmClientConfig};

/// Ranking method under evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// The trained dual-encoder ranker.
    Learned,
    /// Seeded random permutation of the candidate list.
    Random,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Learned => write!(f, "learned"),
            Method::Random => write!(f, "random"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Method::Learned),
            "random" => Ok(Method::Random),
            other => Err(Error::InvalidInput(format!(
                "unknown method '{other}' (expected 'learned' or 'random')"
            ))),
        }
    }
}

/// How captions are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CaptionerMode {
    #[default]
    Synthetic,
    Vlm,
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_queries: usize,
    pub pool_sizes: Vec<usize>,
    /// Depths for the ranked output lists; metrics always report
    /// recall@{1,5,10} and the @10 caption-side scores.
    pub k_list: Vec<usize>,
    pub methods: Vec<Method>,
    /// Optional NDJSON of precomputed sentence embeddings for the
    /// caption-consistency metric; the hashing embedder is used otherwise.
    pub sentence_embeddings: Option<PathBuf>,
    /// Optional directory of judge files `judge_<method>_<pool>.ndjson`.
    pub judge_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_queries: 100,
            pool_sizes: vec![100, 1000, 10000],
            k_list: vec![1, 5, 10],
            methods: vec![Method::Learned, Method::Random],
            sentence_embeddings: None,
            judge_dir: None,
        }
    }
}

// TOML-facing sections; the single top-level seed feeds every stage, so the
// sections deliberately have no seed fields of their own.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SamplingSection {
    window_len: usize,
    target_per_subset: usize,
    initial_stride: usize,
    allow_duplicates: bool,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let d = SamplingConfig::default();
        Self {
            window_len: d.window_len,
            target_per_subset: d.target_per_subset,
            initial_stride: d.initial_stride,
            allow_duplicates: d.allow_duplicates,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainSection {
    tau: f64,
    batch_size: usize,
    epochs: usize,
    learning_rate: f64,
    weight_decay: f64,
    warmup_steps: usize,
    grad_clip_norm: f64,
    hidden_dim: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            tau: d.tau,
            batch_size: d.batch_size,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
            weight_decay: d.weight_decay,
            warmup_steps: d.warmup_steps,
            grad_clip_norm: d.grad_clip_norm,
            hidden_dim: d.hidden_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
struct CaptionerSection {
    mode: CaptionerMode,
    vlm: Option<VlmClientConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct PlotSection {
    render: bool,
    width: u32,
    height: u32,
    margin: u32,
}

impl Default for PlotSection {
    fn default() -> Self {
        let d = PlotSpec::default();
        Self {
            render: false,
            width: d.width,
            height: d.height,
            margin: d.margin,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PathsSection {
    data_dir: PathBuf,
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitsSection {
    train: PathBuf,
    val: PathBuf,
    test: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    paths: PathsSection,
    splits: SplitsSection,
    #[serde(default)]
    sampling: SamplingSection,
    #[serde(default)]
    segmentation: SegmentationConfig,
    #[serde(default)]
    training: TrainSection,
    #[serde(default)]
    captioner: CaptionerSection,
    #[serde(default)]
    plot: PlotSection,
    #[serde(default)]
    eval: EvalConfig,
}

/// Fully resolved pipeline configuration.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub split_train: PathBuf,
    pub split_val: PathBuf,
    pub split_test: PathBuf,
    pub sampling: SamplingConfig,
    pub segmentation: SegmentationConfig,
    pub training: TrainConfig,
    pub captioner_mode: CaptionerMode,
    pub vlm: Option<VlmClientConfig>,
    pub render_plots: bool,
    pub plot: PlotSpec,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Loads a TOML (or JSON) config; relative paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
        let raw: RawConfig = if path.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{display}: {e}")))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{display}: {e}")))?
        };
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &Path| -> PathBuf {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let mut eval = raw.eval;
        eval.sentence_embeddings = eval.sentence_embeddings.as_deref().map(resolve);
        eval.judge_dir = eval.judge_dir.as_deref().map(resolve);
        let cfg = Self {
            seed: raw.seed,
            data_dir: resolve(&raw.paths.data_dir),
            out_dir: resolve(&raw.paths.out_dir),
            split_train: resolve(&raw.splits.train),
            split_val: resolve(&raw.splits.val),
            split_test: resolve(&raw.splits.test),
            sampling: SamplingConfig {
                window_len: raw.sampling.window_len,
                target_per_subset: raw.sampling.target_per_subset,
                initial_stride: raw.sampling.initial_stride,
                allow_duplicates: raw.sampling.allow_duplicates,
                rng_seed: raw.seed,
            },
            segmentation: raw.segmentation,
            training: TrainConfig {
                tau: raw.training.tau,
                batch_size: raw.training.batch_size,
                epochs: raw.training.epochs,
                learning_rate: raw.training.learning_rate,
                weight_decay: raw.training.weight_decay,
                warmup_steps: raw.training.warmup_steps,
                grad_clip_norm: raw.training.grad_clip_norm,
                rng_seed: raw.seed,
                hidden_dim: raw.training.hidden_dim,
            },
            captioner_mode: raw.captioner.mode,
            vlm: raw.captioner.vlm,
            render_plots: raw.plot.render,
            plot: PlotSpec {
                width: raw.plot.width,
                height: raw.plot.height,
                margin: raw.plot.margin,
            },
            eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        self.segmentation.validate()?;
        self.training.validate()?;
        if self.eval.n_queries == 0 {
            return Err(Error::Config("eval.n_queries must be >= 1".into()));
        }
        if self.eval.pool_sizes.is_empty() || self.eval.methods.is_empty() {
            return Err(Error::Config("eval needs at least one pool size and method".into()));
        }
        if self.eval.k_list.iter().any(|&k| k == 0) {
            return Err(Error::Config("eval.k_list entries must be >= 1".into()));
        }
        if self.captioner_mode == CaptionerMode::Vlm && self.vlm.is_none() {
            return Err(Error::Config(
                "captioner.mode = \"vlm\" requires a [captioner.vlm] section".into(),
            ));
        }
        Ok(())
    }

    /// Overrides the global seed (and the seeds derived from it).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sampling.rng_seed = seed;
        self.training.rng_seed = seed;
        self
    }

    fn windows_dir(&self) -> PathBuf {
        self.out_dir.join("windows")
    }
    fn segments_dir(&self) -> PathBuf {
        self.out_dir.join("segments")
    }
    fn pairs_dir(&self) -> PathBuf {
        self.out_dir.join("pairs")
    }
    fn plots_dir(&self) -> PathBuf {
        self.out_dir.join("plots")
    }
    fn results_dir(&self) -> PathBuf {
        self.out_dir.join("results")
    }
    fn metrics_dir(&self) -> PathBuf {
        self.out_dir.join("metrics")
    }
    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.bin")
    }
    pub fn index_path(&self) -> PathBuf {
        self.out_dir.join("index.bin")
    }
    pub fn queries_path(&self) -> PathBuf {
        self.out_dir.join("queries.ndjson")
    }
    pub fn ranked_path(&self, method: Method, pool: usize) -> PathBuf {
        self.results_dir()
            .join(format!("ranked_{method}_{pool}.ndjson"))
    }
    pub fn metrics_path(&self, method: Method, pool: usize) -> PathBuf {
        self.metrics_dir()
            .join(format!("metrics_{method}_{pool}.json"))
    }
}

/// The three disjoint subset splits, each a sorted list of subset ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn read_split_list(path: &Path) -> Result<Vec<String>> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut out: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect();
    out.sort();
    out.dedup();
    Ok(out)
}

/// Reads and cross-checks the split lists: non-empty and pairwise disjoint.
pub fn load_splits(cfg: &PipelineConfig) -> Result<Splits> {
    let train = read_split_list(&cfg.split_train)?;
    let val = read_split_list(&cfg.split_val)?;
    let test = read_split_list(&cfg.split_test)?;
    validate_splits(&train, &val, &test)?;
    Ok(Splits { train, val, test })
}

/// Disjointness check; an overlap anywhere is an error naming the subset.
pub fn validate_splits(train: &[String], val: &[String], test: &[String]) -> Result<()> {
    for (name, list) in [("train", train), ("val", val), ("test", test)] {
        if list.is_empty() {
            return Err(Error::InvalidInput(format!("{name} split list is empty")));
        }
    }
    let sets = [
        ("train", train.iter().collect::<BTreeSet<_>>()),
        ("val", val.iter().collect::<BTreeSet<_>>()),
        ("test", test.iter().collect::<BTreeSet<_>>()),
    ];
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            if let Some(shared) = sets[i].1.intersection(&sets[j].1).next() {
                return Err(Error::InvalidInput(format!(
                    "subset '{shared}' appears in both the {} and {} splits",
                    sets[i].0, sets[j].0
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// NDJSON plumbing
// ---------------------------------------------------------------------------

fn write_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let display = path.display().to_string();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(&display, e))?;
    }
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serialization cannot fail"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(&display, e))
}

fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedFile {
            path: display.clone(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

fn subset_file(dir: &Path, subset: &str) -> PathBuf {
    dir.join(format!("{subset}.ndjson"))
}

fn load_subset_windows(cfg: &PipelineConfig, subsets: &[String]) -> Result<Vec<Window>> {
    let dir = cfg.windows_dir();
    let mut out = Vec::new();
    for subset in subsets {
        let path = subset_file(&dir, subset);
        let mut ws: Vec<Window> = read_ndjson(&path)?;
        for w in &mut ws {
            w.normalized = true; // persisted windows are always normalized
        }
        out.append(&mut ws);
    }
    Ok(out)
}

/// Persisted segment row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentFileRecord {
    pub window_id: String,
    pub a: usize,
    pub b: usize,
    pub lambda_used: f64,
    pub captionable: bool,
}

fn load_subset_segments(cfg: &PipelineConfig, subsets: &[String]) -> Result<Vec<SegmentFileRecord>> {
    let dir = cfg.segments_dir();
    let mut out = Vec::new();
    for subset in subsets {
        out.extend(read_ndjson::<SegmentFileRecord>(&subset_file(&dir, subset))?);
    }
    Ok(out)
}

fn load_subset_pairs(cfg: &PipelineConfig, subsets: &[String]) -> Result<Vec<SegmentRecord>> {
    let dir = cfg.pairs_dir();
    let mut out = Vec::new();
    for subset in subsets {
        out.extend(read_ndjson::<SegmentRecord>(&subset_file(&dir, subset))?);
    }
    Ok(out)
}

fn window_map(windows: Vec<Window>) -> HashMap<String, Window> {
    windows.into_iter().map(|w| (w.window_id.clone(), w)).collect()
}

fn plot_file_name(window_id: &str) -> String {
    let mut name: String = window_id
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect();
    name.push_str(".svg");
    name
}

/// Seed for a per-query sampling decision, mixed from the run seed and the
/// experiment coordinates so reruns and method sweeps stay reproducible.
fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.rotate_left(17);
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn write_manifest(cfg: &PipelineConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        seed: u64,
        sampling: &'a SamplingConfig,
        segmentation: &'a SegmentationConfig,
        training: &'a TrainConfig,
        eval: &'a EvalConfig,
    }
    let manifest = Manifest {
        seed: cfg.seed,
        sampling: &cfg.sampling,
        segmentation: &cfg.segmentation,
        training: &cfg.training,
        eval: &cfg.eval,
    };
    let path = cfg.out_dir.join("manifest.json");
    let display = path.display().to_string();
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&display, e))?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&display, e))
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

/// Extracts and normalizes windows for every subset named in the split
/// lists; one NDJSON per subset. Returns the number of windows written.
pub fn cmd_windows(cfg: &PipelineConfig) -> Result<usize> {
    let splits = load_splits(cfg)?;
    write_manifest(cfg)?;
    let mut all: Vec<&String> = splits
        .train
        .iter()
        .chain(&splits.val)
        .chain(&splits.test)
        .collect();
    all.sort();

    let mut total = 0usize;
    for subset in all {
        let subset_dir = cfg.data_dir.join(subset);
        if !subset_dir.is_dir() {
            return Err(Error::InvalidInput(format!(
                "subset directory not found: {}",
                subset_dir.display()
            )));
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&subset_dir)
            .map_err(|e| Error::io(subset_dir.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("csv" | "ndjson" | "jsonl")
                )
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no series files (*.csv, *.ndjson) in {}",
                subset_dir.display()
            )));
        }
        let mut series = Vec::new();
        for file in &files {
            series.extend(read_series_file(file, subset)?);
        }
        let windows = sample_subset(&series, &cfg.sampling)?;
        total += windows.len();
        log::info!("windows: {subset}: {} window(s)", windows.len());
        write_ndjson(&subset_file(&cfg.windows_dir(), subset), &windows)?;
    }
    Ok(total)
}

/// Segments every extracted window; one NDJSON per subset, plus one SVG per
/// window when plotting is enabled. Returns (windows, captionable segments).
pub fn cmd_segment(cfg: &PipelineConfig) -> Result<(usize, usize)> {
    let splits = load_splits(cfg)?;
    let mut subsets: Vec<&String> = splits
        .train
        .iter()
        .chain(&splits.val)
        .chain(&splits.test)
        .collect();
    subsets.sort();

    let windows_dir = cfg.windows_dir();
    if !windows_dir.is_dir() {
        return Err(Error::InvalidInput(format!(
            "no extracted windows at {}; run the windows stage first",
            windows_dir.display()
        )));
    }
    let opts = Tv2Options::default();
    let mut n_windows = 0usize;
    let mut n_captionable = 0usize;
    for subset in subsets {
        let windows: Vec<Window> = read_ndjson(&subset_file(&windows_dir, subset))?;
        let mut records = Vec::new();
        for mut window in windows {
            window.normalized = true;
            let result = segment_window(&window, &cfg.segmentation, &opts)?;
            n_windows += 1;
            for seg in &result.segments {
                let captionable = result.captionable.contains(seg);
                n_captionable += usize::from(captionable);
                records.push(SegmentFileRecord {
                    window_id: seg.window_id.clone(),
                    a: seg.a,
                    b: seg.b,
                    lambda_used: result.lambda_used,
                    captionable,
                });
            }
            if cfg.render_plots {
                let svg = render_window_plot(&window, &result.captionable, &cfg.plot)?;
                let path = cfg.plots_dir().join(plot_file_name(&window.window_id));
                let display = path.display().to_string();
                std::fs::create_dir_all(cfg.plots_dir()).map_err(|e| Error::io(&display, e))?;
                std::fs::write(&path, svg).map_err(|e| Error::io(&display, e))?;
            }
        }
        write_ndjson(&subset_file(&cfg.segments_dir(), subset), &records)?;
    }
    Ok((n_windows, n_captionable))
}

/// Captions every captionable segment with the configured captioner; one
/// pairs NDJSON per subset. Returns the number of records written.
pub fn cmd_caption(cfg: &PipelineConfig) -> Result<usize> {
    let splits = load_splits(cfg)?;
    let mut subsets: Vec<&String> = splits
        .train
        .iter()
        .chain(&splits.val)
        .chain(&splits.test)
        .collect();
    subsets.sort();

    let mut total = 0usize;
    for subset in subsets {
        let windows = window_map(read_ndjson(&subset_file(&cfg.windows_dir(), subset))?);
        let segments = load_subset_segments(cfg, &[subset.clone()])?;

        // captionable segments grouped per window, in file order
        let mut per_window: BTreeMap<&str, Vec<&SegmentFileRecord>> = BTreeMap::new();
        for seg in segments.iter().filter(|s| s.captionable) {
            per_window.entry(&seg.window_id).or_default().push(seg);
        }

        let mut records = Vec::new();
        for (window_id, segs) in &per_window {
            let window = windows.get(*window_id).ok_or_else(|| Error::MissingWindow {
                window_id: (*window_id).to_string(),
                a: segs[0].a,
                b: segs[0].b,
            })?;
            let specs: Vec<SegmentSpec> = segs
                .iter()
                .map(|s| SegmentSpec::new(&s.window_id, s.a, s.b))
                .collect::<Result<_>>()?;
            match cfg.captioner_mode {
                CaptionerMode::Synthetic => {
                    for spec in specs {
                        let caption = synthesize_caption(window, &spec)?;
                        records.push(SegmentRecord::new(spec, caption, CaptionSource::Synthetic)?);
                    }
                }
                CaptionerMode::Vlm => {
                    let vlm = cfg.vlm.as_ref().expect("validated at load");
                    let svg = render_window_plot(window, &specs, &cfg.plot)?;
                    let reply = caption_via_vlm(&svg, specs.len(), vlm)?;
                    for (spec, caption) in specs.into_iter().zip(reply.captions) {
                        records.push(SegmentRecord::new(spec, caption, CaptionSource::Vlm)?);
                    }
                }
            }
        }
        total += records.len();
        write_ndjson(&subset_file(&cfg.pairs_dir(), subset), &records)?;
    }
    Ok(total)
}

/// Trains the heads on the train/val pairs and writes the checkpoint plus
/// the per-epoch metrics log. Returns (best_epoch, best_acc1).
pub fn cmd_train(cfg: &PipelineConfig) -> Result<(usize, f64)> {
    let splits = load_splits(cfg)?;
    let train_pairs = load_subset_pairs(cfg, &splits.train)?;
    let val_pairs = load_subset_pairs(cfg, &splits.val)?;
    let windows = window_map(
        load_subset_windows(cfg, &splits.train)?
            .into_iter()
            .chain(load_subset_windows(cfg, &splits.val)?)
            .collect(),
    );
    let output = train(
        &train_pairs,
        &val_pairs,
        &windows,
        &ReferenceFeaturizer,
        &HashEmbedder::default(),
        &cfg.training,
    )?;
    write_checkpoint(&cfg.checkpoint_path(), &output)?;
    write_ndjson(&cfg.out_dir.join("train_metrics.ndjson"), &output.history)?;
    Ok((output.best_epoch, output.best_acc1))
}

/// Embeds every captionable test segment into the index files. Returns the
/// index size.
pub fn cmd_index(cfg: &PipelineConfig) -> Result<usize> {
    let splits = load_splits(cfg)?;
    let checkpoint = read_checkpoint(&cfg.checkpoint_path())?;
    let pairs = load_subset_pairs(cfg, &splits.test)?;
    let windows = window_map(load_subset_windows(cfg, &splits.test)?);
    let specs: Vec<SegmentSpec> = pairs.iter().map(|p| p.spec.clone()).collect();
    let index = build_index(&specs, &windows, &ReferenceFeaturizer, &checkpoint.seg_head)?;
    write_index(&cfg.index_path(), &index)?;
    Ok(index.len())
}

/// One ranked-output line: a (query, rank) cell plus the query's gt rank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankedLine {
    pub query_id: String,
    pub rank: usize,
    pub window_id: String,
    pub a: usize,
    pub b: usize,
    pub score: f64,
    pub gt_rank: usize,
}

fn ranked_lines(result: &RankedResult) -> Vec<RankedLine> {
    result
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| RankedLine {
            query_id: result.query_id.clone(),
            rank: i + 1,
            window_id: e.spec.window_id.clone(),
            a: e.spec.a,
            b: e.spec.b,
            score: e.score,
            gt_rank: result.gt_rank,
        })
        .collect()
}

/// Loads the persisted query set, or samples and persists it on first use
/// so every method sees the same queries.
fn load_or_sample_queries(
    cfg: &PipelineConfig,
    test_pairs: &[SegmentRecord],
) -> Result<QuerySet> {
    let path = cfg.queries_path();
    if path.is_file() {
        return QuerySet::new(read_ndjson(&path)?);
    }
    if test_pairs.is_empty() {
        return Err(Error::InvalidInput("no test pairs to sample queries from".into()));
    }
    let mut order: Vec<usize> = (0..test_pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "query-set"));
    order.shuffle(&mut rng);
    let n = cfg.eval.n_queries.min(test_pairs.len());
    let mut picked: Vec<usize> = order.into_iter().take(n).collect();
    picked.sort();
    let entries: Vec<QueryEntry> = picked
        .iter()
        .enumerate()
        .map(|(i, &idx)| QueryEntry {
            query_id: format!("q{i:04}"),
            caption: test_pairs[idx].caption.clone(),
            gt: test_pairs[idx].spec.clone(),
        })
        .collect();
    let set = QuerySet::new(entries)?;
    write_ndjson(&path, &set.entries)?;
    Ok(set)
}

/// Runs every (pool size, method) sweep over the persisted query set and
/// writes one ranked NDJSON per combination. Returns the number of files.
pub fn cmd_query(cfg: &PipelineConfig) -> Result<usize> {
    let splits = load_splits(cfg)?;
    let index_path = cfg.index_path();
    if !index_path.is_file() {
        return Err(Error::InvalidInput(format!(
            "index file not found: {}",
            index_path.display()
        )));
    }
    let index = read_index(&index_path)?;
    let checkpoint = read_checkpoint(&cfg.checkpoint_path())?;
    let test_pairs = load_subset_pairs(cfg, &splits.test)?;
    let queries = load_or_sample_queries(cfg, &test_pairs)?;

    let mut test_window_ids: Vec<String> = load_subset_windows(cfg, &splits.test)?
        .into_iter()
        .map(|w| w.window_id)
        .collect();
    test_window_ids.sort();
    test_window_ids.dedup();

    let embedder = HashEmbedder::default();
    let k_out = cfg.eval.k_list.iter().copied().max().unwrap_or(10).max(10);
    let mut files = 0usize;
    for &pool_size in &cfg.eval.pool_sizes {
        for &method in &cfg.eval.methods {
            let mut lines = Vec::new();
            for query in &queries.entries {
                let pool_seed =
                    derive_seed(cfg.seed, &format!("pool:{pool_size}:{}", query.query_id));
                let pool = make_pool(
                    &query.query_id,
                    &query.gt,
                    &test_window_ids,
                    pool_size,
                    pool_seed,
                    &index,
                )?;
                let result = match method {
                    Method::Learned => {
                        let raw = embedder.embed(&query.caption)?;
                        let q = project_and_normalize(&raw.view(), &checkpoint.text_head)?;
                        score_and_rank(&q, &pool, &index, k_out)?
                    }
                    Method::Random => {
                        let seed = derive_seed(
                            cfg.seed,
                            &format!("random:{pool_size}:{}", query.query_id),
                        );
                        rank_random(&pool, &index, k_out, seed)?
                    }
                };
                lines.extend(ranked_lines(&result));
            }
            write_ndjson(&cfg.ranked_path(method, pool_size), &lines)?;
            files += 1;
        }
    }
    Ok(files)
}

fn caption_lookup(pairs: &[SegmentRecord]) -> HashMap<(String, usize, usize), String> {
    pairs
        .iter()
        .map(|p| {
            (
                (p.spec.window_id.clone(), p.spec.a, p.spec.b),
                p.caption.clone(),
            )
        })
        .collect()
}

/// Computes the metric suite for every (pool, method) sweep from the ranked
/// files; one metrics JSON per combination, plus a judge-score histogram
/// CSV when judge data is configured. Returns the number of reports.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<usize> {
    let splits = load_splits(cfg)?;
    let queries = QuerySet::new(read_ndjson(&cfg.queries_path())?)?;
    let test_pairs = load_subset_pairs(cfg, &splits.test)?;
    let captions = caption_lookup(&test_pairs);
    let hash_embedder = HashEmbedder::default();
    let file_embedder = match &cfg.eval.sentence_embeddings {
        Some(path) => Some(FileEmbedder::from_ndjson(path)?),
        None => None,
    };
    let embedder: &dyn TextEmbedder = match &file_embedder {
        Some(f) => f,
        None => &hash_embedder,
    };

    let mut reports = 0usize;
    for &pool_size in &cfg.eval.pool_sizes {
        for &method in &cfg.eval.methods {
            let path = cfg.ranked_path(method, pool_size);
            if !path.is_file() {
                return Err(Error::InvalidInput(format!(
                    "ranked results not found: {} (run the query stage first)",
                    path.display()
                )));
            }
            let lines: Vec<RankedLine> = read_ndjson(&path)?;
            let mut by_query: BTreeMap<&str, Vec<&RankedLine>> = BTreeMap::new();
            for line in &lines {
                by_query.entry(&line.query_id).or_default().push(line);
            }

            let mut ranks = Vec::with_capacity(queries.len());
            let mut sbert_values = Vec::with_capacity(queries.len());
            for query in &queries.entries {
                let retrieved = by_query.get(query.query_id.as_str()).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "no ranked lines for query '{}' in {}",
                        query.query_id,
                        path.display()
                    ))
                })?;
                ranks.push(retrieved[0].gt_rank);
                let top10: Vec<String> = retrieved
                    .iter()
                    .take(10)
                    .map(|line| {
                        captions
                            .get(&(line.window_id.clone(), line.a, line.b))
                            .cloned()
                            .ok_or_else(|| {
                                Error::InvalidInput(format!(
                                    "retrieved segment ({}, {}, {}) has no caption",
                                    line.window_id, line.a, line.b
                                ))
                            })
                    })
                    .collect::<Result<_>>()?;
                sbert_values.push(mean_sbert_at_k(&query.caption, &top10, embedder)?);
            }

            let mut report = MetricsReport {
                pool: pool_size,
                method: method.to_string(),
                recall_at_1: recall_at_k(&ranks, 1)?,
                recall_at_5: recall_at_k(&ranks, 5)?,
                recall_at_10: recall_at_k(&ranks, 10)?,
                map: mean_ap(&ranks)?,
                sbert_at_10: Some(
                    sbert_values.iter().sum::<f64>() / sbert_values.len() as f64,
                ),
                vlm_score_at_10: None,
                vlm_precision_at_10: None,
            };

            if let Some(judge_dir) = &cfg.eval.judge_dir {
                let judge_path = judge_dir.join(format!("judge_{method}_{pool_size}.ndjson"));
                if judge_path.is_file() {
                    let judgments: Vec<JudgeOutput> = read_ndjson(&judge_path)?;
                    let ids: Vec<String> =
                        queries.entries.iter().map(|q| q.query_id.clone()).collect();
                    let (score, precision) = vlm_aggregate(&judgments, &ids, 10)?;
                    report.vlm_score_at_10 = Some(score);
                    report.vlm_precision_at_10 = Some(precision);

                    let mut means: BTreeMap<&str, f64> = BTreeMap::new();
                    for j in &judgments {
                        *means.entry(j.query_id.as_str()).or_default() += f64::from(j.score) / 10.0;
                    }
                    let values: Vec<f64> = means.values().copied().collect();
                    let histogram = score_histogram(&values, 8)?;
                    let csv_path = cfg
                        .metrics_dir()
                        .join(format!("vlm_hist_{method}_{pool_size}.csv"));
                    let display = csv_path.display().to_string();
                    std::fs::create_dir_all(cfg.metrics_dir())
                        .map_err(|e| Error::io(&display, e))?;
                    std::fs::write(&csv_path, histogram.to_csv())
                        .map_err(|e| Error::io(&display, e))?;
                }
            }

            let out_path = cfg.metrics_path(method, pool_size);
            let display = out_path.display().to_string();
            std::fs::create_dir_all(cfg.metrics_dir()).map_err(|e| Error::io(&display, e))?;
            let mut text =
                serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
            text.push('\n');
            std::fs::write(&out_path, text).map_err(|e| Error::io(&display, e))?;
            reports += 1;
        }
    }
    Ok(reports)
}

/// The whole pipeline in order: windows, segment, caption, train, index,
/// query, eval.
pub fn cmd_run_all(cfg: &PipelineConfig) -> Result<()> {
    let n_windows = cmd_windows(cfg)?;
    log::info!("run-all: {n_windows} window(s)");
    let (_, n_captionable) = cmd_segment(cfg)?;
    log::info!("run-all: {n_captionable} captionable segment(s)");
    let n_pairs = cmd_caption(cfg)?;
    log::info!("run-all: {n_pairs} segment-caption pair(s)");
    let (best_epoch, best_acc) = cmd_train(cfg)?;
    log::info!("run-all: best epoch {best_epoch} (val acc@1 {best_acc:.4})");
    let index_size = cmd_index(cfg)?;
    log::info!("run-all: index of {index_size} segment(s)");
    cmd_query(cfg)?;
    cmd_eval(cfg)?;
    Ok(())
}
