//! Raw-series ingestion, window sampling, and min–max normalization.
//!
//! A corpus is a set of subsets; each subset holds univariate series. Windows
//! of a fixed length are cut from each series with a stride that starts at
//! `initial_stride` and is reduced only when a series cannot otherwise supply
//! its share; duplicates are a last resort. Every window is min–max
//! normalized to [0, 1] before anything downstream sees it.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One univariate series as ingested, before any windowing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub series_id: String,
    pub subset_id: String,
    pub values: Vec<f64>,
}

impl RawSeries {
    /// Validates non-emptiness and finiteness.
    pub fn new(series_id: impl Into<String>, subset_id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let series_id = series_id.into();
        if values.is_empty() {
            return Err(Error::InvalidInput(format!("series '{series_id}' is empty")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "series '{series_id}' has non-finite value at position {i}"
            )));
        }
        Ok(Self {
            series_id,
            subset_id: subset_id.into(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A fixed-length slice of a parent series, optionally normalized.
///
/// `start_offset` is a 0-based offset into the (possibly interpolated)
/// parent. `degenerate` marks windows that were constant before
/// normalization; such windows normalize to all 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub window_id: String,
    pub subset_id: String,
    pub series_id: String,
    pub start_offset: usize,
    pub values: Vec<f64>,
    /// In-memory state, not part of the persisted record: files only ever
    /// hold normalized windows.
    #[serde(skip)]
    pub normalized: bool,
    #[serde(default)]
    pub degenerate: bool,
}

impl Window {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Min–max normalizes the window in place; idempotent on already
    /// normalized windows.
    pub fn normalize(&mut self) -> Result<()> {
        if self.normalized {
            return Ok(());
        }
        let (values, meta) = normalize_minmax(&self.values)?;
        self.values = values;
        self.degenerate = meta.degenerate;
        self.normalized = true;
        Ok(())
    }
}

/// Window sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Window length; every emitted window has exactly this many points.
    pub window_len: usize,
    /// Windows to draw from each subset.
    pub target_per_subset: usize,
    /// Stride to try first; reduced only when a series cannot supply its share.
    pub initial_stride: usize,
    /// Permit repeating offsets once even stride 1 runs out of distinct windows.
    pub allow_duplicates: bool,
    /// Recorded in output artifacts; sampling itself is deterministic.
    pub rng_seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            window_len: 1024,
            target_per_subset: 1000,
            initial_stride: 1024,
            allow_duplicates: true,
            rng_seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 3 {
            return Err(Error::InvalidInput(format!(
                "window_len must be >= 3, got {}",
                self.window_len
            )));
        }
        if self.target_per_subset < 1 {
            return Err(Error::InvalidInput("target_per_subset must be >= 1".into()));
        }
        if self.initial_stride < 1 {
            return Err(Error::InvalidInput("initial_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Splits `target` windows across series as evenly as possible.
///
/// Each series gets `target / n` windows; the first `target % n` series (in
/// input order) get one extra. Counts always sum to `target` and differ by
/// at most one.
pub fn allocate_windows(target: usize, series_lengths: &[usize]) -> Result<Vec<usize>> {
    if target < 1 {
        return Err(Error::InvalidInput("target window count must be >= 1".into()));
    }
    if series_lengths.is_empty() {
        return Err(Error::InvalidInput(
            "cannot allocate windows over an empty series list".into(),
        ));
    }
    let n = series_lengths.len();
    let base = target / n;
    let extra = target % n;
    Ok((0..n).map(|i| base + usize::from(i < extra)).collect())
}

/// Min–max metadata returned alongside normalized values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
    /// Constant input: values were mapped to 0.5 instead of dividing by zero.
    pub degenerate: bool,
}

/// Maps values affinely onto [0, 1]. Constant input maps to all 0.5 and is
/// flagged degenerate.
pub fn normalize_minmax(values: &[f64]) -> Result<(Vec<f64>, MinMax)> {
    if values.is_empty() {
        return Err(Error::InvalidInput("cannot normalize an empty sequence".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite value at position {i} in normalize input"
        )));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok((
            vec![0.5; values.len()],
            MinMax {
                min,
                max,
                degenerate: true,
            },
        ));
    }
    let span = max - min;
    let out = values.iter().map(|v| (v - min) / span).collect();
    Ok((
        out,
        MinMax {
            min,
            max,
            degenerate: false,
        },
    ))
}

/// Resamples `values` to `target_len` points by piecewise-linear
/// interpolation; source index i maps affinely onto [0, target_len - 1], so
/// endpoints are preserved exactly.
pub fn interpolate_linear(values: &[f64], target_len: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("cannot interpolate an empty sequence".into()));
    }
    if target_len < 2 {
        return Err(Error::InvalidInput("interpolation target length must be >= 2".into()));
    }
    let n = values.len();
    if n == target_len {
        return Ok(values.to_vec());
    }
    if n == 1 {
        return Ok(vec![values[0]; target_len]);
    }
    let scale = (n - 1) as f64 / (target_len - 1) as f64;
    let mut out = Vec::with_capacity(target_len);
    for j in 0..target_len {
        if j == target_len - 1 {
            out.push(values[n - 1]); // keep the endpoint exact
            continue;
        }
        let pos = j as f64 * scale;
        let lo = pos.floor() as usize;
        if lo >= n - 1 {
            out.push(values[n - 1]);
        } else {
            let frac = pos - lo as f64;
            out.push(values[lo] * (1.0 - frac) + values[lo + 1] * frac);
        }
    }
    Ok(out)
}

/// Distinct window offsets for a series of length `len` at stride `stride`:
/// multiples of the stride, plus a final window flush with the series end.
fn offsets_at_stride(len: usize, window_len: usize, stride: usize) -> Vec<usize> {
    let max_off = len - window_len;
    let mut offsets: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&o| o < max_off)
        .collect();
    offsets.push(max_off);
    offsets
}

fn distinct_count(len: usize, window_len: usize, stride: usize) -> usize {
    let max_off = len - window_len;
    max_off.div_ceil(stride) + 1
}

/// Cuts exactly `count` windows of length `cfg.window_len` from `series`.
///
/// Series shorter than the window length are first linearly interpolated up
/// to it. The stride starts at `cfg.initial_stride`; if that yields too few
/// distinct windows it is reduced to the largest stride that suffices, and
/// only when stride 1 still falls short are offsets repeated cyclically.
/// Windows are emitted raw (unnormalized).
pub fn extract_windows(series: &RawSeries, count: usize, cfg: &SamplingConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    if count == 0 {
        return Ok(Vec::new());
    }
    if series.values.is_empty() {
        return Err(Error::InvalidInput(format!(
            "cannot extract windows from empty series '{}'",
            series.series_id
        )));
    }
    let window_len = cfg.window_len;
    let values: &[f64] = &series.values;
    let interpolated;
    let values = if values.len() < window_len {
        interpolated = interpolate_linear(values, window_len)?;
        &interpolated[..]
    } else {
        values
    };
    let len = values.len();

    let stride = if distinct_count(len, window_len, cfg.initial_stride) >= count {
        cfg.initial_stride
    } else {
        // Largest stride in [1, initial_stride) that still yields enough
        // distinct windows; distinct_count is nonincreasing in the stride.
        let mut best = 1;
        let (mut lo, mut hi) = (1usize, cfg.initial_stride.saturating_sub(1).max(1));
        while lo <= hi {
            let mid = lo + (hi - lo) / 2;
            if distinct_count(len, window_len, mid) >= count {
                best = mid;
                lo = mid + 1;
            } else {
                hi = mid - 1;
            }
        }
        best
    };

    let distinct = offsets_at_stride(len, window_len, stride);
    if distinct.len() < count && !cfg.allow_duplicates {
        return Err(Error::InvalidInput(format!(
            "series '{}' supplies only {} distinct window(s), {} requested and duplicates are disabled",
            series.series_id,
            distinct.len(),
            count
        )));
    }

    let mut windows = Vec::with_capacity(count);
    for i in 0..count {
        let offset = distinct[i % distinct.len()];
        windows.push(Window {
            window_id: format!("{}/{}/{:05}", series.subset_id, series.series_id, i),
            subset_id: series.subset_id.clone(),
            series_id: series.series_id.clone(),
            start_offset: offset,
            values: values[offset..offset + window_len].to_vec(),
            normalized: false,
            degenerate: false,
        });
    }
    Ok(windows)
}

/// Extracts and normalizes each subset series' allocation in input order.
pub fn sample_subset(series: &[RawSeries], cfg: &SamplingConfig) -> Result<Vec<Window>> {
    let lengths: Vec<usize> = series.iter().map(RawSeries::len).collect();
    let counts = allocate_windows(cfg.target_per_subset, &lengths)?;
    let mut windows = Vec::with_capacity(cfg.target_per_subset);
    for (s, &count) in series.iter().zip(&counts) {
        let mut ws = extract_windows(s, count, cfg)?;
        for w in &mut ws {
            w.normalize()?;
        }
        windows.append(&mut ws);
    }
    Ok(windows)
}

/// Reads one subset file: `.csv` with one column of floats per series
/// (header row carries series ids) or `.ndjson` with
/// `{"series_id": ..., "values": [...]}` per line.
pub fn read_series_file(path: &Path, subset_id: &str) -> Result<Vec<RawSeries>> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    match ext.as_str() {
        "csv" => read_series_csv(path, subset_id),
        "ndjson" | "jsonl" => read_series_ndjson(path, subset_id),
        other => Err(Error::InvalidInput(format!(
            "unsupported series file extension '{other}' for {}",
            path.display()
        ))),
    }
}

fn read_series_csv(path: &Path, subset_id: &str) -> Result<Vec<RawSeries>> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::MalformedFile {
            path: display.clone(),
            message: e.to_string(),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::MalformedFile {
            path: display.clone(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::MalformedFile {
            path: display.clone(),
            message: e.to_string(),
        })?;
        for (col, field) in record.iter().enumerate() {
            if field.is_empty() {
                continue; // ragged columns: empty trailing cells end the series
            }
            let v: f64 = field.trim().parse().map_err(|_| Error::MalformedFile {
                path: display.clone(),
                message: format!("row {}, column {}: not a float: {field:?}", line + 2, col + 1),
            })?;
            if col < columns.len() {
                columns[col].push(v);
            }
        }
    }
    headers
        .iter()
        .zip(columns)
        .filter(|(_, col)| !col.is_empty())
        .map(|(id, col)| RawSeries::new(id.clone(), subset_id, col))
        .collect()
}

#[derive(Deserialize)]
struct NdjsonSeries {
    series_id: String,
    values: Vec<f64>,
}

fn read_series_ndjson(path: &Path, subset_id: &str) -> Result<Vec<RawSeries>> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NdjsonSeries = serde_json::from_str(&line).map_err(|e| Error::MalformedFile {
            path: display.clone(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(RawSeries::new(rec.series_id, subset_id, rec.values)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn allocation_splits_evenly_with_remainder_first() {
        let counts = allocate_windows(1000, &[5000, 5000, 5000]).unwrap();
        assert_eq!(counts, vec![334, 333, 333]);
    }

    #[test]
    fn allocation_exact_division() {
        let counts = allocate_windows(6, &[10, 10, 10, 10, 10, 10]).unwrap();
        assert_eq!(counts, vec![1; 6]);
    }

    #[test]
    fn allocation_single_series_carries_all() {
        assert_eq!(allocate_windows(1000, &[700]).unwrap(), vec![1000]);
    }

    #[test]
    fn allocation_rejects_empty_list() {
        assert!(matches!(
            allocate_windows(10, &[]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn extraction_tiles_exactly_at_initial_stride() {
        let series = RawSeries::new("s", "a", (0..2048).map(f64::from).collect()).unwrap();
        let cfg = SamplingConfig::default();
        let ws = extract_windows(&series, 2, &cfg).unwrap();
        let offsets: Vec<usize> = ws.iter().map(|w| w.start_offset).collect();
        assert_eq!(offsets, vec![0, 1024]);
        assert!(ws.iter().all(|w| w.len() == 1024));
    }

    #[test]
    fn extraction_duplicates_cyclically_when_exhausted() {
        let series = RawSeries::new("s", "a", vec![1.0; 1024]).unwrap();
        let cfg = SamplingConfig::default();
        let ws = extract_windows(&series, 3, &cfg).unwrap();
        assert_eq!(ws.len(), 3);
        assert!(ws.iter().all(|w| w.start_offset == 0));
        assert_eq!(ws[0].values, ws[1].values);
        assert_eq!(ws[1].values, ws[2].values);
        // ids stay distinct even for duplicated content
        assert_ne!(ws[0].window_id, ws[1].window_id);
    }

    #[test]
    fn extraction_refuses_duplicates_when_disabled() {
        let series = RawSeries::new("s", "a", vec![1.0; 1024]).unwrap();
        let cfg = SamplingConfig {
            allow_duplicates: false,
            ..SamplingConfig::default()
        };
        assert!(extract_windows(&series, 3, &cfg).is_err());
    }

    #[test]
    fn short_series_is_interpolated_endpoints_preserved() {
        let raw: Vec<f64> = (0..512).map(|i| (i as f64 * 0.013).sin()).collect();
        let series = RawSeries::new("s", "a", raw.clone()).unwrap();
        let cfg = SamplingConfig::default();
        let ws = extract_windows(&series, 1, &cfg).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws[0].len(), 1024);
        assert_eq!(ws[0].values[0], raw[0]);
        assert_eq!(ws[0].values[1023], raw[511]);

        // independent oracle: evaluate the piecewise-linear function through
        // the points (i * (1024 - 1), raw[i]) at x = j * (512 - 1)
        let eval_pwl = |x: f64| -> f64 {
            let step = 1023.0; // source knots sit at i * 1023 on a common grid
            let i = ((x / step).floor() as usize).min(510);
            let x0 = i as f64 * step;
            let t = (x - x0) / step;
            raw[i] * (1.0 - t) + raw[i + 1] * t
        };
        for (j, &got) in ws[0].values.iter().enumerate() {
            let want = eval_pwl(j as f64 * 511.0);
            assert!(
                (got - want).abs() < 1e-9,
                "interpolation mismatch at {j}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn extraction_rejects_empty_series_for_positive_count() {
        let series = RawSeries {
            series_id: "s".into(),
            subset_id: "a".into(),
            values: vec![],
        };
        assert!(extract_windows(&series, 1, &SamplingConfig::default()).is_err());
        assert!(extract_windows(&series, 0, &SamplingConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn normalize_spans_unit_interval() {
        let (v, m) = normalize_minmax(&[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.5, 1.0]);
        assert!(!m.degenerate);
    }

    #[test]
    fn normalize_constant_maps_to_half() {
        let (v, m) = normalize_minmax(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(v, vec![0.5, 0.5, 0.5]);
        assert!(m.degenerate);
    }

    #[test]
    fn normalize_keeps_already_spanning_input() {
        let (v, _) = normalize_minmax(&[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        assert!(normalize_minmax(&[0.0, f64::NAN]).is_err());
        assert!(normalize_minmax(&[0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let series = vec![
            RawSeries::new("s0", "a", (0..3000).map(|i| (i as f64 * 0.01).sin()).collect()).unwrap(),
            RawSeries::new("s1", "a", (0..1500).map(|i| (i as f64 * 0.02).cos()).collect()).unwrap(),
        ];
        let cfg = SamplingConfig {
            window_len: 256,
            target_per_subset: 12,
            initial_stride: 256,
            ..SamplingConfig::default()
        };
        let a = sample_subset(&series, &cfg).unwrap();
        let b = sample_subset(&series, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        assert!(a.iter().all(|w| w.normalized));
    }

    #[test]
    fn csv_and_ndjson_ingestion_agree() {
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("subset.csv");
        std::fs::write(&csv_path, "left,right\n1.0,4.0\n2.0,5.0\n3.0,\n").unwrap();
        let ndjson_path = dir.path().join("subset.ndjson");
        std::fs::write(
            &ndjson_path,
            "{\"series_id\":\"left\",\"values\":[1.0,2.0,3.0]}\n{\"series_id\":\"right\",\"values\":[4.0,5.0]}\n",
        )
        .unwrap();

        let from_csv = read_series_file(&csv_path, "x").unwrap();
        let from_ndjson = read_series_file(&ndjson_path, "x").unwrap();
        assert_eq!(from_csv, from_ndjson);
        assert_eq!(from_csv[0].values, vec![1.0, 2.0, 3.0]);
        assert_eq!(from_csv[1].values, vec![4.0, 5.0]);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn allocation_sums_and_balances(target in 1usize..5000, n in 1usize..64) {
                let lengths = vec![100usize; n];
                let counts = allocate_windows(target, &lengths).unwrap();
                prop_assert_eq!(counts.iter().sum::<usize>(), target);
                let max = counts.iter().max().unwrap();
                let min = counts.iter().min().unwrap();
                prop_assert!(max - min <= 1);
            }

            #[test]
            fn windows_have_exact_length_and_bounded_offsets(
                len in 3usize..4000,
                count in 1usize..40,
                window_len in 3usize..512,
                stride in 1usize..1500,
            ) {
                let series = RawSeries::new(
                    "s", "a",
                    (0..len).map(|i| (i as f64 * 0.37).sin()).collect(),
                ).unwrap();
                let cfg = SamplingConfig {
                    window_len,
                    target_per_subset: count,
                    initial_stride: stride,
                    ..SamplingConfig::default()
                };
                let ws = extract_windows(&series, count, &cfg).unwrap();
                prop_assert_eq!(ws.len(), count);
                let parent_len = len.max(window_len);
                for w in &ws {
                    prop_assert_eq!(w.len(), window_len);
                    prop_assert!(w.start_offset + window_len <= parent_len);
                }
            }

            #[test]
            fn normalization_is_idempotent_when_not_degenerate(
                values in proptest::collection::vec(-1e6f64..1e6, 1..200)
            ) {
                let (once, meta) = normalize_minmax(&values).unwrap();
                prop_assume!(!meta.degenerate);
                let (twice, _) = normalize_minmax(&once).unwrap();
                for (a, b) in once.iter().zip(&twice) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
                let min = once.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = once.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(min, 0.0);
                prop_assert_eq!(max, 1.0);
            }
        }
    }
}
