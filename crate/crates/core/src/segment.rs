//! Change-point detection on a filtered trend and conversion into candidate
//! segment boundaries.
//!
//! Interior indices whose trend second difference exceeds a threshold of
//! `sigma_multiplier` standard deviations are change points; sorted and
//! fused with the window edges they tile the window into contiguous
//! boundary pairs. The regularization weight escalates geometrically until
//! the segment count fits under `max_segments`.
//!
//! Boundary indices are 1-based and inclusive, matching the persisted file
//! formats; adjacent segments share their boundary index.

use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::error::{Error, Result};
use crate::trend::{second_diff, solve_tv2, Tv2Options, Tv2Problem};

/// Knobs for the adaptive segmentation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    /// Starting regularization weight.
    pub lambda_init: f64,
    /// Multiplier applied when a solve yields too many segments.
    pub lambda_factor: f64,
    /// Hard cap on segments per window.
    pub max_segments: usize,
    /// Segments shorter than this never get captions and are dropped from
    /// the candidate set.
    pub min_len: usize,
    /// Change-point threshold in second-difference standard deviations.
    pub sigma_multiplier: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            lambda_init: 100.0,
            lambda_factor: 10.0,
            max_segments: 6,
            min_len: 50,
            sigma_multiplier: 3.0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        // the is_finite checks also reject NaN, which any comparison would let through
        if !self.lambda_init.is_finite() || self.lambda_init <= 0.0 {
            return Err(Error::InvalidInput("lambda_init must be > 0".into()));
        }
        if !self.lambda_factor.is_finite() || self.lambda_factor <= 1.0 {
            return Err(Error::InvalidInput("lambda_factor must be > 1".into()));
        }
        if self.max_segments < 1 {
            return Err(Error::InvalidInput("max_segments must be >= 1".into()));
        }
        if self.min_len < 1 {
            return Err(Error::InvalidInput("min_len must be >= 1".into()));
        }
        if !self.sigma_multiplier.is_finite() || self.sigma_multiplier <= 0.0 {
            return Err(Error::InvalidInput("sigma_multiplier must be > 0".into()));
        }
        Ok(())
    }
}

/// A candidate segment: a window id plus a 1-based inclusive boundary pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub window_id: String,
    pub a: usize,
    pub b: usize,
}

impl SegmentSpec {
    pub fn new(window_id: impl Into<String>, a: usize, b: usize) -> Result<Self> {
        if a < 1 || a >= b {
            return Err(Error::InvalidInput(format!(
                "segment boundaries must satisfy 1 <= a < b, got ({a}, {b})"
            )));
        }
        Ok(Self {
            window_id: window_id.into(),
            a,
            b,
        })
    }

    pub fn len(&self) -> usize {
        self.b - self.a + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A detected change point: 1-based interior index plus the magnitude of the
/// trend's second difference there (used by the merge rule).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChangePoint {
    pub index: usize,
    pub magnitude: f64,
}

/// What one window segmented into.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub lambda_used: f64,
    /// Sorted 1-based change-point indices that survived merging.
    pub change_points: Vec<usize>,
    /// All segments, tiling [1, window_len] with shared endpoints.
    pub segments: Vec<SegmentSpec>,
    /// The segments long enough to caption (length >= min_len).
    pub captionable: Vec<SegmentSpec>,
}

/// Interior indices where `|second difference|` exceeds `sigma_multiplier`
/// population standard deviations (denominator `len - 2`, mean subtracted).
/// Indices are 1-based: position t holds `u[t+1] - 2 u[t] + u[t-1]` for
/// t in 2..=len-1. The inequality is strict, so a perfectly affine trend
/// (sigma = 0) yields no change points.
pub fn detect_change_points(trend: &[f64], sigma_multiplier: f64) -> Result<Vec<ChangePoint>> {
    let d = second_diff(trend)?;
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sigma = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let theta = sigma_multiplier * sigma;
    Ok(d
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > theta)
        .map(|(i, v)| ChangePoint {
            index: i + 2, // 0-based position i corresponds to interior index t = i + 2, 1-based
            magnitude: v.abs(),
        })
        .collect())
}

/// Fuses change points closer than 2 indices apart, keeping the larger
/// magnitude (ties keep the earlier index).
fn merge_close_points(points: &[ChangePoint]) -> Vec<ChangePoint> {
    let mut merged: Vec<ChangePoint> = Vec::with_capacity(points.len());
    for &p in points {
        match merged.last_mut() {
            Some(last) if p.index - last.index < 2 => {
                if p.magnitude > last.magnitude {
                    *last = p;
                }
            }
            _ => merged.push(p),
        }
    }
    merged
}

/// Converts sorted change points into contiguous boundary pairs over
/// [1, window_len]. Adjacent segments share their boundary index; change
/// points closer than 2 indices apart are merged first.
pub fn boundaries_to_segments(
    change_points: &[ChangePoint],
    window_id: &str,
    window_len: usize,
) -> Result<Vec<SegmentSpec>> {
    if window_len < 2 {
        return Err(Error::InvalidInput("window_len must be >= 2".into()));
    }
    for w in change_points.windows(2) {
        if w[0].index > w[1].index {
            return Err(Error::InvalidInput("change points must be sorted".into()));
        }
    }
    if let Some(p) = change_points
        .iter()
        .find(|p| p.index <= 1 || p.index >= window_len)
    {
        return Err(Error::InvalidInput(format!(
            "change point {} outside the open interval (1, {window_len})",
            p.index
        )));
    }
    let merged = merge_close_points(change_points);
    let mut boundaries = Vec::with_capacity(merged.len() + 2);
    boundaries.push(1);
    boundaries.extend(merged.iter().map(|p| p.index));
    boundaries.push(window_len);
    boundaries
        .windows(2)
        .map(|w| SegmentSpec::new(window_id, w[0], w[1]))
        .collect()
}

/// How many lambda escalations to attempt before falling back to the
/// largest-magnitude change points.
const MAX_ESCALATIONS: usize = 12;

/// Segments one normalized window: solve the trend filter, detect change
/// points, and escalate lambda geometrically while more than `max_segments`
/// segments come out. If escalation runs out, the `max_segments - 1`
/// largest-magnitude change points from the last solve are kept.
pub fn segment_window(
    window: &Window,
    cfg: &SegmentationConfig,
    solver_opts: &Tv2Options,
) -> Result<SegmentationResult> {
    cfg.validate()?;
    if !window.normalized {
        return Err(Error::InvalidInput(format!(
            "window '{}' must be normalized before segmentation",
            window.window_id
        )));
    }
    let len = window.len();
    if window.degenerate {
        // Constant window: one full-width segment, nothing to solve.
        let seg = SegmentSpec::new(&window.window_id, 1, len)?;
        let captionable = if seg.len() >= cfg.min_len {
            vec![seg.clone()]
        } else {
            Vec::new()
        };
        return Ok(SegmentationResult {
            lambda_used: cfg.lambda_init,
            change_points: Vec::new(),
            segments: vec![seg],
            captionable,
        });
    }

    let mut lambda = cfg.lambda_init;
    let mut last_points: Vec<ChangePoint> = Vec::new();
    let mut prev_support: Option<usize> = None;
    for escalation in 0..=MAX_ESCALATIONS {
        let problem = Tv2Problem::new(window.values.clone(), lambda)?;
        let solution = solve_tv2(&problem, solver_opts)?;
        let points = detect_change_points(&solution.trend, cfg.sigma_multiplier)?;

        // Soft check: raising lambda should not grow the kink support.
        let support = second_diff(&solution.trend)?
            .iter()
            .filter(|d| d.abs() > 1e-6)
            .count();
        if let Some(prev) = prev_support {
            if support > prev {
                log::warn!(
                    "window '{}': second-difference support grew from {prev} to {support} when lambda rose to {lambda}",
                    window.window_id
                );
            }
        }
        prev_support = Some(support);

        let segments = boundaries_to_segments(&points, &window.window_id, len)?;
        if segments.len() <= cfg.max_segments {
            return Ok(finish(segments, points, lambda, cfg));
        }
        last_points = points;
        if escalation < MAX_ESCALATIONS {
            lambda *= cfg.lambda_factor;
        }
    }

    // Escalation exhausted: keep the strongest max_segments - 1 points.
    let mut by_magnitude = last_points;
    by_magnitude.sort_by(|a, b| {
        b.magnitude
            .partial_cmp(&a.magnitude)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    by_magnitude.truncate(cfg.max_segments.saturating_sub(1));
    by_magnitude.sort_by_key(|p| p.index);
    let segments = boundaries_to_segments(&by_magnitude, &window.window_id, len)?;
    Ok(finish(segments, by_magnitude, lambda, cfg))
}

fn finish(
    segments: Vec<SegmentSpec>,
    points: Vec<ChangePoint>,
    lambda: f64,
    cfg: &SegmentationConfig,
) -> SegmentationResult {
    let merged = merge_close_points(&points);
    let captionable = segments
        .iter()
        .filter(|s| s.len() >= cfg.min_len)
        .cloned()
        .collect();
    SegmentationResult {
        lambda_used: lambda,
        change_points: merged.iter().map(|p| p.index).collect(),
        segments,
        captionable,
    }
}
