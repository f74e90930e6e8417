//! Captions for candidate segments: a deterministic rule-based synthesizer
//! (the default; keeps the whole pipeline offline) and single-panel SVG
//! renders of a window with its segments highlighted, used as the input to
//! an external captioning model.

use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::error::{Error, Result};
use crate::segment::SegmentSpec;
use crate::stats::{mean, ols_fit};

/// Where a caption came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Synthetic,
    Vlm,
    File,
}

/// A segment paired with its caption: the unit of training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    #[serde(flatten)]
    pub spec: SegmentSpec,
    pub caption: String,
    pub caption_source: CaptionSource,
}

impl SegmentRecord {
    pub fn new(spec: SegmentSpec, caption: String, caption_source: CaptionSource) -> Result<Self> {
        if caption.trim().is_empty() {
            return Err(Error::InvalidInput(format!(
                "empty caption for segment ({}, {}, {})",
                spec.window_id, spec.a, spec.b
            )));
        }
        Ok(Self {
            spec,
            caption,
            caption_source,
        })
    }
}

/// Geometry of the rendered plot. Styles (gray base line, translucent
/// per-segment bands, ordinal labels) are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlotSpec {
    pub width: u32,
    pub height: u32,
    pub margin: u32,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            width: 800,
            height: 400,
            margin: 40,
        }
    }
}

impl PlotSpec {
    /// Affine map from a 0-based sample index to its x pixel coordinate.
    pub fn x_pixel(&self, index: usize, len: usize) -> f64 {
        let inner = (self.width - 2 * self.margin) as f64;
        self.margin as f64 + index as f64 * inner / (len - 1) as f64
    }

    /// Inverse of [`PlotSpec::x_pixel`].
    pub fn index_at(&self, x: f64, len: usize) -> f64 {
        let inner = (self.width - 2 * self.margin) as f64;
        (x - self.margin as f64) * (len - 1) as f64 / inner
    }

    fn y_pixel(&self, value: f64) -> f64 {
        let inner = (self.height - 2 * self.margin) as f64;
        self.height as f64 - self.margin as f64 - value * inner
    }
}

/// Cycling segment palette.
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn polyline_points(spec: &PlotSpec, values: &[f64], from: usize, to: usize, len: usize) -> String {
    let mut out = String::with_capacity((to - from + 1) * 14);
    for (k, v) in values[from..=to].iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        out.push_str(&format!(
            "{:.2},{:.2}",
            spec.x_pixel(from + k, len),
            spec.y_pixel(*v)
        ));
    }
    out
}

/// Renders the window as a single-panel SVG: the whole series as a thin
/// light-gray line, each segment overlaid with a translucent band and a
/// thicker colored line, and its 1-based ordinal centered above it. Output
/// is byte-deterministic for identical inputs.
pub fn render_window_plot(
    window: &Window,
    segments: &[SegmentSpec],
    spec: &PlotSpec,
) -> Result<String> {
    if window.values.is_empty() {
        return Err(Error::InvalidInput("cannot render an empty window".into()));
    }
    if window.len() < 2 {
        return Err(Error::InvalidInput("rendering needs at least 2 points".into()));
    }
    if spec.width <= 2 * spec.margin || spec.height <= 2 * spec.margin {
        return Err(Error::InvalidInput("plot margins exceed the canvas".into()));
    }
    let len = window.len();
    let mut ordered: Vec<&SegmentSpec> = segments.iter().collect();
    ordered.sort_by_key(|s| (s.a, s.b));
    for s in &ordered {
        if s.a < 1 || s.b > len {
            return Err(Error::InvalidInput(format!(
                "segment ({}, {}) outside window of length {len}",
                s.a, s.b
            )));
        }
    }

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
        w = spec.width,
        h = spec.height
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"#ffffff\"/>\n",
        spec.width, spec.height
    ));

    // bands go under everything
    for (i, s) in ordered.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let x0 = spec.x_pixel(s.a - 1, len);
        let x1 = spec.x_pixel(s.b - 1, len);
        svg.push_str(&format!(
            "  <rect x=\"{:.2}\" y=\"{}\" width=\"{:.2}\" height=\"{}\" fill=\"{}\" fill-opacity=\"0.15\"/>\n",
            x0,
            spec.margin,
            x1 - x0,
            spec.height - 2 * spec.margin,
            color
        ));
    }

    svg.push_str(&format!(
        "  <polyline fill=\"none\" stroke=\"#b0b0b0\" stroke-width=\"1\" points=\"{}\"/>\n",
        polyline_points(spec, &window.values, 0, len - 1, len)
    ));

    for (i, s) in ordered.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2.5\" points=\"{}\"/>\n",
            color,
            polyline_points(spec, &window.values, s.a - 1, s.b - 1, len)
        ));
        let cx = (spec.x_pixel(s.a - 1, len) + spec.x_pixel(s.b - 1, len)) / 2.0;
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\" fill=\"{}\">{}</text>\n",
            cx,
            spec.margin as f64 * 0.75,
            color,
            i + 1
        ));
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

// Caption vocabulary thresholds. Slope classifies per 100 steps; the
// volatility words split residual standard deviation after detrending.
const FLAT_SLOPE_PER_100: f64 = 0.02;
const NOISY_STD: f64 = 0.02;
const VOLATILE_STD: f64 = 0.1;
const NEAR_BASELINE: f64 = 0.05;

/// Deterministic template caption from segment statistics: OLS slope picks
/// the trend word, residual spread after detrending picks the volatility
/// word, segment mean against the window mean picks the level word, and the
/// segment center picks the position word. The vocabulary is a small closed
/// set so distinct behaviors get distinct captions.
pub fn synthesize_caption(window: &Window, spec: &SegmentSpec) -> Result<String> {
    if spec.b > window.len() {
        return Err(Error::InvalidInput(format!(
            "segment ({}, {}) outside window of length {}",
            spec.a,
            spec.b,
            window.len()
        )));
    }
    let values = &window.values[spec.a - 1..spec.b];
    let (intercept, slope) = ols_fit(values);
    let residual_std = {
        let var = values
            .iter()
            .enumerate()
            .map(|(t, v)| {
                let r = v - (intercept + slope * t as f64);
                r * r
            })
            .sum::<f64>()
            / values.len() as f64;
        var.max(0.0).sqrt()
    };

    let trend_word = if (slope * 100.0).abs() < FLAT_SLOPE_PER_100 {
        "flat"
    } else if slope > 0.0 {
        "rising"
    } else {
        "falling"
    };
    let volatility_word = if residual_std < NOISY_STD {
        "smooth"
    } else if residual_std < VOLATILE_STD {
        "noisy"
    } else {
        "volatile"
    };
    let level = mean(values) - mean(&window.values);
    let level_word = if level.abs() < NEAR_BASELINE {
        "near"
    } else if level > 0.0 {
        "above"
    } else {
        "below"
    };
    let center_fraction = ((spec.a + spec.b) as f64 / 2.0 - 1.0) / (window.len() - 1) as f64;
    let position_word = if center_fraction < 1.0 / 3.0 {
        "opening"
    } else if center_fraction < 2.0 / 3.0 {
        "middle"
    } else {
        "closing"
    };

    Ok(format!(
        "{volatility_word} {trend_word} segment {level_word} baseline, in the {position_word} part of the series"
    ))
}
