//! Text-driven retrieval over time-series segments, end to end: window
//! sampling, piecewise-linear trend filtering, change-point segmentation,
//! caption generation, contrastive dual-encoder training, cosine top-K
//! retrieval, and the evaluation metric suite.
//!
//! The pipeline stages live in [`pipeline`]; everything they orchestrate is
//! usable piecemeal through the other modules.

pub mod caption;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod retrieval;
pub mod segment;
pub mod stats;
#[cfg(feature = "testing")]
pub mod testing;
pub mod train;
pub mod trend;
pub mod vlm;

pub use caption::{CaptionSource, PlotSpec, SegmentRecord};
pub use data::{RawSeries, SamplingConfig, Window};
pub use encoder::{FrameEncoder, SharedEmbedding, TextEmbedder, EMBED_DIM};
pub use error::{Error, Result};
pub use eval::{MetricsReport, QueryEntry, QuerySet};
pub use pipeline::{Method, PipelineConfig};
pub use retrieval::{CandidatePool, EmbeddingIndex, RankedResult};
pub use segment::{SegmentSpec, SegmentationConfig, SegmentationResult};
pub use train::TrainConfig;
pub use trend::{Tv2Options, Tv2Problem, Tv2Solution};
pub use vlm::VlmClientConfig;
