//! Cross-domain zero-day web attack detection.
//!
//! The crate turns raw HTTP request logs into per-domain token sequences,
//! aligns token embeddings of many domains into one space, meta-learns a
//! universal seq2seq reconstruction model over auxiliary domains and adapts
//! it to a target domain with little data. Requests whose reconstruction
//! loss exceeds a calibrated threshold are reported as attacks.

pub mod align;
pub mod codec;
pub mod detect;
pub mod embed;
pub mod error;
pub mod io;
pub mod linalg;
pub mod meta;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod vocab;

pub use align::{select_base_domain, fit_orthogonal_map, AlignmentTransform, UniversalRepresentation};
pub use codec::{parse_request, tokenize, ParsedRequest, RawRequest, TokenSequence};
pub use detect::{detect_stream, evaluate, DetectionResult, Detector, MetricsReport, ScoreCache, Verdict};
pub use embed::{normalize_rows, train_skipgram, EmbeddingMatrix, SkipGramConfig};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use meta::{adapt_target, train_universal, AdaptConfig, MetaConfig, UniversalModel};
pub use model::{ModelDims, ModelParams};
pub use pipeline::{Hyper, Pipeline, Preset, RunConfig};
pub use preprocess::{apply_strategy, build_strategy, MergingStrategy, StrategyConfig};
pub use synth::{generate_synthetic, Record, SyntheticSpec};
pub use vocab::Vocab;
