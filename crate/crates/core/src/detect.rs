//! Scoring, threshold calibration, cached stream detection and metrics.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::codec::{parse_request, RawRequest, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{ModelCheckpoint, ModelParams, Scorer};
use crate::preprocess::MergingStrategy;
use crate::vocab::hash_tokens;

pub const DEFAULT_QUANTILE: f64 = 0.995;
pub const DEFAULT_CACHE_CAPACITY: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Benign,
    Attack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub hash: u64,
    pub score: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Mean negative log-likelihood per prediction.
    #[default]
    MeanNll,
    /// One minus the argmax matching rate.
    MismatchRate,
}

pub fn verdict_for(score: f64, threshold: f64) -> Verdict {
    if score > threshold {
        Verdict::Attack
    } else {
        Verdict::Benign
    }
}

/// Empirical `q`-quantile with linear interpolation between order
/// statistics at position `q·(n−1)`.
pub fn calibrate_threshold(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Config("cannot calibrate on an empty score list".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("quantile {q} outside (0, 1)")));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(s[lo] + (pos - lo as f64) * (s[hi] - s[lo]))
}

/// Serialized detector: target model, threshold and scoring rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCheckpoint {
    pub model: ModelCheckpoint,
    pub threshold: f64,
    pub quantile: f64,
    pub score_kind: ScoreKind,
}

/// Immutable serving state for one domain.
#[derive(Debug)]
pub struct Detector {
    scorer: Scorer,
    strategy: MergingStrategy,
    pub threshold: f64,
    pub score_kind: ScoreKind,
    invocations: AtomicUsize,
}

impl Detector {
    pub fn new(params: ModelParams, strategy: MergingStrategy, threshold: f64, score_kind: ScoreKind) -> Result<Self> {
        if params.space.domain_id != strategy.domain_id {
            return Err(Error::VocabMismatch(format!(
                "model for `{}` paired with strategy for `{}`",
                params.space.domain_id, strategy.domain_id
            )));
        }
        Ok(Detector {
            scorer: Scorer::new(params),
            strategy,
            threshold,
            score_kind,
            invocations: AtomicUsize::new(0),
        })
    }

    pub fn params(&self) -> &ModelParams {
        self.scorer.params()
    }

    pub fn strategy(&self) -> &MergingStrategy {
        &self.strategy
    }

    /// Number of model evaluations so far.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    pub fn merged_sequence(&self, raw: &RawRequest) -> TokenSequence {
        self.strategy.apply(&parse_request(raw))
    }

    /// Score of an already merged sequence.
    pub fn score_sequence(&self, seq: &TokenSequence) -> Result<f64> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let ids = self.params().space.vocab.encode_lossy(seq);
        match self.score_kind {
            ScoreKind::MeanNll => self.scorer.mean_nll(&ids),
            ScoreKind::MismatchRate => Ok(1.0 - self.scorer.match_rate(&ids)?),
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    /// Uncached scoring of one request.
    pub fn score(&self, raw: &RawRequest) -> Result<DetectionResult> {
        let seq = self.merged_sequence(raw);
        self.result_for(&seq, false)
    }

    fn result_for(&self, seq: &TokenSequence, cache_hit: bool) -> Result<DetectionResult> {
        let score = self.score_sequence(seq)?;
        Ok(DetectionResult {
            hash: hash_tokens(&seq.tokens),
            score,
            threshold: self.threshold,
            verdict: verdict_for(score, self.threshold),
            cache_hit,
        })
    }

    pub fn to_checkpoint(&self, quantile: f64) -> DetectorCheckpoint {
        DetectorCheckpoint {
            model: self.params().to_checkpoint(),
            threshold: self.threshold,
            quantile,
            score_kind: self.score_kind,
        }
    }
}

/// Thread-safe LRU map from sequence hash to result.
#[derive(Debug)]
pub struct ScoreCache {
    inner: Mutex<LruCache<u64, DetectionResult>>,
    capacity: usize,
}

impl ScoreCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("capacity is positive");
        ScoreCache {
            inner: Mutex::new(LruCache::new(cap)),
            capacity: cap.get(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn eviction_policy(&self) -> &'static str {
        "lru"
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LruCache<u64, DetectionResult>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn get(&self, hash: u64) -> Option<DetectionResult> {
        self.lock().get(&hash).copied()
    }

    pub fn insert(&self, result: DetectionResult) {
        self.lock().put(result.hash, result);
    }
}

impl Default for ScoreCache {
    fn default() -> Self {
        ScoreCache::new(DEFAULT_CACHE_CAPACITY)
    }
}

/// Scores a stream, consulting `cache` by merged-sequence hash when given.
pub fn detect_stream<'a, I>(
    detector: &'a Detector,
    cache: Option<&'a ScoreCache>,
    requests: I,
) -> impl Iterator<Item = Result<DetectionResult>> + 'a
where
    I: IntoIterator<Item = RawRequest>,
    I::IntoIter: 'a,
{
    requests.into_iter().map(move |raw| {
        let seq = detector.merged_sequence(&raw);
        let Some(cache) = cache else {
            return detector.result_for(&seq, false);
        };
        let hash = hash_tokens(&seq.tokens);
        if let Some(mut hit) = cache.get(hash) {
            hit.cache_hit = true;
            return Ok(hit);
        }
        let result = detector.result_for(&seq, false)?;
        cache.insert(result);
        Ok(result)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when nothing was predicted positive and precision is defined as 0.
    pub no_predicted_positives: bool,
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MetricsReport {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            no_predicted_positives: tp + fp == 0,
        }
    }
}

/// Confusion counts with attack as the positive class.
pub fn evaluate(verdicts: &[Verdict], labels: &[Verdict]) -> Result<MetricsReport> {
    if verdicts.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: verdicts.len(),
            right: labels.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (v, l) in verdicts.iter().zip(labels) {
        match (v, l) {
            (Verdict::Attack, Verdict::Attack) => tp += 1,
            (Verdict::Attack, Verdict::Benign) => fp += 1,
            (Verdict::Benign, Verdict::Attack) => fn_ += 1,
            (Verdict::Benign, Verdict::Benign) => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn))
}
