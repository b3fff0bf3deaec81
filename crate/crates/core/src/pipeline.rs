//! End-to-end orchestration with on-disk checkpoints.
//!
//! Stages run in order: preprocess, embed, align, meta-train, adapt,
//! calibrate, detect, eval. Each stage writes its artifact under the
//! artifact root and, when resuming, reloads an existing artifact instead of
//! recomputing it.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::align::{select_base_domain, UniversalRepresentation};
use crate::codec::{parse_request, TokenSequence};
use crate::detect::{
    calibrate_threshold, detect_stream, evaluate, DetectionResult, Detector, DetectorCheckpoint,
    MetricsReport, ScoreCache, ScoreKind, Verdict, DEFAULT_CACHE_CAPACITY, DEFAULT_QUANTILE,
};
use crate::embed::{normalize_rows, train_skipgram, EmbeddingMatrix, SkipGramConfig};
use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::meta::{
    adapt_target, train_from_scratch, train_universal, AdaptConfig, AdaptReport, AdamConfig,
    DomainCorpus, MetaConfig, MetaReport, TokenBatchSampler, UniversalCheckpoint, UniversalModel,
};
use crate::model::{ModelDims, ModelParams};
use crate::preprocess::{MergingStrategy, StrategyConfig};
use crate::synth::Record;
use crate::vocab::Vocab;

/// Environment variable overriding the artifact root.
pub const ARTIFACT_ENV: &str = "XDWAF_ARTIFACTS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    #[serde(rename = "paper-512")]
    Paper512,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub strategy: StrategyConfig,
    pub skipgram: SkipGramConfig,
    pub dims: ModelDims,
    /// Range of the uniform initialization of `E`.
    pub init_scale: f64,
    pub meta: MetaConfig,
    pub adapt: AdaptConfig,
    pub quantile: f64,
    pub score_kind: ScoreKind,
    pub cache_capacity: usize,
}

impl Hyper {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Hyper {
                strategy: StrategyConfig::default(),
                skipgram: SkipGramConfig {
                    dim: 32,
                    window: 5,
                    negatives: 5,
                    epochs: 2,
                    learning_rate: 0.025,
                    max_sequences: Some(5000),
                    seed: 0,
                },
                dims: ModelDims::desk(),
                init_scale: 0.1,
                meta: MetaConfig {
                    token_batch: 256,
                    max_meta_iters: 300,
                    ..MetaConfig::default()
                },
                adapt: AdaptConfig {
                    adam: AdamConfig {
                        lr: 0.01,
                        ..AdamConfig::default()
                    },
                    steps: 150,
                    token_batch: 256,
                    seed: 0,
                },
                quantile: DEFAULT_QUANTILE,
                score_kind: ScoreKind::MeanNll,
                cache_capacity: DEFAULT_CACHE_CAPACITY,
            },
            Preset::Paper512 => Hyper {
                strategy: StrategyConfig::default(),
                skipgram: SkipGramConfig {
                    dim: 512,
                    ..SkipGramConfig::default()
                },
                dims: ModelDims::full(),
                init_scale: 0.1,
                meta: MetaConfig::default(),
                adapt: AdaptConfig {
                    steps: 5000,
                    ..AdaptConfig::default()
                },
                quantile: DEFAULT_QUANTILE,
                score_kind: ScoreKind::MeanNll,
                cache_capacity: DEFAULT_CACHE_CAPACITY,
            },
        }
    }

    /// Derives every stage seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.skipgram.seed = seed;
        self.meta.seed = seed.wrapping_add(1);
        self.adapt.seed = seed.wrapping_add(2);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        if self.dims.embed == 0 || self.dims.hidden == 0 || self.dims.max_len == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config(format!("quantile {} outside (0, 1)", self.quantile)));
        }
        if self.adapt.token_batch == 0 {
            return Err(Error::Config("adaptation token batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    /// Training records of each auxiliary domain, one file per domain.
    pub auxiliary: Vec<PathBuf>,
    pub target_train: PathBuf,
    pub target_test: PathBuf,
    pub artifacts: PathBuf,
    pub hyper: Hyper,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(preset: Preset, artifacts: PathBuf) -> Self {
        RunConfig {
            preset,
            auxiliary: Vec::new(),
            target_train: PathBuf::new(),
            target_test: PathBuf::new(),
            artifacts,
            hyper: Hyper::preset(preset),
            seed: 0,
        }
    }

    pub fn hyper(&self) -> Hyper {
        self.hyper.clone().with_seed(self.seed)
    }
}

/// Resolves the artifact root: the environment variable wins over `default`.
pub fn artifact_root(default: &Path) -> PathBuf {
    std::env::var_os(ARTIFACT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| default.to_path_buf())
}

/// Artifact file layout under one root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn strategy(&self, domain: &str) -> PathBuf {
        self.root.join("strategies").join(format!("{domain}.json"))
    }
    pub fn sequences(&self, domain: &str) -> PathBuf {
        self.root.join("sequences").join(format!("{domain}.jsonl"))
    }
    pub fn embedding(&self, domain: &str) -> PathBuf {
        self.root.join("embeddings").join(format!("{domain}.json"))
    }
    pub fn representation(&self) -> PathBuf {
        self.root.join("representation.json")
    }
    pub fn universal(&self) -> PathBuf {
        self.root.join("universal.json")
    }
    pub fn meta_report(&self) -> PathBuf {
        self.root.join("meta_report.json")
    }
    pub fn target_model(&self) -> PathBuf {
        self.root.join("target_model.json")
    }
    pub fn detector(&self) -> PathBuf {
        self.root.join("detector.json")
    }
    pub fn verdicts(&self) -> PathBuf {
        self.root.join("verdicts.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
}

/// A domain after preprocessing and embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDomain {
    pub strategy: MergingStrategy,
    pub sequences: Vec<TokenSequence>,
    pub vocab: Vocab,
    /// Normalized skip-gram vectors.
    pub embedding: EmbeddingMatrix,
}

impl PreparedDomain {
    pub fn domain_id(&self) -> &str {
        &self.strategy.domain_id
    }

    pub fn ids(&self) -> Result<Vec<Vec<usize>>> {
        self.sequences.iter().map(|s| self.vocab.encode(s)).collect()
    }

    pub fn corpus(&self) -> Result<DomainCorpus> {
        Ok(DomainCorpus {
            domain_id: self.domain_id().to_owned(),
            sequences: self.ids()?,
        })
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Builds the merging strategy of a domain and its merged sequences.
pub fn preprocess(domain_id: &str, records: &[Record], cfg: &StrategyConfig) -> Result<(MergingStrategy, Vec<TokenSequence>)> {
    if records.is_empty() {
        return Err(Error::EmptyDomainCorpus(domain_id.to_owned()));
    }
    let parsed: Vec<_> = records.iter().map(|r| parse_request(&r.request)).collect();
    let strategy = MergingStrategy::build(domain_id, &parsed, cfg)?;
    let seqs = parsed.iter().map(|p| strategy.apply(p)).collect();
    Ok((strategy, seqs))
}

/// Skip-gram vectors of a merged corpus, row-normalized.
pub fn embed(strategy: &MergingStrategy, sequences: &[TokenSequence], cfg: &SkipGramConfig) -> Result<(Vocab, EmbeddingMatrix)> {
    let vocab = Vocab::from_token_set(&strategy.token_set);
    let raw = train_skipgram(&strategy.domain_id, sequences, &vocab, cfg)?;
    Ok((vocab, normalize_rows(&raw).0))
}

pub fn prepare_domain(domain_id: &str, records: &[Record], hyper: &Hyper) -> Result<PreparedDomain> {
    let (strategy, sequences) = stage("preprocess", preprocess(domain_id, records, &hyper.strategy))?;
    let (vocab, embedding) = stage("embed", embed(&strategy, &sequences, &hyper.skipgram))?;
    Ok(PreparedDomain {
        strategy,
        sequences,
        vocab,
        embedding,
    })
}

/// Chooses the base among the auxiliary domains and aligns the others.
pub fn align_auxiliary(aux: &[PreparedDomain], hyper: &Hyper) -> Result<UniversalRepresentation> {
    let sets: Vec<_> = aux
        .iter()
        .map(|d| (d.domain_id().to_owned(), d.strategy.token_set.clone()))
        .collect();
    let base_id = select_base_domain(&sets)?;
    let base = aux
        .iter()
        .find(|d| d.domain_id() == base_id)
        .expect("base chosen among auxiliary domains");
    let mut rep = UniversalRepresentation::new(
        base.embedding.clone(),
        hyper.dims.embed,
        hyper.init_scale,
        hyper.meta.seed ^ 0xa11e,
    )?;
    for d in aux.iter().filter(|d| d.domain_id() != base_id) {
        rep.add_domain(&d.embedding)?;
    }
    Ok(rep)
}

pub fn meta_train(rep: &UniversalRepresentation, aux: &[PreparedDomain], hyper: &Hyper) -> Result<(UniversalModel, MetaReport)> {
    let corpora = aux.iter().map(PreparedDomain::corpus).collect::<Result<Vec<_>>>()?;
    let mut sampler = TokenBatchSampler::new(hyper.meta.seed);
    train_universal(rep, &corpora, hyper.dims, &hyper.meta, &mut sampler, None)
}

/// Everything needed before a target domain is attached.
#[derive(Debug, Clone)]
pub struct UniversalStage {
    pub auxiliary: Vec<PreparedDomain>,
    pub representation: UniversalRepresentation,
    pub universal: UniversalModel,
    pub report: MetaReport,
}

pub fn build_universal(aux_records: &[(String, Vec<Record>)], hyper: &Hyper) -> Result<UniversalStage> {
    if aux_records.len() < 2 {
        return Err(Error::Config("at least two auxiliary domains are required".into()));
    }
    let auxiliary = aux_records
        .iter()
        .map(|(id, recs)| prepare_domain(id, recs, hyper))
        .collect::<Result<Vec<_>>>()?;
    let representation = stage("align", align_auxiliary(&auxiliary, hyper))?;
    let (universal, report) = stage("meta-train", meta_train(&representation, &auxiliary, hyper))?;
    Ok(UniversalStage {
        auxiliary,
        representation,
        universal,
        report,
    })
}

/// Target-domain model before calibration.
#[derive(Debug, Clone)]
pub struct TargetFit {
    pub target: PreparedDomain,
    pub representation: UniversalRepresentation,
    pub params: ModelParams,
    pub report: AdaptReport,
}

/// Aligns the target to the base domain and adapts `θ*` to it.
pub fn fit_target(universal: &UniversalStage, target_id: &str, records: &[Record], hyper: &Hyper) -> Result<TargetFit> {
    let target = prepare_domain(target_id, records, hyper)?;
    let mut representation = universal.representation.clone();
    stage("align", representation.add_domain(&target.embedding).map(|_| ()))?;
    let ids = target.ids()?;
    let (params, report) = stage(
        "adapt",
        adapt_target(&universal.universal, &representation, target_id, &ids, &hyper.adapt),
    )?;
    Ok(TargetFit {
        target,
        representation,
        params,
        report,
    })
}

/// Baseline trained only on the target corpus, aligned into the same space.
pub fn fit_scratch(universal: &UniversalStage, target_id: &str, records: &[Record], hyper: &Hyper) -> Result<TargetFit> {
    let target = prepare_domain(target_id, records, hyper)?;
    let mut representation = universal.representation.clone();
    stage("align", representation.add_domain(&target.embedding).map(|_| ()))?;
    let ids = target.ids()?;
    let (params, report) = stage(
        "adapt",
        train_from_scratch(&representation, target_id, hyper.dims, &ids, &hyper.adapt),
    )?;
    Ok(TargetFit {
        target,
        representation,
        params,
        report,
    })
}

/// Calibrates the threshold on the training corpus and returns a detector.
pub fn calibrate(fit: &TargetFit, hyper: &Hyper) -> Result<Detector> {
    let detector = Detector::new(
        fit.params.clone(),
        fit.target.strategy.clone(),
        f64::INFINITY,
        hyper.score_kind,
    )?;
    let scores = fit
        .target
        .sequences
        .iter()
        .map(|s| detector.score_sequence(s))
        .collect::<Result<Vec<_>>>()?;
    let threshold = calibrate_threshold(&scores, hyper.quantile)?;
    Ok(detector.with_threshold(threshold))
}

/// Scores labeled records and computes metrics.
pub fn detect_and_evaluate(detector: &Detector, records: &[Record], cache: Option<&ScoreCache>) -> Result<(Vec<DetectionResult>, MetricsReport)> {
    let results = detect_stream(detector, cache, records.iter().map(|r| r.request.clone()))
        .collect::<Result<Vec<_>>>()?;
    let labels = records
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::Format("evaluation record without a label".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let verdicts: Vec<Verdict> = results.iter().map(|r| r.verdict).collect();
    let metrics = evaluate(&verdicts, &labels)?;
    Ok((results, metrics))
}

/// Counts test records whose fingerprint appears in any training split.
pub fn audit_leakage<'a>(train: impl IntoIterator<Item = &'a Record>, test: &[Record]) -> Result<()> {
    let seen: HashSet<u64> = train.into_iter().map(Record::fingerprint).collect();
    let leaked = test.iter().filter(|r| seen.contains(&r.fingerprint())).count();
    if leaked > 0 {
        return Err(Error::LabelLeakage(leaked));
    }
    Ok(())
}

fn load_records(path: &Path) -> Result<Vec<Record>> {
    read_jsonl(path)
}

fn domain_of(records: &[Record], path: &Path) -> Result<String> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptyDomainCorpus(path.display().to_string()))?;
    let id = &first.request.domain_id;
    if let Some(other) = records.iter().find(|r| &r.request.domain_id != id) {
        return Err(Error::Format(format!(
            "{}: mixes domains `{id}` and `{}`",
            path.display(),
            other.request.domain_id
        )));
    }
    Ok(id.clone())
}

/// Final artifacts of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub base_domain: String,
    pub target_domain: String,
    pub threshold: f64,
    pub metrics: MetricsReport,
    pub meta_iterations: usize,
    pub model_invocations: usize,
}

/// Stage-by-stage runner over files.
pub struct Pipeline {
    pub config: RunConfig,
    pub layout: Layout,
    /// Reuse existing artifacts instead of recomputing them.
    pub resume: bool,
}

impl Pipeline {
    pub fn new(config: RunConfig, resume: bool) -> Self {
        let layout = Layout::new(config.artifacts.clone());
        Pipeline {
            config,
            layout,
            resume,
        }
    }

    fn cached<T, F>(&self, path: &Path, compute: F) -> Result<T>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        if self.resume && path.exists() {
            info!("reusing {}", path.display());
            return read_json(path);
        }
        let value = compute()?;
        write_json(path, &value)?;
        Ok(value)
    }

    /// Preprocess stage for one domain's record file.
    pub fn preprocess_file(&self, path: &Path) -> Result<(MergingStrategy, Vec<TokenSequence>)> {
        stage("preprocess", (|| {
            let records = load_records(path)?;
            let id = domain_of(&records, path)?;
            let spath = self.layout.strategy(&id);
            let qpath = self.layout.sequences(&id);
            if self.resume && spath.exists() && qpath.exists() {
                return Ok((read_json(&spath)?, read_jsonl(&qpath)?));
            }
            let (strategy, seqs) = preprocess(&id, &records, &self.config.hyper().strategy)?;
            write_json(&spath, &strategy)?;
            write_jsonl(&qpath, &seqs)?;
            Ok((strategy, seqs))
        })())
    }

    fn load_preprocessed(&self, domain: &str) -> Result<(MergingStrategy, Vec<TokenSequence>)> {
        stage("preprocess", (|| Ok((read_json(&self.layout.strategy(domain))?, read_jsonl(&self.layout.sequences(domain))?)))())
    }

    /// Embed stage for a preprocessed domain.
    pub fn embed_domain(&self, domain: &str) -> Result<PreparedDomain> {
        let (strategy, sequences) = self.load_preprocessed(domain)?;
        let hyper = self.config.hyper();
        let embedding: EmbeddingMatrix = stage(
            "embed",
            self.cached(&self.layout.embedding(domain), || {
                embed(&strategy, &sequences, &hyper.skipgram).map(|(_, e)| e)
            }),
        )?;
        Ok(PreparedDomain {
            vocab: embedding.vocab.clone(),
            strategy,
            sequences,
            embedding,
        })
    }

    pub fn aux_ids(&self) -> Result<Vec<String>> {
        self.config
            .auxiliary
            .iter()
            .map(|p| stage("preprocess", load_records(p).and_then(|r| domain_of(&r, p))))
            .collect()
    }

    pub fn target_id(&self) -> Result<String> {
        let p = &self.config.target_train;
        stage("preprocess", load_records(p).and_then(|r| domain_of(&r, p)))
    }

    /// Align stage: base selection over auxiliary domains, then every
    /// auxiliary domain and the target are fitted to the base.
    pub fn align(&self) -> Result<UniversalRepresentation> {
        let aux = self
            .aux_ids()?
            .iter()
            .map(|id| self.embed_domain(id))
            .collect::<Result<Vec<_>>>()?;
        let target = self.embed_domain(&self.target_id()?)?;
        let hyper = self.config.hyper();
        stage(
            "align",
            self.cached(&self.layout.representation(), || {
                let mut rep = align_auxiliary(&aux, &hyper)?;
                rep.add_domain(&target.embedding)?;
                Ok(rep)
            }),
        )
    }

    pub fn meta_train(&self) -> Result<UniversalModel> {
        let rep: UniversalRepresentation = stage("align", read_json(&self.layout.representation()))?;
        let hyper = self.config.hyper();
        let ckpt: UniversalCheckpoint = stage(
            "meta-train",
            self.cached(&self.layout.universal(), || {
                let aux = self
                    .aux_ids()?
                    .iter()
                    .map(|id| self.embed_domain(id))
                    .collect::<Result<Vec<_>>>()?;
                let (model, report) = meta_train(&rep, &aux, &hyper)?;
                write_json(&self.layout.meta_report(), &report)?;
                Ok(model.to_checkpoint())
            }),
        )?;
        stage("meta-train", UniversalModel::from_checkpoint(ckpt, &rep))
    }

    pub fn adapt(&self) -> Result<ModelParams> {
        let rep: UniversalRepresentation = stage("align", read_json(&self.layout.representation()))?;
        let ckpt: UniversalCheckpoint = stage("meta-train", read_json(&self.layout.universal()))?;
        let universal = stage("meta-train", UniversalModel::from_checkpoint(ckpt, &rep))?;
        let target_id = self.target_id()?;
        let target = self.embed_domain(&target_id)?;
        let hyper = self.config.hyper();
        let ckpt = stage(
            "adapt",
            self.cached(&self.layout.target_model(), || {
                let ids = target.ids()?;
                let (params, _) = adapt_target(&universal, &rep, &target_id, &ids, &hyper.adapt)?;
                Ok(params.to_checkpoint())
            }),
        )?;
        stage("adapt", ModelParams::from_checkpoint(ckpt, &rep))
    }

    pub fn calibrate(&self) -> Result<Detector> {
        let rep: UniversalRepresentation = stage("align", read_json(&self.layout.representation()))?;
        let hyper = self.config.hyper();
        let target_id = self.target_id()?;
        let (strategy, sequences) = self.load_preprocessed(&target_id)?;
        let ckpt: DetectorCheckpoint = stage(
            "calibrate",
            self.cached(&self.layout.detector(), || {
                let model = read_json(&self.layout.target_model())?;
                let params = ModelParams::from_checkpoint(model, &rep)?;
                let det = Detector::new(params, strategy.clone(), f64::INFINITY, hyper.score_kind)?;
                let scores = sequences
                    .iter()
                    .map(|s| det.score_sequence(s))
                    .collect::<Result<Vec<_>>>()?;
                let t = calibrate_threshold(&scores, hyper.quantile)?;
                Ok(det.with_threshold(t).to_checkpoint(hyper.quantile))
            }),
        )?;
        load_detector(ckpt, &rep, strategy)
    }

    /// Runs every stage and writes verdicts and metrics.
    pub fn run(&self) -> Result<RunOutcome> {
        let hyper = self.config.hyper();
        stage("config", hyper.validate())?;
        let test = stage("detect", load_records(&self.config.target_test))?;
        let mut train_records = Vec::new();
        for p in self.config.auxiliary.iter().chain([&self.config.target_train]) {
            train_records.extend(stage("preprocess", load_records(p))?);
        }
        stage("audit", audit_leakage(&train_records, &test))?;
        drop(train_records);

        for p in self.config.auxiliary.iter().chain([&self.config.target_train]) {
            self.preprocess_file(p)?;
        }
        self.align()?;
        self.meta_train()?;
        self.adapt()?;
        self.evaluate()
    }

    /// Calibrates, scores the labeled test file and writes verdicts and
    /// metrics.
    pub fn evaluate(&self) -> Result<RunOutcome> {
        let hyper = self.config.hyper();
        let rep: UniversalRepresentation = stage("align", read_json(&self.layout.representation()))?;
        let detector = self.calibrate()?;
        let test = stage("detect", load_records(&self.config.target_test))?;
        let cache = ScoreCache::new(hyper.cache_capacity);
        let (results, metrics) = stage("detect", detect_and_evaluate(&detector, &test, Some(&cache)))?;
        stage("detect", write_jsonl(&self.layout.verdicts(), &results))?;
        let outcome = RunOutcome {
            base_domain: rep.base_domain.clone(),
            target_domain: detector.strategy().domain_id.clone(),
            threshold: detector.threshold,
            metrics,
            meta_iterations: read_json::<MetaReport>(&self.layout.meta_report())
                .map(|r| r.iterations)
                .unwrap_or(hyper.meta.max_meta_iters),
            model_invocations: detector.invocations(),
        };
        stage("eval", write_json(&self.layout.metrics(), &outcome))?;
        Ok(outcome)
    }
}

/// Rebuilds a detector from its checkpoint.
pub fn load_detector(ckpt: DetectorCheckpoint, rep: &UniversalRepresentation, strategy: MergingStrategy) -> Result<Detector> {
    let params = stage("calibrate", ModelParams::from_checkpoint(ckpt.model, rep))?;
    stage("calibrate", Detector::new(params, strategy, ckpt.threshold, ckpt.score_kind))
}
