//! First-order meta-training of the universal initial model and its
//! adaptation to a target domain.

use std::collections::BTreeMap;
use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::UniversalRepresentation;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    init_generator, GradientSet, LossSummary, ModelDims, ModelParams, ParamSet, DOMAIN_SPECIFIC, EV,
    GEN_B, GEN_W, TENSOR_NAMES,
};

/// Anything with named parameters and a differentiable loss.
pub trait Learner {
    type Batch: ?Sized;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn loss_and_gradient(&self, batch: &Self::Batch) -> Result<(f64, GradientSet)>;
}

impl Learner for ModelParams {
    type Batch = [Vec<usize>];

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_and_gradient(&self, batch: &[Vec<usize>]) -> Result<(f64, GradientSet)> {
        let (loss, g) = self.backward(batch)?;
        Ok((loss.total, g))
    }
}

/// Per-element update mask over a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMask {
    pub names: Vec<String>,
    pub tensors: Vec<Vec<bool>>,
}

impl ParamMask {
    pub fn uniform(params: &ParamSet, value: bool) -> Self {
        ParamMask {
            names: params.names.clone(),
            tensors: params.tensors.iter().map(|t| vec![value; t.len()]).collect(),
        }
    }

    /// False on `E^v` and the generator, true elsewhere.
    pub fn outer(params: &ParamSet) -> Self {
        let frozen: Vec<&str> = DOMAIN_SPECIFIC.iter().map(|&i| TENSOR_NAMES[i]).collect();
        ParamMask {
            names: params.names.clone(),
            tensors: params
                .names
                .iter()
                .zip(&params.tensors)
                .map(|(n, t)| vec![!frozen.contains(&n.as_str()); t.len()])
                .collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&[bool]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.tensors[i].as_slice())
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        for (i, (m, t)) in self.tensors.iter().zip(&params.tensors).enumerate() {
            if m.len() != t.len() {
                return Err(Error::ShapeMismatch {
                    name: format!("mask `{}`", params.names[i]),
                    expected: t.shape(),
                    found: (m.len(), 1),
                });
            }
        }
        if self.tensors.len() != params.len() {
            return Err(Error::ShapeMismatch {
                name: "mask".into(),
                expected: (params.len(), 1),
                found: (self.tensors.len(), 1),
            });
        }
        Ok(())
    }
}

fn check_grads(params: &ParamSet, grads: &GradientSet) -> Result<()> {
    params.check_congruent(&ParamSet::new(grads.names.clone(), grads.tensors.clone()))
}

/// `θ ← θ − α·g` on every element.
pub fn sgd_step(params: &mut ParamSet, grads: &GradientSet, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.tensors.iter_mut().zip(&grads.tensors) {
        for (x, &d) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *x -= lr * d;
        }
    }
    Ok(())
}

/// `θ ← θ − α·(g ⊙ K)`. Masked-out elements are not touched at all.
pub fn masked_update(params: &mut ParamSet, grads: &GradientSet, mask: &ParamMask, lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    mask.check(params)?;
    for ((p, g), m) in params.tensors.iter_mut().zip(&grads.tensors).zip(&mask.tensors) {
        for ((x, &d), &keep) in p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m) {
            if keep {
                *x -= lr * d;
            }
        }
    }
    Ok(())
}

/// `s = batches.len()` sequential SGD steps on all parameters. Returns the
/// loss before each step.
pub fn inner_update<L: Learner>(learner: &mut L, batches: &[&L::Batch], lr: f64) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(batches.len());
    for b in batches {
        let (loss, g) = learner.loss_and_gradient(b)?;
        g.ensure_finite()?;
        sgd_step(learner.params_mut(), &g, lr)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// First-order meta gradient: the plain gradient at the adapted parameters.
pub fn meta_gradient<L: Learner>(adapted: &L, outer_batch: &L::Batch) -> Result<(f64, GradientSet)> {
    adapted.loss_and_gradient(outer_batch)
}

/// Elementwise sum of gradients from several domains.
pub fn sum_gradients(grads: &[GradientSet]) -> Result<GradientSet> {
    let (first, rest) = grads.split_first().ok_or(Error::EmptyBatch)?;
    let mut total = first.clone();
    for g in rest {
        check_grads(&first.as_params(), g)?;
        total.add_assign(g);
    }
    Ok(total)
}

/// Draws batches of sequence indices.
pub trait BatchSampler {
    /// `count` pairwise-disjoint, non-empty batches over sequences with the
    /// given lengths.
    fn sample(&mut self, lengths: &[usize], count: usize, token_batch: usize) -> Result<Vec<Vec<usize>>>;
}

/// Token-level dynamic batching over a fresh random permutation. Sequences
/// are kept whole and batches are filled greedily up to `token_batch`
/// tokens.
#[derive(Debug, Clone)]
pub struct TokenBatchSampler {
    rng: ChaCha8Rng,
}

impl TokenBatchSampler {
    pub fn new(seed: u64) -> Self {
        TokenBatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Partitions a shuffled index set into batches.
    pub fn epoch(&mut self, lengths: &[usize], token_batch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.shuffle(&mut self.rng);
        greedy_fill(&order, lengths, token_batch, usize::MAX)
    }
}

fn greedy_fill(order: &[usize], lengths: &[usize], token_batch: usize, max_seqs: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for &i in order {
        let cost = lengths[i].max(1);
        if !cur.is_empty() && (tokens + cost > token_batch || cur.len() >= max_seqs) {
            out.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        cur.push(i);
        tokens += cost;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl BatchSampler for TokenBatchSampler {
    fn sample(&mut self, lengths: &[usize], count: usize, token_batch: usize) -> Result<Vec<Vec<usize>>> {
        if lengths.len() < count {
            return Err(Error::Config(format!(
                "{} sequences cannot fill {count} disjoint batches",
                lengths.len()
            )));
        }
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.shuffle(&mut self.rng);
        let mut batches = greedy_fill(&order, lengths, token_batch, usize::MAX);
        if batches.len() < count {
            let per = lengths.len() / count;
            batches = greedy_fill(&order, lengths, usize::MAX, per);
        }
        batches.truncate(count);
        Ok(batches)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub token_batch: usize,
    pub max_meta_iters: usize,
    /// Relative improvement of the windowed meta-loss below which training
    /// stops.
    pub tolerance: f64,
    pub window: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.001,
            outer_lr: 0.001,
            inner_steps: 4,
            token_batch: 4096,
            max_meta_iters: 5000,
            tolerance: 1e-3,
            window: 50,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return bad("meta learning rates must be positive");
        }
        if self.inner_steps == 0 {
            return bad("inner step count must be at least 1");
        }
        if self.token_batch == 0 || self.window == 0 {
            return bad("token batch and window must be positive");
        }
        Ok(())
    }
}

/// Domain-specific tensors of one auxiliary domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBank {
    pub ev: Matrix,
    pub gen_w: Matrix,
    pub gen_b: Matrix,
}

/// Meta-trained parameters plus the per-domain banks used while training.
#[derive(Debug, Clone, PartialEq)]
pub struct UniversalModel {
    pub params: ModelParams,
    pub banks: BTreeMap<String, DomainBank>,
    pub base_domain: String,
    pub config: MetaConfig,
}

/// Serializable form of [`UniversalModel`]; spaces are re-linked from the
/// representation on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalCheckpoint {
    pub dims: ModelDims,
    pub base_domain: String,
    pub active_domain: String,
    pub params: ParamSet,
    pub banks: BTreeMap<String, DomainBank>,
    pub config: MetaConfig,
}

impl UniversalModel {
    pub fn to_checkpoint(&self) -> UniversalCheckpoint {
        UniversalCheckpoint {
            dims: self.params.dims,
            base_domain: self.base_domain.clone(),
            active_domain: self.params.space.domain_id.clone(),
            params: self.params.params.clone(),
            banks: self.banks.clone(),
            config: self.config.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: UniversalCheckpoint, rep: &UniversalRepresentation) -> Result<Self> {
        if ckpt.base_domain != rep.base_domain {
            return Err(Error::VocabMismatch(format!(
                "checkpoint base domain `{}` differs from representation base `{}`",
                ckpt.base_domain, rep.base_domain
            )));
        }
        let mut params = ModelParams::init(rep, &ckpt.active_domain, ckpt.dims, 0)?;
        params.params.check_congruent(&ckpt.params)?;
        params.params = ckpt.params;
        Ok(UniversalModel {
            params,
            banks: ckpt.banks,
            base_domain: ckpt.base_domain,
            config: ckpt.config,
        })
    }
}

/// Everything one meta-iteration touched, handed to an observer after the
/// outer update.
pub struct MetaEvent<'a> {
    pub iteration: usize,
    pub domain: &'a str,
    /// `θ_temp`, taken before the inner loop.
    pub snapshot: &'a ParamSet,
    /// Parameters after the inner loop.
    pub adapted: &'a ModelParams,
    pub inner_batches: &'a [Vec<usize>],
    pub outer_batch: &'a [usize],
    pub outer_sequences: &'a [Vec<usize>],
    pub meta_gradient: &'a GradientSet,
    /// Parameters right after restoring the snapshot.
    pub restored: &'a ParamSet,
    pub updated: &'a ParamSet,
    pub mask: &'a ParamMask,
    pub inner_losses: &'a [f64],
    pub outer_loss: f64,
}

pub trait MetaObserver {
    fn on_iteration(&mut self, event: &MetaEvent<'_>);
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetaReport {
    pub iterations: usize,
    pub converged: bool,
    /// Outer-batch per-token loss of each iteration.
    pub outer_losses: Vec<f64>,
    /// Mean of `outer_losses` over each completed window.
    pub window_means: Vec<f64>,
}

/// A domain corpus as vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpus {
    pub domain_id: String,
    pub sequences: Vec<Vec<usize>>,
}

impl DomainCorpus {
    fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(Vec::len).collect()
    }
}

fn load_bank(params: &mut ModelParams, rep: &UniversalRepresentation, domain: &str, bank: &DomainBank) -> Result<()> {
    if params.space.domain_id != domain {
        params.space = Arc::new(rep.space(domain)?.clone());
    }
    params.params.tensors[EV] = bank.ev.clone();
    params.params.tensors[GEN_W] = bank.gen_w.clone();
    params.params.tensors[GEN_B] = bank.gen_b.clone();
    Ok(())
}

fn gather(seqs: &[Vec<usize>], idx: &[usize]) -> Vec<Vec<usize>> {
    idx.iter().map(|&i| seqs[i].clone()).collect()
}

/// Trains the universal initial model over auxiliary domains.
pub fn train_universal(
    rep: &UniversalRepresentation,
    domains: &[DomainCorpus],
    dims: ModelDims,
    cfg: &MetaConfig,
    sampler: &mut dyn BatchSampler,
    mut observer: Option<&mut dyn MetaObserver>,
) -> Result<(UniversalModel, MetaReport)> {
    cfg.validate()?;
    let first = domains.first().ok_or(Error::EmptyCorpus)?;
    for d in domains {
        if d.sequences.is_empty() {
            return Err(Error::EmptyDomainCorpus(d.domain_id.clone()));
        }
        let longest = d.sequences.iter().map(Vec::len).max().unwrap_or(0);
        if longest.min(dims.max_len) > cfg.token_batch {
            return Err(Error::Config(format!(
                "token batch {} is shorter than the longest sequence ({longest}) of `{}`",
                cfg.token_batch, d.domain_id
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(rep, &first.domain_id, dims, rng.gen())?;
    let mut banks = BTreeMap::new();
    for d in domains {
        let v = rep.space(&d.domain_id)?.vocab.len();
        let (gen_w, gen_b) = init_generator(v, dims.hidden, &mut rng);
        banks.insert(
            d.domain_id.clone(),
            DomainBank {
                ev: rep.domain_tables[&d.domain_id].clone(),
                gen_w,
                gen_b,
            },
        );
    }
    let lengths: Vec<Vec<usize>> = domains.iter().map(DomainCorpus::lengths).collect();
    let mut masks: BTreeMap<String, ParamMask> = BTreeMap::new();

    let mut report = MetaReport::default();
    for iter in 0..cfg.max_meta_iters {
        let k = rng.gen_range(0..domains.len());
        let dom = &domains[k];
        load_bank(&mut params, rep, &dom.domain_id, &banks[&dom.domain_id])?;
        let mask = masks
            .entry(dom.domain_id.clone())
            .or_insert_with(|| ParamMask::outer(&params.params));
        let snapshot = params.params.clone();

        let picks = sampler.sample(&lengths[k], cfg.inner_steps + 1, cfg.token_batch)?;
        let (inner_idx, outer_idx) = picks.split_at(cfg.inner_steps);
        let inner: Vec<Vec<Vec<usize>>> = inner_idx.iter().map(|b| gather(&dom.sequences, b)).collect();
        let inner_refs: Vec<&[Vec<usize>]> = inner.iter().map(Vec::as_slice).collect();
        let outer = gather(&dom.sequences, &outer_idx[0]);

        let inner_losses = inner_update(&mut params, &inner_refs, cfg.inner_lr)?;
        let (outer_total, g) = meta_gradient(&params, outer.as_slice())?;
        g.ensure_finite()?;
        let predictions: usize = outer.iter().map(|s| s.len().min(dims.max_len) + 1).sum();
        let outer_loss = LossSummary {
            total: outer_total,
            predictions,
            sequences: outer.len(),
        }
        .per_token();

        let adapted = std::mem::replace(&mut params.params, snapshot.clone());
        let restored = observer.as_ref().map(|_| params.params.clone());
        masked_update(&mut params.params, &g, mask, cfg.outer_lr)?;

        if let Some(obs) = observer.as_deref_mut() {
            let mut adapted_model = params.clone();
            adapted_model.params = adapted;
            obs.on_iteration(&MetaEvent {
                iteration: iter,
                domain: &dom.domain_id,
                snapshot: &snapshot,
                adapted: &adapted_model,
                inner_batches: inner_idx,
                outer_batch: &outer_idx[0],
                outer_sequences: &outer,
                meta_gradient: &g,
                restored: restored.as_ref().expect("restored copy taken with observer"),
                updated: &params.params,
                mask,
                inner_losses: &inner_losses,
                outer_loss,
            });
        }

        report.iterations = iter + 1;
        report.outer_losses.push(outer_loss);
        if report.outer_losses.len() % cfg.window == 0 {
            let tail = &report.outer_losses[report.outer_losses.len() - cfg.window..];
            let mean = tail.iter().sum::<f64>() / cfg.window as f64;
            debug!("meta iteration {}: windowed loss {mean:.4}", iter + 1);
            if let Some(&prev) = report.window_means.last() {
                if (prev - mean) / prev < cfg.tolerance {
                    report.window_means.push(mean);
                    report.converged = true;
                    break;
                }
            }
            report.window_means.push(mean);
        }
    }
    info!(
        "meta-training stopped after {} iterations (converged: {})",
        report.iterations, report.converged
    );
    Ok((
        UniversalModel {
            params,
            banks,
            base_domain: rep.base_domain.clone(),
            config: cfg.clone(),
        },
        report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate at the end of the step budget as a fraction of `lr`;
    /// the rate decays exponentially in between.
    pub final_lr_fraction: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            final_lr_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let z = params.zeros_like().tensors;
        Adam {
            cfg,
            m: z.clone(),
            v: z,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradientSet, lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let it = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((x, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub adam: AdamConfig,
    /// Total optimizer steps.
    pub steps: usize,
    pub token_batch: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            adam: AdamConfig::default(),
            steps: 300,
            token_batch: 4096,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdaptReport {
    pub steps: usize,
    pub epochs: usize,
    /// Per-token loss of each optimizer step's batch.
    pub losses: Vec<f64>,
}

/// Target model before any training: shared tensors from `θ*`, zero
/// `E^target`, fresh generator.
pub fn prepare_target(universal: &UniversalModel, rep: &UniversalRepresentation, target: &str, seed: u64) -> Result<ModelParams> {
    let space = rep.space(target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = universal.params.clone();
    params.switch_domain(Arc::new(space.clone()), &mut rng);
    params.params.tensors[EV] = rep.domain_tables[target].clone();
    params.params.tensors[EV].fill(0.0);
    Ok(params)
}

/// Jointly optimizes every tensor on `corpus` with Adam.
pub fn train_adam(params: &mut ModelParams, corpus: &[Vec<usize>], cfg: &AdaptConfig) -> Result<AdaptReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let v = params.vocab_size();
    if let Some(t) = corpus.iter().flatten().find(|&&t| t >= v) {
        return Err(Error::VocabMismatch(format!(
            "token id {t} outside the {v}-token vocabulary of `{}`",
            params.space.domain_id
        )));
    }
    let lengths: Vec<usize> = corpus.iter().map(Vec::len).collect();
    let mut sampler = TokenBatchSampler::new(cfg.seed);
    let mut adam = Adam::new(&params.params, cfg.adam.clone());
    let mut report = AdaptReport::default();
    let budget = cfg.steps.max(1) as f64;
    while report.steps < cfg.steps {
        for batch in sampler.epoch(&lengths, cfg.token_batch) {
            if report.steps == cfg.steps {
                break;
            }
            let seqs = gather(corpus, &batch);
            let (loss, g) = params.backward(&seqs)?;
            let lr = cfg.adam.lr * cfg.adam.final_lr_fraction.powf(report.steps as f64 / budget);
            adam.step(&mut params.params, &g, lr)?;
            report.losses.push(loss.per_token());
            report.steps += 1;
        }
        report.epochs += 1;
    }
    Ok(report)
}

/// Adapts `θ*` to the target domain.
pub fn adapt_target(
    universal: &UniversalModel,
    rep: &UniversalRepresentation,
    target: &str,
    corpus: &[Vec<usize>],
    cfg: &AdaptConfig,
) -> Result<(ModelParams, AdaptReport)> {
    let mut params = prepare_target(universal, rep, target, cfg.seed)?;
    let report = train_adam(&mut params, corpus, cfg)?;
    Ok((params, report))
}

/// Baseline: same architecture and optimizer, random initialization.
pub fn train_from_scratch(
    rep: &UniversalRepresentation,
    target: &str,
    dims: ModelDims,
    corpus: &[Vec<usize>],
    cfg: &AdaptConfig,
) -> Result<(ModelParams, AdaptReport)> {
    let mut params = ModelParams::init(rep, target, dims, cfg.seed ^ 0x5eed)?;
    params.params.tensors[EV].fill(0.0);
    let report = train_adam(&mut params, corpus, cfg)?;
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ENC_WH, ENC_WX};
    use proptest::prelude::*;
    use rand::Rng;

    /// `L(θ) = ½ Σ θ²`
    struct Quadratic {
        p: ParamSet,
    }

    impl Quadratic {
        fn scalar(x: f64) -> Self {
            Quadratic {
                p: ParamSet::new(vec!["x".into()], vec![Matrix::from_vec(1, 1, vec![x])]),
            }
        }
        fn x(&self) -> f64 {
            self.p.tensors[0].as_slice()[0]
        }
    }

    impl Learner for Quadratic {
        type Batch = ();
        fn params(&self) -> &ParamSet {
            &self.p
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.p
        }
        fn loss_and_gradient(&self, _: &()) -> Result<(f64, GradientSet)> {
            let loss = self.p.tensors.iter().map(|t| 0.5 * t.frobenius().powi(2)).sum();
            Ok((
                loss,
                GradientSet {
                    names: self.p.names.clone(),
                    tensors: self.p.tensors.clone(),
                },
            ))
        }
    }

    struct Zero(ParamSet);

    impl Learner for Zero {
        type Batch = ();
        fn params(&self) -> &ParamSet {
            &self.0
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.0
        }
        fn loss_and_gradient(&self, _: &()) -> Result<(f64, GradientSet)> {
            Ok((0.0, GradientSet::zeros_for(&self.0)))
        }
    }

    #[test]
    fn toy_inner_steps() {
        let mut q = Quadratic::scalar(1.0);
        inner_update(&mut q, &[&()], 0.1).unwrap();
        assert!((q.x() - 0.9).abs() < 1e-15);
        let mut q = Quadratic::scalar(1.0);
        inner_update(&mut q, &[&(), &()], 0.1).unwrap();
        assert!((q.x() - 0.81).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut z = Zero(ParamSet::new(vec!["w".into()], vec![Matrix::from_vec(1, 2, vec![0.3, -2.0])]));
        let before = z.0.clone();
        inner_update(&mut z, &[&(), &(), &()], 0.5).unwrap();
        assert_eq!(z.0, before);
    }

    #[test]
    fn toy_meta_gradient_and_masked_step() {
        let mut q = Quadratic::scalar(1.0);
        let snapshot = q.p.clone();
        inner_update(&mut q, &[&()], 0.1).unwrap();
        let (_, g) = meta_gradient(&q, &()).unwrap();
        assert!((g.tensors[0].as_slice()[0] - 0.9).abs() < 1e-15);
        q.p = snapshot;
        let mask = ParamMask::uniform(&q.p, true);
        masked_update(&mut q.p, &g, &mask, 0.1).unwrap();
        assert!((q.x() - 0.91).abs() < 1e-15);
    }

    #[test]
    fn all_false_mask_is_identity() {
        let mut p = ParamSet::new(vec!["w".into()], vec![Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0])]);
        let before = p.clone();
        let g = GradientSet {
            names: p.names.clone(),
            tensors: vec![Matrix::from_vec(1, 3, vec![5.0, 5.0, 5.0])],
        };
        let mask = ParamMask::uniform(&p, false);
        masked_update(&mut p, &g, &mask, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = ParamSet::new(vec!["w".into()], vec![Matrix::zeros(1, 3)]);
        let g = GradientSet {
            names: p.names.clone(),
            tensors: vec![Matrix::zeros(3, 1)],
        };
        let mask = ParamMask::uniform(&p, true);
        assert!(matches!(
            masked_update(&mut p, &g, &mask, 0.1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gradients_sum_over_domains() {
        let mk = |v: Vec<f64>| GradientSet {
            names: vec!["w".into()],
            tensors: vec![Matrix::from_vec(1, 2, v)],
        };
        let s = sum_gradients(&[mk(vec![1.0, 2.0]), mk(vec![0.5, -4.0])]).unwrap();
        assert_eq!(s.tensors[0].as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn outer_mask_freezes_domain_specific_tensors() {
        let m = crate::model::tests::toy_model(20, 6, 5, 4, 1);
        let mask = ParamMask::outer(&m.params);
        for (i, name) in TENSOR_NAMES.iter().enumerate() {
            let t = mask.tensor(name).unwrap();
            assert_eq!(t.len(), m.params.tensors[i].len());
            let frozen = DOMAIN_SPECIFIC.contains(&i);
            assert!(t.iter().all(|&b| b != frozen), "{name}");
        }
    }

    #[test]
    fn sampler_batches_are_disjoint_and_bounded() {
        let lengths: Vec<usize> = (0..200).map(|i| 1 + i % 17).collect();
        let mut s = TokenBatchSampler::new(3);
        let b = s.sample(&lengths, 5, 40).unwrap();
        assert_eq!(b.len(), 5);
        let mut seen = std::collections::BTreeSet::new();
        for batch in &b {
            assert!(!batch.is_empty());
            assert!(batch.iter().map(|&i| lengths[i]).sum::<usize>() <= 40);
            for &i in batch {
                assert!(seen.insert(i));
            }
        }
    }

    #[test]
    fn sampler_splits_small_corpora() {
        let lengths = vec![3; 7];
        let b = TokenBatchSampler::new(0).sample(&lengths, 5, 1000).unwrap();
        assert_eq!(b.len(), 5);
        assert!(TokenBatchSampler::new(0).sample(&lengths[..3], 5, 1000).is_err());
    }

    proptest! {
        #[test]
        fn epoch_partitions_all_sequences(lengths in prop::collection::vec(1usize..30, 1..80), tb in 30usize..200, seed in 0u64..50) {
            let batches = TokenBatchSampler::new(seed).epoch(&lengths, tb);
            let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..lengths.len()).collect::<Vec<_>>());
            for b in &batches {
                let t: usize = b.iter().map(|&i| lengths[i]).sum();
                prop_assert!(b.len() == 1 || t <= tb);
            }
        }
    }

    fn toy_setup(seed: u64) -> (UniversalRepresentation, Vec<DomainCorpus>, ModelDims) {
        use crate::embed::{normalize_rows, EmbeddingMatrix};
        use crate::vocab::Vocab;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |id: &str, prefix: &str| {
            let set: std::collections::BTreeSet<String> =
                (0..8).map(|i| if i < 5 { format!("s{i}") } else { format!("{prefix}{i}") }).collect();
            let vocab = Vocab::from_token_set(&set);
            let vectors = Matrix::from_fn(vocab.len(), 4, |_, _| Rng::gen_range(&mut rng, -1.0..1.0));
            normalize_rows(&EmbeddingMatrix {
                domain_id: id.into(),
                vocab,
                vectors,
                normalized: false,
            })
            .0
        };
        let a = mk("a", "x");
        let b = mk("b", "y");
        let mut rep = UniversalRepresentation::new(a, 6, 0.1, seed).unwrap();
        rep.add_domain(&b).unwrap();
        let corpus = |off: usize| {
            (0..40)
                .map(|i| (0..3 + i % 4).map(|j| 2 + (i + j + off) % 8).collect())
                .collect()
        };
        let domains = vec![
            DomainCorpus {
                domain_id: "a".into(),
                sequences: corpus(0),
            },
            DomainCorpus {
                domain_id: "b".into(),
                sequences: corpus(3),
            },
        ];
        let dims = ModelDims {
            embed: 6,
            hidden: 5,
            max_len: 32,
        };
        (rep, domains, dims)
    }

    struct Checker {
        iterations: usize,
    }

    impl MetaObserver for Checker {
        fn on_iteration(&mut self, ev: &MetaEvent<'_>) {
            self.iterations += 1;
            assert_eq!(ev.restored, ev.snapshot);
            for &i in &DOMAIN_SPECIFIC {
                assert_eq!(ev.updated.tensors[i], ev.snapshot.tensors[i]);
            }
            let (_, g) = ev.adapted.backward(ev.outer_sequences).unwrap();
            assert_eq!(&g, ev.meta_gradient);
            let inner: std::collections::BTreeSet<usize> = ev.inner_batches.iter().flatten().copied().collect();
            assert!(ev.outer_batch.iter().all(|i| !inner.contains(i)));
            assert_ne!(ev.adapted.params.tensors[ENC_WX], ev.snapshot.tensors[ENC_WX]);
            assert_ne!(ev.adapted.params.tensors[GEN_W], ev.snapshot.tensors[GEN_W]);
        }
    }

    #[test]
    fn meta_loop_contracts_hold() {
        let (rep, domains, dims) = toy_setup(1);
        let cfg = MetaConfig {
            token_batch: 20,
            max_meta_iters: 12,
            inner_lr: 0.01,
            outer_lr: 0.01,
            ..MetaConfig::default()
        };
        let mut checker = Checker { iterations: 0 };
        let (u, report) = train_universal(
            &rep,
            &domains,
            dims,
            &cfg,
            &mut TokenBatchSampler::new(cfg.seed),
            Some(&mut checker),
        )
        .unwrap();
        assert_eq!(checker.iterations, 12);
        assert_eq!(report.iterations, 12);
        for (id, bank) in &u.banks {
            assert!(bank.ev.as_slice().iter().all(|&x| x == 0.0), "{id}");
        }
    }

    #[test]
    fn meta_training_is_deterministic() {
        let (rep, domains, dims) = toy_setup(2);
        let cfg = MetaConfig {
            token_batch: 20,
            max_meta_iters: 8,
            ..MetaConfig::default()
        };
        let run = || {
            train_universal(&rep, &domains, dims, &cfg, &mut TokenBatchSampler::new(9), None)
                .unwrap()
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn single_domain_single_step_matches_sgd() {
        let (rep, domains, dims) = toy_setup(3);
        let domains = &domains[..1];
        let cfg = MetaConfig {
            inner_steps: 1,
            token_batch: 20,
            max_meta_iters: 1,
            inner_lr: 0.05,
            outer_lr: 0.05,
            seed: 4,
            ..MetaConfig::default()
        };
        struct Grab(Option<(ParamSet, GradientSet)>);
        impl MetaObserver for Grab {
            fn on_iteration(&mut self, ev: &MetaEvent<'_>) {
                self.0 = Some((ev.snapshot.clone(), ev.meta_gradient.clone()));
            }
        }
        let mut grab = Grab(None);
        let (u, _) = train_universal(&rep, domains, dims, &cfg, &mut TokenBatchSampler::new(1), Some(&mut grab)).unwrap();
        let (mut expect, g) = grab.0.unwrap();
        let mask = ParamMask::outer(&expect);
        masked_update(&mut expect, &g, &mask, 0.05).unwrap();
        assert_eq!(u.params.params, expect);
    }

    #[test]
    fn empty_domain_rejected() {
        let (rep, mut domains, dims) = toy_setup(4);
        domains[1].sequences.clear();
        let err = train_universal(&rep, &domains, dims, &MetaConfig::default(), &mut TokenBatchSampler::new(0), None)
            .unwrap_err();
        assert!(matches!(err, Error::EmptyDomainCorpus(d) if d == "b"));
    }

    #[test]
    fn target_inherits_shared_tensors() {
        let (rep, domains, dims) = toy_setup(5);
        let cfg = MetaConfig {
            token_batch: 20,
            max_meta_iters: 4,
            ..MetaConfig::default()
        };
        let (u, _) = train_universal(&rep, &domains[..1], dims, &cfg, &mut TokenBatchSampler::new(0), None).unwrap();
        let t = prepare_target(&u, &rep, "b", 7).unwrap();
        assert_eq!(t.space.domain_id, "b");
        for i in [crate::model::A, crate::model::E, ENC_WX, ENC_WH, crate::model::DEC_WX] {
            assert_eq!(t.params.tensors[i], u.params.params.tensors[i]);
        }
        assert!(t.params.tensors[EV].as_slice().iter().all(|&x| x == 0.0));
        assert_eq!(t.params.tensors[GEN_W].rows(), rep.space("b").unwrap().vocab.len());
    }

    #[test]
    fn adaptation_reduces_loss() {
        let (rep, domains, dims) = toy_setup(6);
        let cfg = MetaConfig {
            token_batch: 20,
            max_meta_iters: 4,
            ..MetaConfig::default()
        };
        let (u, _) = train_universal(&rep, &domains[..1], dims, &cfg, &mut TokenBatchSampler::new(0), None).unwrap();
        let acfg = AdaptConfig {
            adam: AdamConfig {
                lr: 0.02,
                ..AdamConfig::default()
            },
            steps: 60,
            token_batch: 40,
            seed: 1,
        };
        let corpus = &domains[1].sequences;
        let (m, report) = adapt_target(&u, &rep, "b", corpus, &acfg).unwrap();
        let start = prepare_target(&u, &rep, "b", 1).unwrap();
        let before = start.reconstruction_loss(corpus).unwrap().per_token();
        let after = m.reconstruction_loss(corpus).unwrap().per_token();
        assert!(after < before * 0.8, "{before} -> {after}");
        assert_eq!(report.steps, 60);
        let bad = vec![vec![999]];
        assert!(matches!(adapt_target(&u, &rep, "b", &bad, &acfg), Err(Error::VocabMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (rep, domains, dims) = toy_setup(7);
        let cfg = MetaConfig {
            token_batch: 20,
            max_meta_iters: 3,
            ..MetaConfig::default()
        };
        let (u, _) = train_universal(&rep, &domains, dims, &cfg, &mut TokenBatchSampler::new(0), None).unwrap();
        let json = serde_json::to_string(&u.to_checkpoint()).unwrap();
        let back = UniversalModel::from_checkpoint(serde_json::from_str(&json).unwrap(), &rep).unwrap();
        assert_eq!(back, u);
    }
}
