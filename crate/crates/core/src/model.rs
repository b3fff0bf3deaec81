//! LSTM encoder-decoder with an affine-softmax generator, reconstructing a
//! token sequence from its multi-domain representation.
//!
//! Decoding is teacher-forced: the decoder starts from the encoder's final
//! state, reads `_bos_ t1 … tn` and predicts `t1 … tn _eos_`. The loss of a
//! sequence is the summed negative log-likelihood of those `n + 1`
//! predictions. Gradients are exact (hand-derived BPTT), including the path
//! through the softmax-weighted universal embedding into `A`, `E` and `E^v`.

use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{DomainSpace, RepresentationView, UniversalRepresentation, UniversalState};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sigmoid, softmax_in_place, Matrix};
use crate::vocab::{BOS, EOS};

/// Probabilities below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

pub const A: usize = 0;
pub const E: usize = 1;
pub const EV: usize = 2;
pub const ENC_WX: usize = 3;
pub const ENC_WH: usize = 4;
pub const ENC_B: usize = 5;
pub const DEC_WX: usize = 6;
pub const DEC_WH: usize = 7;
pub const DEC_B: usize = 8;
pub const GEN_W: usize = 9;
pub const GEN_B: usize = 10;

pub const TENSOR_NAMES: [&str; 11] = [
    "rep.a", "rep.e", "rep.ev", "enc.wx", "enc.wh", "enc.b", "dec.wx", "dec.wh", "dec.b", "gen.w",
    "gen.b",
];

/// Tensors re-initialised per domain: `E^v` and the generator.
pub const DOMAIN_SPECIFIC: [usize; 3] = [EV, GEN_W, GEN_B];

/// Named list of tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new(names: Vec<String>, tensors: Vec<Matrix>) -> Self {
        assert_eq!(names.len(), tensors.len());
        ParamSet { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                name: "parameter list".into(),
                expected: (self.len(), 1),
                found: (other.len(), 1),
            });
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    name: self.names[i].clone(),
                    expected: a.shape(),
                    found: b.shape(),
                });
            }
        }
        Ok(())
    }
}

/// One gradient tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
}

impl GradientSet {
    pub fn zeros_for(params: &ParamSet) -> Self {
        let z = params.zeros_like();
        GradientSet {
            names: z.names,
            tensors: z.tensors,
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            axpy(1.0, b.as_slice(), a.as_mut_slice());
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.tensors.iter().position(|t| !t.is_finite()) {
            Some(i) => Err(Error::NonFiniteGradient(self.names[i].clone())),
            None => Ok(()),
        }
    }

    pub fn as_params(&self) -> ParamSet {
        ParamSet::new(self.names.clone(), self.tensors.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Embedding size `d`.
    pub embed: usize,
    /// Hidden size `h`.
    pub hidden: usize,
    pub max_len: usize,
}

impl ModelDims {
    pub fn desk() -> Self {
        ModelDims {
            embed: 32,
            hidden: 32,
            max_len: 128,
        }
    }

    pub fn full() -> Self {
        ModelDims {
            embed: 512,
            hidden: 512,
            max_len: 128,
        }
    }
}

/// Summed reconstruction loss of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossSummary {
    pub total: f64,
    pub predictions: usize,
    pub sequences: usize,
}

impl LossSummary {
    pub fn per_token(&self) -> f64 {
        if self.predictions == 0 {
            0.0
        } else {
            self.total / self.predictions as f64
        }
    }
}

/// Seq2seq parameters for one active domain together with the frozen
/// embedding spaces they read from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Normalized `W^u`.
    pub base: Arc<Matrix>,
    pub space: Arc<DomainSpace>,
    pub params: ParamSet,
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..=scale))
}

fn lstm_bias(hidden: usize) -> Matrix {
    // forget gate starts open
    Matrix::from_fn(1, 4 * hidden, |_, j| if (hidden..2 * hidden).contains(&j) { 1.0 } else { 0.0 })
}

/// Fresh generator for a vocabulary of `vocab` tokens.
pub fn init_generator(vocab: usize, hidden: usize, rng: &mut impl Rng) -> (Matrix, Matrix) {
    let s = 1.0 / (hidden as f64).sqrt();
    (uniform(vocab, hidden, s, rng), Matrix::zeros(1, vocab))
}

impl ModelParams {
    /// Builds a randomly initialised model for `domain`, copying `A`, `E` and
    /// `E^v` from the representation.
    pub fn init(rep: &UniversalRepresentation, domain: &str, dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.embed != rep.dim() {
            return Err(Error::Config(format!(
                "embedding size {} does not match representation size {}",
                dims.embed,
                rep.dim()
            )));
        }
        let space = rep.space(domain)?.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, v) = (dims.embed, dims.hidden, space.vocab.len());
        let s = 1.0 / (h as f64).sqrt();
        let enc_wx = uniform(4 * h, d, s, &mut rng);
        let enc_wh = uniform(4 * h, h, s, &mut rng);
        let dec_wx = uniform(4 * h, d, s, &mut rng);
        let dec_wh = uniform(4 * h, h, s, &mut rng);
        let (gen_w, gen_b) = init_generator(v, h, &mut rng);
        let tensors = vec![
            rep.a.clone(),
            rep.e.clone(),
            rep.domain_tables[domain].clone(),
            enc_wx,
            enc_wh,
            lstm_bias(h),
            dec_wx,
            dec_wh,
            lstm_bias(h),
            gen_w,
            gen_b,
        ];
        Ok(ModelParams {
            dims,
            base: Arc::new(rep.base.vectors.clone()),
            space: Arc::new(space),
            params: ParamSet::new(TENSOR_NAMES.iter().map(|s| s.to_string()).collect(), tensors),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.space.vocab.len()
    }

    pub fn tensor(&self, i: usize) -> &Matrix {
        &self.params.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.params.tensors[i]
    }

    /// Replaces the active domain: new frozen space, zero `E^v`, fresh
    /// generator. Shared tensors are kept.
    pub fn switch_domain(&mut self, space: Arc<DomainSpace>, rng: &mut impl Rng) {
        let (v, d, h) = (space.vocab.len(), self.dims.embed, self.dims.hidden);
        let (gen_w, gen_b) = init_generator(v, h, rng);
        self.params.tensors[EV] = Matrix::zeros(v, d);
        self.params.tensors[GEN_W] = gen_w;
        self.params.tensors[GEN_B] = gen_b;
        self.space = space;
    }

    pub(crate) fn view(&self) -> RepresentationView<'_> {
        RepresentationView {
            base: &self.base,
            aligned: &self.space.aligned,
            a: &self.params.tensors[A],
            e: &self.params.tensors[E],
            ev: &self.params.tensors[EV],
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.tensors.iter().position(|t| !t.is_finite()) {
            Some(i) => Err(Error::Config(format!(
                "non-finite parameter tensor `{}`",
                self.params.names[i]
            ))),
            None => Ok(()),
        }
    }

    /// `Ũ^v` for every vocabulary token.
    pub fn embedding_table(&self) -> Matrix {
        let view = self.view();
        let mut table = Matrix::zeros(self.vocab_size(), self.dims.embed);
        for t in 0..self.vocab_size() {
            table.row_mut(t).copy_from_slice(&view.full(t));
        }
        table
    }

    fn clip<'a>(&self, seq: &'a [usize]) -> &'a [usize] {
        if seq.len() > self.dims.max_len {
            warn!(
                "sequence of {} tokens truncated to {}",
                seq.len(),
                self.dims.max_len
            );
            &seq[..self.dims.max_len]
        } else {
            seq
        }
    }

    /// Per-position output distributions (`|seq| + 1` rows) under teacher
    /// forcing.
    pub fn forward(&self, seq: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_ids(seq)?;
        let seq = self.clip(seq);
        let table = self.embedding_table();
        let trace = run_sequence(self, &table, seq, false);
        Ok(trace.probs)
    }

    fn check_ids(&self, seq: &[usize]) -> Result<()> {
        let v = self.vocab_size();
        match seq.iter().find(|&&t| t >= v) {
            Some(&t) => Err(Error::UnknownToken {
                token: format!("#{t}"),
                domain: self.space.domain_id.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Summed negative log-likelihood of the batch.
    pub fn reconstruction_loss(&self, batch: &[Vec<usize>]) -> Result<LossSummary> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let table = self.embedding_table();
        let mut summary = LossSummary::default();
        for seq in batch {
            self.check_ids(seq)?;
            let seq = self.clip(seq);
            let trace = run_sequence(self, &table, seq, false);
            summary.total += trace.loss;
            summary.predictions += seq.len() + 1;
            summary.sequences += 1;
        }
        Ok(summary)
    }

    /// Exact gradient of [`reconstruction_loss`](Self::reconstruction_loss)
    /// with respect to every tensor.
    pub fn backward(&self, batch: &[Vec<usize>]) -> Result<(LossSummary, GradientSet)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for seq in batch {
            self.check_ids(seq)?;
        }
        let view = self.view();
        let v = self.vocab_size();
        let d = self.dims.embed;

        // universal embeddings of the tokens this batch touches
        let mut states: Vec<Option<UniversalState>> = (0..v).map(|_| None).collect();
        let mut table = Matrix::zeros(v, d);
        let touch = |t: usize, states: &mut Vec<Option<UniversalState>>, table: &mut Matrix| {
            if states[t].is_none() {
                let st = view.universal(t);
                let row = table.row_mut(t);
                row.copy_from_slice(&st.embedding);
                axpy(1.0, view.ev.row(t), row);
                states[t] = Some(st);
            }
        };
        touch(BOS, &mut states, &mut table);
        for seq in batch {
            for &t in self.clip(seq) {
                touch(t, &mut states, &mut table);
            }
        }

        let mut grads = GradientSet::zeros_for(&self.params);
        let mut grad_x = Matrix::zeros(v, d);
        let mut summary = LossSummary::default();
        for seq in batch {
            let seq = self.clip(seq);
            let trace = run_sequence(self, &table, seq, true);
            summary.total += trace.loss;
            summary.predictions += seq.len() + 1;
            summary.sequences += 1;
            backprop_sequence(self, &table, seq, &trace, &mut grads, &mut grad_x);
        }

        let (before, after) = grads.tensors.split_at_mut(EV);
        let (grad_a, grad_e) = before.split_at_mut(E);
        let grad_ev = &mut after[0];
        for (t, st) in states.iter().enumerate() {
            let Some(st) = st else { continue };
            let gx = grad_x.row(t);
            axpy(1.0, gx, grad_ev.row_mut(t));
            view.universal_backward(t, st, gx, &mut grad_a[0], &mut grad_e[0]);
        }
        grads.ensure_finite()?;
        Ok((summary, grads))
    }
}

/// Serializable model state; the frozen spaces are re-linked from the
/// representation on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub dims: ModelDims,
    pub domain_id: String,
    pub vocab_hash: u64,
    pub params: ParamSet,
}

impl ModelParams {
    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            dims: self.dims,
            domain_id: self.space.domain_id.clone(),
            vocab_hash: self.space.vocab.hash(),
            params: self.params.clone(),
        }
    }

    /// Refuses checkpoints whose vocabulary differs from the domain's.
    pub fn from_checkpoint(ckpt: ModelCheckpoint, rep: &UniversalRepresentation) -> Result<Self> {
        let space = rep.space(&ckpt.domain_id)?;
        let found = space.vocab.hash();
        if found != ckpt.vocab_hash {
            return Err(Error::VocabMismatch(format!(
                "checkpoint for `{}` was trained on vocabulary {:016x}, representation has {found:016x}",
                ckpt.domain_id, ckpt.vocab_hash
            )));
        }
        let mut params = ModelParams::init(rep, &ckpt.domain_id, ckpt.dims, 0)?;
        params.params.check_congruent(&ckpt.params)?;
        params.params = ckpt.params;
        Ok(params)
    }
}

struct StepCache {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates `i f g o`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

struct SequenceTrace {
    encoder: Vec<StepCache>,
    decoder: Vec<StepCache>,
    dec_h: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    loss: f64,
}

struct Lstm<'a> {
    wx: &'a Matrix,
    wh: &'a Matrix,
    b: &'a Matrix,
    hidden: usize,
}

impl Lstm<'_> {
    fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64], keep: bool) -> (Vec<f64>, Vec<f64>, Option<StepCache>) {
        let h = self.hidden;
        let mut z: Vec<f64> = self.b.as_slice().to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            *zr += dot(self.wx.row(r), x) + dot(self.wh.row(r), h_prev);
        }
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = if (2 * h..3 * h).contains(&k) { zk.tanh() } else { sigmoid(*zk) };
        }
        let mut c = vec![0.0; h];
        let mut tanh_c = vec![0.0; h];
        let mut h_new = vec![0.0; h];
        for j in 0..h {
            c[j] = z[h + j] * c_prev[j] + z[j] * z[2 * h + j];
            tanh_c[j] = c[j].tanh();
            h_new[j] = z[3 * h + j] * tanh_c[j];
        }
        let cache = keep.then(|| StepCache {
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates: z,
            tanh_c,
        });
        (h_new, c, cache)
    }

    /// Backward through one step. Accumulates weight gradients and returns
    /// `(∂x, ∂h_prev, ∂c_prev)`.
    #[allow(clippy::too_many_arguments)]
    fn step_backward(
        &self,
        cache: &StepCache,
        x: &[f64],
        dh: &[f64],
        dc: &[f64],
        g_wx: &mut Matrix,
        g_wh: &mut Matrix,
        g_b: &mut Matrix,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden;
        let gt = &cache.gates;
        let mut dz = vec![0.0; 4 * h];
        let mut dc_prev = vec![0.0; h];
        for j in 0..h {
            let (i, f, g, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
            let tc = cache.tanh_c[j];
            let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
            dz[j] = dct * g * i * (1.0 - i);
            dz[h + j] = dct * cache.c_prev[j] * f * (1.0 - f);
            dz[2 * h + j] = dct * i * (1.0 - g * g);
            dz[3 * h + j] = dh[j] * tc * o * (1.0 - o);
            dc_prev[j] = dct * f;
        }
        axpy(1.0, &dz, g_b.as_mut_slice());
        let mut dx = vec![0.0; x.len()];
        let mut dh_prev = vec![0.0; h];
        for (r, &dzr) in dz.iter().enumerate() {
            if dzr == 0.0 {
                continue;
            }
            axpy(dzr, x, g_wx.row_mut(r));
            axpy(dzr, &cache.h_prev, g_wh.row_mut(r));
            axpy(dzr, self.wx.row(r), &mut dx);
            axpy(dzr, self.wh.row(r), &mut dh_prev);
        }
        (dx, dh_prev, dc_prev)
    }
}

fn encoder(p: &ModelParams) -> Lstm<'_> {
    Lstm {
        wx: p.tensor(ENC_WX),
        wh: p.tensor(ENC_WH),
        b: p.tensor(ENC_B),
        hidden: p.dims.hidden,
    }
}

fn decoder(p: &ModelParams) -> Lstm<'_> {
    Lstm {
        wx: p.tensor(DEC_WX),
        wh: p.tensor(DEC_WH),
        b: p.tensor(DEC_B),
        hidden: p.dims.hidden,
    }
}

fn decoder_input(seq: &[usize], step: usize) -> usize {
    if step == 0 {
        BOS
    } else {
        seq[step - 1]
    }
}

fn decoder_target(seq: &[usize], step: usize) -> usize {
    if step < seq.len() {
        seq[step]
    } else {
        EOS
    }
}

fn run_sequence(p: &ModelParams, table: &Matrix, seq: &[usize], keep: bool) -> SequenceTrace {
    let h = p.dims.hidden;
    let enc = encoder(p);
    let dec = decoder(p);
    let gen_w = p.tensor(GEN_W);
    let gen_b = p.tensor(GEN_B).as_slice();

    let mut hs = vec![0.0; h];
    let mut cs = vec![0.0; h];
    let mut enc_cache = Vec::new();
    for &t in seq {
        let (hn, cn, cache) = enc.step(table.row(t), &hs, &cs, keep);
        enc_cache.extend(cache);
        hs = hn;
        cs = cn;
    }

    let mut dec_cache = Vec::new();
    let mut dec_h = Vec::new();
    let mut probs = Vec::with_capacity(seq.len() + 1);
    let mut loss = 0.0;
    let mut floored = false;
    for step in 0..=seq.len() {
        let x = table.row(decoder_input(seq, step));
        let (hn, cn, cache) = dec.step(x, &hs, &cs, keep);
        dec_cache.extend(cache);
        let mut logits: Vec<f64> = (0..gen_w.rows())
            .map(|r| gen_b[r] + dot(gen_w.row(r), &hn))
            .collect();
        softmax_in_place(&mut logits);
        let pt = logits[decoder_target(seq, step)];
        if pt < LOG_FLOOR {
            floored = true;
        }
        loss -= pt.max(LOG_FLOOR).ln();
        probs.push(logits);
        if keep {
            dec_h.push(hn.clone());
        }
        hs = hn;
        cs = cn;
    }
    if floored {
        warn!("true-token probability below {LOG_FLOOR:e}; clamped");
    }
    SequenceTrace {
        encoder: enc_cache,
        decoder: dec_cache,
        dec_h,
        probs,
        loss,
    }
}

fn backprop_sequence(
    p: &ModelParams,
    table: &Matrix,
    seq: &[usize],
    trace: &SequenceTrace,
    grads: &mut GradientSet,
    grad_x: &mut Matrix,
) {
    let h = p.dims.hidden;
    let enc = encoder(p);
    let dec = decoder(p);
    let gen_w = p.tensor(GEN_W);
    let g = &mut grads.tensors;

    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    for step in (0..=seq.len()).rev() {
        let mut dlogits = trace.probs[step].clone();
        dlogits[decoder_target(seq, step)] -= 1.0;
        let hstep = &trace.dec_h[step];
        let mut dh = dh_next.clone();
        for (r, &dl) in dlogits.iter().enumerate() {
            g[GEN_B].as_mut_slice()[r] += dl;
            axpy(dl, hstep, g[GEN_W].row_mut(r));
            axpy(dl, gen_w.row(r), &mut dh);
        }
        let input = decoder_input(seq, step);
        let [g_wx, g_wh, g_b] = &mut g[DEC_WX..=DEC_B] else {
            unreachable!()
        };
        let (dx, dhp, dcp) = dec.step_backward(
            &trace.decoder[step],
            table.row(input),
            &dh,
            &dc_next,
            g_wx,
            g_wh,
            g_b,
        );
        axpy(1.0, &dx, grad_x.row_mut(input));
        dh_next = dhp;
        dc_next = dcp;
    }

    for (pos, &t) in seq.iter().enumerate().rev() {
        let [g_wx, g_wh, g_b] = &mut g[ENC_WX..=ENC_B] else {
            unreachable!()
        };
        let (dx, dhp, dcp) = enc.step_backward(
            &trace.encoder[pos],
            table.row(t),
            &dh_next,
            &dc_next,
            g_wx,
            g_wh,
            g_b,
        );
        axpy(1.0, &dx, grad_x.row_mut(t));
        dh_next = dhp;
        dc_next = dcp;
    }
}

/// Inference-time scorer with the embedding table precomputed.
#[derive(Debug, Clone)]
pub struct Scorer {
    params: ModelParams,
    table: Matrix,
}

impl Scorer {
    pub fn new(params: ModelParams) -> Self {
        let table = params.embedding_table();
        Scorer { params, table }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Mean negative log-likelihood per prediction (nats/token).
    pub fn mean_nll(&self, seq: &[usize]) -> Result<f64> {
        self.params.check_ids(seq)?;
        let seq = self.params.clip(seq);
        let trace = run_sequence(&self.params, &self.table, seq, false);
        Ok(trace.loss / (seq.len() + 1) as f64)
    }

    /// Fraction of positions whose argmax equals the true token.
    pub fn match_rate(&self, seq: &[usize]) -> Result<f64> {
        self.params.check_ids(seq)?;
        let seq = self.params.clip(seq);
        let trace = run_sequence(&self.params, &self.table, seq, false);
        let hits = trace
            .probs
            .iter()
            .enumerate()
            .filter(|(step, p)| argmax(p) == decoder_target(seq, *step))
            .count();
        Ok(hits as f64 / trace.probs.len() as f64)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::embed::{normalize_rows, EmbeddingMatrix};
    use crate::vocab::Vocab;
    use std::collections::BTreeSet;

    /// Random aligned setup: base vocab of `base_tokens`, target domain with
    /// `vocab` tokens in total, overlapping the base on half its tokens.
    pub(crate) fn toy_model(vocab: usize, d: usize, h: usize, pre: usize, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base_set: BTreeSet<String> = (0..vocab - 2).map(|i| format!("b{i:02}")).collect();
        let tgt_set: BTreeSet<String> = (0..vocab - 2)
            .map(|i| if i % 2 == 0 { format!("b{i:02}") } else { format!("t{i:02}") })
            .collect();
        let mk = |id: &str, set: &BTreeSet<String>, rng: &mut ChaCha8Rng| {
            let vocab = Vocab::from_token_set(set);
            let vectors = Matrix::from_fn(vocab.len(), pre, |_, _| rng.gen_range(-1.0..1.0));
            normalize_rows(&EmbeddingMatrix {
                domain_id: id.into(),
                vocab,
                vectors,
                normalized: false,
            })
            .0
        };
        let base = mk("base", &base_set, &mut rng);
        let tgt = mk("tgt", &tgt_set, &mut rng);
        let mut rep = UniversalRepresentation::new(base, d, 0.5, seed).unwrap();
        rep.add_domain(&tgt).unwrap();
        // move A away from identity and give E^v some mass so every path is exercised
        for x in rep.a.as_mut_slice() {
            *x += rng.gen_range(-0.3..0.3);
        }
        for x in rep.domain_tables.get_mut("tgt").unwrap().as_mut_slice() {
            *x = rng.gen_range(-0.2..0.2);
        }
        let dims = ModelDims {
            embed: d,
            hidden: h,
            max_len: 64,
        };
        let mut m = ModelParams::init(&rep, "tgt", dims, seed + 1).unwrap();
        for x in m.tensor_mut(GEN_B).as_mut_slice() {
            *x = rng.gen_range(-0.1..0.1);
        }
        m
    }

    fn random_batch(v: usize, n: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(1..6);
                (0..len).map(|_| rng.gen_range(2..v)).collect()
            })
            .collect()
    }

    #[test]
    fn zero_generator_gives_uniform_distributions() {
        let mut m = toy_model(20, 6, 5, 4, 1);
        m.tensor_mut(GEN_W).fill(0.0);
        m.tensor_mut(GEN_B).fill(0.0);
        let probs = m.forward(&[3, 4, 5]).unwrap();
        assert_eq!(probs.len(), 4);
        for row in probs {
            for p in row {
                assert!((p - 1.0 / 20.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn distributions_sum_to_one() {
        let m = toy_model(20, 6, 5, 4, 2);
        for row in m.forward(&[7, 2, 9, 9, 3]).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_loss_closed_form() {
        let mut m = toy_model(20, 6, 5, 4, 3);
        m.tensor_mut(GEN_W).fill(0.0);
        m.tensor_mut(GEN_B).fill(0.0);
        let loss = m.reconstruction_loss(&[vec![2, 3, 4, 5]]).unwrap();
        assert!((loss.total - 5.0 * 20f64.ln()).abs() < 1e-12);
        assert_eq!(loss.predictions, 5);
    }

    #[test]
    fn peaked_distributions_give_near_zero_loss() {
        let mut m = toy_model(6, 4, 3, 3, 3);
        // a generator that always predicts EOS with overwhelming margin
        m.tensor_mut(GEN_W).fill(0.0);
        m.tensor_mut(GEN_B).fill(0.0);
        m.tensor_mut(GEN_B).as_mut_slice()[EOS] = 60.0;
        let loss = m.reconstruction_loss(&[vec![]]).unwrap();
        assert!(loss.total < 1e-20);
    }

    #[test]
    fn loss_is_additive() {
        let m = toy_model(20, 6, 5, 4, 4);
        let one = m.reconstruction_loss(&[vec![3, 8, 2]]).unwrap().total;
        let two = m.reconstruction_loss(&[vec![3, 8, 2], vec![3, 8, 2]]).unwrap().total;
        assert_eq!(two, 2.0 * one);
        assert!(one > 0.0);
    }

    #[test]
    fn empty_batch_rejected() {
        let m = toy_model(20, 6, 5, 4, 4);
        assert!(matches!(m.backward(&[]), Err(Error::EmptyBatch)));
        assert!(matches!(m.reconstruction_loss(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn truncates_long_sequences() {
        let mut m = toy_model(20, 6, 5, 4, 4);
        m.dims.max_len = 3;
        assert_eq!(m.forward(&[2, 3, 4, 5, 6]).unwrap().len(), 4);
    }

    pub(crate) fn finite_difference_max_rel_error(m: &ModelParams, batch: &[Vec<usize>], eps: f64) -> Vec<(String, f64)> {
        let (_, grads) = m.backward(batch).unwrap();
        let mut out = Vec::new();
        for ti in 0..m.params.len() {
            let mut worst: f64 = 0.0;
            for k in 0..m.params.tensors[ti].len() {
                let at = |delta: f64| {
                    let mut p = m.clone();
                    p.params.tensors[ti].as_mut_slice()[k] += delta;
                    p.reconstruction_loss(batch).unwrap().total
                };
                // five-point stencil, O(eps^4) truncation
                let fd = (at(-2.0 * eps) - 8.0 * at(-eps) + 8.0 * at(eps) - at(2.0 * eps))
                    / (12.0 * eps);
                let an = grads.tensors[ti].as_slice()[k];
                let denom = an.abs().max(fd.abs()).max(1e-7);
                worst = worst.max((an - fd).abs() / denom);
            }
            out.push((m.params.names[ti].clone(), worst));
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = toy_model(12, 4, 3, 3, 5);
        let batch = random_batch(12, 3, 9);
        for (name, err) in finite_difference_max_rel_error(&m, &batch, 1e-3) {
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn universal_table_gradient_is_nonzero_with_frozen_domain_table() {
        let mut m = toy_model(20, 6, 5, 4, 6);
        m.tensor_mut(EV).fill(0.0);
        let batch = random_batch(20, 4, 1);
        let (_, g) = m.backward(&batch).unwrap();
        assert!(g.tensors[E].frobenius() > 0.0);
        let before = m.reconstruction_loss(&batch).unwrap().total;
        m.tensor_mut(E).as_mut_slice()[0] += 0.5;
        assert_ne!(m.reconstruction_loss(&batch).unwrap().total, before);
    }

    #[test]
    fn backward_is_deterministic() {
        let m = toy_model(20, 6, 5, 4, 7);
        let batch = random_batch(20, 5, 2);
        let (l1, g1) = m.backward(&batch).unwrap();
        let (l2, g2) = m.backward(&batch).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
        assert_eq!(l1.total, m.reconstruction_loss(&batch).unwrap().total);
    }

    #[test]
    fn scorer_matches_loss() {
        let m = toy_model(20, 6, 5, 4, 8);
        let s = Scorer::new(m.clone());
        let seq = vec![4, 5, 6];
        let l = m.reconstruction_loss(std::slice::from_ref(&seq)).unwrap();
        assert!((s.mean_nll(&seq).unwrap() - l.per_token()).abs() < 1e-12);
        let r = s.match_rate(&seq).unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
}
