//! Cross-domain alignment and the multi-domain token representation.
//!
//! Every domain's preliminary embedding is rotated into the base domain's
//! space with an orthogonal map fitted on the tokens the two domains share.
//! A token of domain `v` is then represented as a softmax-weighted mixture of
//! rows of a table `E` indexed by the base vocabulary, plus a domain-specific
//! row of `E^v`:
//!
//! ```text
//! S(t_v, t_i) = ⟨W^{v→u}(t_v), A · W^u(t_i)⟩
//! U^v(t_v)    = Σ_i softmax_i(S(t_v, ·)) · E(t_i)
//! Ũ^v(t_v)    = U^v(t_v) + E^v(t_v)
//! ```
//!
//! The similarity takes the domain-`v` token through the aligned matrix and
//! the base token through `W^u`, so both vectors live in the base space.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, softmax_in_place, Matrix};
use crate::vocab::Vocab;

/// Picks the domain sharing the most tokens with all others. Ties go to the
/// lexicographically smallest id.
pub fn select_base_domain(token_sets: &[(String, BTreeSet<String>)]) -> Result<String> {
    if token_sets.len() < 2 {
        return Err(Error::Config(
            "base-domain selection needs at least two domains".into(),
        ));
    }
    let mut best: Option<(usize, &str)> = None;
    for (i, (id, set)) in token_sets.iter().enumerate() {
        let overlap: usize = token_sets
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, (_, other))| set.intersection(other).count())
            .sum();
        best = match best {
            Some((n, b)) if n > overlap || (n == overlap && b <= id.as_str()) => Some((n, b)),
            _ => Some((overlap, id.as_str())),
        };
    }
    let (n, id) = best.unwrap();
    if n == 0 {
        warn!("no overlap between any domains; base domain `{id}` chosen by id");
    }
    Ok(id.to_owned())
}

/// Orthogonal map from one domain's embedding space into the base space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTransform {
    pub domain_id: String,
    pub rotation: Matrix,
    pub overlap: BTreeSet<String>,
    /// Mean squared reconstruction error over the overlap.
    pub residual: f64,
}

/// `Σ_{x∈overlap} ‖W^u(x) − O · W^v(x)‖²`
pub fn alignment_objective(
    wu: &EmbeddingMatrix,
    wv: &EmbeddingMatrix,
    overlap: &BTreeSet<String>,
    rotation: &Matrix,
) -> f64 {
    overlap
        .iter()
        .filter_map(|t| Some((wu.vector(t)?, wv.vector(t)?)))
        .map(|(u, v)| {
            let ov = rotation.mul_vec(v);
            u.iter().zip(&ov).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        })
        .sum()
}

/// Solves the orthogonal Procrustes problem on the shared tokens:
/// `M = Σ W^u(x) W^v(x)ᵀ = UΣVᵀ`, `O = UVᵀ`.
pub fn fit_orthogonal_map(
    wu: &EmbeddingMatrix,
    wv: &EmbeddingMatrix,
    overlap: &BTreeSet<String>,
) -> Result<AlignmentTransform> {
    if !wu.normalized || !wv.normalized {
        return Err(Error::Config("alignment requires row-normalized embeddings".into()));
    }
    if wu.dim() != wv.dim() {
        return Err(Error::ShapeMismatch {
            name: format!("embedding of `{}`", wv.domain_id),
            expected: (wv.vectors.rows(), wu.dim()),
            found: wv.vectors.shape(),
        });
    }
    let pairs: Vec<(&[f64], &[f64])> = overlap
        .iter()
        .filter_map(|t| Some((wu.vector(t)?, wv.vector(t)?)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::NoOverlap(wv.domain_id.clone()));
    }
    let p = wu.dim();
    let mut m = Matrix::zeros(p, p);
    for (u, v) in &pairs {
        for (i, &ui) in u.iter().enumerate() {
            axpy(ui, v, m.row_mut(i));
        }
    }
    let svd = m.to_nalgebra().svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let rotation = Matrix::from_nalgebra(&(u * v_t));
    let used: BTreeSet<String> = overlap
        .iter()
        .filter(|t| wu.vocab.contains(t) && wv.vocab.contains(t))
        .cloned()
        .collect();
    let residual = alignment_objective(wu, wv, &used, &rotation) / used.len() as f64;
    Ok(AlignmentTransform {
        domain_id: wv.domain_id.clone(),
        rotation,
        overlap: used,
        residual,
    })
}

/// One domain's vocabulary with its embedding rotated into the base space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpace {
    pub domain_id: String,
    pub vocab: Vocab,
    /// `W^{v→u}`, one row per vocabulary token.
    pub aligned: Matrix,
}

impl DomainSpace {
    pub fn from_transform(emb: &EmbeddingMatrix, transform: &AlignmentTransform) -> Self {
        // row form of O · w
        let aligned = emb.vectors.matmul(&transform.rotation.transpose());
        DomainSpace {
            domain_id: emb.domain_id.clone(),
            vocab: emb.vocab.clone(),
            aligned,
        }
    }
}

/// Borrowed view used by both the reference operations and the model.
#[derive(Clone, Copy)]
pub(crate) struct RepresentationView<'a> {
    pub base: &'a Matrix,
    pub aligned: &'a Matrix,
    pub a: &'a Matrix,
    pub e: &'a Matrix,
    pub ev: &'a Matrix,
}

/// Forward state of one token's universal embedding.
pub(crate) struct UniversalState {
    pub weights: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl RepresentationView<'_> {
    pub fn similarities(&self, token: usize) -> (Vec<f64>, Vec<f64>) {
        let projected = self.a.tmul_vec(self.aligned.row(token));
        let scores = self.base.mul_vec(&projected);
        (projected, scores)
    }

    pub fn universal(&self, token: usize) -> UniversalState {
        let (_, mut weights) = self.similarities(token);
        softmax_in_place(&mut weights);
        let mut embedding = vec![0.0; self.e.cols()];
        for (i, &w) in weights.iter().enumerate() {
            axpy(w, self.e.row(i), &mut embedding);
        }
        UniversalState {
            weights,
            embedding,
        }
    }

    /// `Ũ^v(t)` written into `out`.
    pub fn full(&self, token: usize) -> Vec<f64> {
        let mut x = self.universal(token).embedding;
        axpy(1.0, self.ev.row(token), &mut x);
        x
    }

    /// Accumulates gradients of `A` and `E` given `∂L/∂U^v(t)`.
    pub fn universal_backward(
        &self,
        token: usize,
        state: &UniversalState,
        grad_u: &[f64],
        grad_a: &mut Matrix,
        grad_e: &mut Matrix,
    ) {
        let w = &state.weights;
        let mut grad_w: Vec<f64> = (0..w.len()).map(|i| dot(self.e.row(i), grad_u)).collect();
        for (i, &wi) in w.iter().enumerate() {
            axpy(wi, grad_u, grad_e.row_mut(i));
        }
        let mean: f64 = w.iter().zip(&grad_w).map(|(a, b)| a * b).sum();
        for (g, &wi) in grad_w.iter_mut().zip(w) {
            *g = wi * (*g - mean);
        }
        // scores = W^u · projected
        let grad_proj = self.base.tmul_vec(&grad_w);
        // projected = Aᵀ · aligned(t)  =>  ∂/∂A[j][k] = aligned_j · grad_proj_k
        for (j, &aj) in self.aligned.row(token).iter().enumerate() {
            if aj != 0.0 {
                axpy(aj, &grad_proj, grad_a.row_mut(j));
            }
        }
    }
}

/// Learnable multi-domain representation with frozen alignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniversalRepresentation {
    pub base_domain: String,
    /// Normalized `W^u`.
    pub base: EmbeddingMatrix,
    /// Similarity bilinear form, identity at construction.
    pub a: Matrix,
    /// `|Q^u| × d` universal table.
    pub e: Matrix,
    pub transforms: BTreeMap<String, AlignmentTransform>,
    pub spaces: BTreeMap<String, DomainSpace>,
    /// Domain-specific tables, zero at construction.
    pub domain_tables: BTreeMap<String, Matrix>,
}

impl UniversalRepresentation {
    /// `base` must be row-normalized. `E` is drawn uniformly from
    /// `[-init_scale, init_scale]`.
    pub fn new(base: EmbeddingMatrix, dim: usize, init_scale: f64, seed: u64) -> Result<Self> {
        if !base.normalized {
            return Err(Error::Config("base embedding must be row-normalized".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = base.dim();
        let e = Matrix::from_fn(base.vocab.len(), dim, |_, _| {
            rng.gen_range(-init_scale..=init_scale)
        });
        let mut rep = UniversalRepresentation {
            base_domain: base.domain_id.clone(),
            a: Matrix::identity(p),
            e,
            transforms: BTreeMap::new(),
            spaces: BTreeMap::new(),
            domain_tables: BTreeMap::new(),
            base: base.clone(),
        };
        rep.add_domain(&base)?;
        Ok(rep)
    }

    pub fn dim(&self) -> usize {
        self.e.cols()
    }

    pub fn pre_dim(&self) -> usize {
        self.a.rows()
    }

    /// Aligns a domain against the base and registers a zero `E^v`.
    pub fn add_domain(&mut self, emb: &EmbeddingMatrix) -> Result<&AlignmentTransform> {
        let transform = if emb.domain_id == self.base_domain {
            AlignmentTransform {
                domain_id: emb.domain_id.clone(),
                rotation: Matrix::identity(self.pre_dim()),
                overlap: emb.vocab.tokens().iter().cloned().collect(),
                residual: 0.0,
            }
        } else {
            let overlap: BTreeSet<String> = emb
                .vocab
                .tokens()
                .iter()
                .filter(|t| self.base.vocab.contains(t))
                .cloned()
                .collect();
            fit_orthogonal_map(&self.base, emb, &overlap)?
        };
        let space = DomainSpace::from_transform(emb, &transform);
        let id = emb.domain_id.clone();
        self.domain_tables
            .insert(id.clone(), Matrix::zeros(emb.vocab.len(), self.dim()));
        self.spaces.insert(id.clone(), space);
        self.transforms.insert(id.clone(), transform);
        Ok(&self.transforms[&id])
    }

    pub fn space(&self, domain: &str) -> Result<&DomainSpace> {
        self.spaces
            .get(domain)
            .ok_or_else(|| Error::UnknownDomain(domain.to_owned()))
    }

    pub(crate) fn view(&self, domain: &str) -> Result<RepresentationView<'_>> {
        let space = self.space(domain)?;
        Ok(RepresentationView {
            base: &self.base.vectors,
            aligned: &space.aligned,
            a: &self.a,
            e: &self.e,
            ev: &self.domain_tables[domain],
        })
    }

    fn token_id(&self, domain: &str, token: &str) -> Result<usize> {
        self.space(domain)?
            .vocab
            .id(token)
            .ok_or_else(|| Error::UnknownToken {
                token: token.to_owned(),
                domain: domain.to_owned(),
            })
    }

    /// `S(t_v, t_i)` for a token of `domain` and a base-domain token.
    pub fn similarity(&self, domain: &str, token: &str, base_token: &str) -> Result<f64> {
        let v = self.token_id(domain, token)?;
        let i = self.token_id(&self.base_domain.clone(), base_token)?;
        let view = self.view(domain)?;
        let rhs = self.a.mul_vec(view.base.row(i));
        Ok(dot(view.aligned.row(v), &rhs))
    }

    /// Softmax weights over the base vocabulary for a token of `domain`.
    pub fn mixture_weights(&self, domain: &str, token: &str) -> Result<Vec<f64>> {
        let v = self.token_id(domain, token)?;
        Ok(self.view(domain)?.universal(v).weights)
    }

    /// `U^v(t_v)`
    pub fn universal_embedding(&self, domain: &str, token: &str) -> Result<Vec<f64>> {
        let v = self.token_id(domain, token)?;
        Ok(self.view(domain)?.universal(v).embedding)
    }

    /// `Ũ^v(t_v) = U^v(t_v) + E^v(t_v)`
    pub fn multi_domain_representation(&self, domain: &str, token: &str) -> Result<Vec<f64>> {
        let v = self.token_id(domain, token)?;
        Ok(self.view(domain)?.full(v))
    }
}
