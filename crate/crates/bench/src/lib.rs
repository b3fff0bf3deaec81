//! Shared fixtures for the criterion benchmarks.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdwaf_core::align::UniversalRepresentation;
use xdwaf_core::codec::RawRequest;
use xdwaf_core::embed::EmbeddingMatrix;
use xdwaf_core::linalg::Matrix;
use xdwaf_core::model::{ModelDims, ModelParams};
use xdwaf_core::synth::{grammars, sample_splits, SplitSize, SyntheticSpec};
use xdwaf_core::vocab::Vocab;

/// Benign requests of one synthetic domain.
pub fn requests(n: usize, seed: u64) -> Vec<RawRequest> {
    let spec = SyntheticSpec {
        sizes: vec![SplitSize { train: n, test: 0 }],
        overlap: 0.5,
        identical_grammars: false,
        attack_rate: 0.0,
        poison_ratio: 0.0,
        seed,
    };
    let g = &grammars(&spec)[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_splits(g, SplitSize { train: n, test: 0 }, 0.0, 0.0, &mut rng)
        .expect("valid split")
        .train
        .into_iter()
        .map(|r| r.request)
        .collect()
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0f64));
    for i in 0..n {
        let row = m.row_mut(i);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    m
}

/// Random unit-norm embedding over `n` tokens named `{prefix}{i}`.
pub fn embedding(domain: &str, prefix: &str, n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
    let tokens: BTreeSet<String> = (0..n).map(|i| format!("{prefix}{i}")).collect();
    let vocab = Vocab::from_token_set(&tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingMatrix {
        domain_id: domain.to_owned(),
        vectors: unit_rows(vocab.len(), dim, &mut rng),
        vocab,
        normalized: true,
    }
}

/// A target-domain model of the given sizes plus a batch of `batch` random
/// sequences of length `len`.
pub fn model(vocab: usize, dims: ModelDims, batch: usize, len: usize, seed: u64) -> (ModelParams, Vec<Vec<usize>>) {
    let base = embedding("base", "t", vocab, dims.embed, seed);
    let target = embedding("target", "t", vocab, dims.embed, seed + 1);
    let mut rep = UniversalRepresentation::new(base, dims.embed, 0.1, seed).expect("representation");
    rep.add_domain(&target).expect("alignment");
    let params = ModelParams::init(&rep, "target", dims, seed).expect("init");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = params.vocab_size();
    let seqs = (0..batch).map(|_| (0..len).map(|_| rng.gen_range(2..v)).collect()).collect();
    (params, seqs)
}
