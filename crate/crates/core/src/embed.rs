//! Preliminary per-domain token embeddings: skip-gram with negative sampling.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::TokenSequence;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, sigmoid, Matrix};
use crate::vocab::{Vocab, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub domain_id: String,
    pub vocab: Vocab,
    pub vectors: Matrix,
    pub normalized: bool,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vector(&self, token: &str) -> Option<&[f64]> {
        self.vocab.id(token).map(|i| self.vectors.row(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Train on at most this many sequences (seeded sample). `None` uses all.
    #[serde(default)]
    pub max_sequences: Option<usize>,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            max_sequences: None,
            seed: 0,
        }
    }
}

/// Input and output vectors of a skip-gram model.
#[derive(Debug, Clone)]
pub struct SkipGramModel {
    pub input: Matrix,
    pub output: Matrix,
}

struct NegativeTable {
    cumulative: Vec<f64>,
}

impl NegativeTable {
    fn new(counts: &[u64]) -> Option<Self> {
        let mut acc = 0.0;
        let cumulative: Vec<f64> = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        (acc > 0.0).then_some(NegativeTable { cumulative })
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let x = rng.gen::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= x).min(self.cumulative.len() - 1)
    }
}

fn wrap(vocab: &Vocab, seq: &TokenSequence) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(seq.len() + 2);
    ids.push(BOS);
    ids.extend(vocab.encode(seq)?);
    ids.push(EOS);
    Ok(ids)
}

impl SkipGramModel {
    pub fn init(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let half = 0.5 / dim as f64;
        SkipGramModel {
            input: Matrix::from_fn(vocab_size, dim, |_, _| rng.gen_range(-half..half)),
            output: Matrix::zeros(vocab_size, dim),
        }
    }

    fn counts(vocab_size: usize, corpus: &[Vec<usize>]) -> Vec<u64> {
        let mut counts = vec![0u64; vocab_size];
        for s in corpus {
            for &t in s {
                counts[t] += 1;
            }
        }
        counts
    }

    pub fn fit(&mut self, corpus: &[Vec<usize>], cfg: &SkipGramConfig, rng: &mut impl Rng) {
        let Some(table) = NegativeTable::new(&Self::counts(self.input.rows(), corpus)) else {
            return;
        };
        let dim = self.input.cols();
        let total_tokens: usize = corpus.iter().map(Vec::len).sum::<usize>() * cfg.epochs;
        let mut seen = 0usize;
        let mut grad_in = vec![0.0; dim];
        let mut order: Vec<usize> = (0..corpus.len()).collect();

        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for &si in &order {
                let seq = &corpus[si];
                for (pos, &center) in seq.iter().enumerate() {
                    let progress = seen as f64 / total_tokens.max(1) as f64;
                    let lr = (cfg.learning_rate * (1.0 - progress)).max(cfg.learning_rate * 1e-4);
                    seen += 1;
                    let reach = rng.gen_range(1..=cfg.window.max(1));
                    let lo = pos.saturating_sub(reach);
                    let hi = (pos + reach).min(seq.len() - 1);
                    for (cpos, &context) in seq.iter().enumerate().take(hi + 1).skip(lo) {
                        if cpos == pos {
                            continue;
                        }
                        grad_in.iter_mut().for_each(|g| *g = 0.0);
                        for k in 0..=cfg.negatives {
                            let (target, label) = if k == 0 {
                                (context, 1.0)
                            } else {
                                let t = table.sample(rng);
                                if t == context {
                                    continue;
                                }
                                (t, 0.0)
                            };
                            let (input, output) = (&self.input, &mut self.output);
                            let score = dot(input.row(center), output.row(target));
                            let g = (label - sigmoid(score)) * lr;
                            axpy(g, output.row(target), &mut grad_in);
                            axpy(g, input.row(center), output.row_mut(target));
                        }
                        axpy(1.0, &grad_in, self.input.row_mut(center));
                    }
                }
            }
        }
    }

    /// Mean negative-sampling loss over every (center, context) pair within
    /// `window`, with negatives drawn from a fixed seed.
    pub fn loss(&self, corpus: &[Vec<usize>], window: usize, negatives: usize, seed: u64) -> f64 {
        let Some(table) = NegativeTable::new(&Self::counts(self.input.rows(), corpus)) else {
            return 0.0;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        let mut pairs = 0usize;
        for seq in corpus {
            for (pos, &center) in seq.iter().enumerate() {
                let lo = pos.saturating_sub(window);
                let hi = (pos + window).min(seq.len() - 1);
                for (cpos, &context) in seq.iter().enumerate().take(hi + 1).skip(lo) {
                    if cpos == pos {
                        continue;
                    }
                    let c = self.input.row(center);
                    let mut l = -sigmoid(dot(c, self.output.row(context))).ln();
                    for _ in 0..negatives {
                        let t = table.sample(&mut rng);
                        l -= sigmoid(-dot(c, self.output.row(t))).ln();
                    }
                    total += l;
                    pairs += 1;
                }
            }
        }
        total / pairs.max(1) as f64
    }

    /// Probability the model assigns to `context` appearing near `center`.
    pub fn context_score(&self, center: usize, context: usize) -> f64 {
        sigmoid(dot(self.input.row(center), self.output.row(context)))
    }
}

/// Encodes sequences as `_bos_ tokens… _eos_` id lists, sampling at most
/// `max_sequences` of them.
pub fn encode_corpus(
    sequences: &[TokenSequence],
    vocab: &Vocab,
    max_sequences: Option<usize>,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let picked: Vec<&TokenSequence> = match max_sequences {
        Some(cap) if cap < sequences.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a3f);
            let mut idx = rand::seq::index::sample(&mut rng, sequences.len(), cap).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &sequences[i]).collect()
        }
        _ => sequences.iter().collect(),
    };
    picked.into_iter().map(|s| wrap(vocab, s)).collect()
}

/// Trains skip-gram vectors for every token of `vocab`. Sequences are wrapped
/// in `_bos_`/`_eos_` so the boundary tokens receive vectors too.
pub fn train_skipgram(
    domain_id: &str,
    sequences: &[TokenSequence],
    vocab: &Vocab,
    cfg: &SkipGramConfig,
) -> Result<EmbeddingMatrix> {
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.dim < 2 {
        return Err(Error::Config("embedding dimension must be at least 2".into()));
    }
    let corpus = encode_corpus(sequences, vocab, cfg.max_sequences, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SkipGramModel::init(vocab.len(), cfg.dim, &mut rng);
    model.fit(&corpus, cfg, &mut rng);
    Ok(EmbeddingMatrix {
        domain_id: domain_id.to_owned(),
        vocab: vocab.clone(),
        vectors: model.input,
        normalized: false,
    })
}

/// Scales every row to unit length. Zero rows become `e1`; their indices
/// are returned.
pub fn normalize_rows(m: &EmbeddingMatrix) -> (EmbeddingMatrix, Vec<usize>) {
    let mut out = m.clone();
    let mut zero_rows = Vec::new();
    for i in 0..out.vectors.rows() {
        let row = out.vectors.row_mut(i);
        let n = norm(row);
        if n == 0.0 || !n.is_finite() {
            row.iter_mut().for_each(|x| *x = 0.0);
            row[0] = 1.0;
            zero_rows.push(i);
        } else {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    if !zero_rows.is_empty() {
        warn!(
            "{}: {} zero embedding rows replaced by e1",
            m.domain_id,
            zero_rows.len()
        );
    }
    out.normalized = true;
    (out, zero_rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn vocab(tokens: &[&str]) -> Vocab {
        let set: BTreeSet<String> = tokens.iter().map(|s| s.to_string()).collect();
        Vocab::from_token_set(&set)
    }

    fn seq(tokens: &[&str]) -> TokenSequence {
        TokenSequence::new("d", tokens.iter().map(|s| s.to_string()).collect())
    }

    fn cfg(seed: u64) -> SkipGramConfig {
        SkipGramConfig {
            dim: 8,
            window: 2,
            negatives: 3,
            epochs: 5,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn cooccurring_token_ranks_above_unrelated() {
        let v = vocab(&["a", "b", "c"]);
        let corpus = vec![vec![v.id("a").unwrap(), v.id("b").unwrap()]; 200];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = SkipGramModel::init(v.len(), 8, &mut rng);
        model.fit(&corpus, &cfg(7), &mut rng);
        let a = v.id("a").unwrap();
        assert!(model.context_score(a, v.id("b").unwrap()) > model.context_score(a, v.id("c").unwrap()));
    }

    #[test]
    fn single_token_vocab_keeps_initialisation() {
        let v = Vocab::from(vec!["x".to_string()]);
        let corpus = vec![vec![0usize]; 10];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = SkipGramModel::init(1, 4, &mut rng);
        let mut trained = init.clone();
        trained.fit(&corpus, &cfg(1), &mut rng);
        assert_eq!(init.input, trained.input);
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let v = vocab(&["a", "b", "c", "d"]);
        let data = vec![seq(&["a", "b", "c"]), seq(&["b", "d"]), seq(&["a", "d", "c"])];
        let m1 = train_skipgram("d", &data, &v, &cfg(3)).unwrap();
        let m2 = train_skipgram("d", &data, &v, &cfg(3)).unwrap();
        assert_eq!(m1, m2);
        let m3 = train_skipgram("d", &data, &v, &cfg(4)).unwrap();
        assert_ne!(m1.vectors, m3.vectors);
    }

    #[test]
    fn training_reduces_loss() {
        let v = vocab(&["a", "b", "c", "d", "e", "f"]);
        let raw = [seq(&["a", "b", "c"]), seq(&["d", "e", "f"]), seq(&["a", "c", "b"])];
        let data: Vec<Vec<usize>> = raw.iter().cycle().take(300).map(|s| wrap(&v, s).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = SkipGramModel::init(v.len(), 8, &mut rng);
        let before = model.loss(&data, 2, 3, 99);
        model.fit(&data, &cfg(11), &mut rng);
        let after = model.loss(&data, 2, 3, 99);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let v = vocab(&["a"]);
        let err = train_skipgram("d", &[], &v, &cfg(0)).unwrap_err();
        assert_eq!(err.to_string(), "empty training corpus");
    }

    #[test]
    fn normalizes_rows() {
        let m = EmbeddingMatrix {
            domain_id: "d".into(),
            vocab: Vocab::from(vec!["x".to_string(), "y".to_string(), "z".to_string()]),
            vectors: Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![0.6, 0.8]]),
            normalized: false,
        };
        let (n, zeros) = normalize_rows(&m);
        assert!(n.normalized);
        assert!((n.vectors.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((n.vectors.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(n.vectors.row(1), [1.0, 0.0]);
        assert_eq!(zeros, vec![1]);
        assert!((n.vectors.get(2, 0) - 0.6).abs() < 1e-12);
        assert!((n.vectors.get(2, 1) - 0.8).abs() < 1e-12);
    }
}
