//! Skip-gram and CBOW with negative sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::table::{reserved_rows, EmbeddingTable};
use super::vocab::is_reserved;
use crate::autodiff::{dot, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Skipgram,
    Cbow,
}

impl std::str::FromStr for EmbedMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skipgram" => Ok(Self::Skipgram),
            "cbow" => Ok(Self::Cbow),
            other => Err(Error::Config(format!("unknown embedding mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedTrainConfig {
    pub mode: EmbedMode,
    /// Maximum context radius; the effective radius is resampled per position.
    pub window: usize,
    /// Negative samples per positive pair.
    pub negatives: usize,
    pub epochs: usize,
    /// Initial learning rate, decayed linearly over training.
    pub lr: f64,
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            mode: EmbedMode::Skipgram,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            dim: 256,
            seed: 0,
        }
    }
}

impl EmbedTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.window < 1 {
            return bad("window must be >= 1");
        }
        if self.negatives < 1 {
            return bad("negatives must be >= 1");
        }
        if self.dim < 2 {
            return bad("dim must be >= 2");
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Sgns {
    dim: usize,
    input: Vec<f64>,
    output: Vec<f64>,
    noise: WeightedIndex<f64>,
    negatives: usize,
    grad: Vec<f64>,
}

impl Sgns {
    /// One positive target plus negatives against hidden vector `h`.
    /// Accumulates the input-side gradient into `self.grad`.
    fn update(&mut self, h: &[f64], target: usize, lr: f64, rng: &mut ChaCha8Rng) {
        let d = self.dim;
        for k in 0..=self.negatives {
            let (word, label) = if k == 0 {
                (target, 1.0)
            } else {
                let w = self.noise.sample(rng);
                if w == target {
                    continue;
                }
                (w, 0.0)
            };
            let out = &mut self.output[word * d..(word + 1) * d];
            let g = (label - sigmoid(dot(h, out))) * lr;
            for ((acc, o), &hv) in self.grad.iter_mut().zip(out.iter_mut()).zip(h) {
                *acc += g * *o;
                *o += g * hv;
            }
        }
    }
}

/// Trains input-side vectors for ids `0..vocab_size` on `corpus`.
///
/// Deterministic given `cfg.seed`. Negatives are drawn from the unigram
/// distribution raised to the 0.75 power. Reserved ids that never occur in
/// the corpus get their fixed default rows.
pub fn train_embeddings(
    corpus: &[Vec<usize>],
    vocab_size: usize,
    cfg: &EmbedTrainConfig,
) -> Result<EmbeddingTable> {
    train_embeddings_logged(corpus, vocab_size, cfg, &mut |_, _| {})
}

/// [`train_embeddings`] calling `on_epoch(epoch, lr)` after each epoch with
/// the learning rate reached.
pub fn train_embeddings_logged(
    corpus: &[Vec<usize>],
    vocab_size: usize,
    cfg: &EmbedTrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<EmbeddingTable> {
    cfg.validate()?;
    let total: usize = corpus.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Data("embedding corpus is empty".into()));
    }
    let mut counts = vec![0usize; vocab_size];
    for &id in corpus.iter().flatten() {
        if id >= vocab_size {
            return Err(Error::Data(format!("token id {id} outside vocabulary of {vocab_size}")));
        }
        counts[id] += 1;
    }
    let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let noise = WeightedIndex::new(&weights).map_err(|e| Error::Data(e.to_string()))?;

    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = 0.5 / d as f64;
    let input: Vec<f64> = (0..vocab_size * d).map(|_| rng.random_range(-half..half)).collect();
    let mut m = Sgns {
        dim: d,
        input,
        output: vec![0.0; vocab_size * d],
        noise,
        negatives: cfg.negatives,
        grad: vec![0.0; d],
    };

    let steps = (cfg.epochs * total) as f64;
    let mut done = 0usize;
    let mut h = vec![0.0; d];
    for epoch in 1..=cfg.epochs {
        for sent in corpus {
            for (pos, &center) in sent.iter().enumerate() {
                let lr = (cfg.lr * (1.0 - done as f64 / steps)).max(cfg.lr * 1e-4);
                done += 1;
                let radius = rng.random_range(1..=cfg.window);
                let lo = pos.saturating_sub(radius);
                let hi = (pos + radius).min(sent.len() - 1);
                let context: Vec<usize> = (lo..=hi).filter(|&c| c != pos).map(|c| sent[c]).collect();
                if context.is_empty() {
                    continue;
                }
                match cfg.mode {
                    EmbedMode::Skipgram => {
                        for &ctx in &context {
                            h.copy_from_slice(&m.input[center * d..(center + 1) * d]);
                            m.grad.fill(0.0);
                            m.update(&h, ctx, lr, &mut rng);
                            for (w, g) in m.input[center * d..(center + 1) * d].iter_mut().zip(&m.grad) {
                                *w += g;
                            }
                        }
                    }
                    EmbedMode::Cbow => {
                        h.fill(0.0);
                        for &ctx in &context {
                            for (a, w) in h.iter_mut().zip(&m.input[ctx * d..(ctx + 1) * d]) {
                                *a += w;
                            }
                        }
                        let inv = 1.0 / context.len() as f64;
                        h.iter_mut().for_each(|v| *v *= inv);
                        m.grad.fill(0.0);
                        m.update(&h, center, lr, &mut rng);
                        for &ctx in &context {
                            for (w, g) in m.input[ctx * d..(ctx + 1) * d].iter_mut().zip(&m.grad) {
                                *w += g;
                            }
                        }
                    }
                }
            }
        }
        on_epoch(epoch, (cfg.lr * (1.0 - done as f64 / steps)).max(cfg.lr * 1e-4));
    }

    let defaults = reserved_rows(d);
    for (id, row) in defaults.iter().enumerate().take(vocab_size) {
        if is_reserved(id) && counts[id] == 0 {
            m.input[id * d..(id + 1) * d].copy_from_slice(row);
        }
    }
    if m.input.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("embedding training diverged".into()));
    }
    EmbeddingTable::new(Tensor::matrix(vocab_size, d, m.input)?, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: EmbedMode) -> EmbedTrainConfig {
        EmbedTrainConfig { mode, dim: 8, epochs: 2, window: 2, ..Default::default() }
    }

    #[test]
    fn repeated_token_stays_finite() {
        let corpus = vec![vec![4; 30]];
        for mode in [EmbedMode::Skipgram, EmbedMode::Cbow] {
            let t = train_embeddings(&corpus, 5, &cfg(mode)).unwrap();
            assert!(t.matrix().is_finite());
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let corpus = vec![vec![4, 5, 6, 4, 5], vec![6, 6, 4]];
        let a = train_embeddings(&corpus, 7, &cfg(EmbedMode::Skipgram)).unwrap();
        let b = train_embeddings(&corpus, 7, &cfg(EmbedMode::Skipgram)).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(train_embeddings(&[], 5, &cfg(EmbedMode::Cbow)), Err(Error::Data(_))));
        assert!(matches!(train_embeddings(&[vec![]], 5, &cfg(EmbedMode::Cbow)), Err(Error::Data(_))));
        assert!(matches!(train_embeddings(&[vec![9]], 5, &cfg(EmbedMode::Cbow)), Err(Error::Data(_))));
        let bad = EmbedTrainConfig { window: 0, ..cfg(EmbedMode::Cbow) };
        assert!(matches!(train_embeddings(&[vec![4]], 5, &bad), Err(Error::Config(_))));
        let bad = EmbedTrainConfig { dim: 1, ..cfg(EmbedMode::Cbow) };
        assert!(matches!(train_embeddings(&[vec![4]], 5, &bad), Err(Error::Config(_))));
    }
}
