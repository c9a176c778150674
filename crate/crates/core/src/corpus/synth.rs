//! Synthetic pseudo speech recognition task.
//!
//! Transcripts come from a random first-order Markov chain over `V` word
//! types. Each word type owns a fixed prototype feature vector; an emitted
//! word becomes 1–3 frames of its prototype plus Gaussian noise. A larger
//! text-only corpus is drawn from the same chain for embedding and
//! language-model training.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Split, Utterance};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    /// Word types, not counting reserved tokens.
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Inclusive range of frames emitted per word.
    pub frames_per_token: (usize, usize),
    pub noise_sigma: f64,
    /// Symmetric Dirichlet concentration of each transition row. Small
    /// values give a near-deterministic chain.
    pub concentration: f64,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    /// Extra text-only sentences beyond the training transcripts.
    pub text_sentences: usize,
    /// Inclusive range of words per utterance.
    pub utterance_len: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            feature_dim: 8,
            frames_per_token: (1, 3),
            noise_sigma: 0.5,
            concentration: 0.05,
            train_utterances: 400,
            dev_utterances: 100,
            text_sentences: 4000,
            utterance_len: (3, 8),
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be >= 1".into());
        }
        let (lo, hi) = self.frames_per_token;
        if lo < 1 || lo > hi {
            return bad(format!("frames_per_token range [{lo}, {hi}] is empty or starts below 1"));
        }
        let (lo, hi) = self.utterance_len;
        if lo < 1 || lo > hi {
            return bad(format!("utterance_len range [{lo}, {hi}] is empty or starts below 1"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.concentration > 0.0) || !self.concentration.is_finite() {
            return bad(format!("concentration must be > 0, got {}", self.concentration));
        }
        if self.train_utterances == 0 || self.dev_utterances == 0 {
            return bad("train and dev sets must be non-empty".into());
        }
        Ok(())
    }
}

pub fn word_name(i: usize) -> String {
    format!("w{i:02}")
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub train: Dataset,
    pub dev: Dataset,
    /// Training transcripts followed by the extra text-only sentences.
    pub text: Vec<String>,
    /// `V × feature_dim`, row `i` belongs to word `word_name(i)`.
    pub prototypes: Tensor,
    /// Per utterance of `train` then `dev`: the word index and frame count
    /// of every emitted word.
    pub alignments: Vec<Vec<(usize, usize)>>,
}

/// Symmetric Dirichlet sample computed in log space, so that tiny
/// concentrations yield near one-hot rows instead of all-zero underflow.
fn dirichlet(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("positive shape");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

struct Chain {
    start: WeightedIndex<f64>,
    next: Vec<WeightedIndex<f64>>,
}

impl Chain {
    fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut w = self.start.sample(rng);
        out.push(w);
        while out.len() < len {
            w = self.next[w].sample(rng);
            out.push(w);
        }
        out
    }
}

fn weighted(p: &[f64]) -> WeightedIndex<f64> {
    WeightedIndex::new(p).expect("normalized weights")
}

pub fn generate_synthetic_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let v = spec.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chain = Chain {
        start: weighted(&dirichlet(spec.concentration, v, &mut rng)),
        next: (0..v).map(|_| weighted(&dirichlet(spec.concentration, v, &mut rng))).collect(),
    };
    let proto: Vec<f64> = (0..v * spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let prototypes = Tensor::matrix(v, spec.feature_dim, proto)?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let mut alignments = Vec::new();
    let mut make_split = |split: Split, n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut utterances = Vec::with_capacity(n);
        for i in 0..n {
            let len = rng.random_range(spec.utterance_len.0..=spec.utterance_len.1);
            let words = chain.sample(len, rng);
            let mut frames = Vec::new();
            let mut align = Vec::with_capacity(len);
            for &w in &words {
                let k = rng.random_range(spec.frames_per_token.0..=spec.frames_per_token.1);
                for _ in 0..k {
                    frames.extend(prototypes.row(w).iter().map(|&p| p + noise.sample(rng)));
                }
                align.push((w, k));
            }
            let t = frames.len() / spec.feature_dim;
            let text = words.iter().map(|&w| word_name(w)).collect::<Vec<_>>().join(" ");
            utterances.push(Utterance {
                id: format!("{prefix}-{i:05}"),
                features: Tensor::matrix(t, spec.feature_dim, frames)?,
                text,
            });
            alignments.push(align);
        }
        Ok(Dataset { split, utterances })
    };
    let train = make_split(Split::Train, spec.train_utterances, "train", &mut rng)?;
    let dev = make_split(Split::Dev, spec.dev_utterances, "dev", &mut rng)?;

    let mut text: Vec<String> = train.utterances.iter().map(|u| u.text.clone()).collect();
    for _ in 0..spec.text_sentences {
        let len = rng.random_range(spec.utterance_len.0..=spec.utterance_len.1);
        let words = chain.sample(len, &mut rng);
        text.push(words.iter().map(|&w| word_name(w)).collect::<Vec<_>>().join(" "));
    }
    Ok(SyntheticTask { train, dev, text, prototypes, alignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_specs_rejected() {
        let base = SyntheticTaskSpec::default();
        for spec in [
            SyntheticTaskSpec { vocab_size: 3, ..base.clone() },
            SyntheticTaskSpec { noise_sigma: -1.0, ..base.clone() },
            SyntheticTaskSpec { frames_per_token: (2, 1), ..base.clone() },
            SyntheticTaskSpec { utterance_len: (0, 3), ..base.clone() },
            SyntheticTaskSpec { concentration: 0.0, ..base.clone() },
        ] {
            assert!(matches!(generate_synthetic_task(&spec), Err(Error::Config(_))), "{spec:?}");
        }
    }

    #[test]
    fn dirichlet_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for alpha in [1e-4, 0.1, 10.0] {
            let p = dirichlet(alpha, 20, &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }
}
