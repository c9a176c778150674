//! Single-layer GRU language model for shallow fusion and perplexity.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::embedding::{Vocab, EOS, SOS};
use crate::error::{Error, Result};
use crate::params::{parallel_grads, NamedTensor, ParamStore, Sgd};
use crate::seq2seq::{gru_cell, INIT_RANGE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub token_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 54,
            hidden: 64,
            token_dim: 32,
            epochs: 10,
            batch_size: 16,
            lr: 1.0,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS || self.hidden < 1 || self.token_dim < 1 {
            return Err(Error::Config("LM sizes must be positive and include reserved tokens".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        Ok(())
    }
}

const EMB: usize = 0;
const WX: usize = 1;
const WH: usize = 2;
const BIAS: usize = 3;
const OUT_W: usize = 4;
const OUT_B: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    pub params: ParamStore,
}

/// Recurrent state of the language model.
#[derive(Clone, Debug, PartialEq)]
pub struct LmState(Tensor);

impl LmParams {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let (v, h, d) = (config.vocab_size, config.hidden, config.token_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut w = |shape: &[usize]| Tensor::uniform(shape, -INIT_RANGE, INIT_RANGE, &mut rng);
        let emb = w(&[v, d]);
        let wx = w(&[d, 3 * h]);
        let wh = w(&[h, 3 * h]);
        let out = w(&[h, v]);
        params.push("lm.token_embedding", emb);
        params.push("lm.w_input", wx);
        params.push("lm.w_hidden", wh);
        params.push("lm.bias", Tensor::zeros(&[3 * h]));
        params.push("lm.out.w", out);
        params.push("lm.out.bias", Tensor::zeros(&[v]));
        Ok(Self { config, params })
    }

    pub fn initial_state(&self) -> LmState {
        LmState(Tensor::zeros(&[self.config.hidden]))
    }

    /// One step in a graph: consumes `token`, returns next-token
    /// log-probabilities and the new state.
    fn step_nodes(&self, g: &mut Graph<'_>, ids: &[NodeId], token: usize, state: NodeId) -> Result<(NodeId, NodeId)> {
        if token >= self.config.vocab_size {
            return Err(Error::Lookup(format!(
                "token id {token} outside LM vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let x = g.slice_row(ids[EMB], token)?;
        let gx = g.matmul(x, ids[WX])?;
        let gx = g.add(gx, ids[BIAS])?;
        let h = gru_cell(g, ids[WH], gx, state, self.config.hidden)?;
        let logits = g.matmul(h, ids[OUT_W])?;
        let logits = g.add(logits, ids[OUT_B])?;
        Ok((g.log_softmax(logits)?, h))
    }

    /// Next-token log-probabilities after consuming `token` from `state`.
    pub fn score_step(&self, state: &LmState, token: usize) -> Result<(Tensor, LmState)> {
        let mut g = Graph::new();
        let ids = self.params.bind(&mut g, false);
        let s = g.constant_ref(&state.0);
        let (lp, h) = self.step_nodes(&mut g, &ids, token, s)?;
        Ok((g.value(lp).clone(), LmState(g.value(h).clone())))
    }

    /// Summed negative log-likelihood of a framed sentence as a graph node,
    /// plus the number of predicted tokens.
    fn sentence_nll(&self, g: &mut Graph<'_>, ids: &[NodeId], sentence: &[usize]) -> Result<(NodeId, usize)> {
        check_framed(sentence)?;
        let mut state = g.constant(Tensor::zeros(&[self.config.hidden]));
        let mut total: Option<NodeId> = None;
        for w in sentence.windows(2) {
            let (lp, h) = self.step_nodes(g, ids, w[0], state)?;
            state = h;
            let pick = g.pick(lp, w[1])?;
            total = Some(match total {
                None => pick,
                Some(t) => g.add(t, pick)?,
            });
        }
        let total = total.expect("framed sentence has a target");
        Ok((g.scale(total, -1.0), sentence.len() - 1))
    }
}

/// Wraps a bare sentence as `SOS … EOS`.
pub fn frame(sentence: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sentence.len() + 2);
    out.push(SOS);
    out.extend_from_slice(sentence);
    out.push(EOS);
    out
}

fn check_framed(s: &[usize]) -> Result<()> {
    if s.len() < 2 || s[0] != SOS || s[s.len() - 1] != EOS {
        return Err(Error::Data("LM sentences must be framed as SOS … EOS".into()));
    }
    Ok(())
}

/// `exp` of the mean per-token negative log-likelihood over all predicted
/// tokens (EOS included, SOS never predicted).
pub fn perplexity(lm: &LmParams, corpus: &[Vec<usize>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("perplexity of an empty corpus".into()));
    }
    let mut nll = 0.0;
    let mut count = 0usize;
    for s in corpus {
        check_framed(s)?;
        let mut state = lm.initial_state();
        for w in s.windows(2) {
            let (lp, next) = lm.score_step(&state, w[0])?;
            let lp_next = lp
                .data()
                .get(w[1])
                .ok_or_else(|| Error::Lookup(format!("token id {} outside LM vocabulary", w[1])))?;
            nll -= lp_next;
            count += 1;
            state = next;
        }
    }
    Ok((nll / count as f64).exp())
}

#[derive(Clone, Debug)]
pub struct LmTrainReport {
    pub lm: LmParams,
    /// Training-set perplexity before training, then after each epoch.
    pub perplexity_log: Vec<f64>,
}

/// Minibatch SGD on next-token cross-entropy. Deterministic from
/// `config.seed`; corpus sentences must be framed (see [`frame`]).
pub fn lm_train(corpus: &[Vec<usize>], config: &LmConfig) -> Result<LmTrainReport> {
    if corpus.is_empty() {
        return Err(Error::Data("LM corpus is empty".into()));
    }
    for s in corpus {
        check_framed(s)?;
        if let Some(&bad) = s.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside LM vocabulary")));
        }
    }
    let mut lm = LmParams::new(config.clone())?;
    let opt = Sgd { lr: config.lr, clip_norm: config.clip_norm };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = vec![perplexity(&lm, corpus)?];
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let sents: Vec<&Vec<usize>> = batch.iter().map(|&i| &corpus[i]).collect();
            let model = &lm;
            let (grads, counts) = parallel_grads(&lm.params, &sents, |g, ids, s| model.sentence_nll(g, ids, s))?;
            let tokens: usize = counts.iter().sum();
            opt.step(&mut lm.params, &grads, 1.0 / tokens as f64)?;
        }
        log.push(perplexity(&lm, corpus)?);
    }
    Ok(LmTrainReport { lm, perplexity_log: log })
}

pub const LM_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmCheckpoint {
    pub format_version: u32,
    pub config: LmConfig,
    pub vocab: Vec<String>,
    pub vocab_hash: String,
    pub perplexity_log: Vec<f64>,
    pub params: BTreeMap<String, NamedTensor>,
}

impl LmCheckpoint {
    pub fn new(lm: &LmParams, vocab: &Vocab, perplexity_log: Vec<f64>) -> Self {
        Self {
            format_version: LM_FORMAT_VERSION,
            config: lm.config.clone(),
            vocab: vocab.tokens()[crate::embedding::RESERVED.len()..].to_vec(),
            vocab_hash: vocab.hash(),
            perplexity_log,
            params: lm.params.to_named(),
        }
    }

    pub fn restore(&self) -> Result<(LmParams, Vocab)> {
        if self.format_version != LM_FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported LM checkpoint version {}", self.format_version)));
        }
        let vocab = Vocab::from_tokens(self.vocab.iter().cloned())?;
        if vocab.hash() != self.vocab_hash {
            return Err(Error::Data("LM checkpoint vocabulary hash mismatch".into()));
        }
        let mut lm = LmParams::new(self.config.clone())?;
        lm.params.load_named(&self.params)?;
        Ok((lm, vocab))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

/// Log-probabilities of a whole framed sentence under teacher forcing, one
/// vector per input position.
pub fn teacher_forced_log_probs(lm: &LmParams, sentence: &[usize]) -> Result<Vec<Tensor>> {
    check_framed(sentence)?;
    let mut g = Graph::new();
    let ids = lm.params.bind(&mut g, false);
    let mut state = g.constant(Tensor::zeros(&[lm.config.hidden]));
    let mut out = Vec::new();
    for &t in &sentence[..sentence.len() - 1] {
        let (lp, h) = lm.step_nodes(&mut g, &ids, t, state)?;
        out.push(g.value(lp).clone());
        state = h;
    }
    Ok(out)
}
