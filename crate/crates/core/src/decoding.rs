//! Greedy and beam-search inference over the baseline or fused distribution,
//! with optional log-linear shallow fusion of a language model.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tensor};
use crate::embedding::{EmbeddingTable, EOS, SOS};
use crate::error::{Error, Result};
use crate::objectives::{cosine_softmax_values, fuse_values, FusionConfig, TrainMode};
use crate::rnnlm::{LmParams, LmState};
use crate::seq2seq::{DecoderState, DecoderStepOutput, Inference, Seq2Seq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Word-transform distribution only.
    Baseline,
    /// Mixture of the word-transform and Cosine-Softmax distributions.
    Fused,
}

impl From<TrainMode> for DecodeMode {
    fn from(m: TrainMode) -> Self {
        match m {
            TrainMode::Fused => DecodeMode::Fused,
            TrainMode::Baseline | TrainMode::Reg => DecodeMode::Baseline,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub mode: DecodeMode,
    pub fusion: FusionConfig,
    /// Weight of the language-model log-probability; 0 disables it.
    pub lm_weight: f64,
    /// Rank final hypotheses by score divided by length.
    pub length_norm: bool,
    /// Record the top-5 tokens of every step along each hypothesis.
    pub trace: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 20,
            max_len: 40,
            mode: DecodeMode::Baseline,
            fusion: FusionConfig::default(),
            lm_weight: 0.3,
            length_norm: false,
            trace: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::Config("beam must be >= 1".into()));
        }
        if self.max_len < 1 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        if !(self.lm_weight >= 0.0) {
            return Err(Error::Config(format!("lm_weight must be >= 0, got {}", self.lm_weight)));
        }
        if self.mode == DecodeMode::Fused {
            self.fusion.validate()?;
        }
        Ok(())
    }
}

/// Per-step decoding distribution: `p_phi` in baseline mode, the fused
/// mixture in fused mode.
pub fn step_distribution(
    out: &DecoderStepOutput,
    table: Option<&EmbeddingTable>,
    cfg: &DecodeConfig,
) -> Result<Vec<f64>> {
    match cfg.mode {
        DecodeMode::Baseline => Ok(out.p_phi.data().to_vec()),
        DecodeMode::Fused => {
            let table =
                table.ok_or_else(|| Error::Config("fused decoding needs an embedding table".into()))?;
            let p_theta = cosine_softmax_values(out.e_tilde.data(), table, cfg.fusion.tau)?;
            fuse_values(out.p_phi.data(), &p_theta, cfg.fusion.lambda_f)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Emitted ids, ending in EOS when finished.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
    /// Top-5 `(token, log-prob)` of the decoding distribution per step,
    /// filled when tracing is on.
    pub trace: Vec<Vec<(usize, f64)>>,
    state: DecoderState,
    lm_state: Option<LmState>,
}

impl Hypothesis {
    /// Tokens without the closing EOS.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }

    fn last(&self) -> usize {
        self.tokens.last().copied().unwrap_or(SOS)
    }

    fn rank_score(&self, length_norm: bool) -> f64 {
        if length_norm && !self.tokens.is_empty() {
            self.score / self.tokens.len() as f64
        } else {
            self.score
        }
    }
}

/// Higher score first, then lexicographically smaller token sequence.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn top5(logp: &[f64]) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..logp.len()).collect();
    idx.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    idx.into_iter().take(5).map(|i| (i, logp[i])).collect()
}

struct Expansion {
    logp: Vec<f64>,
    state: DecoderState,
    lm_state: Option<LmState>,
}

fn expand(
    inf: &Inference<'_>,
    h: &Hypothesis,
    table: Option<&EmbeddingTable>,
    lm: Option<&LmParams>,
    cfg: &DecodeConfig,
) -> Result<Expansion> {
    let (out, state) = inf.step(h.last(), &h.state)?;
    let dist = step_distribution(&out, table, cfg)?;
    let mut logp: Vec<f64> = dist.iter().map(|p| p.ln()).collect();
    let mut lm_state = None;
    if let (Some(lm), Some(ls)) = (lm, h.lm_state.as_ref()) {
        let (lp, next) = lm.score_step(ls, h.last())?;
        for (s, l) in logp.iter_mut().zip(lp.data()) {
            *s += cfg.lm_weight * l;
        }
        lm_state = Some(next);
    }
    Ok(Expansion { logp, state, lm_state })
}

/// Beam search. Returns hypotheses best first.
///
/// Each step expands every live hypothesis over the whole vocabulary. The
/// new candidates and the already finished hypotheses are ranked together
/// and the best `beam` are kept; finished ones are never expanded again.
/// Hypotheses still live at `max_len` are returned unfinished. Ties are
/// broken by lexicographic token order, so the result does not depend on
/// expansion order.
pub fn beam_search(
    model: &Seq2Seq,
    features: &Tensor,
    table: Option<&EmbeddingTable>,
    lm: Option<&LmParams>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let lm = lm.filter(|_| cfg.lm_weight > 0.0);
    if let Some(lm) = lm {
        if lm.config.vocab_size != model.config.vocab_size {
            return Err(Error::Config(format!(
                "LM vocabulary {} differs from model vocabulary {}",
                lm.config.vocab_size, model.config.vocab_size
            )));
        }
    }
    if cfg.mode == DecodeMode::Fused {
        check_table(model, table)?;
    }
    let inf = model.start(features)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        finished: false,
        trace: Vec::new(),
        state: inf.init_decoder_state(),
        lm_state: lm.map(LmParams::initial_state),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        let expansions = live
            .par_iter()
            .map(|h| expand(&inf, h, table, lm, cfg))
            .collect::<Result<Vec<_>>>()?;

        // (score, parent, token); token = None marks an already finished hypothesis.
        let mut cands: Vec<(f64, usize, Option<usize>)> = Vec::new();
        for (p, e) in expansions.iter().enumerate() {
            for (v, &lp) in e.logp.iter().enumerate() {
                cands.push((live[p].score + lp, p, Some(v)));
            }
        }
        for (i, f) in finished.iter().enumerate() {
            cands.push((f.score, i, None));
        }
        let seq = |c: &(f64, usize, Option<usize>)| -> Vec<usize> {
            match c.2 {
                Some(v) => {
                    let mut t = live[c.1].tokens.clone();
                    t.push(v);
                    t
                }
                None => finished[c.1].tokens.clone(),
            }
        };
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0).then_with(|| {
                // Only materialize sequences on score ties.
                seq(a).cmp(&seq(b))
            })
        });
        cands.truncate(cfg.beam);

        let mut next_live = Vec::new();
        let mut next_finished = Vec::new();
        for c in &cands {
            match c.2 {
                None => next_finished.push(finished[c.1].clone()),
                Some(v) => {
                    let parent = &live[c.1];
                    let e = &expansions[c.1];
                    let mut tokens = parent.tokens.clone();
                    tokens.push(v);
                    let mut trace = parent.trace.clone();
                    if cfg.trace {
                        trace.push(top5(&e.logp));
                    }
                    let h = Hypothesis {
                        tokens,
                        score: c.0,
                        finished: v == EOS,
                        trace,
                        state: e.state.clone(),
                        lm_state: e.lm_state.clone(),
                    };
                    if h.finished {
                        next_finished.push(h);
                    } else {
                        next_live.push(h);
                    }
                }
            }
        }
        live = next_live;
        finished = next_finished;
        if live.is_empty() {
            break;
        }
    }

    let mut all: Vec<Hypothesis> = finished.into_iter().chain(live).collect();
    all.sort_by(|a, b| {
        rank((a.rank_score(cfg.length_norm), &a.tokens), (b.rank_score(cfg.length_norm), &b.tokens))
    });
    Ok(all)
}

fn check_table(model: &Seq2Seq, table: Option<&EmbeddingTable>) -> Result<()> {
    let t = table.ok_or_else(|| Error::Config("fused decoding needs an embedding table".into()))?;
    if t.vocab_size() != model.config.vocab_size || t.dim() != model.config.emb_dim {
        return Err(Error::Config(format!(
            "embedding table is {}×{}, model expects {}×{}",
            t.vocab_size(),
            t.dim(),
            model.config.vocab_size,
            model.config.emb_dim
        )));
    }
    Ok(())
}

/// Argmax decoding until EOS or `max_len` steps. Returns the emitted ids
/// without EOS.
pub fn greedy_decode(
    model: &Seq2Seq,
    features: &Tensor,
    table: Option<&EmbeddingTable>,
    cfg: &DecodeConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    if cfg.mode == DecodeMode::Fused {
        check_table(model, table)?;
    }
    let inf = model.start(features)?;
    let mut state = inf.init_decoder_state();
    let mut prev = SOS;
    let mut out = Vec::new();
    for _ in 0..cfg.max_len {
        let (step, next) = inf.step(prev, &state)?;
        let tok = argmax(&step_distribution(&step, table, cfg)?);
        if tok == EOS {
            break;
        }
        out.push(tok);
        prev = tok;
        state = next;
    }
    Ok(out)
}
