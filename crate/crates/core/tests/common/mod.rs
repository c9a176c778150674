#![allow(dead_code)]

use std::collections::HashMap;

use embreg::autodiff::Tensor;
use embreg::decoding::{step_distribution, DecodeConfig};
use embreg::embedding::{EmbeddingTable, EOS, SOS};
use embreg::rnnlm::LmParams;
use embreg::seq2seq::{ModelConfig, Seq2Seq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        feat_dim: 3,
        enc_hidden: 2,
        dec_hidden: 4,
        emb_dim: 3,
        vocab_size,
        theta_hidden: 3,
        token_dim: 2,
        att_dim: 2,
        detach_embedding_branch: false,
        seed,
    }
}

pub fn tiny_model(vocab_size: usize, seed: u64) -> Seq2Seq {
    Seq2Seq::new(tiny_config(vocab_size, seed)).unwrap()
}

/// Model with weights spread wider than the default init so outputs are
/// far from uniform.
pub fn sharp_model(cfg: ModelConfig, scale: f64, seed: u64) -> Seq2Seq {
    let mut m = Seq2Seq::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    m
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_table(v: usize, d: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingTable::new(random_matrix(v, d, &mut rng), true).unwrap()
}

pub fn random_distribution(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Sentences drawn from one of two disjoint word groups.
pub fn two_cluster_corpus(seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..600)
        .map(|_| {
            let base = if rng.random_bool(0.5) { 4 } else { 12 };
            (0..10).map(|_| base + rng.random_range(0..8)).collect()
        })
        .collect()
}

/// Scores every sequence the decoder can emit within `max_len` steps:
/// EOS-terminated ones of any length plus unterminated ones of full length.
/// Returns the best `(score, tokens)` under the same tie rule as the search.
pub fn exhaustive_best(
    model: &Seq2Seq,
    feats: &Tensor,
    table: Option<&EmbeddingTable>,
    lm: Option<&LmParams>,
    cfg: &DecodeConfig,
) -> (f64, Vec<usize>) {
    let inf = model.start(feats).unwrap();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut consider = |score: f64, toks: &[usize]| {
        let better = match &best {
            None => true,
            Some((s, t)) => score > *s || (score == *s && toks < &t[..]),
        };
        if better {
            best = Some((score, toks.to_vec()));
        }
    };
    // Depth-first walk carrying decoder and LM state.
    let mut stack = vec![(Vec::<usize>::new(), 0.0, inf.init_decoder_state(), lm.map(|l| l.initial_state()))];
    while let Some((toks, score, state, lm_state)) = stack.pop() {
        let prev = toks.last().copied().unwrap_or(SOS);
        let (out, next) = inf.step(prev, &state).unwrap();
        let dist = step_distribution(&out, table, cfg).unwrap();
        let lm_next = lm.zip(lm_state.as_ref()).map(|(l, s)| l.score_step(s, prev).unwrap());
        for (tok, &p) in dist.iter().enumerate() {
            let mut s = score + p.ln();
            if let Some((lp, _)) = &lm_next {
                s += cfg.lm_weight * lp.data()[tok];
            }
            let mut t = toks.clone();
            t.push(tok);
            if tok == EOS || t.len() == cfg.max_len {
                consider(s, &t);
            } else {
                stack.push((t, s, next.clone(), lm_next.as_ref().map(|(_, st)| st.clone())));
            }
        }
    }
    best.unwrap()
}

/// Plain recursive edit distance with memoization.
pub fn edit_oracle(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() || b.is_empty() {
            return a.len() + b.len();
        }
        if let Some(&d) = memo.get(&(a.len(), b.len())) {
            return d;
        }
        let sub = go(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
        let del = go(&a[1..], b, memo) + 1;
        let ins = go(a, &b[1..], memo) + 1;
        let d = sub.min(del).min(ins);
        memo.insert((a.len(), b.len()), d);
        d
    }
    go(a, b, &mut HashMap::new())
}
