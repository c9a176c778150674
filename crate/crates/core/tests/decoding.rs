mod common;

use common::{exhaustive_best, random_matrix, random_table, sharp_model, tiny_config, tiny_model};
use embreg::autodiff::Tensor;
use embreg::decoding::{beam_search, greedy_decode, DecodeConfig, DecodeMode};
use embreg::embedding::EOS;
use embreg::objectives::FusionConfig;
use embreg::rnnlm::{LmConfig, LmParams};
use embreg::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn feats(seed: u64, frames: usize) -> Tensor {
    random_matrix(frames, 3, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn wide_beam_matches_exhaustive_enumeration() {
    let cfg = DecodeConfig { beam: 64, max_len: 3, lm_weight: 0.0, ..Default::default() };
    for seed in 0..30 {
        let model = sharp_model(tiny_config(4, seed), 1.5, seed);
        let x = feats(seed + 100, 3);
        let hyps = beam_search(&model, &x, None, None, &cfg).unwrap();
        let (score, toks) = exhaustive_best(&model, &x, None, None, &cfg);
        assert_eq!(hyps[0].tokens, toks, "seed {seed}");
        assert!((hyps[0].score - score).abs() < 1e-12);
    }
}

#[test]
fn wide_beam_matches_enumeration_with_fusion_and_lm() {
    let fusion = FusionConfig { tau: 0.2, lambda_f: 0.4 };
    let cfg = DecodeConfig { beam: 125, max_len: 3, mode: DecodeMode::Fused, fusion, lm_weight: 0.5, ..Default::default() };
    for seed in 0..10 {
        let model = sharp_model(tiny_config(5, seed), 1.5, seed);
        let table = random_table(5, 3, seed);
        let mut lm = LmParams::new(LmConfig { vocab_size: 5, hidden: 3, token_dim: 2, seed, ..Default::default() }).unwrap();
        for t in lm.params.tensors_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += ((i as f64) * 0.7 + seed as f64).sin();
            }
        }
        let x = feats(seed, 2);
        let hyps = beam_search(&model, &x, Some(&table), Some(&lm), &cfg).unwrap();
        let (score, toks) = exhaustive_best(&model, &x, Some(&table), Some(&lm), &cfg);
        assert_eq!(hyps[0].tokens, toks, "seed {seed}");
        assert!((hyps[0].score - score).abs() < 1e-12);
    }
}

#[test]
fn beam_of_one_is_greedy() {
    let cfg = DecodeConfig { beam: 1, max_len: 6, lm_weight: 0.0, ..Default::default() };
    for seed in 0..20 {
        let model = sharp_model(tiny_config(7, seed), 1.0, seed);
        let x = feats(seed, 4);
        let hyps = beam_search(&model, &x, None, None, &cfg).unwrap();
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].words(), &greedy_decode(&model, &x, None, &cfg).unwrap()[..]);
    }
}

#[test]
fn zero_lm_weight_equals_no_lm() {
    let model = sharp_model(tiny_config(6, 3), 1.0, 3);
    let lm = LmParams::new(LmConfig { vocab_size: 6, hidden: 4, token_dim: 2, ..Default::default() }).unwrap();
    let cfg = DecodeConfig { beam: 4, max_len: 5, lm_weight: 0.0, ..Default::default() };
    let x = feats(1, 3);
    let a = beam_search(&model, &x, None, Some(&lm), &cfg).unwrap();
    let b = beam_search(&model, &x, None, None, &cfg).unwrap();
    let key = |h: &[embreg::decoding::Hypothesis]| h.iter().map(|h| (h.tokens.clone(), h.score.to_bits())).collect::<Vec<_>>();
    assert_eq!(key(&a), key(&b));
}

#[test]
fn model_that_always_ends_decodes_to_nothing() {
    let mut model = tiny_model(6, 0);
    let slot = model.params.names().iter().position(|n| n == "word_transform.bias").unwrap();
    model.params.get_mut(slot).data_mut()[EOS] = 50.0;
    let cfg = DecodeConfig { beam: 3, lm_weight: 0.0, ..Default::default() };
    let x = feats(2, 3);
    let hyps = beam_search(&model, &x, None, None, &cfg).unwrap();
    assert_eq!(hyps[0].tokens, vec![EOS]);
    assert!(hyps[0].finished && hyps[0].words().is_empty());
    assert!(greedy_decode(&model, &x, None, &cfg).unwrap().is_empty());
}

#[test]
fn unfinished_hypotheses_survive_at_max_len() {
    let mut model = tiny_model(6, 0);
    let slot = model.params.names().iter().position(|n| n == "word_transform.bias").unwrap();
    model.params.get_mut(slot).data_mut()[EOS] = -50.0;
    let cfg = DecodeConfig { beam: 2, max_len: 3, lm_weight: 0.0, ..Default::default() };
    let hyps = beam_search(&model, &feats(0, 2), None, None, &cfg).unwrap();
    assert!(!hyps[0].finished);
    assert_eq!(hyps[0].tokens.len(), 3);
}

#[test]
fn results_are_sorted_and_deterministic() {
    let model = sharp_model(tiny_config(8, 5), 1.0, 5);
    let cfg = DecodeConfig { beam: 6, max_len: 5, lm_weight: 0.0, trace: true, ..Default::default() };
    let x = feats(3, 4);
    let a = beam_search(&model, &x, None, None, &cfg).unwrap();
    for w in a.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for h in &a {
        assert_eq!(h.trace.len(), h.tokens.len());
        assert!(h.trace.iter().all(|t| t.len() == 5));
    }
    let b = beam_search(&model, &x, None, None, &cfg).unwrap();
    assert_eq!(
        a.iter().map(|h| (&h.tokens, h.score.to_bits())).collect::<Vec<_>>(),
        b.iter().map(|h| (&h.tokens, h.score.to_bits())).collect::<Vec<_>>()
    );
}

#[test]
fn scores_never_increase_with_length() {
    let model = sharp_model(tiny_config(6, 9), 1.0, 9);
    let cfg = DecodeConfig { beam: 1, max_len: 8, lm_weight: 0.0, ..Default::default() };
    let x = feats(4, 3);
    let mut prev = 0.0;
    for len in 1..=8 {
        let c = DecodeConfig { max_len: len, ..cfg.clone() };
        let h = &beam_search(&model, &x, None, None, &c).unwrap()[0];
        if h.tokens.len() == len {
            assert!(h.score <= prev);
            prev = h.score;
        }
    }
}

#[test]
fn misconfigured_decoding_is_rejected() {
    let model = tiny_model(6, 0);
    let x = feats(0, 2);
    let fused = DecodeConfig { mode: DecodeMode::Fused, lm_weight: 0.0, ..Default::default() };
    assert!(matches!(beam_search(&model, &x, None, None, &fused), Err(Error::Config(_))));
    let wrong = random_table(5, 3, 0);
    assert!(matches!(beam_search(&model, &x, Some(&wrong), None, &fused), Err(Error::Config(_))));
    let lm = LmParams::new(LmConfig { vocab_size: 7, hidden: 2, token_dim: 2, ..Default::default() }).unwrap();
    let with_lm = DecodeConfig { lm_weight: 0.3, ..Default::default() };
    assert!(matches!(beam_search(&model, &x, None, Some(&lm), &with_lm), Err(Error::Config(_))));
    let zero_beam = DecodeConfig { beam: 0, ..Default::default() };
    assert!(matches!(beam_search(&model, &x, None, None, &zero_beam), Err(Error::Config(_))));
}
