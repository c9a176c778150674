mod common;

use common::{random_distribution, random_matrix, random_table, tiny_model};
use embreg::autodiff::{argmax, cosine, Graph, Tensor};
use embreg::embedding::EOS;
use embreg::objectives::{
    asr_objective, combined_fused_objective, combined_objective, cosine_softmax, cosine_softmax_values, fuse,
    fuse_values, FusionConfig, RegularizationConfig,
};
use embreg::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rollout_losses(lambda: f64, fusion: Option<FusionConfig>) -> (f64, f64) {
    let model = tiny_model(7, 4);
    let table = random_table(7, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let feats = random_matrix(4, 3, &mut rng);
    let targets = [5, 4, 6, EOS];
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let f = g.constant_ref(&feats);
    let steps = model.teacher_forced_rollout(&mut g, &b, f, &targets).unwrap();
    let reg = RegularizationConfig { lambda };
    let obj = match fusion {
        Some(fc) => combined_fused_objective(&mut g, &steps, &targets, &table, &reg, &fc).unwrap(),
        None => combined_objective(&mut g, &steps, &targets, &table, &reg).unwrap(),
    };
    let base = asr_objective(&mut g, &steps, &targets).unwrap();
    (g.value(obj.loss).item(), g.value(base.loss).item())
}

#[test]
fn zero_lambda_reduces_to_summed_asr_loss() {
    let (combined, asr) = rollout_losses(0.0, None);
    assert_eq!(combined.to_bits(), asr.to_bits());
}

#[test]
fn zero_fusion_weight_reduces_to_asr_objective() {
    let (fused, asr) = rollout_losses(0.0, Some(FusionConfig { tau: 0.1, lambda_f: 0.0 }));
    assert_eq!(fused.to_bits(), asr.to_bits());
}

#[test]
fn positive_lambda_adds_the_regularizer() {
    let (combined, asr) = rollout_losses(2.0, None);
    assert!(combined > asr);
}

#[test]
fn summed_asr_loss_matches_hand_computed_log_probs() {
    let model = tiny_model(6, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let feats = random_matrix(3, 3, &mut rng);
    let targets = [4, EOS];
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let f = g.constant_ref(&feats);
    let steps = model.teacher_forced_rollout(&mut g, &b, f, &targets).unwrap();
    let obj = asr_objective(&mut g, &steps, &targets).unwrap();
    let expect: f64 = steps.iter().zip(&targets).map(|(s, &y)| -g.value(s.p_phi).data()[y].ln()).sum();
    assert!((obj.breakdown.total - expect).abs() < 1e-12);
    assert_eq!(obj.breakdown.steps.len(), 2);
}

#[test]
fn regularizer_breakdown_is_one_minus_cosine() {
    let model = tiny_model(6, 8);
    let table = random_table(6, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feats = random_matrix(2, 3, &mut rng);
    let targets = [5, EOS];
    let mut g = Graph::new();
    let b = model.bind(&mut g, false);
    let f = g.constant_ref(&feats);
    let steps = model.teacher_forced_rollout(&mut g, &b, f, &targets).unwrap();
    let obj = combined_objective(&mut g, &steps, &targets, &table, &RegularizationConfig { lambda: 3.0 }).unwrap();
    for (s, (node, &y)) in obj.breakdown.steps.iter().zip(steps.iter().zip(&targets)) {
        let c = cosine(g.value(node.e_tilde).data(), table.row(y).unwrap()).unwrap();
        assert!((s.reg - (1.0 - c)).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&s.reg));
    }
    let bd = &obj.breakdown;
    assert!((bd.total - (bd.asr_or_fused + 3.0 * bd.reg)).abs() < 1e-9);
}

#[test]
fn fusion_endpoints_are_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let n = rng.random_range(2..30);
        let a = random_distribution(n, &mut rng);
        let b = random_distribution(n, &mut rng);
        assert_eq!(fuse_values(&a, &b, 0.0).unwrap(), a);
        assert_eq!(fuse_values(&a, &b, 1.0).unwrap(), b);
    }
}

#[test]
fn graph_and_value_forms_agree() {
    let table = random_table(9, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let e: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p_phi = random_distribution(9, &mut rng);
    let mut g = Graph::new();
    let en = g.constant(Tensor::vector(e.clone()));
    let tn = g.constant_ref(table.matrix());
    let pt = cosine_softmax(&mut g, en, tn, 0.3).unwrap();
    let pp = g.constant(Tensor::vector(p_phi.clone()));
    let fused = fuse(&mut g, pp, pt, 0.4).unwrap();
    let theta = cosine_softmax_values(&e, &table, 0.3).unwrap();
    assert_eq!(g.value(pt).data(), &theta[..]);
    assert_eq!(g.value(fused).data(), &fuse_values(&p_phi, &theta, 0.4).unwrap()[..]);
}

#[test]
fn invalid_hyperparameters_are_config_errors() {
    let table = random_table(5, 3, 0);
    let e = [0.1, 0.2, 0.3];
    assert!(matches!(cosine_softmax_values(&e, &table, 0.0), Err(Error::Config(_))));
    assert!(matches!(fuse_values(&[1.0], &[1.0], 1.5), Err(Error::Config(_))));
    assert!(matches!(fuse_values(&[1.0], &[1.0], -0.1), Err(Error::Config(_))));
    assert!(RegularizationConfig { lambda: -1.0 }.validate().is_err());
}

#[test]
fn zero_projection_is_degenerate() {
    let table = random_table(5, 3, 0);
    assert!(matches!(cosine_softmax_values(&[0.0; 3], &table, 1.0), Err(Error::Degenerate(_))));
}

fn table_and_query() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (2usize..20, 2usize..8).prop_flat_map(|(v, d)| {
        (
            prop::collection::vec(-1.0f64..1.0, v * d),
            prop::collection::vec(-1.0f64..1.0, d),
            Just(d),
        )
    })
}

proptest! {
    #[test]
    fn cosine_softmax_is_a_distribution((rows, e, d) in table_and_query(), tau in 0.05f64..5.0) {
        let v = rows.len() / d;
        prop_assume!(e.iter().any(|x| x.abs() > 1e-3));
        prop_assume!((0..v).all(|r| rows[r * d..(r + 1) * d].iter().any(|x| x.abs() > 1e-3)));
        let table = embreg::embedding::EmbeddingTable::new(Tensor::matrix(v, d, rows).unwrap(), true).unwrap();
        let p = cosine_softmax_values(&e, &table, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| *x > 0.0 && *x < 1.0));
    }

    #[test]
    fn fused_distribution_stays_normalized(seed in any::<u64>(), n in 2usize..40, lf in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_distribution(n, &mut rng);
        let b = random_distribution(n, &mut rng);
        let p = fuse_values(&a, &b, lf).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| *x > 0.0 && *x < 1.0));
    }

    #[test]
    fn cold_cosine_softmax_picks_the_most_similar_row(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = random_table(12, 5, seed);
        let e: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cos: Vec<f64> = (0..12).map(|r| cosine(&e, table.row(r).unwrap()).unwrap()).collect();
        let best = argmax(&cos);
        let second = cos.iter().enumerate().filter(|(i, _)| *i != best).map(|(_, c)| *c).fold(f64::MIN, f64::max);
        prop_assume!(cos[best] - second > 0.01);
        let p = cosine_softmax_values(&e, &table, 1e-4).unwrap();
        prop_assert_eq!(argmax(&p), best);
        prop_assert!(p[best] > 0.999);
    }
}
