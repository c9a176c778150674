mod common;

use std::collections::HashMap;

use common::edit_oracle;
use embreg::corpus::{
    detokenize, edit_distance, generate_synthetic_task, load_text_corpus, save_text_corpus, tokenize, wer, Dataset,
    Split, SyntheticTaskSpec, WerReport,
};
use embreg::embedding::{Vocab, EOS, UNK};
use embreg::Error;
use proptest::prelude::*;

fn small_spec() -> SyntheticTaskSpec {
    SyntheticTaskSpec { vocab_size: 10, train_utterances: 40, dev_utterances: 10, text_sentences: 50, ..Default::default() }
}

#[test]
fn same_seed_same_task() {
    let a = generate_synthetic_task(&small_spec()).unwrap();
    let b = generate_synthetic_task(&small_spec()).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.dev, b.dev);
    assert_eq!(a.text, b.text);
    let c = generate_synthetic_task(&SyntheticTaskSpec { seed: 1, ..small_spec() }).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn task_shapes_follow_the_spec() {
    let spec = small_spec();
    let t = generate_synthetic_task(&spec).unwrap();
    assert_eq!(t.train.len(), 40);
    assert_eq!(t.dev.len(), 10);
    assert_eq!(t.text.len(), 90);
    for (u, align) in t.train.utterances.iter().chain(&t.dev.utterances).zip(&t.alignments) {
        let words = u.text.split_whitespace().count();
        assert!((3..=8).contains(&words));
        assert_eq!(align.len(), words);
        assert!(align.iter().all(|&(_, k)| (1..=3).contains(&k)));
        assert_eq!(u.features.rows(), align.iter().map(|a| a.1).sum::<usize>());
        assert_eq!(u.features.cols(), spec.feature_dim);
    }
}

#[test]
fn noiseless_features_are_separable_by_nearest_prototype() {
    let spec = SyntheticTaskSpec { noise_sigma: 0.0, frames_per_token: (1, 1), ..small_spec() };
    let t = generate_synthetic_task(&spec).unwrap();
    let mut errors = 0;
    for (u, align) in t.train.utterances.iter().zip(&t.alignments) {
        for (frame, &(w, _)) in align.iter().enumerate() {
            let x = u.features.row(frame);
            let nearest = (0..spec.vocab_size)
                .min_by(|&a, &b| {
                    let d = |r: usize| t.prototypes.row(r).iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            errors += usize::from(nearest != w);
        }
    }
    assert_eq!(errors, 0);
}

#[test]
fn feature_means_converge_to_prototypes() {
    let spec = SyntheticTaskSpec { vocab_size: 5, train_utterances: 600, ..small_spec() };
    let t = generate_synthetic_task(&spec).unwrap();
    let f = spec.feature_dim;
    let mut sums = vec![vec![0.0; f]; 5];
    let mut counts = [0usize; 5];
    for (u, align) in t.train.utterances.iter().zip(&t.alignments) {
        let mut row = 0;
        for &(w, k) in align {
            for _ in 0..k {
                for (s, x) in sums[w].iter_mut().zip(u.features.row(row)) {
                    *s += x;
                }
                counts[w] += 1;
                row += 1;
            }
        }
    }
    let mut checked = 0;
    for w in 0..5 {
        if counts[w] < 500 {
            continue;
        }
        checked += 1;
        let err: f64 = sums[w]
            .iter()
            .zip(t.prototypes.row(w))
            .map(|(s, p)| (s / counts[w] as f64 - p).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err < spec.noise_sigma / 3.0, "word {w}: {err}");
    }
    assert!(checked > 0);
}

#[test]
fn tiny_concentration_gives_a_near_deterministic_chain() {
    let spec = SyntheticTaskSpec { concentration: 1e-3, text_sentences: 2000, ..small_spec() };
    let t = generate_synthetic_task(&spec).unwrap();
    let mut pair: HashMap<(&str, &str), f64> = HashMap::new();
    let mut first: HashMap<&str, f64> = HashMap::new();
    for line in &t.text {
        let w: Vec<&str> = line.split_whitespace().collect();
        for p in w.windows(2) {
            *pair.entry((p[0], p[1])).or_default() += 1.0;
            *first.entry(p[0]).or_default() += 1.0;
        }
    }
    let total: f64 = first.values().sum();
    // Conditional entropy H(next | current) in nats.
    let h: f64 = pair
        .iter()
        .map(|((a, _), &n)| {
            let p_cond = n / first[a];
            -(n / total) * p_cond.ln()
        })
        .sum();
    assert!(h < 0.1, "bigram conditional entropy {h}");
}

#[test]
fn jsonl_round_trip_is_exact() {
    let t = generate_synthetic_task(&small_spec()).unwrap();
    let mut buf = Vec::new();
    t.dev.write_jsonl(&mut buf).unwrap();
    let back = Dataset::read_jsonl(Split::Dev, buf.as_slice()).unwrap();
    assert_eq!(back, t.dev);
}

#[test]
fn malformed_jsonl_reports_the_line() {
    let good = r#"{"utterance_id":"a","features":[[1.0]],"text":"w00"}"#;
    let input = format!("{good}\n{{not json\n");
    match Dataset::read_jsonl(Split::Train, input.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let ragged = r#"{"utterance_id":"a","features":[[1.0],[1.0,2.0]],"text":"w00"}"#;
    assert!(Dataset::read_jsonl(Split::Train, ragged.as_bytes()).is_err());
}

#[test]
fn text_corpus_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.txt");
    let lines = vec!["w01 w02".to_string(), "w03".to_string()];
    save_text_corpus(&lines, &path).unwrap();
    assert_eq!(load_text_corpus(&path).unwrap(), lines);
}

#[test]
fn tokenization_maps_unknowns_and_appends_eos_on_encode() {
    let vocab = Vocab::from_corpus(["b a a", "c a"]);
    assert_eq!(vocab.tokens()[4..], ["a", "b", "c"]);
    assert_eq!(tokenize(&vocab, "A zz c"), vec![4, UNK, 6]);
    assert_eq!(detokenize(&vocab, &[4, UNK, 6, EOS]), "a c");
    let t = generate_synthetic_task(&small_spec()).unwrap();
    let vocab = Vocab::from_corpus(t.text.iter().map(|s| s.as_str()));
    for ex in t.dev.encode(&vocab) {
        assert_eq!(ex.targets.last(), Some(&EOS));
    }
}

#[test]
fn wer_matches_oracle_on_random_pairs() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for _ in 0..500 {
        let r: Vec<u8> = (0..rng.random_range(1..=8)).map(|_| rng.random_range(0..5)).collect();
        let h: Vec<u8> = (0..rng.random_range(0..=8)).map(|_| rng.random_range(0..5)).collect();
        let report = wer(&r, &h).unwrap();
        assert_eq!(report.errors(), edit_oracle(&r, &h));
        assert_eq!(edit_distance(&r, &h), edit_oracle(&r, &h));
    }
}

fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..=max)
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in seq(8), b in seq(8), c in seq(8)) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y);
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn wer_counts_are_consistent(r in seq(8), h in seq(8)) {
        prop_assume!(!r.is_empty());
        let rep = wer(&r, &h).unwrap();
        // Matches plus substitutions plus deletions cover the reference;
        // matches plus substitutions plus insertions cover the hypothesis.
        prop_assert_eq!(r.len() + rep.insertions, h.len() + rep.deletions);
        prop_assert_eq!(rep.reference_tokens, r.len());
        prop_assert!((rep.wer - rep.errors() as f64 / r.len() as f64).abs() < 1e-15);
        let merged = WerReport::merge([rep, rep]);
        prop_assert_eq!(merged.errors(), 2 * rep.errors());
    }
}
