//! Randomized invariants over the decoder, scoring, and metric helpers.

use proptest::prelude::*;
use rlm_core::decoder::{sequence_score, transfer, DecodeFlags, ScoringModel};
use rlm_core::metrics::{corpus_bleu, geometric_mean, sentence_bleu};
use rlm_core::oracle::StubModel;
use rlm_core::vocab::Vocab;

fn source_strategy(v: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(Vocab::RESERVED..v, 1..=5)
}

fn flags_strategy(v: usize) -> impl Strategy<Value = DecodeFlags> {
    (1..=v, any::<bool>(), any::<bool>(), 2..=4usize).prop_map(|(k, del, ins, cap)| DecodeFlags {
        top_k: k,
        allow_delete: del,
        allow_insert: ins,
        max_insert: if ins { cap } else { 1 },
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alignment_is_monotone_and_complete(
        seed in 0u64..1000,
        v in 6usize..=12,
        x in source_strategy(12),
        style in 0usize..2,
    ) {
        let x: Vec<usize> = x.into_iter().filter(|&t| t < v).collect();
        prop_assume!(!x.is_empty());
        let stub = StubModel::random(v, 2, seed);
        let flags = DecodeFlags::default();
        let out = transfer(&stub, &x, style, &flags).unwrap();
        prop_assert_eq!(out.alignment.len(), x.len() + 1);
        prop_assert_eq!(out.alignment[0], 0);
        prop_assert_eq!(*out.alignment.last().unwrap(), out.y.len());
        for w in out.alignment.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn decode_score_matches_independent_rescoring(
        seed in 0u64..1000,
        v in 6usize..=12,
        x in source_strategy(12),
        style in 0usize..2,
        flags in flags_strategy(12),
    ) {
        let x: Vec<usize> = x.into_iter().filter(|&t| t < v).collect();
        prop_assume!(!x.is_empty());
        let flags = DecodeFlags { top_k: flags.top_k.min(v), ..flags };
        let stub = StubModel::random(v, 2, seed);
        let out = transfer(&stub, &x, style, &flags).unwrap();
        let rescored = sequence_score(&stub, &x, &out.y, &out.alignment, style, &flags).unwrap();
        prop_assert!((rescored - out.log_score).abs() < 1e-9);
        let oracle = rlm_core::oracle::independent_score(
            &stub, &x, &out.y, &out.alignment, style, &flags,
        ).unwrap();
        prop_assert!((oracle - out.log_score).abs() < 1e-9);
    }

    #[test]
    fn equal_length_flags_replace_in_place(
        seed in 0u64..1000,
        v in 6usize..=12,
        x in source_strategy(12),
        style in 0usize..2,
        k in 1usize..=4,
    ) {
        let x: Vec<usize> = x.into_iter().filter(|&t| t < v).collect();
        prop_assume!(!x.is_empty());
        let stub = StubModel::random(v, 2, seed);
        let out = transfer(&stub, &x, style, &DecodeFlags::equal_length(k)).unwrap();
        prop_assert_eq!(out.y.len(), x.len());
        for (i, &a) in out.alignment.iter().enumerate() {
            prop_assert_eq!(a, i);
        }
    }

    #[test]
    fn transfer_is_deterministic(
        seed in 0u64..1000,
        v in 6usize..=12,
        x in source_strategy(12),
        style in 0usize..2,
        flags in flags_strategy(12),
    ) {
        let x: Vec<usize> = x.into_iter().filter(|&t| t < v).collect();
        prop_assume!(!x.is_empty());
        let flags = DecodeFlags { top_k: flags.top_k.min(v), ..flags };
        let stub = StubModel::random(v, 2, seed);
        let a = transfer(&stub, &x, style, &flags).unwrap();
        let b = transfer(&stub, &x, style, &flags).unwrap();
        prop_assert_eq!(a.y, b.y);
        prop_assert_eq!(a.alignment, b.alignment);
        prop_assert_eq!(a.log_score.to_bits(), b.log_score.to_bits());
    }

    #[test]
    fn stub_distributions_are_normalized(
        seed in 0u64..1000,
        v in 6usize..=16,
        prefix in prop::collection::vec(4usize..16, 0..4),
        suffix in prop::collection::vec(4usize..16, 0..4),
        style in 0usize..2,
    ) {
        let prefix: Vec<usize> = prefix.into_iter().filter(|&t| t < v).collect();
        let suffix: Vec<usize> = suffix.into_iter().filter(|&t| t < v).collect();
        let stub = StubModel::random(v, 2, seed);
        let p = stub.prediction(&prefix, &suffix, style).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&q| q >= 0.0));
        let [m, d] = stub.insertion(&prefix, &suffix, style).unwrap();
        prop_assert!((m + d - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_bounds_and_identity(
        toks in prop::collection::vec("[a-d]{1,3}", 1..8),
        other in prop::collection::vec("[a-d]{1,3}", 1..8),
    ) {
        let perfect = sentence_bleu(&toks, &[toks.clone()]);
        prop_assert!((perfect - 100.0).abs() < 1e-9);
        let s = sentence_bleu(&other, &[toks.clone()]);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
        // an extra reference equal to the hypothesis can only help
        let boosted = sentence_bleu(&other, &[toks, other.clone()]);
        prop_assert!(boosted + 1e-9 >= s);
    }

    #[test]
    fn corpus_bleu_matches_order_of_magnitude(
        n in 1usize..4,
    ) {
        let hyps: Vec<Vec<String>> = (0..n)
            .map(|i| vec![format!("w{i}"), "x".into(), "y".into(), "z".into()])
            .collect();
        let refs: Vec<Vec<Vec<String>>> = hyps.iter().map(|h| vec![h.clone()]).collect();
        let b = corpus_bleu(&hyps, &refs).unwrap();
        prop_assert!((b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn geometric_mean_sits_between_extremes(
        vals in prop::collection::vec(0.01f64..100.0, 1..6),
    ) {
        let g = geometric_mean(&vals);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(0.0f64, f64::max);
        prop_assert!(g >= lo - 1e-9 && g <= hi + 1e-9);
        let mut with_zero = vals;
        with_zero.push(0.0);
        prop_assert_eq!(geometric_mean(&with_zero), 0.0);
    }
}
