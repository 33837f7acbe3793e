mod common;

use common::reference::brute_force;
use common::strategies::*;
use proptest::prelude::*;
use seqsleep_core::features::{stft_log_power, NormalizationStats, SplitTag, StftConfig};
use seqsleep_core::inference::{aggregate, argmax, compute_metrics, EvalReport, Fusion};
use seqsleep_core::recordings::*;
use seqsleep_core::{Error, StageLabel};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn canonical_length_invariant(case in canonical_case()) {
        check_canonical_case(case)?;
    }

    #[test]
    fn trim_and_map_commute((standard, tokens) in standard_and_tokens(9), off in 0usize..4, span in 0usize..8) {
        let n = tokens.len();
        let ch = Channel::new("EEG", 100.0, (0..n * 3000).map(|i| i as f64).collect());
        let lights = (Some(off), Some(off + span));
        let with = Hypnogram { tokens: tokens.clone(), standard, epoch_len_s: 30.0, lights_off_epoch: lights.0, lights_on_epoch: lights.1 };
        let without = Hypnogram { lights_off_epoch: None, lights_on_epoch: None, ..with.clone() };
        let trimmed_first = canonicalize("r", "s", std::slice::from_ref(&ch), &with);
        let mapped_first = canonicalize("r", "s", std::slice::from_ref(&ch), &without).map(|mut r| {
            r.lights_off_epoch = lights.0;
            r.lights_on_epoch = lights.1;
            trim_to_in_bed(&r).unwrap()
        });
        match (trimmed_first, mapped_first) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Ok(b)) => prop_assert_eq!(b.n_epochs(), 0),
            (Err(_), Err(_)) => {}
            (Ok(a), Err(e)) => prop_assert!(false, "trimmed {} epochs but mapping failed: {e}", a.n_epochs()),
        }
    }

    #[test]
    fn stage_mapping_is_total((standard, tokens) in standard_and_tokens(40)) {
        let m = map_stages(&tokens, standard).unwrap();
        prop_assert_eq!(m.per_epoch.len(), tokens.len());
        prop_assert_eq!(m.kept.len() + m.excluded.len(), tokens.len());
        prop_assert_eq!(m.kept.len(), m.labels.len());
        for (i, t) in tokens.iter().enumerate() {
            prop_assert_eq!(is_excluded(t), m.excluded.contains(&i));
        }
    }

    #[test]
    fn unknown_token_names_its_index((standard, mut tokens) in standard_and_tokens(20), pos in 0usize..20) {
        let pos = pos % (tokens.len() + 1);
        tokens.insert(pos, "X7".into());
        match map_stages(&tokens, standard) {
            Err(Error::UnknownStage { token, index }) => {
                prop_assert_eq!(token, "X7");
                prop_assert_eq!(index, pos);
            }
            other => prop_assert!(false, "{other:?}"),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn aggregation_idempotent(p in posterior(), copies in 1usize..21) {
        for fusion in [Fusion::Multiplicative, Fusion::Additive] {
            let (q, label) = aggregate(&vec![p; copies], fusion).unwrap();
            for k in 0..5 {
                prop_assert!((q[k] - p[k]).abs() < 1e-12, "{fusion:?} {q:?} vs {p:?}");
            }
            prop_assert_eq!(label.index(), argmax(&p));
        }
    }

    #[test]
    fn aggregation_is_normalized_and_breaks_ties_low(ps in proptest::collection::vec(posterior(), 1..21), swap in 0usize..5) {
        let (q, label) = aggregate(&ps, Fusion::Multiplicative).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(label.index(), argmax(&q));
        // A posterior and its mirror image fuse to a tie between the swapped classes.
        let mut mirror = ps[0];
        mirror.swap(0, swap);
        let (t, tl) = aggregate(&[ps[0], mirror], Fusion::Multiplicative).unwrap();
        prop_assert!((t[0] - t[swap]).abs() < 1e-15);
        if t[0] >= t.iter().copied().fold(0.0, f64::max) {
            prop_assert_eq!(tl, StageLabel::W);
        }
    }

    #[test]
    fn metrics_match_brute_force(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..300)) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let lab = |v: &[usize]| v.iter().map(|&i| StageLabel::ALL[i]).collect::<Vec<_>>();
        let r: EvalReport = compute_metrics(&lab(&truth), &lab(&pred)).unwrap();
        let (acc, mf1, kappa, f1) = brute_force(&truth, &pred);
        prop_assert!((r.accuracy - acc).abs() < 1e-12);
        prop_assert!((r.macro_f1 - mf1).abs() < 1e-12);
        prop_assert!((r.kappa - kappa).abs() < 1e-12, "{} vs {}", r.kappa, kappa);
        for (got, want) in r.per_class_f1.iter().zip(f1) {
            prop_assert!((got - want).abs() < 1e-12);
        }
        let trace: u64 = (0..5).map(|k| r.confusion[k][k]).sum();
        prop_assert_eq!(r.accuracy, trace as f64 / r.n_epochs as f64);
        prop_assert!((-1.0..=1.0).contains(&r.kappa));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stft_shift_covariance(signal in proptest::collection::vec(-1.0f64..1.0, 3100)) {
        let cfg = StftConfig::default();
        let a = stft_log_power(&[&signal[..3000]], &cfg).unwrap();
        let b = stft_log_power(&[&signal[100..3100]], &cfg).unwrap();
        prop_assert_eq!(a.shape(), [29, 129, 1]);
        for t in 0..28 {
            for f in 0..129 {
                prop_assert!((a.at(t + 1, f, 0) - b.at(t, f, 0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalization_round_trip(images in proptest::collection::vec(proptest::collection::vec(-20.0f64..5.0, 3 * 4 * 2), 1..5)) {
        let stats = NormalizationStats::fit(SplitTag::Train, images.iter().map(|v| v.as_slice()), 4, 2).unwrap();
        for im in &images {
            let mut x = im.clone();
            stats.apply_in_place(&mut x).unwrap();
            stats.invert_in_place(&mut x).unwrap();
            for (a, b) in x.iter().zip(im) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        prop_assert!(NormalizationStats::fit(SplitTag::Test, images.iter().map(|v| v.as_slice()), 4, 2).is_err());
    }
}
