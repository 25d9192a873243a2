use biaslab::accept_loop::{accept_batch, Acceptance};
use biaslab::bayes::{bayesian_metric_scores, corrupt_prior, BayesConfig, Prior, PriorSource};
use biaslab::data::{RngSeed, RowId};
use biaslab::experiments::report::{parse_raw_csv, raw_csv};
use biaslab::experiments::{midranks, profit_per_loan, RawRow};
use biaslab::metrics::{
    abr, auc, brier, evaluate, evaluate_weighted, pauc, MetricSpec, Orientation,
};
use proptest::prelude::*;

/// Scores on a coarse grid (to force ties) with both classes present.
fn sample() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    // at least five rows so the default ABR window accepts one at its lower edge
    (5usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..=20).prop_map(|v| v as f64 / 20.0), n),
            prop::collection::vec(0u8..=1, n),
        )
            .prop_map(|(s, mut y)| {
                y[0] = 1;
                y[1] = 0;
                (s, y)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_are_bounded((s, y) in sample()) {
        for m in [MetricSpec::Auc, MetricSpec::Brier, MetricSpec::pauc_default(), MetricSpec::abr_default()] {
            let v = evaluate(&m, &s, &y).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&v), "{m:?} {v}");
        }
    }

    #[test]
    fn full_window_pauc_is_auc((s, y) in sample()) {
        let a = auc(&s, &y).unwrap().value;
        prop_assert!((pauc(&s, &y, [0.0, 1.0]).unwrap().value - a).abs() < 1e-9);
    }

    #[test]
    fn reversing_scores_complements_auc((s, y) in sample()) {
        let r: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let sum = auc(&s, &y).unwrap().value + auc(&r, &y).unwrap().value;
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_metrics_ignore_monotone_transforms((s, y) in sample()) {
        let t: Vec<f64> = s.iter().map(|v| v * v * 0.5 + 0.1).collect();
        prop_assert_eq!(auc(&s, &y).unwrap().value, auc(&t, &y).unwrap().value);
        prop_assert_eq!(
            abr(&s, &y, [0.2, 0.8], 0.05).unwrap().value,
            abr(&t, &y, [0.2, 0.8], 0.05).unwrap().value
        );
    }

    #[test]
    fn unit_and_constant_weights_match_unweighted((s, y) in sample(), c in 0.1f64..50.0) {
        for m in [MetricSpec::Auc, MetricSpec::Brier, MetricSpec::pauc_default(), MetricSpec::abr_default()] {
            let plain = evaluate(&m, &s, &y).unwrap().value;
            let w = vec![c; s.len()];
            let weighted = evaluate_weighted(&m, &s, &y, &w).unwrap().value;
            prop_assert!((plain - weighted).abs() < 1e-9, "{m:?} {plain} {weighted}");
        }
    }

    #[test]
    fn brier_of_labels_is_zero((_s, y) in sample()) {
        let p: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        prop_assert_eq!(brier(&p, &y).unwrap().value, 0.0);
    }

    #[test]
    fn midranks_sum_to_triangular(v in prop::collection::vec((0u8..6).prop_map(f64::from), 1..12)) {
        let m = v.len() as f64;
        for o in [Orientation::LowerBetter, Orientation::HigherBetter] {
            let r = midranks(&v, o);
            prop_assert!((r.iter().sum::<f64>() - m * (m + 1.0) / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rate_acceptance_takes_the_lowest(scores in prop::collection::vec(0.0f64..1.0, 1..200), rate in 0.01f64..1.0) {
        let a = accept_batch(&scores, &Acceptance::Rate { rate });
        let k = a.iter().filter(|&&v| v == 1).count();
        prop_assert_eq!(k, (rate * scores.len() as f64 + 1e-9).floor() as usize);
        let max_in = scores.iter().zip(&a).filter(|p| *p.1 == 1).map(|p| *p.0).fold(f64::MIN, f64::max);
        let min_out = scores.iter().zip(&a).filter(|p| *p.1 == 0).map(|p| *p.0).fold(f64::MAX, f64::min);
        prop_assert!(k == 0 || k == scores.len() || max_in <= min_out);
    }

    #[test]
    fn profit_is_affine_in_pd(a in 1.0f64..1000.0, i in 0.0f64..0.5, lgd in 0.0f64..1.0, p in 0.0f64..1.0, q in 0.0f64..1.0) {
        let mid = profit_per_loan(0.5 * (p + q), a, i, lgd);
        let avg = 0.5 * (profit_per_loan(p, a, i, lgd) + profit_per_loan(q, a, i, lgd));
        prop_assert!((mid - avg).abs() < 1e-9 * a);
    }

    #[test]
    fn corrupted_priors_stay_probabilities(
        q in prop::collection::vec(0.0f64..1.0, 1..50),
        flip in 0.0f64..1.0,
        shift in -1.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let ids = (0..q.len() as u64).map(RowId::new).collect();
        let p = Prior::from_parts(ids, q, PriorSource::Constant).unwrap();
        let c = corrupt_prior(&p, flip, shift, RngSeed::new(seed)).unwrap();
        prop_assert!(c.probs().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(c.ids(), p.ids());
    }

    #[test]
    fn raw_rows_roundtrip(values in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let rows: Vec<RawRow> = values
            .iter()
            .enumerate()
            .map(|(t, &v)| RawRow {
                trial: t,
                group: format!("m{}", t % 3),
                metric: "abr".into(),
                value: v,
                truth: if t % 2 == 0 { Some(v / 3.0) } else { None },
            })
            .collect();
        prop_assert_eq!(parse_raw_csv(&raw_csv(&rows)).unwrap(), rows);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bayesian_metric_is_bounded_and_seeded(
        (sa, ya) in sample(),
        sr in prop::collection::vec(0.0f64..1.0, 1..40),
        q in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let prior = vec![q; sr.len()];
        let cfg = BayesConfig { j_max: 60, seed: RngSeed::new(seed), ..BayesConfig::default() };
        for m in [MetricSpec::Auc, MetricSpec::abr_default()] {
            let a = bayesian_metric_scores(&sa, &ya, &sr, &prior, &m, &cfg).unwrap();
            let b = bayesian_metric_scores(&sa, &ya, &sr, &prior, &m, &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&a.value.value));
            prop_assert_eq!(a.value.value.to_bits(), b.value.value.to_bits());
            prop_assert!(a.diagnostics.iterations <= 60);
        }
    }
}
