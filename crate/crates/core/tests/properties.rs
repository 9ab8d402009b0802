//! Randomized invariants across modules.

use proptest::prelude::*;

use entcal::analysis::{exponential_smooth, fit_loglog};
use entcal::calibrate::{
    future_entropy_scaling, swap_terms, verify_theorem, AdjustedModel, CalibrationConfig,
    FutureEntropyPredictor,
};
use entcal::metrics::{ent_ce, entropy_per_step_exact};
use entcal::oracle::{
    future_entropy_naive, future_entropy_table, global_temperature_model, joint_distribution,
};
use entcal::powerlaw::DerailConfig;
use entcal::{Prompt, TabularModel};

fn small_shape() -> impl Strategy<Value = (usize, usize)> {
    (2usize..=4, 1usize..=3)
}

fn pair(v: usize, t: usize, seed: u32) -> (TabularModel, TabularModel) {
    (
        TabularModel::random(v, t, 1.0, 2 * u64::from(seed)).unwrap(),
        TabularModel::random(v, t, 1.0, 2 * u64::from(seed) + 1).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_and_sequences_are_normalized((v, t) in small_shape(), conc in 0.05f64..5.0, seed in any::<u64>()) {
        let m = TabularModel::random(v, t, conc, seed).unwrap();
        let layout = m.layout().clone();
        for level in 0..t {
            for code in 0..layout.width(level) {
                let s: f64 = m.row_at(0, level, code).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
        let total: f64 = (0..layout.width(t))
            .map(|code| m.sequence_logprob(0, &layout.decode(t, code)).unwrap().exp())
            .sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn recursion_matches_enumeration((v, t) in small_shape(), seed in any::<u64>()) {
        let m = TabularModel::random(v, t, 0.5, seed).unwrap();
        let table = future_entropy_table(&m).unwrap();
        let layout = m.layout().clone();
        for level in 0..=t {
            for code in 0..layout.width(level) {
                let prefix = layout.decode(level, code);
                let naive = future_entropy_naive(&m, 0, &prefix).unwrap();
                prop_assert!((table.get(0, &prefix) - naive).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn global_temperature_zero_is_identity((v, t) in small_shape(), seed in any::<u64>()) {
        let m = TabularModel::random(v, t, 1.0, seed).unwrap();
        let joint = joint_distribution(&m, 0).unwrap();
        let tempered = global_temperature_model(&m, 0, 0.0).unwrap();
        for (a, b) in joint.probs().iter().zip(tempered.probs()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn entropy_chain_rule_and_gibbs((v, t) in small_shape(), seed in any::<u32>()) {
        let (truth, eval) = pair(v, t, seed);
        let per_step = entropy_per_step_exact(&truth).unwrap();
        let joint = joint_distribution(&truth, 0).unwrap();
        prop_assert!((per_step.iter().sum::<f64>() - joint.entropy()).abs() <= 1e-9);
        let report = ent_ce(&truth, &eval).unwrap();
        let own = ent_ce(&truth, &truth).unwrap();
        prop_assert!(report.total_logloss >= own.total_entropy - 1e-10);
        prop_assert!(own.ent_ce <= 1e-10);
    }

    #[test]
    fn zero_alphas_ignore_predictors((v, t) in (2usize..=4, 2usize..=3), seed in any::<u32>()) {
        let (truth, base) = pair(v, t, seed);
        let mut adj = AdjustedModel::new(base.clone());
        let table = future_entropy_table(&truth).unwrap();
        for s in 2..=t {
            adj.set_predictor(FutureEntropyPredictor::exact_oracle(s, &table, 1)).unwrap();
        }
        let layout = base.layout().clone();
        for level in 0..t {
            for code in 0..layout.width(level) {
                let prefix = layout.decode(level, code);
                let a = adj.conditional(0, &prefix).unwrap();
                let b = base.conditional(&Prompt::empty(), &prefix).unwrap();
                for (x, y) in a.iter().zip(b) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exact_predictors_meet_the_bound(v in 3usize..=4, t in 3usize..=4, seed in any::<u32>()) {
        let (truth, base) = pair(v, t, seed);
        let config = CalibrationConfig::default();
        let run = future_entropy_scaling(&truth, &base, &config).unwrap();
        let check = verify_theorem(&truth, &base, &run.adjusted, 0.0, config.epsilon).unwrap();
        prop_assert!(check.passed(), "{check:?}");

        let trace = run.logloss_trace();
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-10, "{trace:?}");
        }

        for term in swap_terms(&truth, &run.adjusted).unwrap() {
            let limit = (1.0 + run.adjusted.alpha(term.t)) * config.epsilon + 1e-6;
            prop_assert!(term.gap().abs() <= limit, "step {}: gap {}", term.t, term.gap());
        }
    }

    #[test]
    fn derailing_curve_stays_below_its_linearization(
        q in 1e-5f64..0.5,
        bump in 0.1f64..5.0,
        length in 1usize..400,
    ) {
        let cfg = DerailConfig { base_entropy: 1.0, entropy_bump: bump, derail_prob: q, length };
        for (i, h) in cfg.expected_curve().iter().enumerate() {
            let t = (i + 1) as f64;
            prop_assert!(*h <= 1.0 + q * t * bump + 1e-12);
            prop_assert!(*h >= 1.0);
        }
    }

    #[test]
    fn loglog_fit_is_scale_equivariant(
        slope in -3.0f64..3.0,
        scale in 1e-3f64..1e3,
        noise in prop::collection::vec(-0.2f64..0.2, 8),
    ) {
        let xs: Vec<f64> = (1..=8).map(|i| (i * i) as f64).collect();
        let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| x.powf(slope) * e.exp()).collect();
        let scaled: Vec<f64> = ys.iter().map(|y| y * scale).collect();
        let a = fit_loglog(&xs, &ys).unwrap();
        let b = fit_loglog(&xs, &scaled).unwrap();
        prop_assert!((a.slope - b.slope).abs() <= 1e-10);
        prop_assert!((b.intercept - a.intercept - scale.log10()).abs() <= 1e-10);
    }

    #[test]
    fn smoothing_stays_within_the_running_range(
        series in prop::collection::vec(-10.0f64..10.0, 1..50),
        factor in 0.01f64..=1.0,
    ) {
        let smooth = exponential_smooth(&series, factor).unwrap();
        prop_assert_eq!(smooth[0], series[0]);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in series.iter().zip(&smooth) {
            lo = lo.min(*x);
            hi = hi.max(*x);
            prop_assert!(*y >= lo - 1e-12 && *y <= hi + 1e-12);
        }
    }
}
