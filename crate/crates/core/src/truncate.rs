//! Row-wise decoding transforms (temperature, top-k, top-p, min-p) and the
//! entropy/log-loss tradeoff they trace out.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::metrics::{ent_ce, CalibrationReport};
use crate::model::{PromptSet, TabularModel};
use crate::seed::{derived_rng, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "kebab-case")]
pub enum TruncationRule {
    Temperature(f64),
    TopK(usize),
    TopP(f64),
    MinP(f64),
}

impl TruncationRule {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let ok = match *self {
            Self::Temperature(tau) => tau.is_finite() && tau > 0.0,
            Self::TopK(k) => k >= 1 && k <= vocab_size,
            Self::TopP(p) => p > 0.0 && p <= 1.0,
            Self::MinP(r) => (0.0..=1.0).contains(&r),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "invalid rule {self} for vocabulary size {vocab_size}"
            )))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Temperature(_) => "temperature",
            Self::TopK(_) => "top-k",
            Self::TopP(_) => "top-p",
            Self::MinP(_) => "min-p",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            Self::Temperature(x) | Self::TopP(x) | Self::MinP(x) => x,
            Self::TopK(k) => k as f64,
        }
    }

    fn is_identity(&self, vocab_size: usize) -> bool {
        match *self {
            Self::Temperature(tau) => tau == 1.0,
            Self::TopK(k) => k >= vocab_size,
            Self::TopP(p) => p >= 1.0,
            Self::MinP(r) => r == 0.0,
        }
    }
}

impl fmt::Display for TruncationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::TopK(k) => write!(f, "top-k({k})"),
            _ => write!(f, "{}({})", self.name(), self.param()),
        }
    }
}

/// Token indices by descending probability, lower index first on ties.
fn descending_order(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

fn keep_and_renormalize(row: &[f64], keep: impl Fn(usize) -> bool) -> Vec<f64> {
    let total: f64 = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| keep(i))
        .map(|(_, p)| p)
        .sum();
    row.iter()
        .enumerate()
        .map(|(i, &p)| if keep(i) { p / total } else { 0.0 })
        .collect()
}

/// Applies `rule` to one next-token distribution.
pub fn truncate_row(row: &[f64], rule: TruncationRule) -> Result<Vec<f64>> {
    let v = row.len();
    rule.validate(v)?;
    if rule.is_identity(v) {
        return Ok(row.to_vec());
    }
    let out = match rule {
        TruncationRule::Temperature(tau) => {
            let max = row.iter().copied().fold(0.0, f64::max).ln();
            let powered: Vec<f64> = row
                .iter()
                .map(|&p| {
                    if p > 0.0 {
                        ((p.ln() - max) / tau).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let z: f64 = powered.iter().sum();
            powered.iter().map(|x| x / z).collect()
        }
        TruncationRule::TopK(k) => {
            let order = descending_order(row);
            let mut keep = vec![false; v];
            for &i in &order[..k] {
                keep[i] = true;
            }
            keep_and_renormalize(row, |i| keep[i])
        }
        TruncationRule::TopP(p) => {
            let order = descending_order(row);
            let mut keep = vec![false; v];
            let mut acc = 0.0;
            for &i in &order {
                keep[i] = true;
                acc += row[i];
                if acc >= p {
                    break;
                }
            }
            keep_and_renormalize(row, |i| keep[i])
        }
        TruncationRule::MinP(r) => {
            let threshold = r * row.iter().copied().fold(0.0, f64::max);
            keep_and_renormalize(row, |i| row[i] >= threshold && row[i] > 0.0)
        }
    };
    Ok(out)
}

/// Applies `rule` to every row of `model`.
pub fn truncated_model(model: &TabularModel, rule: TruncationRule) -> Result<TabularModel> {
    rule.validate(model.layout().vocab_size())?;
    model.map_rows(|row| truncate_row(row, rule).expect("rule validated"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TradeoffPoint {
    pub rule: TruncationRule,
    pub report: CalibrationReport,
}

impl TradeoffPoint {
    pub fn ent_ce_per_step(&self) -> f64 {
        self.report.ent_ce_per_step()
    }

    pub fn total_logloss(&self) -> f64 {
        self.report.total_logloss
    }

    pub fn total_entropy(&self) -> f64 {
        self.report.total_entropy
    }
}

/// Exact calibration report of the base model under each rule.
pub fn tradeoff_curve(
    true_model: &TabularModel,
    base_model: &TabularModel,
    rules: &[TruncationRule],
) -> Result<Vec<TradeoffPoint>> {
    true_model.check_compatible(base_model)?;
    rules
        .iter()
        .map(|&rule| {
            let m = truncated_model(base_model, rule)?;
            Ok(TradeoffPoint {
                rule,
                report: ent_ce(true_model, &m)?,
            })
        })
        .collect()
}

/// CSV `rule,param,entce_per_step,total_logloss,total_entropy`.
pub fn write_tradeoff_csv<W: Write>(points: &[TradeoffPoint], mut w: W) -> Result<()> {
    writeln!(w, "rule,param,entce_per_step,total_logloss,total_entropy")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.rule.name(),
            fmt_f64(p.rule.param()),
            fmt_f64(p.ent_ce_per_step()),
            fmt_f64(p.total_logloss()),
            fmt_f64(p.total_entropy())
        )?;
    }
    Ok(())
}

/// A true model with Dirichlet(1) rows and a base model whose every row is
/// temperature-balanced against the true row: `E_true[ln p] = E_p[ln p]`, so
/// per-row cross-entropy is minimized at temperature 1. Pairs are redrawn
/// until the base entropy exceeds the base log loss.
///
/// Returns the pair and the number of draws used.
pub fn tradeoff_instance(
    vocab_size: usize,
    horizon: usize,
    seed: u64,
) -> Result<(TabularModel, TabularModel, usize)> {
    const MAX_DRAWS: usize = 1000;
    for draw in 0..MAX_DRAWS {
        let truth = TabularModel::random(
            vocab_size,
            horizon,
            1.0,
            crate::seed::derive_seed(seed, stream::INSTANCE_TRUE, draw as u64),
        )?;
        let mut rng = derived_rng(seed, stream::INSTANCE_BASE, draw as u64);
        let gamma = Gamma::new(1.0, 1.0).expect("valid shape");
        let layout = truth.layout().clone();
        let base = TabularModel::from_fn(
            vocab_size,
            horizon,
            PromptSet::single(),
            |prompt, prefix| {
                let target = truth.row_at(prompt, prefix.len(), layout.encode(prefix));
                loop {
                    if let Some(row) =
                        balanced_row(target, &dirichlet(vocab_size, &gamma, &mut rng))
                    {
                        break row;
                    }
                }
            },
        )?;
        let report = ent_ce(&truth, &base)?;
        if report.total_entropy > report.total_logloss {
            return Ok((truth, base, draw + 1));
        }
    }
    Err(Error::domain(format!(
        "no instance with entropy above log loss in {MAX_DRAWS} draws"
    )))
}

fn dirichlet<R: Rng + ?Sized>(v: usize, gamma: &Gamma<f64>, rng: &mut R) -> Vec<f64> {
    let g: Vec<f64> = (0..v).map(|_| gamma.sample(rng)).collect();
    let total: f64 = g.iter().sum();
    g.iter().map(|x| x / total).collect()
}

/// `r^b / Z` with `b > 0` chosen so that `E_target[ln r] = E_{r^b/Z}[ln r]`,
/// or `None` if no such `b` exists.
fn balanced_row(target: &[f64], r: &[f64]) -> Option<Vec<f64>> {
    if r.iter().any(|&x| !(x > 0.0)) {
        return None;
    }
    let lr: Vec<f64> = r.iter().map(|x| x.ln()).collect();
    let goal: f64 = target.iter().zip(&lr).map(|(p, l)| p * l).sum();
    let tilt = |b: f64| {
        let max = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lr.iter().map(|l| (b * (l - max)).exp()).collect();
        let z: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|x| x / z).collect();
        let mean = probs.iter().zip(&lr).map(|(p, l)| p * l).sum::<f64>();
        (probs, mean)
    };
    let uniform_mean = lr.iter().sum::<f64>() / lr.len() as f64;
    let top = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Keep away from the endpoints so the exponent stays moderate.
    if goal <= uniform_mean + 1e-9 || goal >= top - 1e-9 {
        return None;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while tilt(hi).1 < goal {
        hi *= 2.0;
        if hi > 64.0 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tilt(mid).1 < goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (probs, _) = tilt(0.5 * (lo + hi));
    probs.iter().all(|&p| p > 0.0).then_some(probs)
}

/// The standard temperature sweep `1.0, 0.95, 0.9, 0.85, 0.8`.
pub fn default_temperature_sweep() -> Vec<TruncationRule> {
    [1.0, 0.95, 0.9, 0.85, 0.8]
        .into_iter()
        .map(TruncationRule::Temperature)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{cross_entropy, log_loss_per_step};
    use crate::oracle::row_entropy;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn worked_examples() {
        let row = [0.5, 0.3, 0.2];
        assert!(close(
            &truncate_row(&row, TruncationRule::TopP(0.7)).unwrap(),
            &[0.625, 0.375, 0.0],
            1e-15
        ));
        assert!(close(
            &truncate_row(&row, TruncationRule::MinP(0.5)).unwrap(),
            &[0.625, 0.375, 0.0],
            1e-15
        ));
        assert!(close(
            &truncate_row(&row, TruncationRule::TopK(1)).unwrap(),
            &[1.0, 0.0, 0.0],
            0.0
        ));
        let t = truncate_row(&row, TruncationRule::Temperature(0.5)).unwrap();
        let z = 0.25 + 0.09 + 0.04;
        assert!(close(&t, &[0.25 / z, 0.09 / z, 0.04 / z], 1e-15));
    }

    #[test]
    fn identity_settings() {
        let row = [0.1, 0.6, 0.3];
        for rule in [
            TruncationRule::Temperature(1.0),
            TruncationRule::TopK(3),
            TruncationRule::TopP(1.0),
            TruncationRule::MinP(0.0),
        ] {
            assert!(
                close(&truncate_row(&row, rule).unwrap(), &row, 1e-12),
                "{rule}"
            );
        }
    }

    #[test]
    fn ties_break_to_lower_index() {
        let row = [0.25, 0.25, 0.25, 0.25];
        assert_eq!(
            truncate_row(&row, TruncationRule::TopK(2)).unwrap(),
            vec![0.5, 0.5, 0.0, 0.0]
        );
        assert_eq!(
            truncate_row(&row, TruncationRule::TopP(0.5)).unwrap(),
            vec![0.5, 0.5, 0.0, 0.0]
        );
    }

    #[test]
    fn invalid_rules() {
        let row = [0.5, 0.5];
        for rule in [
            TruncationRule::Temperature(0.0),
            TruncationRule::TopK(0),
            TruncationRule::TopK(3),
            TruncationRule::TopP(0.0),
            TruncationRule::TopP(1.5),
            TruncationRule::MinP(-0.1),
            TruncationRule::MinP(1.1),
        ] {
            assert!(truncate_row(&row, rule).is_err(), "{rule}");
        }
    }

    #[test]
    fn rule_config_round_trip() {
        let rules = vec![
            TruncationRule::Temperature(0.9),
            TruncationRule::TopK(2),
            TruncationRule::MinP(0.1),
        ];
        let json = serde_json::to_string(&rules).unwrap();
        assert_eq!(
            json,
            r#"[{"kind":"temperature","param":0.9},{"kind":"top-k","param":2},{"kind":"min-p","param":0.1}]"#
        );
        assert_eq!(
            serde_json::from_str::<Vec<TruncationRule>>(&json).unwrap(),
            rules
        );
    }

    #[test]
    fn model_level_examples() {
        let m = TabularModel::random(3, 3, 1.0, 1).unwrap();
        assert_eq!(
            truncated_model(&m, TruncationRule::Temperature(1.0)).unwrap(),
            m
        );
        let f = TabularModel::forced(3, &[1, 2, 0]).unwrap();
        for rule in [
            TruncationRule::Temperature(0.5),
            TruncationRule::TopK(1),
            TruncationRule::TopP(0.3),
            TruncationRule::MinP(0.9),
        ] {
            assert_eq!(truncated_model(&f, rule).unwrap(), f);
        }
        let cooled = truncated_model(&m, TruncationRule::Temperature(0.8)).unwrap();
        let layout = m.layout();
        for level in 0..3 {
            for code in 0..layout.width(level) {
                assert!(
                    row_entropy(cooled.row_at(0, level, code))
                        <= row_entropy(m.row_at(0, level, code)) + 1e-12
                );
            }
        }
    }

    #[test]
    fn tradeoff_identity_matches_base_report() {
        let truth = TabularModel::random(3, 3, 1.0, 2).unwrap();
        let base = TabularModel::random(3, 3, 1.0, 3).unwrap();
        let pts = tradeoff_curve(&truth, &base, &[TruncationRule::Temperature(1.0)]).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].report, ent_ce(&truth, &base).unwrap());
        let mut buf = Vec::new();
        write_tradeoff_csv(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("rule,param,entce_per_step,total_logloss,total_entropy\ntemperature,1.0000000000000000e0,"));
    }

    #[test]
    fn hard_truncation_of_support_gives_infinite_loss() {
        let truth = TabularModel::uniform(3, 2).unwrap();
        let base = TabularModel::random(3, 2, 1.0, 4).unwrap();
        let pts = tradeoff_curve(&truth, &base, &[TruncationRule::TopK(1)]).unwrap();
        assert_eq!(pts[0].total_logloss(), f64::INFINITY);
    }

    #[test]
    fn balanced_rows_are_stationary_in_temperature() {
        let (truth, base, _) = tradeoff_instance(4, 3, 7).unwrap();
        let layout = truth.layout();
        for level in 0..3 {
            for code in 0..layout.width(level) {
                let (p, q) = (truth.row_at(0, level, code), base.row_at(0, level, code));
                let lhs: f64 = p.iter().zip(q).map(|(a, b)| a * b.ln()).sum();
                let rhs: f64 = q.iter().map(|b| b * b.ln()).sum();
                assert!((lhs - rhs).abs() < 1e-10);
                assert!((cross_entropy(p, q) - row_entropy(q)).abs() < 1e-10);
            }
        }
        let r = ent_ce(&truth, &base).unwrap();
        assert!(r.total_entropy > r.total_logloss);
    }

    #[test]
    fn temperature_sweep_on_balanced_instances() {
        for seed in 0..5 {
            let (truth, base, _) = tradeoff_instance(4, 3, seed).unwrap();
            let pts = tradeoff_curve(&truth, &base, &default_temperature_sweep()).unwrap();
            for w in pts.windows(2) {
                assert!(w[1].total_logloss() >= w[0].total_logloss() - 1e-12);
            }
        }
    }

    #[test]
    fn hard_truncation_increases_loss_against_full_support_truth() {
        for seed in 0..10 {
            let truth = TabularModel::random(3, 2, 1.0, seed).unwrap();
            let base = TabularModel::random(3, 2, 1.0, seed + 100).unwrap();
            let l0: f64 = log_loss_per_step(&truth, &base).unwrap().iter().sum();
            for rule in [
                TruncationRule::TopK(2),
                TruncationRule::TopP(0.8),
                TruncationRule::MinP(0.3),
            ] {
                let l: f64 = log_loss_per_step(&truth, &truncated_model(&base, rule).unwrap())
                    .unwrap()
                    .iter()
                    .sum();
                assert!(l >= l0 - 1e-12, "seed {seed} {rule}");
            }
        }
    }

    fn row_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..8).prop_filter_map("positive mass", |w| {
            let total: f64 = w.iter().sum();
            (total > 1e-6).then(|| w.iter().map(|x| x / total).collect())
        })
    }

    fn rule_strategy() -> impl Strategy<Value = (f64, usize, f64, f64)> {
        (0.05f64..=1.0, 1usize..8, 0.01f64..=1.0, 0.0f64..=1.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn truncation_never_raises_row_entropy(row in row_strategy(), (tau, k, p, r) in rule_strategy()) {
            let h = row_entropy(&row);
            let rules = [
                TruncationRule::Temperature(tau),
                TruncationRule::TopK(k.min(row.len())),
                TruncationRule::TopP(p),
                TruncationRule::MinP(r),
            ];
            for rule in rules {
                let out = truncate_row(&row, rule).unwrap();
                prop_assert!((out.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row_entropy(&out) <= h + 1e-12, "{} on {:?}", rule, row);
            }
        }
    }
}
