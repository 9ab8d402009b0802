//! Per-step entropy, log loss and entropy calibration error.
//!
//! Exact routines marginalize over prefixes by enumeration. The Monte Carlo
//! entropy estimator averages the conditional entropy of each visited prefix
//! (Rao-Blackwellized), which has the same mean as averaging surprisals but
//! lower variance; the surprisal estimator lives in
//! [`crate::calibrate::future_entropy_mc`].

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::model::{sample_categorical, Autoregressive, Tabulate};
use crate::oracle::{prefix_masses, row_entropy};
use crate::seed::derived_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub per_step_entropy: Vec<f64>,
    pub per_step_logloss: Vec<f64>,
    pub total_entropy: f64,
    pub total_logloss: f64,
    /// `|H - L|`, infinite if the log loss is.
    pub ent_ce: f64,
    pub entropy_stderr: Option<Vec<f64>>,
    pub logloss_stderr: Option<Vec<f64>>,
}

impl CalibrationReport {
    pub fn from_steps(per_step_entropy: Vec<f64>, per_step_logloss: Vec<f64>) -> Self {
        let total_entropy = per_step_entropy.iter().sum();
        let total_logloss: f64 = per_step_logloss.iter().sum();
        Self {
            per_step_entropy,
            per_step_logloss,
            total_entropy,
            total_logloss,
            ent_ce: (total_entropy - total_logloss).abs(),
            entropy_stderr: None,
            logloss_stderr: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.per_step_entropy.len()
    }

    /// `ent_ce / T`.
    pub fn ent_ce_per_step(&self) -> f64 {
        self.ent_ce / self.horizon() as f64
    }

    /// CSV `step,entropy_nats,logloss_nats`, then a `total` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,entropy_nats,logloss_nats")?;
        for (t, (h, l)) in self
            .per_step_entropy
            .iter()
            .zip(&self.per_step_logloss)
            .enumerate()
        {
            writeln!(w, "{},{},{}", t + 1, fmt_f64(*h), fmt_f64(*l))?;
        }
        writeln!(
            w,
            "total,{},{}",
            fmt_f64(self.total_entropy),
            fmt_f64(self.total_logloss)
        )?;
        Ok(())
    }
}

/// `H_t`: expected conditional entropy at step `t` over the model's own prefixes.
pub fn entropy_per_step_exact(model: &impl Tabulate) -> Result<Vec<f64>> {
    let model = model.tabulate()?;
    let layout = model.layout();
    let mut out = vec![0.0; layout.horizon()];
    for (prompt, (_, weight)) in model.prompts().iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let masses = prefix_masses(&model, prompt);
        for (level, h) in out.iter_mut().enumerate() {
            for (code, &mass) in masses[level].iter().enumerate() {
                if mass > 0.0 {
                    *h += weight * mass * row_entropy(model.row_at(prompt, level, code));
                }
            }
        }
    }
    Ok(out)
}

/// Per-step estimate with standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Monte Carlo `H_t` from `num_samples` trajectories. One master seed is drawn
/// from `rng`; trajectory `i` uses its own derived generator, so the result
/// does not depend on the thread count.
pub fn entropy_per_step_mc<M, R>(model: &M, num_samples: usize, rng: &mut R) -> Result<McEstimate>
where
    M: Autoregressive + Sync + ?Sized,
    R: Rng + ?Sized,
{
    if num_samples < 2 {
        return Err(Error::domain(
            "Monte Carlo entropy needs at least two samples",
        ));
    }
    let master: u64 = rng.random();
    let horizon = model.horizon();
    let per_traj: Vec<Vec<f64>> = (0..num_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = derived_rng(master, crate::seed::stream::ENTROPY_MC, i);
            let prompt = model.prompts().sample(&mut r);
            let mut seq = Vec::with_capacity(horizon);
            let mut hs = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let row = model.row(prompt, &seq);
                hs.push(row_entropy(&row));
                seq.push(sample_categorical(&row, &mut r));
            }
            hs
        })
        .collect();
    let n = num_samples as f64;
    let mut mean = vec![0.0; horizon];
    let mut stderr = vec![0.0; horizon];
    for t in 0..horizon {
        let m = per_traj.iter().map(|h| h[t]).sum::<f64>() / n;
        let var = per_traj.iter().map(|h| (h[t] - m).powi(2)).sum::<f64>() / (n - 1.0);
        mean[t] = m;
        stderr[t] = (var / n).sqrt();
    }
    Ok(McEstimate { mean, stderr })
}

/// `L_t`: expected `-ln eval(Y_t | Y_<t)` under the true model, exactly.
/// A zero eval probability on true-model support gives `+inf`.
pub fn log_loss_per_step(
    true_model: &impl Tabulate,
    eval_model: &impl Tabulate,
) -> Result<Vec<f64>> {
    let truth = true_model.tabulate()?;
    let eval = eval_model.tabulate()?;
    truth.check_compatible(&eval)?;
    let layout = truth.layout();
    let mut out = vec![0.0; layout.horizon()];
    for (prompt, (_, weight)) in truth.prompts().iter().enumerate() {
        if weight == 0.0 {
            continue;
        }
        let masses = prefix_masses(&truth, prompt);
        for (level, l) in out.iter_mut().enumerate() {
            for (code, &mass) in masses[level].iter().enumerate() {
                if mass > 0.0 {
                    let ce = cross_entropy(
                        truth.row_at(prompt, level, code),
                        eval.row_at(prompt, level, code),
                    );
                    *l += weight * mass * ce;
                }
            }
        }
    }
    Ok(out)
}

/// `-sum_v p(v) ln q(v)` over the support of `p`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| {
            if qv > 0.0 {
                -pv * qv.ln()
            } else {
                f64::INFINITY
            }
        })
        .sum()
}

pub fn ent_ce(true_model: &impl Tabulate, eval_model: &impl Tabulate) -> Result<CalibrationReport> {
    let entropy = entropy_per_step_exact(eval_model)?;
    let logloss = log_loss_per_step(true_model, eval_model)?;
    Ok(CalibrationReport::from_steps(entropy, logloss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TabularModel;
    use crate::oracle::joint_distribution;
    use crate::seed::rng_from_seed;

    fn two_token(p0: f64) -> TabularModel {
        TabularModel::from_fn(2, 1, crate::model::PromptSet::single(), |_, _| {
            vec![p0, 1.0 - p0]
        })
        .unwrap()
    }

    #[test]
    fn entropy_of_simple_models() {
        let u = TabularModel::uniform(3, 4).unwrap();
        for h in entropy_per_step_exact(&u).unwrap() {
            assert!((h - 3f64.ln()).abs() < 1e-12);
        }
        let f = TabularModel::forced(3, &[0, 2, 1]).unwrap();
        assert_eq!(entropy_per_step_exact(&f).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn entropy_steps_match_joint_decomposition() {
        // Oracle: for each of the 4 sequences, -p(s) ln p(s_t | s_<t), summed per step.
        let m = TabularModel::random(2, 2, 1.0, 7).unwrap();
        let j = joint_distribution(&m, 0).unwrap();
        let mut oracle = [0.0; 2];
        for code in 0..4 {
            let s = j.sequence(code);
            let p = j.probs()[code];
            oracle[0] -= p * m.conditional_at(0, &[]).unwrap()[s[0]].ln();
            oracle[1] -= p * m.conditional_at(0, &s[..1]).unwrap()[s[1]].ln();
        }
        let h = entropy_per_step_exact(&m).unwrap();
        assert!((h[0] - oracle[0]).abs() < 1e-10);
        assert!((h[1] - oracle[1]).abs() < 1e-10);
        assert!((h.iter().sum::<f64>() - j.entropy()).abs() < 1e-9);
    }

    #[test]
    fn log_loss_cases() {
        let truth = TabularModel::random(3, 3, 1.0, 1).unwrap();
        let h = entropy_per_step_exact(&truth).unwrap();
        let l = log_loss_per_step(&truth, &truth).unwrap();
        for (a, b) in h.iter().zip(&l) {
            assert!((a - b).abs() < 1e-12);
        }
        let u = TabularModel::uniform(3, 3).unwrap();
        for l in log_loss_per_step(&truth, &u).unwrap() {
            assert!((l - 3f64.ln()).abs() < 1e-12);
        }
        let l = log_loss_per_step(&two_token(0.5), &two_token(0.9)).unwrap();
        let expected = 0.5 * (-(0.9f64).ln() - (0.1f64).ln());
        assert!((l[0] - expected).abs() < 1e-12);
        assert!((l[0] - 1.2040).abs() < 1e-4);
    }

    #[test]
    fn zero_eval_probability_gives_infinite_loss() {
        let truth = TabularModel::uniform(2, 2).unwrap();
        let forced = TabularModel::forced(2, &[1, 1]).unwrap();
        let report = ent_ce(&truth, &forced).unwrap();
        assert_eq!(report.total_logloss, f64::INFINITY);
        assert_eq!(report.ent_ce, f64::INFINITY);
    }

    #[test]
    fn ent_ce_cases() {
        let truth = TabularModel::random(3, 3, 1.0, 3).unwrap();
        assert!(ent_ce(&truth, &truth).unwrap().ent_ce < 1e-10);
        let u = TabularModel::uniform(3, 3).unwrap();
        let r = ent_ce(&truth, &u).unwrap();
        assert!(r.ent_ce < 1e-12);

        let r = ent_ce(&two_token(0.5), &two_token(0.9)).unwrap();
        let h = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        let l = 0.5 * (-(0.9f64).ln() - (0.1f64).ln());
        assert!((r.total_entropy - h).abs() < 1e-12);
        assert!((r.total_logloss - l).abs() < 1e-12);
        assert!((r.ent_ce - (l - h)).abs() < 1e-12);
        assert!((r.total_entropy - 0.3251).abs() < 1e-4);
        assert!((r.ent_ce - 0.8789).abs() < 1e-4);
    }

    #[test]
    fn report_totals_and_gibbs() {
        for seed in 0..10 {
            let truth = TabularModel::random(3, 3, 0.8, seed).unwrap();
            let eval = TabularModel::random(3, 3, 0.8, seed + 100).unwrap();
            let r = ent_ce(&truth, &eval).unwrap();
            assert!((r.total_entropy - r.per_step_entropy.iter().sum::<f64>()).abs() < 1e-9);
            assert!((r.ent_ce - (r.total_entropy - r.total_logloss).abs()).abs() <= 1e-12);
            let h_true: f64 = entropy_per_step_exact(&truth).unwrap().iter().sum();
            assert!(r.total_logloss - h_true >= -1e-10);
            assert!(r.per_step_entropy.iter().all(|&h| h >= 0.0));
        }
    }

    #[test]
    fn incompatible_models_are_rejected() {
        let a = TabularModel::uniform(2, 2).unwrap();
        let b = TabularModel::uniform(3, 2).unwrap();
        assert!(matches!(
            log_loss_per_step(&a, &b),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn mc_entropy_deterministic_and_uniform() {
        let f = TabularModel::forced(3, &[0, 2, 1]).unwrap();
        let est = entropy_per_step_mc(&f, 100, &mut rng_from_seed(1)).unwrap();
        assert_eq!(est.mean, vec![0.0; 3]);
        assert_eq!(est.stderr, vec![0.0; 3]);

        // The Rao-Blackwellized estimator is exact for uniform rows (zero variance).
        let u = TabularModel::uniform(2, 2).unwrap();
        let est = entropy_per_step_mc(&u, 10_000, &mut rng_from_seed(1)).unwrap();
        for (m, se) in est.mean.iter().zip(&est.stderr) {
            assert!((m - 2f64.ln()).abs() <= 3.0 * se + 1e-12);
        }
        assert!(entropy_per_step_mc(&u, 1, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn mc_entropy_matches_exact() {
        let m = TabularModel::random(3, 4, 0.5, 17).unwrap();
        let exact = entropy_per_step_exact(&m).unwrap();
        let est = entropy_per_step_mc(&m, 10_000, &mut rng_from_seed(5)).unwrap();
        for t in 0..4 {
            assert!(
                (est.mean[t] - exact[t]).abs() <= 4.0 * est.stderr[t] + 1e-12,
                "step {t}"
            );
        }
    }

    #[test]
    fn mc_entropy_independent_of_thread_count() {
        let m = TabularModel::random(3, 3, 1.0, 2).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| entropy_per_step_mc(&m, 2000, &mut rng_from_seed(9)).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn csv_layout() {
        let r = CalibrationReport::from_steps(vec![0.5, 0.25], vec![1.0, 0.5]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "step,entropy_nats,logloss_nats");
        assert_eq!(lines[1], "1,5.0000000000000000e-1,1.0000000000000000e0");
        assert_eq!(lines[3], "total,7.5000000000000000e-1,1.5000000000000000e0");
    }
}
