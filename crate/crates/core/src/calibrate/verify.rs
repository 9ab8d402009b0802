//! Exact checks of the calibration guarantee and of the two facts the
//! backward loop relies on.

use crate::error::{Error, Result};
use crate::metrics::{ent_ce, log_loss_per_step};
use crate::model::TabularModel;
use crate::oracle::{future_entropy_table, prefix_logprobs, prefix_masses, FutureEntropyTable};

use super::objective::{logloss_gradient_alpha, StepObjective, ALPHA_FLOOR};
use super::{AdjustedModel, FutureEntropyPredictor};

/// Absolute slack on the calibration inequality.
pub const ENTCE_SLACK: f64 = 1e-6;
/// Absolute slack on the log-loss inequality.
pub const LOGLOSS_SLACK: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremCheck {
    /// `L - H` of the adjusted model.
    pub signed_ent_ce: f64,
    pub ent_ce: f64,
    pub delta: f64,
    /// `2 T delta + sum_t (1 + alpha_t) epsilon`.
    pub bound: f64,
    pub ent_ce_pass: bool,
    pub logloss_base: f64,
    pub logloss_adjusted: f64,
    pub logloss_pass: bool,
}

impl TheoremCheck {
    pub fn passed(&self) -> bool {
        self.ent_ce_pass && self.logloss_pass
    }

    /// `bound + slack - |EntCE|`.
    pub fn ent_ce_margin(&self) -> f64 {
        self.bound + ENTCE_SLACK - self.ent_ce
    }

    /// `L(base) + slack - L(adjusted)`.
    pub fn logloss_margin(&self) -> f64 {
        self.logloss_base + LOGLOSS_SLACK - self.logloss_adjusted
    }
}

/// Evaluates both inequalities by enumeration.
pub fn verify_theorem(
    true_model: &TabularModel,
    base_model: &TabularModel,
    adjusted: &AdjustedModel,
    measured_delta: f64,
    epsilon: f64,
) -> Result<TheoremCheck> {
    if !(measured_delta >= 0.0) || !(epsilon >= 0.0) {
        return Err(Error::domain("delta and epsilon must be non-negative"));
    }
    let horizon = base_model.layout().horizon();
    let after = ent_ce(true_model, adjusted)?;
    let logloss_base: f64 = log_loss_per_step(true_model, base_model)?.iter().sum();
    let bound = 2.0 * horizon as f64 * measured_delta
        + adjusted
            .alphas()
            .iter()
            .map(|a| (1.0 + a) * epsilon)
            .sum::<f64>();
    Ok(TheoremCheck {
        signed_ent_ce: after.total_logloss - after.total_entropy,
        ent_ce: after.ent_ce,
        delta: measured_delta,
        bound,
        ent_ce_pass: after.ent_ce <= bound + ENTCE_SLACK,
        logloss_base,
        logloss_adjusted: after.total_logloss,
        logloss_pass: after.total_logloss <= logloss_base + LOGLOSS_SLACK,
    })
}

/// Per-step terms whose differences telescope to `L - H`:
/// `a_t = E[-ln p(Y<=t) + H(Y<=t)]` and `b_t = E[-ln p(Y<t) + H(Y<t)]`, with
/// prefixes drawn from the true model and `p`, `H` those of the adjusted model.
#[derive(Clone, Debug, PartialEq)]
pub struct SwapTerm {
    pub t: usize,
    pub a: f64,
    pub b: f64,
    /// Exact `dL_t / d alpha_t` at the adjusted model.
    pub grad: f64,
}

impl SwapTerm {
    pub fn gap(&self) -> f64 {
        (self.a - self.b).abs()
    }
}

pub fn swap_terms(true_model: &TabularModel, adjusted: &AdjustedModel) -> Result<Vec<SwapTerm>> {
    let model = adjusted.materialize()?;
    true_model.check_compatible(&model)?;
    let table = future_entropy_table(&model)?;
    let layout = model.layout();
    let horizon = layout.horizon();
    // level_terms[l] = E over true prefixes of length l of (-ln p + H).
    let mut level_terms = vec![0.0; horizon + 1];
    for prompt in 0..true_model.prompts().len() {
        let q = true_model.prompts().weight(prompt);
        let masses = prefix_masses(true_model, prompt);
        let logp = prefix_logprobs(&model, prompt);
        for (level, term) in level_terms.iter_mut().enumerate() {
            for code in 0..layout.width(level) {
                let w = q * masses[level][code];
                if w > 0.0 {
                    *term += w * (-logp[level][code] + table.at(prompt, level, code));
                }
            }
        }
    }
    (1..=horizon)
        .map(|t| {
            Ok(SwapTerm {
                t,
                a: level_terms[t],
                b: level_terms[t - 1],
                grad: logloss_gradient_alpha(true_model, adjusted, t)?,
            })
        })
        .collect()
}

/// Error of `f_s` against exact future entropies: expectation over true
/// prefixes of length `s - 2` of the worst case over the next token.
pub fn measure_predictor_error(
    true_model: &TabularModel,
    predictor: &FutureEntropyPredictor,
    exact: &FutureEntropyTable,
) -> Result<f64> {
    let layout = true_model.layout();
    let s = predictor.step();
    if s < 2 || s > layout.horizon() + 1 {
        return Err(Error::domain(format!(
            "predictor index {s} outside 2..={}",
            layout.horizon() + 1
        )));
    }
    let v = layout.vocab_size();
    let level = s - 2;
    let mut delta = 0.0;
    for prompt in 0..true_model.prompts().len() {
        let q = true_model.prompts().weight(prompt);
        let masses = prefix_masses(true_model, prompt);
        for code in 0..layout.width(level) {
            let w = q * masses[level][code];
            if w == 0.0 {
                continue;
            }
            let worst = (0..v)
                .map(|tok| {
                    let child = code * v + tok;
                    (predictor.predict_code(prompt, child) - exact.at(prompt, level + 1, child))
                        .abs()
                })
                .fold(0.0, f64::max);
            delta += w * worst;
        }
    }
    Ok(delta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaLoglossCheck {
    /// Largest change of `L_s`, `s != t`, when `alpha_t` moves by 0.1.
    pub max_other_change: f64,
    /// Finite difference of the total log loss in `alpha_t`.
    pub total_fd_grad: f64,
    /// Exact `dL_t / d alpha_t`.
    pub step_grad: f64,
    pub passed: bool,
}

/// Checks that `alpha_t` only moves `L_t`.
pub fn lemma_logloss_check(
    true_model: &TabularModel,
    adjusted: &AdjustedModel,
    t: usize,
) -> Result<LemmaLoglossCheck> {
    if (1..t).any(|s| adjusted.alpha(s) != 0.0) {
        return Err(Error::domain(format!(
            "alpha_1..alpha_{} must be zero",
            t - 1
        )));
    }
    let alpha = adjusted.alpha(t);
    let losses_at = |a: f64| -> Result<Vec<f64>> {
        let mut m = adjusted.clone();
        m.set_alpha(t, a)?;
        log_loss_per_step(true_model, &m)
    };
    let here = losses_at(alpha)?;
    let moved = losses_at(alpha + 0.1)?;
    let max_other_change = (0..here.len())
        .filter(|&i| i + 1 != t)
        .map(|i| (here[i] - moved[i]).abs())
        .fold(0.0, f64::max);
    let h = 1e-5;
    let total = |a: f64| -> Result<f64> { Ok(losses_at(a)?.iter().sum()) };
    let total_fd_grad = if alpha - h > ALPHA_FLOOR {
        (total(alpha + h)? - total(alpha - h)?) / (2.0 * h)
    } else {
        // Second-order forward difference next to the floor.
        (-3.0 * total(alpha)? + 4.0 * total(alpha + h)? - total(alpha + 2.0 * h)?) / (2.0 * h)
    };
    let step_grad = StepObjective::new(true_model, adjusted, t)?.grad(alpha);
    Ok(LemmaLoglossCheck {
        max_other_change,
        total_fd_grad,
        step_grad,
        passed: max_other_change < 1e-10 && (total_fd_grad - step_grad).abs() <= 1e-6,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaFittingCheck {
    pub max_abs_diff: f64,
    pub passed: bool,
}

/// Checks that future entropies at prefixes of length `t - 1` do not depend on
/// `alpha_1..alpha_{t-1}` or `f_2..f_t`.
pub fn lemma_fitting_check(adjusted: &AdjustedModel, t: usize) -> Result<LemmaFittingCheck> {
    if t <= 1 {
        return Ok(LemmaFittingCheck {
            max_abs_diff: 0.0,
            passed: true,
        });
    }
    let level = t - 1;
    let full = future_entropy_table(adjusted)?;
    let zeroed = future_entropy_table(&adjusted.zero_prefix_steps(t))?;
    let mut max_abs_diff: f64 = 0.0;
    for prompt in 0..adjusted.base().prompts().len() {
        for (a, b) in full
            .level(prompt, level)
            .iter()
            .zip(zeroed.level(prompt, level))
        {
            max_abs_diff = max_abs_diff.max((a - b).abs());
        }
    }
    Ok(LemmaFittingCheck {
        max_abs_diff,
        passed: max_abs_diff <= 1e-12,
    })
}
