//! The step-`t` log loss as a function of `alpha_t` and its 1-D minimizer.

use crate::error::{Error, Result};
use crate::model::TabularModel;
use crate::oracle::prefix_masses;

use super::{AdjustedModel, CalibrationConfig};

/// Lowest admissible `alpha`, keeping `1 + alpha > 0`.
pub const ALPHA_FLOOR: f64 = -1.0 + 1e-9;

const MAX_BISECTIONS: usize = 400;

struct Term {
    weight: f64,
    // (p*(v), ln p(v), ln p(v) - f(prefix v)) over tokens with positive base
    // probability.
    tokens: Vec<(f64, f64, f64)>,
}

/// `L_t(alpha)` with everything but `alpha_t` held fixed.
pub struct StepObjective {
    terms: Vec<Term>,
}

impl StepObjective {
    /// Collects every step-`t` prefix reachable under the true model.
    pub fn new(true_model: &TabularModel, adjusted: &AdjustedModel, t: usize) -> Result<Self> {
        let base = adjusted.base();
        true_model.check_compatible(base)?;
        let layout = base.layout();
        if t == 0 || t > layout.horizon() {
            return Err(Error::domain(format!(
                "step {t} outside 1..={}",
                layout.horizon()
            )));
        }
        let v = layout.vocab_size();
        let level = t - 1;
        let predictor = adjusted.predictor(t + 1);
        let mut terms = Vec::new();
        for prompt in 0..true_model.prompts().len() {
            let q = true_model.prompts().weight(prompt);
            if q == 0.0 {
                continue;
            }
            let masses = prefix_masses(true_model, prompt);
            for code in 0..layout.width(level) {
                let weight = q * masses[level][code];
                if weight == 0.0 {
                    continue;
                }
                let truth = true_model.row_at(prompt, level, code);
                let row = base.row_at(prompt, level, code);
                let mut tokens = Vec::with_capacity(v);
                for tok in 0..v {
                    if row[tok] > 0.0 {
                        let lp = row[tok].ln();
                        tokens.push((
                            truth[tok],
                            lp,
                            lp - predictor.predict_code(prompt, code * v + tok),
                        ));
                    } else if truth[tok] > 0.0 {
                        return Err(Error::domain(
                            "base model assigns zero probability to true-model support",
                        ));
                    }
                }
                terms.push(Term { weight, tokens });
            }
        }
        Ok(Self { terms })
    }

    fn eval(&self, alpha: f64, want_loss: bool) -> (f64, f64) {
        let mut loss = 0.0;
        let mut grad = 0.0;
        for term in &self.terms {
            let logit = |&(_, lp, d): &(f64, f64, f64)| lp + alpha * d;
            let max = term
                .tokens
                .iter()
                .map(logit)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let mut pi_d = 0.0;
            for tok in &term.tokens {
                let e = (logit(tok) - max).exp();
                z += e;
                pi_d += e * tok.2;
            }
            pi_d /= z;
            let lse = max + z.ln();
            let mut true_d = 0.0;
            let mut ce = 0.0;
            for tok in &term.tokens {
                true_d += tok.0 * tok.2;
                if want_loss && tok.0 > 0.0 {
                    ce += tok.0 * (lse - logit(tok));
                }
            }
            grad += term.weight * (pi_d - true_d);
            loss += term.weight * ce;
        }
        (loss, grad)
    }

    pub fn loss(&self, alpha: f64) -> f64 {
        self.eval(alpha, true).0
    }

    pub fn grad(&self, alpha: f64) -> f64 {
        self.eval(alpha, false).1
    }
}

/// `L_t` of the adjusted model at its current `alpha_t`.
pub fn step_logloss(true_model: &TabularModel, adjusted: &AdjustedModel, t: usize) -> Result<f64> {
    Ok(StepObjective::new(true_model, adjusted, t)?.loss(adjusted.alpha(t)))
}

/// Exact `dL_t / d alpha_t` at the adjusted model's current `alpha_t`.
pub fn logloss_gradient_alpha(
    true_model: &TabularModel,
    adjusted: &AdjustedModel,
    t: usize,
) -> Result<f64> {
    Ok(StepObjective::new(true_model, adjusted, t)?.grad(adjusted.alpha(t)))
}

/// Which branch of the optimizer produced `alpha_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerPath {
    /// The gradient at 0 was already within tolerance.
    AlreadyStationary,
    Bisection {
        expansions: usize,
    },
    /// No sign change in the widest bracket.
    GoldenSection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaOptimum {
    pub alpha: f64,
    pub grad: f64,
    pub loss: f64,
    pub loss_at_zero: f64,
    pub path: OptimizerPath,
}

/// Minimizes `L_t` over `alpha_t`: sign bracketing on `[-w, w]` with doubling,
/// bisection to `|grad| <= epsilon`, and golden section on the loss when the
/// gradient never changes sign. Never returns a loss above `L_t(0)`.
pub fn optimize_alpha_t(
    true_model: &TabularModel,
    adjusted: &AdjustedModel,
    t: usize,
    config: &CalibrationConfig,
) -> Result<AlphaOptimum> {
    config.validate()?;
    let obj = StepObjective::new(true_model, adjusted, t)?;
    let eps = config.epsilon;
    let (loss_at_zero, g0) = obj.eval(0.0, true);
    let at_zero = |path| AlphaOptimum {
        alpha: 0.0,
        grad: g0,
        loss: loss_at_zero,
        loss_at_zero,
        path,
    };
    if g0.abs() <= eps {
        return Ok(at_zero(OptimizerPath::AlreadyStationary));
    }

    let mut width = config.bracket_half_width;
    let mut bracket = None;
    for expansions in 0..=config.max_bracket_expansions {
        let (lo, hi) = ((-width).max(ALPHA_FLOOR), width);
        if obj.grad(lo) < 0.0 && obj.grad(hi) > 0.0 {
            bracket = Some((lo, hi, expansions));
            break;
        }
        width *= 2.0;
    }
    let width =
        width.min(config.bracket_half_width * 2f64.powi(config.max_bracket_expansions as i32));

    let (alpha, path) = match bracket {
        Some((mut lo, mut hi, expansions)) => {
            let mut alpha = 0.5 * (lo + hi);
            for _ in 0..MAX_BISECTIONS {
                alpha = 0.5 * (lo + hi);
                let g = obj.grad(alpha);
                if g.abs() <= eps || alpha <= lo || alpha >= hi {
                    break;
                }
                if g > 0.0 {
                    hi = alpha;
                } else {
                    lo = alpha;
                }
            }
            (alpha, OptimizerPath::Bisection { expansions })
        }
        None => (
            golden_section(|a| obj.loss(a), (-width).max(ALPHA_FLOOR), width),
            OptimizerPath::GoldenSection,
        ),
    };
    let (loss, grad) = obj.eval(alpha, true);
    if loss > loss_at_zero + 1e-12 {
        return Ok(at_zero(path));
    }
    Ok(AlphaOptimum {
        alpha,
        grad,
        loss,
        loss_at_zero,
        path,
    })
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > 1e-12 * (1.0 + a.abs() + b.abs()) {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
