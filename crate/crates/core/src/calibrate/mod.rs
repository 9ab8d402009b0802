//! Future-entropy scaling.
//!
//! The adjusted model reweights the base model's next-token distribution at
//! step `t` as
//!
//! ```text
//! p_adj(v | c) ∝ exp{ (1 + alpha_t) ln p(v | c) - alpha_t f_{t+1}(c v) }
//! ```
//!
//! where `f_{t+1}` predicts the entropy of the generation after `c v`.
//! [`future_entropy_scaling`] fixes `alpha_T, ..., alpha_1` backwards: each
//! `alpha_t` is a stationary point of the step-`t` log loss, after which the
//! model is fixed from step `t` on and `f_t` can be fitted to its future
//! entropy.

mod estimate;
mod objective;
mod predictor;
mod verify;

pub use estimate::{future_entropy_mc, future_entropy_mc_stats};
pub use objective::{
    logloss_gradient_alpha, optimize_alpha_t, step_logloss, AlphaOptimum, OptimizerPath,
    StepObjective, ALPHA_FLOOR,
};
pub use predictor::{
    fit_predictor, FutureEntropyPredictor, LabeledPrefix, PredictorDataset, PredictorKind,
    PredictorSource,
};
pub use verify::{
    lemma_fitting_check, lemma_logloss_check, measure_predictor_error, swap_terms, verify_theorem,
    LemmaFittingCheck, LemmaLoglossCheck, SwapTerm, TheoremCheck, ENTCE_SLACK, LOGLOSS_SLACK,
};

use std::borrow::Cow;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::metrics::{ent_ce, log_loss_per_step, CalibrationReport};
use crate::model::{sample_categorical, Autoregressive, PromptSet, TabularModel, Tabulate};
use crate::oracle::future_entropy_table;
use crate::seed::{derive_seed, derived_rng, rng_from_seed, stream};

/// A base model with per-step weights `alpha_1..alpha_T` and predictors
/// `f_2..f_{T+1}` (`f_{T+1} = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct AdjustedModel {
    base: TabularModel,
    alphas: Vec<f64>,
    // predictors[k] is f_{k+2}.
    predictors: Vec<FutureEntropyPredictor>,
}

impl AdjustedModel {
    /// All weights zero and all predictors zero: identical to `base`.
    pub fn new(base: TabularModel) -> Self {
        let horizon = base.layout().horizon();
        Self {
            alphas: vec![0.0; horizon],
            predictors: (2..=horizon + 1)
                .map(FutureEntropyPredictor::zero)
                .collect(),
            base,
        }
    }

    pub fn base(&self) -> &TabularModel {
        &self.base
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `alpha_t`, 1-indexed.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn set_alpha(&mut self, t: usize, alpha: f64) -> Result<()> {
        self.check_step(t)?;
        if !(alpha.is_finite() && 1.0 + alpha > 0.0) {
            return Err(Error::domain(format!(
                "alpha_{t} = {alpha} must satisfy 1 + alpha > 0"
            )));
        }
        self.alphas[t - 1] = alpha;
        Ok(())
    }

    /// `f_s` for `s` in `2..=T+1`.
    pub fn predictor(&self, s: usize) -> &FutureEntropyPredictor {
        &self.predictors[s - 2]
    }

    pub fn set_predictor(&mut self, predictor: FutureEntropyPredictor) -> Result<()> {
        let s = predictor.step();
        let horizon = self.base.layout().horizon();
        if s < 2 || s > horizon {
            return Err(Error::domain(format!(
                "predictor index {s} outside 2..={horizon}; f_(T+1) is fixed at 0"
            )));
        }
        self.predictors[s - 2] = predictor;
        Ok(())
    }

    fn check_step(&self, t: usize) -> Result<()> {
        let horizon = self.base.layout().horizon();
        if t == 0 || t > horizon {
            return Err(Error::domain(format!("step {t} outside 1..={horizon}")));
        }
        Ok(())
    }

    /// The adjusted next-token distribution after `prefix` (step `len + 1`).
    pub fn conditional(&self, prompt: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        let row = self.base.conditional_at(prompt, prefix)?;
        self.adjust_row(prompt, prefix.len(), self.base.layout().encode(prefix), row)
    }

    fn adjust_row(
        &self,
        prompt: usize,
        level: usize,
        code: usize,
        row: &[f64],
    ) -> Result<Vec<f64>> {
        let alpha = self.alphas[level];
        if alpha == 0.0 {
            return Ok(row.to_vec());
        }
        let v = row.len();
        let f = &self.predictors[level];
        let mut logits = Vec::with_capacity(v);
        for (tok, &p) in row.iter().enumerate() {
            let fut = f.predict_code(prompt, code * v + tok);
            if !fut.is_finite() {
                return Err(Error::Invariant(format!(
                    "predictor f_{} returned {fut}",
                    level + 2
                )));
            }
            logits.push(if p > 0.0 {
                (1.0 + alpha) * p.ln() - alpha * fut
            } else {
                f64::NEG_INFINITY
            });
        }
        Ok(softmax(&logits))
    }

    /// The adjusted model as an explicit table.
    pub fn materialize(&self) -> Result<TabularModel> {
        let layout = self.base.layout().clone();
        let mut err = None;
        let out = TabularModel::from_fn(
            layout.vocab_size(),
            layout.horizon(),
            self.base.prompts().clone(),
            |prompt, prefix| {
                let code = layout.encode(prefix);
                match self.adjust_row(
                    prompt,
                    prefix.len(),
                    code,
                    self.base.row_at(prompt, prefix.len(), code),
                ) {
                    Ok(r) => r,
                    Err(e) => {
                        err.get_or_insert(e);
                        vec![1.0 / layout.vocab_size() as f64; layout.vocab_size()]
                    }
                }
            },
        )?;
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Copy with `alpha_1..alpha_{t-1}` and `f_2..f_t` set to zero.
    pub fn zero_prefix_steps(&self, t: usize) -> Self {
        let mut out = self.clone();
        for s in 1..t {
            out.alphas[s - 1] = 0.0;
            out.predictors[s - 1] = FutureEntropyPredictor::zero(s + 1);
        }
        out
    }
}

/// Numerically stable softmax; `-inf` logits map to 0.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

impl Autoregressive for AdjustedModel {
    fn vocab_size(&self) -> usize {
        self.base.layout().vocab_size()
    }

    fn horizon(&self) -> usize {
        self.base.layout().horizon()
    }

    fn prompts(&self) -> &PromptSet {
        self.base.prompts()
    }

    fn row(&self, prompt: usize, prefix: &[usize]) -> Cow<'_, [f64]> {
        Cow::Owned(
            self.conditional(prompt, prefix)
                .expect("adjusted row on a valid prefix"),
        )
    }
}

impl Tabulate for AdjustedModel {
    fn tabulate(&self) -> Result<Cow<'_, TabularModel>> {
        Ok(Cow::Owned(self.materialize()?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    /// Gradient tolerance for each `alpha_t`.
    pub epsilon: f64,
    /// Prefixes sampled per predictor.
    pub n: usize,
    /// Trajectories per label.
    pub m: usize,
    pub predictor: PredictorKind,
    pub bracket_half_width: f64,
    pub max_bracket_expansions: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            n: 200,
            m: 256,
            predictor: PredictorKind::ExactOracle,
            bracket_half_width: 4.0,
            max_bracket_expansions: 6,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::domain("epsilon must be positive"));
        }
        if self.n == 0 || self.m == 0 {
            return Err(Error::domain("n and m must be at least 1"));
        }
        if !(self.bracket_half_width > 0.0) {
            return Err(Error::domain("bracket half-width must be positive"));
        }
        Ok(())
    }
}

/// Outcome of one iteration of the backward loop.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub alpha: f64,
    pub grad_at_opt: f64,
    pub path: OptimizerPath,
    /// Measured error of `f_{t+1}` against the exact future entropy of the
    /// final adjusted model (0 for `f_{T+1}`).
    pub delta_measured: f64,
    /// Range of the sampled labels used to fit `f_t`, when fitted from labels.
    pub label_range: Option<(f64, f64)>,
    /// Total log loss after this iteration.
    pub logloss_after: f64,
}

#[derive(Clone, Debug)]
pub struct CalibrationRun {
    pub adjusted: AdjustedModel,
    /// Indexed by `t - 1`.
    pub steps: Vec<StepRecord>,
    pub before: CalibrationReport,
    pub after: CalibrationReport,
}

impl CalibrationRun {
    /// Largest measured predictor error.
    pub fn max_delta(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| s.delta_measured)
            .fold(0.0, f64::max)
    }

    /// Total log loss of the base model followed by the value after each
    /// iteration `t = T, ..., 1`.
    pub fn logloss_trace(&self) -> Vec<f64> {
        std::iter::once(self.before.total_logloss)
            .chain(self.steps.iter().rev().map(|s| s.logloss_after))
            .collect()
    }

    /// CSV `t,alpha,grad_at_opt,delta_measured`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,alpha,grad_at_opt,delta_measured")?;
        for s in &self.steps {
            writeln!(
                w,
                "{},{},{},{}",
                s.t,
                fmt_f64(s.alpha),
                fmt_f64(s.grad_at_opt),
                fmt_f64(s.delta_measured)
            )?;
        }
        Ok(())
    }
}

/// Runs the backward loop `t = T, ..., 1`: optimize `alpha_t`, then build
/// `f_t` either from the exact oracle or from `n` prefixes drawn from the true
/// model with `m`-trajectory sampled labels per candidate token.
pub fn future_entropy_scaling(
    true_model: &TabularModel,
    base_model: &TabularModel,
    config: &CalibrationConfig,
) -> Result<CalibrationRun> {
    config.validate()?;
    true_model.check_compatible(base_model)?;
    let before = ent_ce(true_model, base_model)?;
    if !before.total_logloss.is_finite() {
        return Err(Error::domain(
            "base model assigns zero probability to true-model support",
        ));
    }
    let layout = base_model.layout().clone();
    let horizon = layout.horizon();
    let num_prompts = base_model.prompts().len();
    let mut adjusted = AdjustedModel::new(base_model.clone());
    let mut partial: Vec<Option<StepRecord>> = vec![None; horizon];

    for t in (1..=horizon).rev() {
        let opt = optimize_alpha_t(true_model, &adjusted, t, config)?;
        adjusted.set_alpha(t, opt.alpha)?;
        let mut label_range = None;
        if t >= 2 {
            let current = adjusted.materialize()?;
            let predictor = match config.predictor {
                PredictorKind::ExactOracle => FutureEntropyPredictor::exact_oracle(
                    t,
                    &future_entropy_table(&current)?,
                    num_prompts,
                ),
                kind => {
                    let data = sample_predictor_dataset(true_model, &current, t, config)?;
                    label_range = data.label_range();
                    fit_predictor(&data, kind)?
                }
            };
            adjusted.set_predictor(predictor)?;
        }
        let logloss_after = log_loss_per_step(true_model, &adjusted)?.iter().sum();
        partial[t - 1] = Some(StepRecord {
            t,
            alpha: opt.alpha,
            grad_at_opt: opt.grad,
            path: opt.path,
            delta_measured: 0.0,
            label_range,
            logloss_after,
        });
    }

    let final_table = future_entropy_table(&adjusted)?;
    let mut steps: Vec<StepRecord> = partial
        .into_iter()
        .map(|s| s.expect("every step visited"))
        .collect();
    for t in 1..horizon {
        steps[t - 1].delta_measured =
            measure_predictor_error(true_model, adjusted.predictor(t + 1), &final_table)?;
    }
    let after = ent_ce(true_model, &adjusted)?;
    Ok(CalibrationRun {
        adjusted,
        steps,
        before,
        after,
    })
}

/// Labels for `f_t`: `n` prefixes of length `t - 2` from the true model, each
/// extended by every token `v` and labelled by the sampling estimator on
/// `current` with `m` trajectories.
fn sample_predictor_dataset(
    true_model: &TabularModel,
    current: &TabularModel,
    t: usize,
    config: &CalibrationConfig,
) -> Result<PredictorDataset> {
    let layout = current.layout();
    let v = layout.vocab_size();
    let step_seed = derive_seed(config.seed, stream::CALIBRATION, t as u64);
    let mut rng = rng_from_seed(step_seed);
    let prefixes: Vec<(usize, Vec<usize>)> = (0..config.n)
        .map(|_| {
            let prompt = true_model.prompts().sample(&mut rng);
            let mut seq = Vec::with_capacity(t - 1);
            while seq.len() < t - 2 {
                let tok = sample_categorical(
                    true_model.row_at(prompt, seq.len(), layout.encode(&seq)),
                    &mut rng,
                );
                seq.push(tok);
            }
            (prompt, seq)
        })
        .collect();
    let samples: Vec<LabeledPrefix> = (0..config.n * v)
        .into_par_iter()
        .map(|k| {
            let (prompt, ref base) = prefixes[k / v];
            let mut prefix = base.clone();
            prefix.push(k % v);
            let mut r = derived_rng(step_seed, stream::CALIBRATION, k as u64 + 1);
            let label = future_entropy_mc(current, prompt, &prefix, config.m, &mut r)?;
            Ok(LabeledPrefix {
                prompt,
                prefix,
                label,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PredictorDataset {
        vocab_size: v,
        horizon: layout.horizon(),
        num_prompts: current.prompts().len(),
        step: t,
        samples,
    })
}
