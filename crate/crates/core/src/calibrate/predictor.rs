//! Future-entropy predictors `f_s`, keyed by prefixes of length `s - 1`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PrefixLayout;
use crate::oracle::FutureEntropyTable;

/// How predictors are produced during calibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorKind {
    /// Exact future entropy of the adjusted model, by backward recursion.
    ExactOracle,
    /// Per-prefix mean of sampled labels; unseen prefixes use the per-token mean.
    Tabular,
    /// One mean label per final token.
    PerTokenConstant,
}

/// What a predictor was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictorSource {
    /// The initial `f = 0`, and the fixed `f_{T+1}`.
    Zero,
    Fitted(PredictorKind),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FutureEntropyPredictor {
    source: PredictorSource,
    step: usize,
    // [prompt][prefix code], prefixes of length step - 1. Empty for Zero.
    values: Vec<Vec<f64>>,
}

impl FutureEntropyPredictor {
    pub fn zero(step: usize) -> Self {
        Self {
            source: PredictorSource::Zero,
            step,
            values: Vec::new(),
        }
    }

    /// Copies the exact future entropies of prefixes of length `step - 1`.
    pub fn exact_oracle(step: usize, table: &FutureEntropyTable, num_prompts: usize) -> Self {
        let values = (0..num_prompts)
            .map(|p| table.level(p, step - 1).to_vec())
            .collect();
        Self {
            source: PredictorSource::Fitted(PredictorKind::ExactOracle),
            step,
            values,
        }
    }

    pub fn source(&self) -> PredictorSource {
        self.source
    }

    /// The index `s` of `f_s`.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_zero(&self) -> bool {
        self.source == PredictorSource::Zero
    }

    /// Prediction for a prefix of length `step - 1`, given by its code.
    pub fn predict_code(&self, prompt: usize, code: usize) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values[prompt][code]
        }
    }

    pub fn predict(&self, layout: &PrefixLayout, prompt: usize, prefix: &[usize]) -> f64 {
        debug_assert_eq!(prefix.len() + 1, self.step);
        self.predict_code(prompt, layout.encode(prefix))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPrefix {
    pub prompt: usize,
    /// Full prefix including the candidate token, length `step - 1`.
    pub prefix: Vec<usize>,
    pub label: f64,
}

/// Noisy future-entropy labels for one predictor `f_step`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorDataset {
    pub vocab_size: usize,
    pub horizon: usize,
    pub num_prompts: usize,
    pub step: usize,
    pub samples: Vec<LabeledPrefix>,
}

impl PredictorDataset {
    /// Smallest and largest label.
    pub fn label_range(&self) -> Option<(f64, f64)> {
        self.samples
            .iter()
            .map(|s| s.label)
            .fold(None, |acc, l| match acc {
                None => Some((l, l)),
                Some((lo, hi)) => Some((lo.min(l), hi.max(l))),
            })
    }
}

/// Fits `f_step` from labels. `ExactOracle` has no fitting rule and is
/// rejected here; use [`FutureEntropyPredictor::exact_oracle`].
///
/// Predictions are clipped to `[0, (T - step + 1) ln V]`, the range of any
/// future entropy over the remaining steps.
pub fn fit_predictor(
    dataset: &PredictorDataset,
    kind: PredictorKind,
) -> Result<FutureEntropyPredictor> {
    let PredictorDataset {
        vocab_size,
        horizon,
        num_prompts,
        step,
        ..
    } = *dataset;
    if dataset.samples.is_empty() {
        return Err(Error::Fit("predictor dataset is empty".into()));
    }
    if step < 2 || step > horizon + 1 {
        return Err(Error::Fit(format!(
            "predictor step {step} outside 2..={}",
            horizon + 1
        )));
    }
    let len = step - 1;
    for s in &dataset.samples {
        if !s.label.is_finite() {
            return Err(Error::Fit(format!("non-finite label {}", s.label)));
        }
        if s.prefix.len() != len
            || s.prompt >= num_prompts
            || s.prefix.iter().any(|&v| v >= vocab_size)
        {
            return Err(Error::Fit(format!(
                "sample prefix {:?} does not fit step {step}",
                s.prefix
            )));
        }
    }
    let layout = PrefixLayout::new(vocab_size, horizon);
    let ceiling = (horizon + 1 - step) as f64 * (vocab_size as f64).ln();
    let clip = |x: f64| x.clamp(0.0, ceiling);

    let mut per_token = vec![(0.0, 0usize); vocab_size];
    for s in &dataset.samples {
        let slot = &mut per_token[*s.prefix.last().unwrap()];
        slot.0 += s.label;
        slot.1 += 1;
    }
    let global_mean =
        dataset.samples.iter().map(|s| s.label).sum::<f64>() / dataset.samples.len() as f64;
    let token_mean: Vec<f64> = per_token
        .iter()
        .map(|&(sum, n)| if n > 0 { sum / n as f64 } else { global_mean })
        .collect();

    let width = layout.width(len);
    let values = match kind {
        PredictorKind::ExactOracle => {
            return Err(Error::Fit(
                "the exact oracle is not fitted from labels".into(),
            ));
        }
        PredictorKind::PerTokenConstant => (0..num_prompts)
            .map(|_| {
                (0..width)
                    .map(|code| clip(token_mean[code % vocab_size]))
                    .collect()
            })
            .collect(),
        PredictorKind::Tabular => {
            let mut sums: HashMap<(usize, usize), (f64, usize)> = HashMap::new();
            for s in &dataset.samples {
                let e = sums
                    .entry((s.prompt, layout.encode(&s.prefix)))
                    .or_insert((0.0, 0));
                e.0 += s.label;
                e.1 += 1;
            }
            (0..num_prompts)
                .map(|p| {
                    (0..width)
                        .map(|code| match sums.get(&(p, code)) {
                            Some(&(sum, n)) => clip(sum / n as f64),
                            None => clip(token_mean[code % vocab_size]),
                        })
                        .collect()
                })
                .collect()
        }
    };
    Ok(FutureEntropyPredictor {
        source: PredictorSource::Fitted(kind),
        step,
        values,
    })
}
