//! Sampling estimator of the future entropy after a prefix.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{sample_continuation, Autoregressive};

/// Mean of `-ln p(continuation | prefix)` over `m` sampled continuations.
/// Unbiased for the future entropy of `prefix`.
pub fn future_entropy_mc<M, R>(
    model: &M,
    prompt: usize,
    prefix: &[usize],
    m: usize,
    rng: &mut R,
) -> Result<f64>
where
    M: Autoregressive + ?Sized,
    R: Rng + ?Sized,
{
    Ok(future_entropy_mc_stats(model, prompt, prefix, m, rng)?.0)
}

/// Like [`future_entropy_mc`], also returning the standard error of the mean
/// (`NaN` when `m = 1`).
pub fn future_entropy_mc_stats<M, R>(
    model: &M,
    prompt: usize,
    prefix: &[usize],
    m: usize,
    rng: &mut R,
) -> Result<(f64, f64)>
where
    M: Autoregressive + ?Sized,
    R: Rng + ?Sized,
{
    if m == 0 {
        return Err(Error::domain("need at least one trajectory"));
    }
    if prefix.len() > model.horizon() || prefix.iter().any(|&v| v >= model.vocab_size()) {
        return Err(Error::domain(format!(
            "prefix {prefix:?} is not valid for this model"
        )));
    }
    if prompt >= model.prompts().len() {
        return Err(Error::domain(format!("prompt index {prompt} out of range")));
    }
    let draws: Vec<f64> = (0..m)
        .map(|_| -sample_continuation(model, prompt, prefix, rng).1)
        .collect();
    let n = m as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let se = if m > 1 {
        (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        f64::NAN
    };
    Ok((mean, se))
}
