//! Exact reference computations by enumeration and backward recursion.

use std::io::Write;

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::model::{
    check_enumerable, Autoregressive, PrefixLayout, TabularModel, Tabulate, DEFAULT_ENUMERATION_CAP,
};

/// Probabilities of every length-`T` sequence, indexed by sequence code.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    layout: PrefixLayout,
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, sequence: &[usize]) -> f64 {
        self.probs[self.layout.encode(sequence)]
    }

    pub fn sequence(&self, code: usize) -> Vec<usize> {
        self.layout.decode(self.layout.horizon(), code)
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// `-sum p ln p` with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// CSV with header `sequence,probability`; tokens space-separated.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sequence,probability")?;
        for (code, &p) in self.probs.iter().enumerate() {
            let seq: Vec<String> = self.sequence(code).iter().map(|t| t.to_string()).collect();
            writeln!(w, "{},{}", seq.join(" "), fmt_f64(p))?;
        }
        Ok(())
    }
}

/// Log-probabilities of all prefixes of each length `0..=T`, indexed
/// `[level][code]`. Zero-probability prefixes get `-inf`.
pub fn prefix_logprobs(model: &TabularModel, prompt: usize) -> Vec<Vec<f64>> {
    let layout = model.layout();
    let v = layout.vocab_size();
    let mut levels = vec![vec![0.0]];
    for level in 0..layout.horizon() {
        let prev = &levels[level];
        let mut next = Vec::with_capacity(prev.len() * v);
        for (code, &lp) in prev.iter().enumerate() {
            let row = model.row_at(prompt, level, code);
            next.extend(row.iter().map(|&p| lp + p.ln()));
        }
        levels.push(next);
    }
    levels
}

/// Probabilities of all prefixes of each length `0..=T`, indexed `[level][code]`.
pub fn prefix_masses(model: &TabularModel, prompt: usize) -> Vec<Vec<f64>> {
    let layout = model.layout();
    let v = layout.vocab_size();
    let mut levels = vec![vec![1.0]];
    for level in 0..layout.horizon() {
        let prev = &levels[level];
        let mut next = Vec::with_capacity(prev.len() * v);
        for (code, &mass) in prev.iter().enumerate() {
            let row = model.row_at(prompt, level, code);
            next.extend(row.iter().map(|&p| mass * p));
        }
        levels.push(next);
    }
    levels
}

fn check_prompt(model: &TabularModel, prompt: usize) -> Result<()> {
    if prompt >= model.prompts().len() {
        return Err(Error::domain(format!("prompt index {prompt} out of range")));
    }
    Ok(())
}

pub fn joint_distribution(model: &impl Tabulate, prompt: usize) -> Result<JointDistribution> {
    let model = model.tabulate()?;
    let layout = model.layout().clone();
    check_enumerable(
        layout.vocab_size(),
        layout.horizon(),
        DEFAULT_ENUMERATION_CAP,
    )?;
    check_prompt(&model, prompt)?;
    let mut lp = prefix_logprobs(&model, prompt);
    let probs = lp.pop().unwrap().into_iter().map(f64::exp).collect();
    Ok(JointDistribution { layout, probs })
}

/// Future entropies of every prefix of every length `0..=T`, per prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct FutureEntropyTable {
    layout: PrefixLayout,
    // [prompt][flat prefix index over levels 0..=T]
    values: Vec<Vec<f64>>,
}

impl FutureEntropyTable {
    pub fn at(&self, prompt: usize, level: usize, code: usize) -> f64 {
        self.values[prompt][self.layout.index(level, code)]
    }

    pub fn get(&self, prompt: usize, prefix: &[usize]) -> f64 {
        self.at(prompt, prefix.len(), self.layout.encode(prefix))
    }

    /// All entries for prefixes of one length, indexed by code.
    pub fn level(&self, prompt: usize, level: usize) -> &[f64] {
        let start = self.layout.index(level, 0);
        &self.values[prompt][start..start + self.layout.width(level)]
    }
}

/// Entropy of a distribution row, `0 ln 0 = 0`.
pub fn row_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Backward recursion `H(c) = sum_v p(v|c) (-ln p(v|c) + H(c v))`, `H = 0` at length `T`.
pub fn future_entropy_table(model: &impl Tabulate) -> Result<FutureEntropyTable> {
    let model = model.tabulate()?;
    let layout = model.layout().clone();
    let v = layout.vocab_size();
    let t_max = layout.horizon();
    let n_prompts = model.prompts().len();
    let mut values = Vec::with_capacity(n_prompts);
    for prompt in 0..n_prompts {
        let mut table = vec![0.0; layout.count_through(t_max)];
        for level in (0..t_max).rev() {
            for code in 0..layout.width(level) {
                let row = model.row_at(prompt, level, code);
                let child0 = layout.index(level + 1, code * v);
                let h: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(tok, &p)| p * (-p.ln() + table[child0 + tok]))
                    .sum();
                table[layout.index(level, code)] = h;
            }
        }
        values.push(table);
    }
    Ok(FutureEntropyTable { layout, values })
}

/// Entropy of the continuation after one prefix, by recursion over its subtree.
pub fn future_entropy_exact(model: &impl Tabulate, prompt: usize, prefix: &[usize]) -> Result<f64> {
    let model = model.tabulate()?;
    check_prompt(&model, prompt)?;
    model.check_prefix(prefix, model.layout().horizon())?;
    Ok(subtree_entropy(
        &model,
        prompt,
        prefix.len(),
        model.layout().encode(prefix),
    ))
}

fn subtree_entropy(model: &TabularModel, prompt: usize, level: usize, code: usize) -> f64 {
    if level == model.layout().horizon() {
        return 0.0;
    }
    let v = model.layout().vocab_size();
    model
        .row_at(prompt, level, code)
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(tok, &p)| p * (-p.ln() + subtree_entropy(model, prompt, level + 1, code * v + tok)))
        .sum()
}

/// Verification path: enumerates every continuation and sums `-p ln p` of
/// its conditional probability directly.
pub fn future_entropy_naive(model: &TabularModel, prompt: usize, prefix: &[usize]) -> Result<f64> {
    check_prompt(model, prompt)?;
    model.check_prefix(prefix, model.layout().horizon())?;
    let layout = model.layout();
    let remaining = layout.horizon() - prefix.len();
    let n = layout.vocab_size().pow(remaining as u32);
    let mut total = 0.0;
    let mut seq = prefix.to_vec();
    for c in 0..n {
        seq.truncate(prefix.len());
        seq.extend(layout.decode(remaining, c));
        let mut p = 1.0;
        for s in prefix.len()..layout.horizon() {
            p *= model.row(prompt, &seq[..s])[seq[s]];
        }
        if p > 0.0 {
            total -= p * p.ln();
        }
    }
    Ok(total)
}

fn check_inverse_temperature(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && 1.0 + alpha > 0.0) {
        return Err(Error::domain(format!(
            "global temperature needs 1 + alpha > 0, got alpha = {alpha}"
        )));
    }
    Ok(())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Joint proportional to `p(s)^(1 + alpha)`, normalized over all sequences.
pub fn global_temperature_model(
    model: &impl Tabulate,
    prompt: usize,
    alpha: f64,
) -> Result<JointDistribution> {
    check_inverse_temperature(alpha)?;
    let base = joint_distribution(model, prompt)?;
    let scaled: Vec<f64> = base
        .probs
        .iter()
        .map(|&p| {
            if p > 0.0 {
                (1.0 + alpha) * p.ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let z = log_sum_exp(&scaled);
    let probs = scaled.iter().map(|&s| (s - z).exp()).collect();
    Ok(JointDistribution {
        layout: base.layout,
        probs,
    })
}

/// Sequence codes extending `prefix` form this half-open range.
fn block(layout: &PrefixLayout, prefix: &[usize]) -> std::ops::Range<usize> {
    let span = layout
        .vocab_size()
        .pow((layout.horizon() - prefix.len()) as u32);
    let start = layout.encode(prefix) * span;
    start..start + span
}

struct GlobalContext {
    log_joint: Vec<f64>,
    layout: PrefixLayout,
}

impl GlobalContext {
    fn new(model: &impl Tabulate, prompt: usize, prefix: &[usize], token: usize) -> Result<Self> {
        let model = model.tabulate()?;
        let layout = model.layout().clone();
        check_enumerable(
            layout.vocab_size(),
            layout.horizon(),
            DEFAULT_ENUMERATION_CAP,
        )?;
        check_prompt(&model, prompt)?;
        if prefix.len() >= layout.horizon() {
            return Err(Error::domain("prefix must be shorter than the horizon"));
        }
        model.check_prefix(prefix, layout.horizon() - 1)?;
        if token >= layout.vocab_size() {
            return Err(Error::domain(format!(
                "token {token} outside the vocabulary"
            )));
        }
        let log_joint = prefix_logprobs(&model, prompt).pop().unwrap();
        Ok(Self { log_joint, layout })
    }

    /// `ln sum_{s in block} p(s)^(1+alpha)`.
    fn log_mass(&self, prefix: &[usize], alpha: f64) -> f64 {
        let scaled: Vec<f64> = self.log_joint[block(&self.layout, prefix)]
            .iter()
            .map(|&lp| {
                if lp == f64::NEG_INFINITY {
                    lp
                } else {
                    (1.0 + alpha) * lp
                }
            })
            .collect();
        log_sum_exp(&scaled)
    }

    /// `E_{s ~ p_alpha(.|prefix)} ln p(s)` over sequences extending `prefix`.
    fn tilted_mean_logprob(&self, prefix: &[usize], alpha: f64) -> f64 {
        let lps = &self.log_joint[block(&self.layout, prefix)];
        let z = self.log_mass(prefix, alpha);
        lps.iter()
            .filter(|&&lp| lp > f64::NEG_INFINITY)
            .map(|&lp| ((1.0 + alpha) * lp - z).exp() * lp)
            .sum()
    }
}

/// `ln p_alpha^global(token | prefix)`.
pub fn global_temp_conditional_logprob(
    model: &impl Tabulate,
    prompt: usize,
    prefix: &[usize],
    token: usize,
    alpha: f64,
) -> Result<f64> {
    check_inverse_temperature(alpha)?;
    let ctx = GlobalContext::new(model, prompt, prefix, token)?;
    let mut ext = prefix.to_vec();
    ext.push(token);
    Ok(ctx.log_mass(&ext, alpha) - ctx.log_mass(prefix, alpha))
}

/// Derivative in `alpha` of `ln p_alpha^global(token | prefix)`:
/// `ln p(token|prefix) + E[ln p(Y_{>t} | prefix token)] - E[ln p(Y_{>=t} | prefix)]`,
/// both expectations under the globally tempered distribution.
pub fn global_temp_logprob_gradient(
    model: &impl Tabulate,
    prompt: usize,
    prefix: &[usize],
    token: usize,
    alpha: f64,
) -> Result<f64> {
    check_inverse_temperature(alpha)?;
    let ctx = GlobalContext::new(model, prompt, prefix, token)?;
    let mut ext = prefix.to_vec();
    ext.push(token);
    let lp_prefix = ctx.log_mass(prefix, 0.0);
    let lp_ext = ctx.log_mass(&ext, 0.0);
    if lp_ext == f64::NEG_INFINITY {
        return Err(Error::domain(
            "gradient undefined for a zero-probability token",
        ));
    }
    // E ln p(Y_{>t} | prefix token) = E ln p(s) - ln p(prefix token), and likewise for the prefix.
    let tail_ext = ctx.tilted_mean_logprob(&ext, alpha) - lp_ext;
    let tail_prefix = ctx.tilted_mean_logprob(prefix, alpha) - lp_prefix;
    Ok((lp_ext - lp_prefix) + tail_ext - tail_prefix)
}

/// Largest deviation, over all reachable prefixes and tokens, between the
/// globally tempered conditional log-probability and the normalized
/// future-entropy adjustment `(1 + alpha) ln p(v|c) - alpha H(c v)` built from
/// the base model's exact future entropies. The per-prefix constant is the
/// softmax normalizer, so both sides are log-distributions over `v`.
pub fn first_order_error(model: &impl Tabulate, prompt: usize, alpha: f64) -> Result<f64> {
    check_inverse_temperature(alpha)?;
    let model = model.tabulate()?;
    let layout = model.layout().clone();
    let v = layout.vocab_size();
    let fut = future_entropy_table(model.as_ref())?;
    let log_joint = prefix_logprobs(&model, prompt).pop().unwrap();
    let ctx = GlobalContext {
        log_joint,
        layout: layout.clone(),
    };
    let masses = prefix_masses(&model, prompt);
    let mut worst: f64 = 0.0;
    for level in 0..layout.horizon() {
        for code in 0..layout.width(level) {
            if masses[level][code] <= 0.0 {
                continue;
            }
            let prefix = layout.decode(level, code);
            let row = model.row_at(prompt, level, code);
            let logits: Vec<f64> = (0..v)
                .map(|tok| {
                    if row[tok] > 0.0 {
                        (1.0 + alpha) * row[tok].ln()
                            - alpha * fut.at(prompt, level + 1, code * v + tok)
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let norm = log_sum_exp(&logits);
            let z_prefix = ctx.log_mass(&prefix, alpha);
            let mut ext = prefix.clone();
            ext.push(0);
            for tok in (0..v).filter(|&tok| row[tok] > 0.0) {
                *ext.last_mut().unwrap() = tok;
                let global = ctx.log_mass(&ext, alpha) - z_prefix;
                worst = worst.max((global - (logits[tok] - norm)).abs());
            }
        }
    }
    Ok(worst)
}
