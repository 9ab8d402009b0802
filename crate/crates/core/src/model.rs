//! Fully tabular autoregressive sequence models.
//!
//! A [`TabularModel`] stores one next-token distribution for every prompt and
//! every prefix of length `0..T`. Prefixes of length `l` are addressed by
//! their big-endian base-`V` code, so the children of prefix `c` are
//! `c * V + v` and all sequences sharing a prefix form a contiguous block of
//! codes one level down.

use std::borrow::Cow;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::{fmt_f64, parse_f64};
use crate::seed::rng_from_seed;

/// Largest `V^T` any enumerating operation will accept by default.
pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Tolerance on row and prompt-weight normalization.
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub payload: Vec<usize>,
}

impl Prompt {
    pub fn new(id: impl Into<String>, payload: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            payload,
        }
    }

    pub fn empty() -> Self {
        Self::new("empty", Vec::new())
    }
}

/// A finite prompt distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    entries: Vec<(Prompt, f64)>,
}

impl PromptSet {
    pub fn new(entries: Vec<(Prompt, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::domain("prompt set must contain at least one prompt"));
        }
        let mut total = 0.0;
        for (i, (p, w)) in entries.iter().enumerate() {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::domain(format!(
                    "prompt weight {w} is not a probability"
                )));
            }
            if p.id.is_empty() || p.id.chars().any(char::is_whitespace) {
                return Err(Error::domain(format!(
                    "prompt id {:?} must be nonempty without whitespace",
                    p.id
                )));
            }
            if entries[..i].iter().any(|(q, _)| q.id == p.id) {
                return Err(Error::domain(format!("duplicate prompt id {:?}", p.id)));
            }
            total += w;
        }
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::domain(format!(
                "prompt weights sum to {total}, not 1"
            )));
        }
        if let Some((p, _)) = entries
            .iter()
            .find(|(p, _)| p.payload.len() != entries[0].0.payload.len())
        {
            return Err(Error::domain(format!(
                "prompt {:?} payload length differs from the others",
                p.id
            )));
        }
        Ok(Self { entries })
    }

    /// The default single empty prompt with weight 1.
    pub fn single() -> Self {
        Self {
            entries: vec![(Prompt::empty(), 1.0)],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prompt(&self, index: usize) -> &Prompt {
        &self.entries[index].0
    }

    pub fn weight(&self, index: usize) -> f64 {
        self.entries[index].1
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|(p, _)| p.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Prompt, f64)> {
        self.entries.iter().map(|(p, w)| (p, *w))
    }

    /// Draws a prompt index according to the weights.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.entries.len() == 1 {
            return 0;
        }
        let weights: Vec<f64> = self.entries.iter().map(|(_, w)| *w).collect();
        sample_categorical(&weights, rng)
    }
}

/// Prefix addressing shared by models and per-prefix tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixLayout {
    vocab_size: usize,
    horizon: usize,
    // offsets[l] = number of prefixes shorter than l; offsets[T + 1] is the total.
    offsets: Vec<usize>,
}

impl PrefixLayout {
    pub fn new(vocab_size: usize, horizon: usize) -> Self {
        let mut offsets = Vec::with_capacity(horizon + 2);
        let mut acc = 0usize;
        let mut width = 1usize;
        for _ in 0..=horizon {
            offsets.push(acc);
            acc += width;
            width = width.saturating_mul(vocab_size);
        }
        offsets.push(acc);
        Self {
            vocab_size,
            horizon,
            offsets,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of prefixes of exactly length `level`.
    pub fn width(&self, level: usize) -> usize {
        self.offsets[level + 1] - self.offsets[level]
    }

    /// Flat index of a prefix of length `level` with the given code, counting
    /// all shorter prefixes first.
    pub fn index(&self, level: usize, code: usize) -> usize {
        self.offsets[level] + code
    }

    /// Number of prefixes of length `0..=max_level`.
    pub fn count_through(&self, max_level: usize) -> usize {
        self.offsets[max_level + 1]
    }

    pub fn encode(&self, prefix: &[usize]) -> usize {
        prefix.iter().fold(0, |c, &v| c * self.vocab_size + v)
    }

    pub fn decode(&self, level: usize, mut code: usize) -> Vec<usize> {
        let mut out = vec![0; level];
        for slot in out.iter_mut().rev() {
            *slot = code % self.vocab_size;
            code /= self.vocab_size;
        }
        out
    }
}

/// `V^T` if it is within `cap`, else an enumeration error.
pub fn check_enumerable(vocab_size: usize, horizon: usize, cap: u64) -> Result<u64> {
    let err = || Error::EnumerationInfeasible {
        vocab: vocab_size,
        horizon,
        cap,
    };
    let n = (vocab_size as u64)
        .checked_pow(horizon as u32)
        .ok_or_else(err)?;
    if n > cap {
        return Err(err());
    }
    Ok(n)
}

/// Anything that can produce next-token distributions.
pub trait Autoregressive {
    fn vocab_size(&self) -> usize;
    fn horizon(&self) -> usize;
    fn prompts(&self) -> &PromptSet;
    /// Next-token distribution after `prefix`, which must be shorter than the horizon.
    fn row(&self, prompt: usize, prefix: &[usize]) -> Cow<'_, [f64]>;
}

/// Anything with an exact tabular form, used by the enumerating operations.
pub trait Tabulate {
    fn tabulate(&self) -> Result<Cow<'_, TabularModel>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularModel {
    layout: PrefixLayout,
    prompts: PromptSet,
    // One flat table per prompt: row r occupies [r * V, (r + 1) * V).
    tables: Vec<Vec<f64>>,
}

impl TabularModel {
    /// Builds a model from a row generator, checking every row.
    pub fn from_fn<F>(
        vocab_size: usize,
        horizon: usize,
        prompts: PromptSet,
        mut row: F,
    ) -> Result<Self>
    where
        F: FnMut(usize, &[usize]) -> Vec<f64>,
    {
        Self::check_shape(vocab_size, horizon)?;
        let layout = PrefixLayout::new(vocab_size, horizon);
        let rows = layout.count_through(horizon - 1);
        let mut tables = Vec::with_capacity(prompts.len());
        for prompt in 0..prompts.len() {
            let mut table = Vec::with_capacity(rows * vocab_size);
            for level in 0..horizon {
                for code in 0..layout.width(level) {
                    let prefix = layout.decode(level, code);
                    let r = row(prompt, &prefix);
                    check_row(&r, vocab_size).map_err(|e| {
                        Error::domain(format!("row for prompt {prompt}, prefix {prefix:?}: {e}"))
                    })?;
                    table.extend_from_slice(&r);
                }
            }
            tables.push(table);
        }
        Ok(Self {
            layout,
            prompts,
            tables,
        })
    }

    fn check_shape(vocab_size: usize, horizon: usize) -> Result<()> {
        if vocab_size < 1 || horizon < 1 {
            return Err(Error::domain(
                "vocabulary size and horizon must be at least 1",
            ));
        }
        check_enumerable(vocab_size, horizon, DEFAULT_ENUMERATION_CAP)?;
        Ok(())
    }

    /// Every row uniform.
    pub fn uniform(vocab_size: usize, horizon: usize) -> Result<Self> {
        let u = 1.0 / vocab_size as f64;
        Self::from_fn(vocab_size, horizon, PromptSet::single(), |_, _| {
            vec![u; vocab_size]
        })
    }

    /// One-hot rows that always emit `sequence[len(prefix)]`.
    pub fn forced(vocab_size: usize, sequence: &[usize]) -> Result<Self> {
        if sequence.iter().any(|&v| v >= vocab_size) {
            return Err(Error::domain("forced token outside the vocabulary"));
        }
        Self::from_fn(
            vocab_size,
            sequence.len(),
            PromptSet::single(),
            |_, prefix| {
                let mut r = vec![0.0; vocab_size];
                r[sequence[prefix.len()]] = 1.0;
                r
            },
        )
    }

    /// Every row drawn independently from a symmetric Dirichlet.
    pub fn random(
        vocab_size: usize,
        horizon: usize,
        concentration: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::random_with_prompts(
            vocab_size,
            horizon,
            concentration,
            seed,
            PromptSet::single(),
        )
    }

    pub fn random_with_prompts(
        vocab_size: usize,
        horizon: usize,
        concentration: f64,
        seed: u64,
        prompts: PromptSet,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::domain("random models need at least two tokens"));
        }
        if !(concentration.is_finite() && concentration > 0.0) {
            return Err(Error::domain(format!(
                "concentration {concentration} must be positive"
            )));
        }
        Self::check_shape(vocab_size, horizon)?;
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::domain(e.to_string()))?;
        let mut rng = rng_from_seed(seed);
        Self::from_fn(vocab_size, horizon, prompts, |_, _| loop {
            let draws: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            // Tiny concentrations can underflow a coordinate to zero; redraw.
            if total > 0.0 && total.is_finite() && draws.iter().all(|&g| g > 0.0) {
                let row: Vec<f64> = draws.iter().map(|g| g / total).collect();
                if row.iter().all(|&p| p > 0.0) {
                    break row;
                }
            }
        })
    }

    pub fn layout(&self) -> &PrefixLayout {
        &self.layout
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    /// Row by level and prefix code, without bounds reporting.
    pub fn row_at(&self, prompt: usize, level: usize, code: usize) -> &[f64] {
        let v = self.layout.vocab_size;
        let r = self.layout.index(level, code);
        &self.tables[prompt][r * v..(r + 1) * v]
    }

    /// The stored next-token distribution, with domain checks.
    pub fn conditional(&self, prompt: &Prompt, prefix: &[usize]) -> Result<&[f64]> {
        let index = self
            .prompts
            .index_of(&prompt.id)
            .ok_or_else(|| Error::domain(format!("unknown prompt {:?}", prompt.id)))?;
        self.conditional_at(index, prefix)
    }

    pub fn conditional_at(&self, prompt: usize, prefix: &[usize]) -> Result<&[f64]> {
        if prompt >= self.prompts.len() {
            return Err(Error::domain(format!("prompt index {prompt} out of range")));
        }
        self.check_prefix(prefix, self.layout.horizon - 1)?;
        Ok(self.row_at(prompt, prefix.len(), self.layout.encode(prefix)))
    }

    pub(crate) fn check_prefix(&self, prefix: &[usize], max_len: usize) -> Result<()> {
        if prefix.len() > max_len {
            return Err(Error::domain(format!(
                "prefix of length {} exceeds the maximum {max_len}",
                prefix.len()
            )));
        }
        if let Some(&v) = prefix.iter().find(|&&v| v >= self.layout.vocab_size) {
            return Err(Error::domain(format!(
                "token {v} outside vocabulary of size {}",
                self.layout.vocab_size
            )));
        }
        Ok(())
    }

    /// Log-probability (nats) of a complete length-`T` sequence.
    pub fn sequence_logprob(&self, prompt: usize, sequence: &[usize]) -> Result<f64> {
        if sequence.len() != self.layout.horizon {
            return Err(Error::domain(format!(
                "sequence has length {}, expected {}",
                sequence.len(),
                self.layout.horizon
            )));
        }
        self.check_prefix(sequence, self.layout.horizon)?;
        if prompt >= self.prompts.len() {
            return Err(Error::domain(format!("prompt index {prompt} out of range")));
        }
        let mut code = 0;
        let mut total = 0.0;
        for (level, &tok) in sequence.iter().enumerate() {
            total += self.row_at(prompt, level, code)[tok].ln();
            code = code * self.layout.vocab_size + tok;
        }
        Ok(total)
    }

    /// Applies `f` to every row, keeping shape and prompts.
    pub fn map_rows<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let v = self.layout.vocab_size;
        let mut tables = Vec::with_capacity(self.tables.len());
        for table in &self.tables {
            let mut out = Vec::with_capacity(table.len());
            for row in table.chunks_exact(v) {
                let r = f(row);
                check_row(&r, v).map_err(Error::Domain)?;
                out.extend_from_slice(&r);
            }
            tables.push(out);
        }
        Ok(Self {
            layout: self.layout.clone(),
            prompts: self.prompts.clone(),
            tables,
        })
    }

    /// Checks that two models share vocabulary, horizon and prompt distribution.
    pub fn check_compatible(&self, other: &TabularModel) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Incompatible(format!(
                "shapes (V={}, T={}) and (V={}, T={}) differ",
                self.layout.vocab_size,
                self.layout.horizon,
                other.layout.vocab_size,
                other.layout.horizon
            )));
        }
        if self.prompts != other.prompts {
            return Err(Error::Incompatible("prompt sets differ".into()));
        }
        Ok(())
    }

    /// Writes the text form: a header, then one line per row.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "entcal-tabular-model\t1")?;
        writeln!(w, "vocab_size\t{}", self.layout.vocab_size)?;
        writeln!(w, "horizon\t{}", self.layout.horizon)?;
        writeln!(w, "prompts\t{}", self.prompts.len())?;
        for (p, weight) in self.prompts.iter() {
            writeln!(
                w,
                "prompt\t{}\t{}\t{}",
                p.id,
                fmt_f64(weight),
                join(&p.payload)
            )?;
        }
        let v = self.layout.vocab_size;
        for (pi, (p, _)) in self.prompts.iter().enumerate() {
            for level in 0..self.layout.horizon {
                for code in 0..self.layout.width(level) {
                    let probs: Vec<String> = self
                        .row_at(pi, level, code)
                        .iter()
                        .map(|&x| fmt_f64(x))
                        .collect();
                    writeln!(
                        w,
                        "{}\t{}\t{}",
                        p.id,
                        join(&self.layout.decode(level, code)),
                        probs.join(" ")
                    )?;
                }
            }
            debug_assert_eq!(
                self.tables[pi].len(),
                self.layout.count_through(self.layout.horizon - 1) * v
            );
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("model text is ASCII")
    }

    /// Parses the text form written by [`TabularModel::write_to`].
    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::parse(
                    0,
                    format!("unexpected end of input, expected {what}"),
                )),
            }
        };
        let (n, magic) = next("header")?;
        if magic != "entcal-tabular-model\t1" {
            return Err(Error::parse(n, "missing entcal-tabular-model header"));
        }
        let vocab_size = header_field(next("vocab_size")?, "vocab_size")?;
        let horizon = header_field(next("horizon")?, "horizon")?;
        let num_prompts = header_field(next("prompts")?, "prompts")?;
        Self::check_shape(vocab_size, horizon)?;
        let mut entries = Vec::with_capacity(num_prompts);
        for _ in 0..num_prompts {
            let (n, line) = next("prompt line")?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 || fields[0] != "prompt" {
                return Err(Error::parse(n, "expected `prompt <id> <weight> <payload>`"));
            }
            let weight =
                parse_f64(fields[2]).ok_or_else(|| Error::parse(n, "bad prompt weight"))?;
            let payload = parse_tokens(fields[3]).map_err(|m| Error::parse(n, m))?;
            entries.push((Prompt::new(fields[1], payload), weight));
        }
        let prompts = PromptSet::new(entries)?;
        let layout = PrefixLayout::new(vocab_size, horizon);
        let rows = layout.count_through(horizon - 1);
        let mut tables = vec![vec![f64::NAN; rows * vocab_size]; prompts.len()];
        let mut seen = vec![vec![false; rows]; prompts.len()];
        let mut filled = 0usize;
        for (n, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(
                    n,
                    "expected `<prompt id> <prefix> <probabilities>`",
                ));
            }
            let pi = prompts
                .index_of(fields[0])
                .ok_or_else(|| Error::parse(n, format!("unknown prompt {:?}", fields[0])))?;
            let prefix = parse_tokens(fields[1]).map_err(|m| Error::parse(n, m))?;
            if prefix.len() >= horizon || prefix.iter().any(|&t| t >= vocab_size) {
                return Err(Error::parse(n, "prefix out of range"));
            }
            let probs: Vec<f64> = fields[2]
                .split(' ')
                .map(|s| {
                    parse_f64(s).ok_or_else(|| Error::parse(n, format!("bad probability {s:?}")))
                })
                .collect::<Result<_>>()?;
            check_row(&probs, vocab_size).map_err(|m| Error::parse(n, m))?;
            let r = layout.index(prefix.len(), layout.encode(&prefix));
            if std::mem::replace(&mut seen[pi][r], true) {
                return Err(Error::parse(n, "duplicate row"));
            }
            tables[pi][r * vocab_size..(r + 1) * vocab_size].copy_from_slice(&probs);
            filled += 1;
        }
        if filled != rows * prompts.len() {
            return Err(Error::parse(
                0,
                format!("expected {} rows, found {filled}", rows * prompts.len()),
            ));
        }
        Ok(Self {
            layout,
            prompts,
            tables,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::read_from(text.as_bytes())
    }
}

impl Autoregressive for TabularModel {
    fn vocab_size(&self) -> usize {
        self.layout.vocab_size
    }

    fn horizon(&self) -> usize {
        self.layout.horizon
    }

    fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    fn row(&self, prompt: usize, prefix: &[usize]) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.row_at(prompt, prefix.len(), self.layout.encode(prefix)))
    }
}

impl Tabulate for TabularModel {
    fn tabulate(&self) -> Result<Cow<'_, TabularModel>> {
        Ok(Cow::Borrowed(self))
    }
}

fn header_field((n, line): (usize, String), key: &str) -> Result<usize> {
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('\t'))
        .ok_or_else(|| Error::parse(n, format!("expected `{key}` header")))?;
    rest.parse()
        .map_err(|_| Error::parse(n, format!("bad {key} value {rest:?}")))
}

fn parse_tokens(s: &str) -> std::result::Result<Vec<usize>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|t| t.parse().map_err(|_| format!("bad token {t:?}")))
        .collect()
}

fn join(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_row(row: &[f64], vocab_size: usize) -> std::result::Result<(), String> {
    if row.len() != vocab_size {
        return Err(format!(
            "row has {} entries, expected {vocab_size}",
            row.len()
        ));
    }
    if row.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
        return Err("row has a negative or non-finite entry".into());
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(format!("row sums to {total}, not 1"));
    }
    Ok(())
}

/// Inverse-CDF draw from an unnormalized-safe probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Ancestral sample of a continuation of `prefix` up to the horizon.
/// Returns the appended tokens and their total log-probability.
pub fn sample_continuation<M, R>(
    model: &M,
    prompt: usize,
    prefix: &[usize],
    rng: &mut R,
) -> (Vec<usize>, f64)
where
    M: Autoregressive + ?Sized,
    R: Rng + ?Sized,
{
    let mut seq = prefix.to_vec();
    let mut logp = 0.0;
    while seq.len() < model.horizon() {
        let row = model.row(prompt, &seq);
        let tok = sample_categorical(&row, rng);
        logp += row[tok].ln();
        seq.push(tok);
    }
    (seq.split_off(prefix.len()), logp)
}

/// Full length-`T` sequence by ancestral sampling.
pub fn sample_sequence<M, R>(model: &M, prompt: usize, rng: &mut R) -> Vec<usize>
where
    M: Autoregressive + ?Sized,
    R: Rng + ?Sized,
{
    sample_continuation(model, prompt, &[], rng).0
}
