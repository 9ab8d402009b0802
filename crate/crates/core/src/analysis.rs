//! Corpus unigram counts, rank-frequency exponents and log-log regression.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::powerlaw::PowerLaw;
use crate::seed::{derived_rng, stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tokenizer {
    /// Lowercase, then split on Unicode whitespace.
    #[default]
    LowercaseWhitespace,
    /// Split on Unicode whitespace only.
    Whitespace,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenCounts {
    counts: HashMap<String, u64>,
    total: u64,
}

impl TokenCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn add(&mut self, token: &str, count: u64) {
        if count == 0 {
            return;
        }
        *self.counts.entry(token.to_owned()).or_insert(0) += count;
        self.total += count;
    }

    pub fn merge(&mut self, other: &TokenCounts) {
        for (tok, &c) in &other.counts {
            self.add(tok, c);
        }
    }

    /// Adds every token of a UTF-8 stream. Invalid UTF-8 is reported with the
    /// byte offset of the first bad byte; counts from earlier lines are kept.
    pub fn ingest<R: BufRead>(&mut self, mut reader: R, tokenizer: Tokenizer) -> Result<()> {
        let mut buf = Vec::new();
        let mut offset: u64 = 0;
        loop {
            buf.clear();
            let n = reader.read_until(b'\n', &mut buf)?;
            if n == 0 {
                return Ok(());
            }
            let line = std::str::from_utf8(&buf).map_err(|e| Error::InvalidUtf8 {
                offset: offset + e.valid_up_to() as u64,
            })?;
            match tokenizer {
                Tokenizer::LowercaseWhitespace => {
                    for tok in line.to_lowercase().split_whitespace() {
                        self.add(tok, 1);
                    }
                }
                Tokenizer::Whitespace => {
                    for tok in line.split_whitespace() {
                        self.add(tok, 1);
                    }
                }
            }
            offset += n as u64;
        }
    }

    /// Tokens by descending count, ties in lexicographic order.
    pub fn ranked(&self) -> Vec<(&str, u64)> {
        let mut v: Vec<(&str, u64)> = self.counts.iter().map(|(t, &c)| (t.as_str(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }

    /// CSV `token,count` in rank order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "token,count")?;
        for (tok, c) in self.ranked() {
            writeln!(w, "{},{}", csv_field(tok), c)?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn ingest_corpus<R: BufRead>(reader: R, tokenizer: Tokenizer) -> Result<TokenCounts> {
    let mut counts = TokenCounts::new();
    counts.ingest(reader, tokenizer)?;
    Ok(counts)
}

/// Ordinary least squares `y = slope x + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_linear(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::Fit(format!(
            "{} x values but {} y values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::Fit("need at least three points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite data".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("all x values are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// OLS in `log10`-`log10` space.
pub type LogLogFit = LinearFit;

impl LinearFit {
    /// CSV `slope,intercept,r_squared`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "slope,intercept,r_squared")?;
        writeln!(
            w,
            "{},{},{}",
            fmt_f64(self.slope),
            fmt_f64(self.intercept),
            fmt_f64(self.r_squared)
        )?;
        Ok(())
    }
}

pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<LogLogFit> {
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::domain("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.log10()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.log10()).collect();
    fit_linear(&lx, &ly)
}

/// Rank-frequency fit over ranks `1..=top_n`. The Zipf exponent is `-slope`.
pub fn zipf_exponent(counts: &TokenCounts, top_n: usize) -> Result<LogLogFit> {
    if top_n < 3 {
        return Err(Error::Fit("top_n must be at least 3".into()));
    }
    let ranked = counts.ranked();
    if ranked.len() < top_n {
        return Err(Error::Fit(format!(
            "{} distinct tokens, fewer than top_n = {top_n}",
            ranked.len()
        )));
    }
    let ranks: Vec<f64> = (1..=top_n).map(|r| r as f64).collect();
    let freqs: Vec<f64> = ranked[..top_n].iter().map(|&(_, c)| c as f64).collect();
    fit_loglog(&ranks, &freqs)
}

/// Predicted log-log slope of calibration error against model size for a
/// source with the given Zipf exponent: `1/a - 1`.
pub fn predicted_scaling_exponent(zipf_exponent: f64) -> Result<f64> {
    if !(zipf_exponent > 0.0 && zipf_exponent.is_finite()) {
        return Err(Error::domain(format!(
            "zipf exponent {zipf_exponent} must be positive"
        )));
    }
    Ok(1.0 / zipf_exponent - 1.0)
}

/// `y_0 = x_0`, `y_t = a x_t + (1 - a) y_{t-1}`.
pub fn exponential_smooth(series: &[f64], factor: f64) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::domain("cannot smooth an empty series"));
    }
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::domain(format!(
            "smoothing factor {factor} outside (0, 1]"
        )));
    }
    if factor == 1.0 {
        return Ok(series.to_vec());
    }
    let mut out = Vec::with_capacity(series.len());
    let mut y = series[0];
    out.push(y);
    for &x in &series[1..] {
        // Same recurrence; this form leaves constant series exact.
        y += factor * (x - y);
        out.push(y);
    }
    Ok(out)
}

const CORPUS_LINE: u64 = 1000;

/// Writes `num_tokens` tokens `w<rank>` drawn from `pl`, 1000 per line.
/// Lines are generated in parallel from per-line derived seeds.
pub fn write_synthetic_corpus<W: Write, R: Rng + ?Sized>(
    pl: &PowerLaw,
    num_tokens: u64,
    rng: &mut R,
    mut w: W,
) -> Result<()> {
    let master: u64 = rng.random();
    let sampler = pl.sampler();
    let lines = num_tokens.div_ceil(CORPUS_LINE);
    // Bounded batches keep memory flat for large corpora.
    for batch in (0..lines).collect::<Vec<_>>().chunks(1024) {
        let text: Vec<String> = batch
            .par_iter()
            .map(|&line| {
                let mut r = derived_rng(master, stream::CORPUS, line);
                let n = CORPUS_LINE.min(num_tokens - line * CORPUS_LINE);
                let toks: Vec<String> = (0..n)
                    .map(|_| format!("w{}", sampler.sample(&mut r) + 1))
                    .collect();
                toks.join(" ")
            })
            .collect();
        for line in text {
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn ingestion_examples() {
        let c = ingest_corpus("a b a".as_bytes(), Tokenizer::default()).unwrap();
        assert_eq!((c.get("a"), c.get("b"), c.total()), (2, 1, 3));
        let empty = ingest_corpus("".as_bytes(), Tokenizer::default()).unwrap();
        assert_eq!(empty.total(), 0);
        assert!(zipf_exponent(&empty, 5000).is_err());

        let text = "The cat\nthe DOG  the\n";
        let mut twice = ingest_corpus(text.as_bytes(), Tokenizer::default()).unwrap();
        twice.ingest(text.as_bytes(), Tokenizer::default()).unwrap();
        assert_eq!(twice.get("the"), 6);
        assert_eq!(twice.total(), 10);
        let raw = ingest_corpus(text.as_bytes(), Tokenizer::Whitespace).unwrap();
        assert_eq!((raw.get("The"), raw.get("the")), (1, 2));
    }

    #[test]
    fn invalid_utf8_offset() {
        let bytes = b"ok line\nab\xffcd\n";
        match ingest_corpus(&bytes[..], Tokenizer::default()) {
            Err(Error::InvalidUtf8 { offset }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ranking_breaks_ties_lexicographically() {
        let c = ingest_corpus("b a c a b".as_bytes(), Tokenizer::default()).unwrap();
        assert_eq!(c.ranked(), vec![("a", 2), ("b", 2), ("c", 1)]);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "token,count\na,2\nb,2\nc,1\n"
        );
    }

    #[test]
    fn exact_power_law_counts() {
        let mut c = TokenCounts::new();
        for i in 1..=5000u64 {
            c.add(&format!("t{i}"), 100_000_000 / i);
        }
        let fit = zipf_exponent(&c, 5000).unwrap();
        assert!((-fit.slope - 1.0).abs() < 0.02);
        let mut doubled = c.clone();
        doubled.merge(&c);
        assert!((zipf_exponent(&doubled, 5000).unwrap().slope - fit.slope).abs() < 1e-12);
    }

    #[test]
    fn loglog_recovers_power_law() {
        let xs: Vec<f64> = (1..=20).map(|i| 10f64.powf(i as f64 * 0.15)).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x.powf(-0.5)).collect();
        let fit = fit_loglog(&xs, &ys).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.intercept - 2f64.log10()).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-10);
        let scaled: Vec<f64> = ys.iter().map(|y| 7.0 * y).collect();
        let g = fit_loglog(&xs, &scaled).unwrap();
        assert!((g.slope - fit.slope).abs() < 1e-10);
        assert!((g.intercept - fit.intercept - 7f64.log10()).abs() < 1e-10);
    }

    #[test]
    fn loglog_errors() {
        assert!(fit_loglog(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(fit_loglog(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(fit_loglog(&[1.0, 2.0, 0.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(fit_loglog(&[1.0, 2.0, 3.0], &[1.0, -2.0, 3.0]).is_err());
        assert!(fit_loglog(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn noisy_loglog_slope() {
        use rand_distr::{Distribution, Normal};
        let noise = Normal::new(0.0, 0.05).unwrap();
        for seed in 0..10 {
            let mut rng = rng_from_seed(seed);
            let xs: Vec<f64> = (0..20).map(|i| 10f64.powf(3.0 * i as f64 / 19.0)).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|x| 3.0 * x.powf(-0.7) * f64::exp(noise.sample(&mut rng)))
                .collect();
            assert!(
                (fit_loglog(&xs, &ys).unwrap().slope + 0.7).abs() < 0.03,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn predicted_exponents() {
        assert!((predicted_scaling_exponent(1.5).unwrap() + 1.0 / 3.0).abs() < 1e-15);
        assert!(predicted_scaling_exponent(0.0).is_err());
    }

    #[test]
    fn smoothing() {
        assert_eq!(
            exponential_smooth(&[0.0, 10.0], 0.2).unwrap(),
            vec![0.0, 2.0]
        );
        assert_eq!(exponential_smooth(&[3.0; 4], 0.2).unwrap(), vec![3.0; 4]);
        assert_eq!(
            exponential_smooth(&[1.0, 5.0, 2.0], 1.0).unwrap(),
            vec![1.0, 5.0, 2.0]
        );
        assert!(exponential_smooth(&[], 0.2).is_err());
        assert!(exponential_smooth(&[1.0], 0.0).is_err());
        let xs = [4.0, -1.0, 7.5, 2.0, 0.0];
        assert!(exponential_smooth(&xs, 0.3)
            .unwrap()
            .iter()
            .all(|&y| (-1.0..=7.5).contains(&y)));
    }

    #[test]
    fn synthetic_corpus_round_trip() {
        let pl = PowerLaw::new(1.1, 100).unwrap();
        let mut buf = Vec::new();
        write_synthetic_corpus(&pl, 2500, &mut rng_from_seed(1), &mut buf).unwrap();
        let c = ingest_corpus(&buf[..], Tokenizer::default()).unwrap();
        assert_eq!(c.total(), 2500);
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 3);
        let mut again = Vec::new();
        write_synthetic_corpus(&pl, 2500, &mut rng_from_seed(1), &mut again).unwrap();
        assert_eq!(buf, again);
    }
}
