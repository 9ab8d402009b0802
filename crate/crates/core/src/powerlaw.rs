//! Zipf-distributed urns, the mass of items seen exactly once, and a
//! two-state "derailing" model of entropy growth over a generation.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{fit_linear, fit_loglog, LogLogFit};
use crate::error::{Error, Result};
use crate::fmt::fmt_f64;
use crate::seed::{derived_rng, stream};

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in values {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// `p_i = i^(-exponent) / Z` on items `1..=v`.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerLaw {
    exponent: f64,
    vocab: usize,
    normalizer: f64,
}

impl PowerLaw {
    pub fn new(exponent: f64, vocab: usize) -> Result<Self> {
        if !(exponent.is_finite() && exponent > 0.0) {
            return Err(Error::domain(format!(
                "zipf exponent {exponent} must be positive"
            )));
        }
        if vocab == 0 {
            return Err(Error::domain("vocabulary must be nonempty"));
        }
        // Smallest terms first.
        let normalizer = compensated_sum((1..=vocab).rev().map(|i| (i as f64).powf(-exponent)));
        Ok(Self {
            exponent,
            vocab,
            normalizer,
        })
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// `Z = sum_i i^(-exponent)`.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// Probability of the item of rank `i` (1-based).
    pub fn prob(&self, i: usize) -> f64 {
        assert!(
            i >= 1 && i <= self.vocab,
            "rank {i} outside 1..={}",
            self.vocab
        );
        (i as f64).powf(-self.exponent) / self.normalizer
    }

    pub fn sampler(&self) -> PowerLawSampler {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=self.vocab)
            .map(|i| {
                acc += self.prob(i);
                acc
            })
            .collect();
        *cdf.last_mut().expect("nonempty") = f64::INFINITY;
        PowerLawSampler { cdf }
    }
}

/// Inverse-CDF sampler over a cumulative table.
#[derive(Clone, Debug)]
pub struct PowerLawSampler {
    cdf: Vec<f64>,
}

impl PowerLawSampler {
    /// A 0-based item index.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= u)
    }
}

/// `sum_i p_i (1 - p_i)^(m-1)`: the expected fraction of `m` draws that are
/// of an item drawn exactly once.
pub fn expected_singleton_mass_exact(pl: &PowerLaw, m: u64) -> Result<f64> {
    if m == 0 {
        return Err(Error::domain("training-set size must be at least 1"));
    }
    if m == 1 {
        return Ok(1.0);
    }
    let k = (m - 1) as f64;
    Ok(compensated_sum((1..=pl.vocab).rev().map(|i| {
        let p = pl.prob(i);
        p * (k * (-p).ln_1p()).exp()
    })))
}

/// Large-`m` form `(1/a) Z^(-1/a) m^(1/a - 1) Gamma(1 - 1/a)` for an
/// infinite urn with `p_i = i^(-a) / Z`.
pub fn singleton_mass_asymptotic(exponent: f64, normalizer: f64, m: u64) -> Result<f64> {
    if !(exponent > 1.0) {
        return Err(Error::domain(format!(
            "the asymptotic singleton mass needs exponent > 1 (got {exponent}); Gamma(1 - 1/a) diverges otherwise"
        )));
    }
    if !(normalizer > 0.0) || m == 0 {
        return Err(Error::domain(
            "normalizer must be positive and m at least 1",
        ));
    }
    let inv = 1.0 / exponent;
    Ok(inv
        * normalizer.powf(-inv)
        * (m as f64).powf(inv - 1.0)
        * statrs::function::gamma::gamma(1.0 - inv))
}

/// One urn of `m` draws.
#[derive(Clone, Debug, PartialEq)]
pub struct UrnResult {
    pub m: u64,
    /// `(item, count)` for every item drawn, by item index.
    pub counts: Vec<(usize, u64)>,
    pub singletons: u64,
}

impl UrnResult {
    pub fn singleton_mass(&self) -> f64 {
        self.singletons as f64 / self.m as f64
    }
}

pub fn draw_urn<R: Rng + ?Sized>(sampler: &PowerLawSampler, m: u64, rng: &mut R) -> UrnResult {
    let mut draws: Vec<usize> = (0..m).map(|_| sampler.sample(rng)).collect();
    draws.sort_unstable();
    let mut counts: Vec<(usize, u64)> = Vec::new();
    for d in draws {
        match counts.last_mut() {
            Some((item, c)) if *item == d => *c += 1,
            _ => counts.push((d, 1)),
        }
    }
    let singletons = counts.iter().filter(|&&(_, c)| c == 1).count() as u64;
    UrnResult {
        m,
        counts,
        singletons,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UrnAggregate {
    pub m: u64,
    pub mean: f64,
    /// `NaN` for a single trial.
    pub stderr: f64,
}

/// Mean and standard error of the singleton mass over `trials` urns.
pub fn simulate_urn<R: Rng + ?Sized>(
    pl: &PowerLaw,
    m: u64,
    trials: usize,
    rng: &mut R,
) -> Result<UrnAggregate> {
    simulate_urn_with(&pl.sampler(), m, trials, rng)
}

fn simulate_urn_with<R: Rng + ?Sized>(
    sampler: &PowerLawSampler,
    m: u64,
    trials: usize,
    rng: &mut R,
) -> Result<UrnAggregate> {
    if trials == 0 || m == 0 {
        return Err(Error::domain("need at least one trial and one draw"));
    }
    let master: u64 = rng.random();
    let masses: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|i| draw_urn(sampler, m, &mut derived_rng(master, stream::URN, i)).singleton_mass())
        .collect();
    let (mean, stderr) = mean_and_stderr(&masses);
    Ok(UrnAggregate { m, mean, stderr })
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let stderr = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        f64::NAN
    };
    (mean, stderr)
}

/// Distinct integers `round(start * 10^(k / per_decade))` up to `end`,
/// always including `end`.
pub fn geometric_grid(start: u64, end: u64, per_decade: usize) -> Result<Vec<u64>> {
    if start == 0 || end < start || per_decade == 0 {
        return Err(Error::domain(
            "grid needs 0 < start <= end and a positive density",
        ));
    }
    let mut grid = Vec::new();
    for k in 0.. {
        let x = (start as f64 * 10f64.powf(k as f64 / per_decade as f64)).round() as u64;
        if x >= end {
            break;
        }
        if grid.last() != Some(&x) {
            grid.push(x);
        }
    }
    grid.push(end);
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingletonSlope {
    pub fit: LogLogFit,
    pub points: Vec<UrnAggregate>,
}

/// Simulates every grid size and fits the log-log slope of the mean
/// singleton mass against `m`.
pub fn fit_singleton_slope<R: Rng + ?Sized>(
    pl: &PowerLaw,
    m_grid: &[u64],
    trials: usize,
    rng: &mut R,
) -> Result<SingletonSlope> {
    let (lo, hi) = match (m_grid.iter().min(), m_grid.iter().max()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Err(Error::Fit("empty m grid".into())),
    };
    if (hi as f64) < 10.0 * lo as f64 {
        return Err(Error::Fit("m grid must span at least one decade".into()));
    }
    if 3 * hi > pl.vocab() as u64 {
        return Err(Error::Fit(format!(
            "grid reaches m = {hi}, beyond v/3 = {}",
            pl.vocab() / 3
        )));
    }
    let sampler = pl.sampler();
    let master: u64 = rng.random();
    let points = m_grid
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            simulate_urn_with(
                &sampler,
                m,
                trials,
                &mut derived_rng(master, stream::URN, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = points.iter().map(|p| p.m as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean).collect();
    Ok(SingletonSlope {
        fit: fit_loglog(&xs, &ys)?,
        points,
    })
}

/// CSV `m,mean_singleton_mass,stderr`.
pub fn write_urn_csv<W: Write>(points: &[UrnAggregate], mut w: W) -> Result<()> {
    writeln!(w, "m,mean_singleton_mass,stderr")?;
    for p in points {
        writeln!(w, "{},{},{}", p.m, fmt_f64(p.mean), fmt_f64(p.stderr))?;
    }
    Ok(())
}

/// A generation that is healthy with entropy `base_entropy` per step until it
/// derails (probability `derail_prob` per step, permanently), after which each
/// step has entropy `base_entropy + entropy_bump`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerailConfig {
    pub base_entropy: f64,
    pub entropy_bump: f64,
    pub derail_prob: f64,
    pub length: usize,
}

impl DerailConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_entropy >= 0.0
            && self.entropy_bump >= 0.0
            && (0.0..=1.0).contains(&self.derail_prob))
        {
            return Err(Error::domain(
                "need base entropy >= 0, bump >= 0 and derail probability in [0, 1]",
            ));
        }
        Ok(())
    }

    /// `E H_t = H0 + (1 - (1 - q)^t) C` for `t = 1..=L`.
    pub fn expected_curve(&self) -> Vec<f64> {
        (1..=self.length)
            .map(|t| self.base_entropy + self.derailed_by(t) * self.entropy_bump)
            .collect()
    }

    fn derailed_by(&self, t: usize) -> f64 {
        -((t as f64) * (-self.derail_prob).ln_1p()).exp_m1()
    }

    /// `sum_t (E H_t - H0)`.
    pub fn miscalibration_exact(&self) -> f64 {
        self.entropy_bump * compensated_sum((1..=self.length).map(|t| self.derailed_by(t)))
    }

    /// `q C L (L - 1) / 2`, the linearized total.
    pub fn miscalibration_closed_form(&self) -> f64 {
        let l = self.length as f64;
        self.derail_prob * self.entropy_bump * l * (l - 1.0) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerailCurve {
    pub mean_entropy: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl DerailCurve {
    /// CSV `t,mean_entropy,stderr,exact_entropy`.
    pub fn write_csv<W: Write>(&self, cfg: &DerailConfig, mut w: W) -> Result<()> {
        writeln!(w, "t,mean_entropy,stderr,exact_entropy")?;
        for (t, ((m, s), e)) in self
            .mean_entropy
            .iter()
            .zip(&self.stderr)
            .zip(cfg.expected_curve())
            .enumerate()
        {
            writeln!(
                w,
                "{},{},{},{}",
                t + 1,
                fmt_f64(*m),
                fmt_f64(*s),
                fmt_f64(e)
            )?;
        }
        Ok(())
    }

    /// Least-squares slope of the mean entropy over steps `1..=steps`.
    pub fn initial_slope(&self, steps: usize) -> Result<f64> {
        let n = steps.min(self.mean_entropy.len());
        let xs: Vec<f64> = (1..=n).map(|t| t as f64).collect();
        Ok(fit_linear(&xs, &self.mean_entropy[..n])?.slope)
    }
}

const DERAIL_CHUNK: u64 = 4096;

/// Monte Carlo per-step mean entropy. Each trial draws its derail step from
/// the geometric distribution.
pub fn simulate_derailing<R: Rng + ?Sized>(
    cfg: &DerailConfig,
    trials: u64,
    rng: &mut R,
) -> Result<DerailCurve> {
    cfg.validate()?;
    if trials < 2 {
        return Err(Error::domain("need at least two trials"));
    }
    let master: u64 = rng.random();
    let len = cfg.length;
    let q = cfg.derail_prob;
    let log_survive = (-q).ln_1p();
    // first[t] = trials whose derail step is t + 1; index len collects "never".
    let first = (0..trials.div_ceil(DERAIL_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut r = derived_rng(master, stream::DERAIL, chunk);
            let mut hist = vec![0u64; len + 1];
            let n = DERAIL_CHUNK.min(trials - chunk * DERAIL_CHUNK);
            for _ in 0..n {
                let step = if q == 0.0 {
                    None
                } else if q == 1.0 {
                    Some(1.0)
                } else {
                    // 1 - U lies in (0, 1].
                    let u: f64 = 1.0 - r.random::<f64>();
                    Some((u.ln() / log_survive).floor() + 1.0)
                };
                match step {
                    Some(s) if s <= len as f64 => hist[s as usize - 1] += 1,
                    _ => hist[len] += 1,
                }
            }
            hist
        })
        .reduce(
            || vec![0u64; len + 1],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    let n = trials as f64;
    let mut derailed = 0u64;
    let mut mean_entropy = Vec::with_capacity(len);
    let mut stderr = Vec::with_capacity(len);
    for count in &first[..len] {
        derailed += count;
        let frac = derailed as f64 / n;
        mean_entropy.push(cfg.base_entropy + frac * cfg.entropy_bump);
        stderr.push(cfg.entropy_bump * (frac * (1.0 - frac) / (n - 1.0)).sqrt());
    }
    Ok(DerailCurve {
        mean_entropy,
        stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    /// Enumerates all `v^m` ordered draws.
    fn brute_force_singleton_mass(pl: &PowerLaw, m: u32) -> f64 {
        let v = pl.vocab();
        let mut total = 0.0;
        for code in 0..v.pow(m) {
            let mut counts = vec![0u32; v];
            let mut prob = 1.0;
            let mut c = code;
            for _ in 0..m {
                let item = c % v;
                c /= v;
                counts[item] += 1;
                prob *= pl.prob(item + 1);
            }
            let singles = counts.iter().filter(|&&k| k == 1).count();
            total += prob * singles as f64 / m as f64;
        }
        total
    }

    #[test]
    fn power_law_basics() {
        let pl = PowerLaw::new(1.5, 1000).unwrap();
        let total: f64 = (1..=1000).map(|i| pl.prob(i)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((1..1000).all(|i| pl.prob(i) > pl.prob(i + 1)));
        assert!(PowerLaw::new(0.0, 10).is_err());
        assert!(PowerLaw::new(1.0, 0).is_err());
    }

    #[test]
    fn exact_formula_matches_enumeration() {
        for v in 1..=4 {
            for m in 1..=5u32 {
                for a in [1.0, 1.5] {
                    let pl = PowerLaw::new(a, v).unwrap();
                    let exact = expected_singleton_mass_exact(&pl, m as u64).unwrap();
                    let brute = brute_force_singleton_mass(&pl, m);
                    assert!(
                        (exact - brute).abs() < 1e-12,
                        "v={v} m={m} a={a}: {exact} vs {brute}"
                    );
                }
            }
        }
        let pl = PowerLaw::new(1.0, 3).unwrap();
        assert!((expected_singleton_mass_exact(&pl, 2).unwrap() - 72.0 / 121.0).abs() < 1e-15);
        assert_eq!(
            expected_singleton_mass_exact(&PowerLaw::new(1.2, 1).unwrap(), 3).unwrap(),
            0.0
        );
        assert_eq!(expected_singleton_mass_exact(&pl, 1).unwrap(), 1.0);
        assert!(expected_singleton_mass_exact(&pl, 0).is_err());
    }

    #[test]
    fn asymptotic_form() {
        let z = 2.5;
        let a = 1.5;
        let s1 = singleton_mass_asymptotic(a, z, 1000).unwrap();
        let s2 = singleton_mass_asymptotic(a, z, 10_000).unwrap();
        assert!(((s2 / s1).log10() - (1.0 / a - 1.0)).abs() < 1e-12);
        // Gamma(1/3) to 1e-10 relative.
        let g = singleton_mass_asymptotic(a, 1.0, 1).unwrap() * a;
        assert!((g / 2.678938534707747 - 1.0).abs() < 1e-10);
        let g2 = singleton_mass_asymptotic(2.0, 1.0, 1).unwrap() * 2.0;
        assert!((g2 / std::f64::consts::PI.sqrt() - 1.0).abs() < 1e-10);
        assert!(singleton_mass_asymptotic(1.0, z, 10).is_err());
        assert!(singleton_mass_asymptotic(0.9, z, 10).is_err());
    }

    #[test]
    fn asymptotic_ratio_improves_along_grid() {
        // With m far below v the ratio closes in on 1; at larger m the finite
        // tail drags it back below 1.
        let pl = PowerLaw::new(1.5, 10_000_000).unwrap();
        let ratio = |m| {
            expected_singleton_mass_exact(&pl, m).unwrap()
                / singleton_mass_asymptotic(1.5, pl.normalizer(), m).unwrap()
        };
        let dist: Vec<f64> = geometric_grid(10, 100, 4)
            .unwrap()
            .into_iter()
            .map(|m| (ratio(m) - 1.0).abs())
            .collect();
        assert!(dist.windows(2).all(|w| w[1] <= w[0]), "{dist:?}");
        let far = ratio(1_000_000);
        assert!(far < ratio(1000) && far < 1.0);
    }

    #[test]
    fn asymptotic_within_five_percent_for_large_urn() {
        let pl = PowerLaw::new(1.5, 100_000_000).unwrap();
        let exact = expected_singleton_mass_exact(&pl, 1_000_000).unwrap();
        let approx = singleton_mass_asymptotic(1.5, pl.normalizer(), 1_000_000).unwrap();
        assert!((exact / approx - 1.0).abs() < 0.05);
    }

    #[test]
    fn sampler_and_urn() {
        let pl = PowerLaw::new(1.0, 1).unwrap();
        let mut rng = rng_from_seed(1);
        let agg = simulate_urn(&pl, 5, 10, &mut rng).unwrap();
        assert_eq!((agg.mean, agg.stderr), (0.0, 0.0));

        let pl = PowerLaw::new(1.2, 5).unwrap();
        let s = pl.sampler();
        let mut freq = [0usize; 5];
        for _ in 0..200_000 {
            freq[s.sample(&mut rng)] += 1;
        }
        for (i, f) in freq.iter().enumerate() {
            let p = pl.prob(i + 1);
            let se = (p * (1.0 - p) / 200_000.0).sqrt();
            assert!((*f as f64 / 200_000.0 - p).abs() < 4.0 * se);
        }
        let u = draw_urn(&s, 50, &mut rng);
        assert_eq!(u.counts.iter().map(|c| c.1).sum::<u64>(), 50);
        assert_eq!(
            u.singletons,
            u.counts.iter().filter(|c| c.1 == 1).count() as u64
        );
    }

    #[test]
    fn urn_mean_matches_exact_formula() {
        for (a, seed) in [(1.0, 1), (1.25, 2), (1.5, 3)] {
            let pl = PowerLaw::new(a, 10_000).unwrap();
            let agg = simulate_urn(&pl, 1000, 100, &mut rng_from_seed(seed)).unwrap();
            let exact = expected_singleton_mass_exact(&pl, 1000).unwrap();
            assert!(
                (agg.mean - exact).abs() <= 3.0 * agg.stderr,
                "a={a}: {} vs {exact}",
                agg.mean
            );
        }
        let pl = PowerLaw::new(1.25, 1000).unwrap();
        let a = simulate_urn(&pl, 100, 20, &mut rng_from_seed(9)).unwrap();
        let b = simulate_urn(&pl, 100, 20, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn urn_is_independent_of_thread_count() {
        let pl = PowerLaw::new(1.25, 1000).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_urn(&pl, 300, 64, &mut rng_from_seed(4)).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn grid_construction() {
        assert_eq!(geometric_grid(10, 100, 2).unwrap(), vec![10, 32, 100]);
        let g = geometric_grid(100, 33_333, 20).unwrap();
        assert_eq!(*g.last().unwrap(), 33_333);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(geometric_grid(0, 10, 1).is_err());
    }

    #[test]
    fn slope_fit_rejects_bad_grids() {
        let pl = PowerLaw::new(1.5, 300).unwrap();
        let mut rng = rng_from_seed(1);
        assert!(fit_singleton_slope(&pl, &[10, 50], 5, &mut rng).is_err());
        assert!(fit_singleton_slope(&pl, &[10, 101], 5, &mut rng).is_err());
        assert!(fit_singleton_slope(&pl, &[], 5, &mut rng).is_err());
    }

    #[test]
    fn derailing_trivial_cases() {
        let mut rng = rng_from_seed(2);
        for cfg in [
            DerailConfig {
                base_entropy: 1.0,
                entropy_bump: 2.0,
                derail_prob: 0.0,
                length: 20,
            },
            DerailConfig {
                base_entropy: 1.0,
                entropy_bump: 0.0,
                derail_prob: 0.3,
                length: 20,
            },
        ] {
            let c = simulate_derailing(&cfg, 1000, &mut rng).unwrap();
            assert!(c.mean_entropy.iter().all(|&h| h == 1.0));
            assert_eq!(cfg.miscalibration_exact(), 0.0);
        }
        let cfg = DerailConfig {
            base_entropy: 0.5,
            entropy_bump: 1.0,
            derail_prob: 1.0,
            length: 3,
        };
        assert_eq!(
            simulate_derailing(&cfg, 10, &mut rng).unwrap().mean_entropy,
            vec![1.5; 3]
        );
        let l1 = DerailConfig {
            base_entropy: 0.0,
            entropy_bump: 1.0,
            derail_prob: 0.1,
            length: 1,
        };
        assert_eq!(l1.miscalibration_closed_form(), 0.0);
        assert!(DerailConfig {
            derail_prob: 1.5,
            ..l1
        }
        .validate()
        .is_err());
    }

    #[test]
    fn derailing_matches_exact_curve() {
        let cfg = DerailConfig {
            base_entropy: 1.0,
            entropy_bump: 2.0,
            derail_prob: 0.02,
            length: 50,
        };
        let c = simulate_derailing(&cfg, 200_000, &mut rng_from_seed(3)).unwrap();
        for (t, (m, e)) in c.mean_entropy.iter().zip(cfg.expected_curve()).enumerate() {
            assert!((m - e).abs() <= 4.0 * c.stderr[t] + 1e-12, "t={}", t + 1);
        }
        // The exact curve never exceeds its linearization.
        for (t, e) in cfg.expected_curve().iter().enumerate() {
            assert!(*e <= 1.0 + 0.02 * (t + 1) as f64 * 2.0 + 1e-12);
        }
    }

    #[test]
    fn closed_form_example() {
        let cfg = DerailConfig {
            base_entropy: 0.0,
            entropy_bump: 2.0,
            derail_prob: 1e-3,
            length: 100,
        };
        assert!((cfg.miscalibration_closed_form() - 9.9).abs() < 1e-12);
        let exact = cfg.miscalibration_exact();
        assert!((cfg.miscalibration_closed_form() / exact - 1.0).abs() < 0.1);
        // Oracle: direct sum.
        let direct: f64 = (1..=100).map(|t| 2.0 * (1.0 - 0.999f64.powi(t))).sum();
        assert!((exact - direct).abs() < 1e-10);
    }

    #[test]
    fn derailing_independent_of_thread_count() {
        let cfg = DerailConfig {
            base_entropy: 1.0,
            entropy_bump: 2.0,
            derail_prob: 0.01,
            length: 30,
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_derailing(&cfg, 50_000, &mut rng_from_seed(4)).unwrap())
        };
        assert_eq!(run(1), run(3));
    }
}
