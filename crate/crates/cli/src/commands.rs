//! One runner per subcommand. Each writes its CSVs into the output directory
//! and returns whether the run's own checks held.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use rayon::prelude::*;

use entcal::analysis::{
    exponential_smooth, fit_loglog, ingest_corpus, predicted_scaling_exponent,
    write_synthetic_corpus, zipf_exponent,
};
use entcal::calibrate::{
    future_entropy_scaling, verify_theorem, CalibrationConfig, CalibrationRun, TheoremCheck,
};
use entcal::fmt::{fmt_f64, parse_f64};
use entcal::powerlaw::{
    expected_singleton_mass_exact, fit_singleton_slope, geometric_grid, simulate_derailing,
    singleton_mass_asymptotic, PowerLaw,
};
use entcal::seed::{derive_seed, derived_rng, stream};
use entcal::truncate::{tradeoff_curve, tradeoff_instance, write_tradeoff_csv};
use entcal::{Error, Result, TabularModel};

use crate::config::{
    DemoConfig, DerailSettings, InstanceConfig, ScalingFitConfig, TheoremConfig, TradeoffConfig,
    UrnConfig, ZipfConfig,
};
use crate::output::OutputDir;

pub enum Status {
    Passed,
    Failed(String),
}

fn read_model(path: &Path) -> Result<TabularModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Domain(format!("cannot read model file {}: {e}", path.display())))?;
    TabularModel::from_text(&text)
}

struct Instance {
    truth: TabularModel,
    base: TabularModel,
    /// Seeds of the random pair; `None` for model files.
    seeds: Option<(u64, u64)>,
}

fn instance(cfg: &InstanceConfig, master: u64, index: u64) -> Result<Instance> {
    if let (Some(t), Some(b)) = (&cfg.true_model, &cfg.base_model) {
        let truth = read_model(t)?;
        let base = read_model(b)?;
        truth.check_compatible(&base)?;
        return Ok(Instance {
            truth,
            base,
            seeds: None,
        });
    }
    let ts = derive_seed(master, stream::INSTANCE_TRUE, index);
    let bs = derive_seed(master, stream::INSTANCE_BASE, index);
    Ok(Instance {
        truth: TabularModel::random(cfg.vocab_size, cfg.horizon, cfg.concentration, ts)?,
        base: TabularModel::random(cfg.vocab_size, cfg.horizon, cfg.concentration, bs)?,
        seeds: Some((ts, bs)),
    })
}

fn calibrate_instance(
    inst: &Instance,
    calibration: &CalibrationConfig,
    master: u64,
    index: u64,
) -> Result<(CalibrationRun, TheoremCheck)> {
    let config = CalibrationConfig {
        seed: derive_seed(master, stream::CALIBRATION, index),
        ..calibration.clone()
    };
    let run = future_entropy_scaling(&inst.truth, &inst.base, &config)?;
    let check = verify_theorem(
        &inst.truth,
        &inst.base,
        &run.adjusted,
        run.max_delta(),
        config.epsilon,
    )?;
    Ok((run, check))
}

fn seed_field(seeds: Option<(u64, u64)>, pick: fn((u64, u64)) -> u64) -> String {
    seeds.map_or_else(|| "NA".to_string(), |s| pick(s).to_string())
}

fn write_theorem_row<W: Write>(
    w: &mut W,
    index: usize,
    inst: &Instance,
    run: &CalibrationRun,
    c: &TheoremCheck,
) -> Result<()> {
    writeln!(
        w,
        "{index},{},{},{},{},{},{},{},{},{},{},{}",
        seed_field(inst.seeds, |s| s.0),
        seed_field(inst.seeds, |s| s.1),
        fmt_f64(run.before.ent_ce),
        fmt_f64(c.ent_ce),
        fmt_f64(c.bound),
        fmt_f64(c.ent_ce_margin()),
        fmt_f64(c.logloss_base),
        fmt_f64(c.logloss_adjusted),
        fmt_f64(c.logloss_margin()),
        fmt_f64(run.max_delta()),
        c.passed()
    )?;
    Ok(())
}

const THEOREM_HEADER: &str =
    "instance,truth_seed,base_seed,entce_before,entce_after,bound,entce_margin,\
logloss_base,logloss_adjusted,logloss_margin,max_delta,passed";

const ALPHAS_HEADER: &str = "instance,t,alpha,grad_at_opt,delta_measured";

fn write_alpha_rows<W: Write>(w: &mut W, index: usize, run: &CalibrationRun) -> Result<()> {
    for s in &run.steps {
        writeln!(
            w,
            "{index},{},{},{},{}",
            s.t,
            fmt_f64(s.alpha),
            fmt_f64(s.grad_at_opt),
            fmt_f64(s.delta_measured)
        )?;
    }
    Ok(())
}

pub fn theorem_check(cfg: &TheoremConfig, seed: u64, out: &mut OutputDir) -> Result<Status> {
    let from_files = cfg.instance.true_model.is_some();
    let count = if from_files { 1 } else { cfg.instances };
    let results = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let inst = instance(&cfg.instance, seed, i)?;
            let (run, check) = calibrate_instance(&inst, &cfg.calibration, seed, i)?;
            Ok((inst, run, check))
        })
        .collect::<Result<Vec<_>>>()?;

    out.write_file("theorem.csv", |w| {
        writeln!(w, "{THEOREM_HEADER}")?;
        for (i, (inst, run, check)) in results.iter().enumerate() {
            write_theorem_row(w, i, inst, run, check)?;
        }
        Ok(())
    })?;
    out.write_file("alphas.csv", |w| {
        writeln!(w, "{ALPHAS_HEADER}")?;
        for (i, (_, run, _)) in results.iter().enumerate() {
            write_alpha_rows(w, i, run)?;
        }
        Ok(())
    })?;

    let failing: Vec<String> = results
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.2.passed())
        .map(|(i, (inst, _, _))| match inst.seeds {
            Some((t, b)) => format!("instance {i} (truth seed {t}, base seed {b})"),
            None => format!("instance {i} (model files)"),
        })
        .collect();
    println!(
        "theorem-check: {} of {} instances within the bound",
        count - failing.len(),
        count
    );
    Ok(if failing.is_empty() {
        Status::Passed
    } else {
        Status::Failed(format!("failing: {}", failing.join("; ")))
    })
}

pub fn calibrate_demo(cfg: &DemoConfig, seed: u64, out: &mut OutputDir) -> Result<Status> {
    let inst = instance(&cfg.instance, seed, 0)?;
    let (run, check) = calibrate_instance(&inst, &cfg.calibration, seed, 0)?;
    out.write_file("calibration.csv", |w| run.write_csv(w))?;
    out.write_file("report_base.csv", |w| run.before.write_csv(w))?;
    out.write_file("report_adjusted.csv", |w| run.after.write_csv(w))?;
    out.write_file("theorem.csv", |w| {
        writeln!(w, "{THEOREM_HEADER}")?;
        write_theorem_row(w, 0, &inst, &run, &check)
    })?;
    out.write_bytes("true_model.txt", inst.truth.to_text().as_bytes())?;
    out.write_bytes("base_model.txt", inst.base.to_text().as_bytes())?;
    out.write_bytes(
        "adjusted_model.txt",
        run.adjusted.materialize()?.to_text().as_bytes(),
    )?;
    println!(
        "calibrate-demo: EntCE {} -> {}, log loss {} -> {}",
        fmt_f64(run.before.ent_ce),
        fmt_f64(run.after.ent_ce),
        fmt_f64(run.before.total_logloss),
        fmt_f64(run.after.total_logloss)
    );
    Ok(if check.passed() {
        Status::Passed
    } else {
        Status::Failed("calibration bound violated".into())
    })
}

pub fn urn(cfg: &UrnConfig, seed: u64, out: &mut OutputDir) -> Result<Status> {
    let grid = geometric_grid(cfg.grid_start, cfg.grid_end(), cfg.per_decade)?;
    let mut fits = Vec::new();
    for (k, &a) in cfg.exponents.iter().enumerate() {
        let pl = PowerLaw::new(a, cfg.vocab)?;
        let slope = fit_singleton_slope(
            &pl,
            &grid,
            cfg.trials,
            &mut derived_rng(seed, stream::URN, k as u64),
        )?;
        fits.push((pl, slope));
    }
    out.write_file("singleton.csv", |w| {
        writeln!(w, "m,mean_singleton_mass,stderr,zipf_exponent,exact_singleton_mass,asymptotic_singleton_mass")?;
        for (pl, slope) in &fits {
            let a = pl.exponent();
            for p in &slope.points {
                let exact = expected_singleton_mass_exact(pl, p.m)?;
                let asym = if a > 1.0 {
                    fmt_f64(singleton_mass_asymptotic(a, pl.normalizer(), p.m)?)
                } else {
                    "NA".to_string()
                };
                writeln!(w, "{},{},{},{},{},{asym}", p.m, fmt_f64(p.mean), fmt_f64(p.stderr), fmt_f64(a), fmt_f64(exact))?;
            }
        }
        Ok(())
    })?;
    out.write_file("slopes.csv", |w| {
        writeln!(
            w,
            "zipf_exponent,slope,intercept,r_squared,asymptotic_slope"
        )?;
        for (pl, s) in &fits {
            let a = pl.exponent();
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt_f64(a),
                fmt_f64(s.fit.slope),
                fmt_f64(s.fit.intercept),
                fmt_f64(s.fit.r_squared),
                fmt_f64(predicted_scaling_exponent(a)?)
            )?;
        }
        Ok(())
    })?;
    for (pl, s) in &fits {
        println!("urn: exponent {} slope {:.4}", pl.exponent(), s.fit.slope);
    }
    Ok(Status::Passed)
}

pub fn derail(cfg: &DerailSettings, seed: u64, out: &mut OutputDir) -> Result<Status> {
    let model = cfg.model();
    let curve = simulate_derailing(
        &model,
        cfg.trials,
        &mut derived_rng(seed, stream::DERAIL, 0),
    )?;
    let window = ((0.1 / model.derail_prob).floor() as usize).clamp(2, model.length.max(2));
    let slope = curve.initial_slope(window)?;
    out.write_file("derail.csv", |w| curve.write_csv(&model, w))?;
    out.write_file("derail_summary.csv", |w| {
        writeln!(
            w,
            "initial_slope,target_slope,window,miscalibration_exact,miscalibration_closed_form"
        )?;
        writeln!(
            w,
            "{},{},{window},{},{}",
            fmt_f64(slope),
            fmt_f64(model.derail_prob * model.entropy_bump),
            fmt_f64(model.miscalibration_exact()),
            fmt_f64(model.miscalibration_closed_form())
        )?;
        Ok(())
    })?;
    println!(
        "derail: initial slope {:.4e} (q C = {:.4e})",
        slope,
        model.derail_prob * model.entropy_bump
    );
    Ok(Status::Passed)
}

pub fn tradeoff(cfg: &TradeoffConfig, seed: u64, out: &mut OutputDir) -> Result<Status> {
    let (truth, base) = if cfg.instance.true_model.is_some() {
        let inst = instance(&cfg.instance, seed, 0)?;
        (inst.truth, inst.base)
    } else {
        let s = derive_seed(seed, stream::INSTANCE_TRUE, 0);
        let (t, b, _) = tradeoff_instance(cfg.instance.vocab_size, cfg.instance.horizon, s)?;
        (t, b)
    };
    let points = tradeoff_curve(&truth, &base, &cfg.rules)?;
    out.write_file("tradeoff.csv", |w| write_tradeoff_csv(&points, w))?;
    out.write_file("entropy_over_time.csv", |w| {
        writeln!(w, "rule,param,t,entropy,smoothed_entropy")?;
        for p in &points {
            let raw = &p.report.per_step_entropy;
            let smooth = exponential_smooth(raw, cfg.smoothing)?;
            for (t, (h, s)) in raw.iter().zip(&smooth).enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    p.rule.name(),
                    fmt_f64(p.rule.param()),
                    t + 1,
                    fmt_f64(*h),
                    fmt_f64(*s)
                )?;
            }
        }
        Ok(())
    })?;
    for p in &points {
        println!(
            "tradeoff: {} entropy {:.6} log loss {:.6}",
            p.rule,
            p.total_entropy(),
            p.total_logloss()
        );
    }
    Ok(Status::Passed)
}

pub fn zipf(cfg: &ZipfConfig, seed: u64, out: &mut OutputDir) -> Result<Status> {
    let counts = match &cfg.corpus {
        Some(path) => {
            let f = File::open(path).map_err(|e| {
                Error::Domain(format!("cannot open corpus {}: {e}", path.display()))
            })?;
            ingest_corpus(BufReader::new(f), cfg.tokenizer)?
        }
        None => {
            let pl = PowerLaw::new(cfg.synthetic_exponent, cfg.synthetic_vocab)?;
            let mut text = Vec::new();
            write_synthetic_corpus(
                &pl,
                cfg.synthetic_tokens,
                &mut derived_rng(seed, stream::CORPUS, 0),
                &mut text,
            )?;
            if cfg.save_corpus {
                out.write_bytes("corpus.txt", &text)?;
            }
            ingest_corpus(text.as_slice(), cfg.tokenizer)?
        }
    };
    let fit = zipf_exponent(&counts, cfg.top_n)?;
    let exponent = -fit.slope;
    out.write_file("counts.csv", |w| counts.write_csv(w))?;
    out.write_file("zipf_fit.csv", |w| fit.write_csv(w))?;
    out.write_file("zipf_summary.csv", |w| {
        writeln!(
            w,
            "zipf_exponent,predicted_scaling_exponent,tokens,distinct"
        )?;
        writeln!(
            w,
            "{},{},{},{}",
            fmt_f64(exponent),
            fmt_f64(predicted_scaling_exponent(exponent)?),
            counts.total(),
            counts.distinct()
        )?;
        Ok(())
    })?;
    println!(
        "zipf: exponent {exponent:.4} from {} tokens ({} distinct)",
        counts.total(),
        counts.distinct()
    );
    Ok(Status::Passed)
}

fn read_points(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Domain(format!("cannot read {}: {e}", path.display())))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',').map(|c| parse_f64(c.trim()));
        match (cols.next().flatten(), cols.next().flatten()) {
            (Some(x), Some(y)) => points.push([x, y]),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected two numbers, got {line:?}"),
                })
            }
        }
    }
    Ok(points)
}

pub fn scaling_fit(cfg: &ScalingFitConfig, _seed: u64, out: &mut OutputDir) -> Result<Status> {
    let mut points = match &cfg.input {
        Some(path) => read_points(path)?,
        None => Vec::new(),
    };
    points.extend_from_slice(&cfg.points);
    let xs: Vec<f64> = points.iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = points.iter().map(|p| p[1]).collect();
    let fit = fit_loglog(&xs, &ys)?;
    out.write_file("scaling_fit.csv", |w| fit.write_csv(w))?;
    if let Some(a) = cfg.zipf_exponent {
        let predicted = predicted_scaling_exponent(a)?;
        out.write_file("scaling_prediction.csv", |w| {
            writeln!(w, "zipf_exponent,predicted_slope,fitted_slope,difference")?;
            writeln!(
                w,
                "{},{},{},{}",
                fmt_f64(a),
                fmt_f64(predicted),
                fmt_f64(fit.slope),
                fmt_f64(fit.slope - predicted)
            )?;
            Ok(())
        })?;
    }
    println!(
        "scaling-fit: slope {:.4} over {} points, r^2 {:.6}",
        fit.slope,
        points.len(),
        fit.r_squared
    );
    Ok(Status::Passed)
}
