//! The `dasa` command-line tool.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::config::Config;
use crate::csvio;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::loss::gradcheck::gradient_suite;
use crate::loss::{LossConfig, Variant};
use crate::mc::{self, BoundFamily, BoundRow, MgfReport, MGF_SETTINGS};
use crate::model::write_model;
use crate::train::{self, composition_suite, SampleRecord, TrainConfig, SAMPLE_LOG_HEADER};
use crate::verify;

/// Largest relative gradient error accepted by `grad-check`.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Largest fraction of bound trials allowed below `-3` standard errors.
pub const MAX_VIOLATION_FRACTION: f64 = 0.02;

#[derive(Debug, Parser)]
#[command(name = "dasa", version, about = "Difficulty-aware semantic augmentation toolkit")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Overrides one configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen,
    /// Train one configuration and score its eval split.
    Train,
    /// Train several loss variants on shared data and seeds.
    Compare,
    /// Compare the closed-form bounds against Monte-Carlo augmentation.
    BoundCheck,
    /// Compare analytic gradients against central differences.
    GradCheck,
    /// Score a trial list against stored embeddings.
    Score {
        /// Embeddings CSV (`index,label,e0,...`).
        embeddings: PathBuf,
        /// Trials CSV (`index_a,index_b,is_target`).
        trials: PathBuf,
    },
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Success,
    /// A verification threshold was violated.
    CheckFailed(String),
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("check failed: {msg}");
            3
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                3
            } else {
                2
            }
        }
    }
}

/// Defaults, then the config file, then `--seed`, then `--set` overrides.
pub fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Score { embeddings, trials } => return cmd_score(&cfg, embeddings, trials),
        Command::Gen => {
            let spec = cfg.synth_spec()?;
            write_config(&cfg, out)?;
            let path = out.join("data.csv");
            data::write_dataset(&data::generate(&spec)?, &path)?;
            println!("{}", path.display());
            return Ok(Outcome::Success);
        }
        _ => {}
    }
    match &cli.command {
        Command::Train => cmd_train(&cfg, out),
        Command::Compare => cmd_compare(&cfg, out),
        Command::BoundCheck => cmd_bound_check(&cfg, out),
        Command::GradCheck => cmd_grad_check(&cfg, out),
        Command::Gen | Command::Score { .. } => unreachable!(),
    }
}

fn write_config(cfg: &Config, out: &Path) -> Result<()> {
    csvio::write_file(&out.join("config.cfg"), &cfg.to_text())
}

/// The configured dataset: read from `data.path`, otherwise generated.
pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    let spec = cfg.synth_spec()?;
    match cfg.data_path() {
        Some(p) => data::read_dataset(&p),
        None => data::generate(&spec),
    }
}

fn cmd_train(cfg: &Config, out: &Path) -> Result<Outcome> {
    let tc = cfg.train_config()?;
    let dataset = load_dataset(cfg)?;
    write_config(cfg, out)?;
    let run = if cfg.sample_log()? {
        let mut log = String::from(SAMPLE_LOG_HEADER);
        log.push('\n');
        let run = train::train_logged(&tc, &dataset, |r: SampleRecord| {
            log.push_str(&r.csv_row());
            log.push('\n');
        })?;
        csvio::write_file(&out.join("samples.csv"), &log)?;
        run
    } else {
        train::train(&tc, &dataset)?
    };
    train::write_metrics(&run.metrics, &out.join("metrics.csv"))?;
    write_model(&run.model, &run.head, &out.join("model.csv"))?;
    run.bank.write_csv(&out.join("bank.csv"))?;
    let emb = train::embed_all(&run.model, &dataset)?;
    verify::write_embeddings(&emb, dataset.labels(), &out.join("embeddings.csv"))?;
    verify::write_trials(&run.trials, &out.join("trials.csv"))?;
    let scores = verify::score_trials(&run.trials, &emb)?;
    verify::write_scores(&run.trials, &scores, &out.join("scores.csv"))?;
    if run.degenerate_outputs > 0 {
        eprintln!("warning: {} zero-norm embeddings replaced", run.degenerate_outputs);
    }
    let m = run.final_metrics();
    println!("{}", verify::format_metrics(m.eer, m.min_dcf));
    Ok(Outcome::Success)
}

/// One trained configuration in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub loss: LossConfig,
    pub seed: u64,
    pub eer: f64,
    pub min_dcf: f64,
}

/// Trains every `(seed, variant)` pair. Each seed generates its own
/// dataset (unless `data.path` is set) shared by all variants; rows come
/// back seed-major in variant order.
pub fn run_compare(cfg: &Config, variants: &[LossConfig], seeds: &[u64]) -> Result<Vec<CompareRow>> {
    let base = cfg.train_config()?;
    let datasets: Vec<Dataset> = seeds
        .iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.set("run.seed", &seed.to_string())?;
            load_dataset(&c)
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, &LossConfig)> = (0..seeds.len())
        .flat_map(|s| variants.iter().map(move |v| (s, v)))
        .collect();
    jobs.into_par_iter()
        .map(|(s, loss)| {
            let tc = TrainConfig {
                loss: loss.clone(),
                seed: seeds[s],
                ..base.clone()
            };
            let run = train::train(&tc, &datasets[s]).map_err(|e| match e {
                Error::Diverged { iteration, reason } => Error::Diverged {
                    iteration,
                    reason: format!("{reason} ({} seed {})", describe(loss), seeds[s]),
                },
                other => other,
            })?;
            let m = run.final_metrics();
            Ok(CompareRow {
                loss: loss.clone(),
                seed: seeds[s],
                eer: m.eer,
                min_dcf: m.min_dcf,
            })
        })
        .collect()
}

fn describe(loss: &LossConfig) -> String {
    format!(
        "{}:{}:{}:{}",
        loss.variant.as_str(),
        loss.difficulty.as_str(),
        loss.strength_mode.as_str(),
        loss.lambda0
    )
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median EER and minDCF of each variant, in `variants` order.
pub fn compare_medians(rows: &[CompareRow], variants: &[LossConfig]) -> Vec<(f64, f64)> {
    variants
        .iter()
        .map(|v| {
            let mut eer: Vec<f64> = rows.iter().filter(|r| &r.loss == v).map(|r| r.eer).collect();
            let mut dcf: Vec<f64> = rows.iter().filter(|r| &r.loss == v).map(|r| r.min_dcf).collect();
            (median(&mut eer), median(&mut dcf))
        })
        .collect()
}

fn cmd_compare(cfg: &Config, out: &Path) -> Result<Outcome> {
    let (variants, dropped) = cfg.compare_variants()?;
    for d in &dropped {
        eprintln!("warning: duplicate variant entry {d:?} ignored");
    }
    let seeds = cfg.compare_seeds()?;
    write_config(cfg, out)?;
    let rows = run_compare(cfg, &variants, &seeds)?;
    let mut csv = String::from("variant,difficulty,strength_mode,lambda0,seed,eer,min_dcf\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.loss.variant.as_str(),
            r.loss.difficulty.as_str(),
            r.loss.strength_mode.as_str(),
            csvio::fmt_f64(r.loss.lambda0),
            r.seed,
            csvio::join_f64(&[r.eer, r.min_dcf])
        );
    }
    csvio::write_file(&out.join("compare.csv"), &csv)?;
    for (v, (eer, dcf)) in variants.iter().zip(compare_medians(&rows, &variants)) {
        println!("{} median {}", describe(v), verify::format_metrics(eer, dcf));
    }
    Ok(Outcome::Success)
}

/// A `(mu, sigma^2, t)` setting and its moment-identity report.
pub type MgfCheck = ((f64, f64, f64), MgfReport);

/// Bound-suite rows for every family plus the moment-identity checks.
pub fn run_bound_checks(cfg: &Config) -> Result<(Vec<BoundRow>, Vec<MgfCheck>)> {
    let s = cfg.check_settings()?;
    let seed = cfg.seed()?;
    if s.mgf_samples < mc::MIN_SAMPLES {
        return Err(Error::invalid(
            "check.mgf_samples",
            format!("need at least {} draws, got {}", mc::MIN_SAMPLES, s.mgf_samples),
        ));
    }
    let mut rows = Vec::new();
    for family in BoundFamily::ALL {
        rows.extend(mc::bound_suite(family, s.trials, s.samples, seed, s.lambda_max)?);
    }
    let mgf = MGF_SETTINGS
        .iter()
        .enumerate()
        .map(|(i, &(mu, s2, t))| {
            mc::moment_identity_check(mu, s2, t, s.mgf_samples, seed.wrapping_add(i as u64)).map(|r| ((mu, s2, t), r))
        })
        .collect::<Result<_>>()?;
    Ok((rows, mgf))
}

/// Pass/fail summary of bound-check results; `None` means everything passed.
pub fn bound_check_failures(rows: &[BoundRow], mgf: &[MgfCheck]) -> Option<String> {
    let mut problems = Vec::new();
    for family in BoundFamily::ALL {
        let fam: Vec<&BoundRow> = rows.iter().filter(|r| r.family == family).collect();
        let bad: Vec<usize> = fam.iter().filter(|r| r.report.z_score < -3.0).map(|r| r.trial).collect();
        if !fam.is_empty() && bad.len() as f64 > MAX_VIOLATION_FRACTION * fam.len() as f64 {
            problems.push(format!("{} trials below -3 SE: {:?}", family.as_str(), bad));
        }
    }
    if !rows.is_empty() {
        let mean_slack = rows.iter().map(|r| r.report.slack).sum::<f64>() / rows.len() as f64;
        if mean_slack < 0.0 {
            problems.push(format!("mean slack {mean_slack:e} < 0"));
        }
    }
    for (i, (p, r)) in mgf.iter().enumerate() {
        if !r.passed {
            problems.push(format!("moment identity setting {i} {p:?}: rel error {:e}", r.rel_error));
        }
    }
    (!problems.is_empty()).then(|| problems.join("; "))
}

fn cmd_bound_check(cfg: &Config, out: &Path) -> Result<Outcome> {
    let samples = cfg.check_settings()?.samples;
    let (rows, mgf) = run_bound_checks(cfg)?;
    write_config(cfg, out)?;
    let mut csv = String::from("trial,variant,lambda,M,mc_mean,se,bound,slack,z_score\n");
    for r in &rows {
        let p = &r.report;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.trial,
            r.family.as_str(),
            csvio::fmt_f64(r.lambda),
            samples,
            csvio::join_f64(&[p.mean, p.std_error, p.bound_value, p.slack, p.z_score])
        );
    }
    csvio::write_file(&out.join("bound_check.csv"), &csv)?;
    let mut csv = String::from("mu,sigma2,t,closed_form,mc_mean,se,rel_error,passed\n");
    for ((mu, s2, t), r) in &mgf {
        let _ = writeln!(
            csv,
            "{},{}",
            csvio::join_f64(&[*mu, *s2, *t, r.closed_form, r.mc_mean, r.std_error, r.rel_error]),
            r.passed
        );
    }
    csvio::write_file(&out.join("mgf_check.csv"), &csv)?;
    match bound_check_failures(&rows, &mgf) {
        None => {
            println!("bound-check passed: {} trials, {} moment settings", rows.len(), mgf.len());
            Ok(Outcome::Success)
        }
        Some(msg) => Ok(Outcome::CheckFailed(msg)),
    }
}

fn cmd_grad_check(cfg: &Config, out: &Path) -> Result<Outcome> {
    let s = cfg.check_settings()?;
    let seed = cfg.seed()?;
    let mut suites: Vec<(&str, Vec<_>)> = Vec::new();
    for v in Variant::ALL {
        suites.push((v.as_str(), gradient_suite(v, s.grad_trials, seed, s.epsilon)?));
    }
    suites.push(("composition", composition_suite(s.composition_trials, seed, s.epsilon)?));
    write_config(cfg, out)?;
    let mut csv = String::from("suite,trial,max_rel_error,max_abs_error,entries\n");
    let mut bad = Vec::new();
    for (name, reports) in &suites {
        for (i, r) in reports.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{name},{i},{},{}",
                csvio::join_f64(&[r.max_rel_error, r.max_abs_error]),
                r.entries
            );
            if !(r.max_rel_error < GRAD_TOLERANCE) {
                bad.push(format!("{name}#{i}"));
            }
        }
    }
    csvio::write_file(&out.join("grad_check.csv"), &csv)?;
    if bad.is_empty() {
        println!("grad-check passed");
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::CheckFailed(format!(
            "relative error >= {GRAD_TOLERANCE:e} in {}",
            bad.join(", ")
        )))
    }
}

fn cmd_score(cfg: &Config, embeddings: &Path, trials: &Path) -> Result<Outcome> {
    let params = cfg.dcf_params()?;
    let (emb, _) = verify::read_embeddings(embeddings)?;
    let trials = verify::read_trials(trials)?;
    let (eer, dcf) = verify::evaluate(&verify::score_trials(&trials, &emb)?, &params)?;
    println!("{}", verify::format_metrics(eer, dcf));
    Ok(Outcome::Success)
}
