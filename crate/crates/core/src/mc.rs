//! Monte-Carlo oracle for the closed-form bounds.
//!
//! Embeddings are augmented explicitly, `f~ = f + L z` with `L L^T = lambda
//! Omega_y (+ jitter)` and `z` standard normal, and the expected loss over
//! `M` draws is compared with the corresponding closed-form upper bound.
//! The per-draw losses here are evaluated by their own direct formulas and
//! share no code with the bound implementations.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, check_label, Error, Result};
use crate::loss::{ClassifierHead, Difficulty, LossKind, Strength};
use crate::rng::{self, Rng};
use crate::stats::{random_covariance, ClassStats, Covariance};
use crate::vecops::{dot, norm};

pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McReport {
    /// Empirical expected loss over the draws.
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
    pub bound_value: f64,
    /// `bound_value - mean`
    pub slack: f64,
    /// `slack / std_error`
    pub z_score: f64,
}

impl McReport {
    fn new(mean: f64, std_error: f64, samples: usize, bound_value: f64) -> Self {
        let slack = bound_value - mean;
        let z_score = if std_error > 0.0 {
            slack / std_error
        } else if slack == 0.0 {
            0.0
        } else {
            slack.signum() * f64::INFINITY
        };
        Self {
            mean,
            std_error,
            samples,
            bound_value,
            slack,
            z_score,
        }
    }
}

/// Welford accumulator for the mean and standard error of i.i.d. draws.
#[derive(Debug, Clone, Copy, Default)]
struct Running {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn std_error(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let var = self.m2 / (self.n - 1) as f64;
        (var / self.n as f64).sqrt()
    }
}

/// Draws `f~ ~ N(f, lambda Omega)` through a cached factor of `lambda Omega`.
#[derive(Debug, Clone)]
pub struct AugmentSampler {
    /// `None` for `lambda = 0`: the degenerate Gaussian returns `f` itself.
    factor: Option<DMatrix<f64>>,
    dim: usize,
}

impl AugmentSampler {
    pub fn new(stats: &ClassStats, lambda: f64) -> Result<Self> {
        let factor = if lambda == 0.0 {
            None
        } else {
            Some(stats.sampler_factor(lambda)?)
        };
        Ok(Self {
            factor,
            dim: stats.dim(),
        })
    }

    pub fn sample_into(&self, f: &[f64], rng: &mut Rng, out: &mut [f64], z: &mut [f64]) {
        out.copy_from_slice(f);
        let Some(l) = &self.factor else { return };
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for a in 0..self.dim {
            let mut acc = 0.0;
            for b in 0..=a {
                acc += l[(a, b)] * z[b];
            }
            out[a] += acc;
        }
    }

    pub fn sample(&self, f: &[f64], rng: &mut Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        let mut z = vec![0.0; self.dim];
        self.sample_into(f, rng, &mut out, &mut z);
        out
    }
}

/// One augmented embedding `f~ ~ N(f, lambda Omega_y)`.
pub fn sample_augmented(embedding: &[f64], stats: &ClassStats, lambda: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_dim("embedding", stats.dim(), embedding.len())?;
    Ok(AugmentSampler::new(stats, lambda)?.sample(embedding, rng))
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < MIN_SAMPLES {
        return Err(Error::invalid(
            "samples",
            format!("need at least {MIN_SAMPLES} draws, got {samples}"),
        ));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid("lambda", format!("must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// Runs `samples` draws of `loss(f~)` from one seeded stream.
fn simulate(
    f: &[f64],
    sampler: &AugmentSampler,
    samples: usize,
    seed: u64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> (f64, f64) {
    let mut rng = rng::keyed(seed, 0);
    let mut acc = Running::default();
    let mut draw = vec![0.0; f.len()];
    let mut z = vec![0.0; f.len()];
    for _ in 0..samples {
        sampler.sample_into(f, &mut rng, &mut draw, &mut z);
        acc.push(loss(&draw));
    }
    (acc.mean, acc.std_error())
}

/// Expected softmax cross-entropy under augmentation, against the ISDA bound.
pub fn mc_expected_ce(
    embedding: &[f64],
    head: &ClassifierHead,
    stats: &ClassStats,
    lambda: f64,
    label: usize,
    samples: usize,
    seed: u64,
) -> Result<McReport> {
    check_samples(samples)?;
    check_lambda(lambda)?;
    check_label(label, head.num_classes())?;
    check_dim("embedding", head.dim(), embedding.len())?;
    let bound = LossKind::Isda { lambda }.evaluate(embedding, head, Some(stats), label)?.value;
    if lambda == 0.0 {
        // every draw equals f
        let exact = LossKind::Softmax.evaluate(embedding, head, None, label)?.value;
        return Ok(McReport::new(exact, 0.0, samples, bound));
    }
    let sampler = AugmentSampler::new(stats, lambda)?;
    let w = &head.weights;
    let b = &head.biases;
    let rows: Vec<Vec<f64>> = (0..head.num_classes())
        .map(|j| w.row(j).iter().copied().collect())
        .collect();
    let (mean, se) = simulate(embedding, &sampler, samples, seed, |x| {
        let logits: Vec<f64> = rows.iter().zip(b).map(|(r, bj)| dot(r, x) + bj).collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logits.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
        lse - logits[label]
    });
    Ok(McReport::new(mean, se, samples, bound))
}

/// Margin multiplier used inside the augmented margin loss, always
/// evaluated at the clean embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginCoef {
    One,
    Da,
    Dy { gamma: f64 },
}

impl MarginCoef {
    fn difficulty(self) -> (Difficulty, f64) {
        match self {
            MarginCoef::One => (Difficulty::None, 2.0),
            MarginCoef::Da => (Difficulty::Da, 2.0),
            MarginCoef::Dy { gamma } => (Difficulty::Dy, gamma),
        }
    }
}

/// Expected margin loss `log(1 + sum_{j != y} exp(s dw_j . f~ + s m coef))`
/// under augmentation, against the closed-form bound (coef = 1 gives the AM
/// bound, coef = DA the DASA bound).
#[allow(clippy::too_many_arguments)]
pub fn mc_expected_margin(
    embedding: &[f64],
    head: &ClassifierHead,
    stats: &ClassStats,
    lambda: f64,
    label: usize,
    margin_coef: MarginCoef,
    samples: usize,
    seed: u64,
) -> Result<McReport> {
    check_samples(samples)?;
    check_lambda(lambda)?;
    let (difficulty, gamma) = margin_coef.difficulty();
    let kind = LossKind::Dasa {
        difficulty,
        gamma,
        strength: Strength::Fixed(lambda),
    };
    let bound_out = kind.evaluate(embedding, head, Some(stats), label)?;
    let bound = bound_out.value;
    if lambda == 0.0 {
        return Ok(McReport::new(bound, 0.0, samples, bound));
    }

    let c = head.num_classes();
    let s = head.scale;
    let unit: Vec<Vec<f64>> = (0..c)
        .map(|j| {
            let row: Vec<f64> = head.weights.row(j).iter().copied().collect();
            let n = norm(&row);
            row.into_iter().map(|v| v / n).collect()
        })
        .collect();
    let cos_y = dot(&unit[label], embedding).clamp(-1.0, 1.0);
    let coef = match margin_coef {
        MarginCoef::One => 1.0,
        MarginCoef::Da => (1.0 - cos_y) / 2.0,
        MarginCoef::Dy { gamma } => (1.0 - cos_y).exp() / gamma,
    };
    let shift = s * head.margin * coef;
    let diffs: Vec<Vec<f64>> = (0..c)
        .filter(|&j| j != label)
        .map(|j| unit[j].iter().zip(&unit[label]).map(|(a, b)| a - b).collect())
        .collect();
    let sampler = AugmentSampler::new(stats, lambda)?;
    let (mean, se) = simulate(embedding, &sampler, samples, seed, |x| {
        let a: Vec<f64> = diffs.iter().map(|d| s * dot(d, x) + shift).collect();
        let top = a.iter().copied().fold(0.0f64, f64::max);
        let rest: f64 = a.iter().map(|v| (v - top).exp()).sum();
        if top == 0.0 {
            rest.ln_1p()
        } else {
            top + ((-top).exp() + rest).ln()
        }
    });
    Ok(McReport::new(mean, se, samples, bound))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MgfReport {
    pub closed_form: f64,
    pub mc_mean: f64,
    pub std_error: f64,
    /// `|mc_mean - closed_form| / closed_form`
    pub rel_error: f64,
    /// `std_error / closed_form`
    pub rel_std_error: f64,
    /// `rel_error <= 5 * rel_std_error`
    pub passed: bool,
}

/// `(mu, sigma^2, t)` settings exercised by the bound-check command.
pub const MGF_SETTINGS: [(f64, f64, f64); 10] = [
    (0.0, 1.0, 1.0),
    (0.5, 0.25, 2.0),
    (-1.0, 2.0, 0.5),
    (2.0, 0.5, -1.0),
    (0.0, 0.0, 1.5),
    (1.0, 4.0, 0.75),
    (-0.5, 1.0, -1.5),
    (0.3, 0.09, 5.0),
    (0.0, 1.0, 2.0),
    (1.0, 0.25, -2.0),
];

/// Checks `E[exp(tX)] = exp(t mu + sigma^2 t^2 / 2)` for `X ~ N(mu, sigma^2)`.
pub fn moment_identity_check(mu: f64, sigma2: f64, t: f64, samples: usize, seed: u64) -> Result<MgfReport> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::invalid("sigma2", format!("must be >= 0, got {sigma2}")));
    }
    let sigma = sigma2.sqrt();
    if t.abs() * sigma > 3.0 {
        return Err(Error::invalid("t", format!("|t| * sigma must be <= 3, got {}", t.abs() * sigma)));
    }
    if samples == 0 {
        return Err(Error::invalid("samples", "must be >= 1"));
    }
    let closed_form = (t * mu + 0.5 * sigma2 * t * t).exp();
    let mut rng = rng::keyed(seed, 0);
    let mut acc = Running::default();
    for _ in 0..samples {
        let z: f64 = rng.sample(StandardNormal);
        acc.push((t * (mu + sigma * z)).exp());
    }
    let std_error = acc.std_error();
    let rel_error = (acc.mean - closed_form).abs() / closed_form;
    let rel_std_error = std_error / closed_form;
    Ok(MgfReport {
        closed_form,
        mc_mean: acc.mean,
        std_error,
        rel_error,
        rel_std_error,
        passed: rel_error <= 5.0 * rel_std_error,
    })
}

/// Which closed-form bound a randomized trial exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundFamily {
    /// Softmax CE against the ISDA bound.
    Isda,
    /// AM-Softmax against its augmentation bound (margin coefficient 1).
    Am,
    /// DAAM-Softmax against the DASA bound (margin coefficient DA).
    Dasa,
}

impl BoundFamily {
    pub const ALL: [BoundFamily; 3] = [BoundFamily::Isda, BoundFamily::Am, BoundFamily::Dasa];

    pub fn as_str(self) -> &'static str {
        match self {
            BoundFamily::Isda => "isda",
            BoundFamily::Am => "am",
            BoundFamily::Dasa => "dasa",
        }
    }
}

/// Randomized inputs for one bound trial.
#[derive(Debug, Clone)]
pub struct BoundTrial {
    pub embedding: Vec<f64>,
    pub head: ClassifierHead,
    pub stats: ClassStats,
    pub lambda: f64,
    pub label: usize,
}

/// Draws `C` in 3..=6, `F` in 2..=8, a random PSD covariance and
/// `lambda` in `(0.05, 1] * lambda_max`. Margin families use unit `f`,
/// `s` in [4, 32], `m` in [0, 0.4] and a covariance trace of order `1/s^2`
/// per dimension, matching the scale of unit-norm embeddings.
pub fn random_bound_trial(family: BoundFamily, lambda_max: f64, rng: &mut Rng) -> Result<BoundTrial> {
    let c = rng.random_range(3..=6usize);
    let dim = rng.random_range(2..=8usize);
    let label = rng.random_range(0..c);
    let lambda = lambda_max * rng.random_range(0.05..=1.0);
    match family {
        BoundFamily::Isda => {
            let w = DMatrix::from_fn(c, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let b: Vec<f64> = rng::normal_vec(rng, c).into_iter().map(|v| 0.5 * v).collect();
            let f: Vec<f64> = rng::normal_vec(rng, dim).into_iter().map(|v| 0.7 * v).collect();
            let cov = random_covariance(dim, rng.random_range(0.1..1.0), rng);
            Ok(BoundTrial {
                embedding: f,
                head: ClassifierHead::new(w, b, 1.0, 0.0)?,
                stats: ClassStats::from_moments(label, 100, vec![0.0; dim], Covariance::Full(cov))?,
                lambda,
                label,
            })
        }
        BoundFamily::Am | BoundFamily::Dasa => {
            let s = rng.random_range(4.0..32.0);
            let m = rng.random_range(0.0..0.4);
            let mut w = DMatrix::zeros(c, dim);
            for j in 0..c {
                let len = rng.random_range(0.5..2.0);
                for (a, v) in rng::unit_vector(rng, dim).into_iter().enumerate() {
                    w[(j, a)] = len * v;
                }
            }
            let f = rng::unit_vector(rng, dim);
            let cov = random_covariance(dim, rng.random_range(0.2..2.0) / (s * s), rng);
            Ok(BoundTrial {
                embedding: f,
                head: ClassifierHead::new(w, vec![0.0; c], s, m)?,
                stats: ClassStats::from_moments(label, 100, vec![0.0; dim], Covariance::Full(cov))?,
                lambda,
                label,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundRow {
    pub trial: usize,
    pub family: BoundFamily,
    pub lambda: f64,
    pub report: McReport,
}

/// Runs `trials` randomized bound checks. Trial `i` uses its own stream
/// keyed by `(seed, i)`, so trials run in parallel with reproducible output.
pub fn bound_suite(
    family: BoundFamily,
    trials: usize,
    samples: usize,
    seed: u64,
    lambda_max: f64,
) -> Result<Vec<BoundRow>> {
    check_samples(samples)?;
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::invalid("check.lambda_max", format!("must be > 0, got {lambda_max}")));
    }
    let family_key = (family as u64 + 1) << 40;
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::keyed(seed, family_key | i as u64);
            let t = random_bound_trial(family, lambda_max, &mut r)?;
            let draw_seed = r.random::<u64>();
            let report = match family {
                BoundFamily::Isda => {
                    mc_expected_ce(&t.embedding, &t.head, &t.stats, t.lambda, t.label, samples, draw_seed)?
                }
                BoundFamily::Am => mc_expected_margin(
                    &t.embedding,
                    &t.head,
                    &t.stats,
                    t.lambda,
                    t.label,
                    MarginCoef::One,
                    samples,
                    draw_seed,
                )?,
                BoundFamily::Dasa => mc_expected_margin(
                    &t.embedding,
                    &t.head,
                    &t.stats,
                    t.lambda,
                    t.label,
                    MarginCoef::Da,
                    samples,
                    draw_seed,
                )?,
            };
            Ok(BoundRow {
                trial: i,
                family,
                lambda: t.lambda,
                report,
            })
        })
        .collect()
}
