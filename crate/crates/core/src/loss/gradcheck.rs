//! Central finite-difference checks of the analytic loss gradients.

use nalgebra::DMatrix;
use rand::Rng as _;

use super::{ClassifierHead, Difficulty, LossKind, Strength, StrengthMode, Variant};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::stats::{random_covariance, ClassStats, Covariance};

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheckReport {
    /// `max |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)` over all entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
        self.entries += 1;
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.entries += other.entries;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::invalid("epsilon", format!("must lie in [1e-7, 1e-4], got {epsilon}")));
    }
    Ok(())
}

/// `(g(x + eps) - g(x - eps)) / (2 eps)` for every coordinate of `x`.
pub fn central_differences(
    x: &[f64],
    epsilon: f64,
    mut g: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let plus = g(&probe)?;
        probe[i] = x[i] - epsilon;
        let minus = g(&probe)?;
        probe[i] = x[i];
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(out)
}

/// Compares every analytic gradient entry of `kind` (embedding, weights and,
/// on the softmax path, biases) against central differences of its value.
pub fn loss_gradient_check(
    kind: &LossKind,
    embedding: &[f64],
    head: &ClassifierHead,
    stats: Option<&ClassStats>,
    label: usize,
    epsilon: f64,
) -> Result<GradCheckReport> {
    check_epsilon(epsilon)?;
    let out = kind.evaluate_raw(embedding, head, stats, label)?;
    let mut report = GradCheckReport::default();

    let fd = central_differences(embedding, epsilon, |f| {
        Ok(kind.evaluate_raw(f, head, stats, label)?.value)
    })?;
    for (a, n) in out.grad_embedding.iter().zip(&fd) {
        report.record(*a, *n);
    }

    let (rows, cols) = head.weights.shape();
    let flat: Vec<f64> = head.weights.as_slice().to_vec();
    let mut probe = head.clone();
    let fd = central_differences(&flat, epsilon, |w| {
        probe.weights = DMatrix::from_column_slice(rows, cols, w);
        Ok(kind.evaluate_raw(embedding, &probe, stats, label)?.value)
    })?;
    for (a, n) in out.grad_weights.as_slice().iter().zip(&fd) {
        report.record(*a, *n);
    }

    if let Some(grad_b) = &out.grad_biases {
        let mut probe = head.clone();
        let fd = central_differences(&head.biases, epsilon, |b| {
            probe.biases.copy_from_slice(b);
            Ok(kind.evaluate_raw(embedding, &probe, stats, label)?.value)
        })?;
        for (a, n) in grad_b.iter().zip(&fd) {
            report.record(*a, *n);
        }
    }
    Ok(report)
}

/// One randomized gradient-check input.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub kind: LossKind,
    pub embedding: Vec<f64>,
    pub head: ClassifierHead,
    pub stats: Option<ClassStats>,
    pub label: usize,
}

impl GradCase {
    pub fn check(&self, epsilon: f64) -> Result<GradCheckReport> {
        loss_gradient_check(
            &self.kind,
            &self.embedding,
            &self.head,
            self.stats.as_ref(),
            self.label,
            epsilon,
        )
    }
}

/// Draws a random input for `variant`.
///
/// Sizes are `C` in 3..=6 and `F` in 3..=8. Logit ranges stay within a few
/// units (margin scale `s` in [1.5, 4], covariance trace of order `1/s^2`
/// per dimension) so that every class keeps a softmax weight large enough
/// for central differences to resolve its gradient entries.
pub fn random_case(variant: Variant, rng: &mut Rng) -> Result<GradCase> {
    let c = rng.random_range(3..=6usize);
    let dim = rng.random_range(3..=8usize);
    let label = rng.random_range(0..c);
    if !variant.is_margin() {
        let w = DMatrix::from_fn(c, dim, |_, _| 0.5 * rng::normal_vec(rng, 1)[0]);
        let b: Vec<f64> = rng::normal_vec(rng, c).into_iter().map(|v| 0.3 * v).collect();
        let f: Vec<f64> = rng::normal_vec(rng, dim).into_iter().map(|v| 0.6 * v).collect();
        let head = ClassifierHead::new(w, b, 1.0, 0.0)?;
        let (kind, stats) = match variant {
            Variant::Softmax => (LossKind::Softmax, None),
            _ => {
                let lambda = rng.random_range(0.1..1.0);
                let cov = random_covariance(dim, rng.random_range(0.1..0.3), rng);
                let stats = ClassStats::from_moments(label, 10, vec![0.0; dim], Covariance::Full(cov))?;
                (LossKind::Isda { lambda }, Some(stats))
            }
        };
        return Ok(GradCase {
            kind,
            embedding: f,
            head,
            stats,
            label,
        });
    }

    let s = rng.random_range(1.5..4.0);
    let m = rng.random_range(0.05..0.4);
    let mut w = DMatrix::zeros(c, dim);
    for j in 0..c {
        let len = rng.random_range(0.5..2.0);
        for (a, v) in rng::unit_vector(rng, dim).into_iter().enumerate() {
            w[(j, a)] = len * v;
        }
    }
    let head = ClassifierHead::new(w, vec![0.0; c], s, m)?;
    let f = rng::unit_vector(rng, dim);
    let gamma = rng.random_range(1.5..3.0);
    let difficulty = if rng.random_bool(0.5) { Difficulty::Da } else { Difficulty::Dy };
    let (kind, stats) = match variant {
        Variant::Am => (LossKind::Am, None),
        Variant::Daam => (LossKind::Daam { difficulty, gamma }, None),
        _ => {
            let strength = if rng.random_bool(0.5) {
                Strength::Fixed(rng.random_range(0.05..1.0))
            } else {
                let mode = if rng.random_bool(0.5) { StrengthMode::Da } else { StrengthMode::Dy };
                Strength::Ramp {
                    ramp: rng.random_range(0.2..1.0),
                    mode,
                }
            };
            let cov = random_covariance(dim, rng.random_range(0.2..1.0) / (s * s), rng);
            let stats = ClassStats::from_moments(label, 10, vec![0.0; dim], Covariance::Full(cov))?;
            (
                LossKind::Dasa {
                    difficulty,
                    gamma,
                    strength,
                },
                Some(stats),
            )
        }
    };
    Ok(GradCase {
        kind,
        embedding: f,
        head,
        stats,
        label,
    })
}

/// Runs `trials` random gradient checks of `variant`, one RNG stream per trial.
pub fn gradient_suite(variant: Variant, trials: usize, seed: u64, epsilon: f64) -> Result<Vec<GradCheckReport>> {
    check_epsilon(epsilon)?;
    (0..trials)
        .map(|i| {
            let mut r = rng::keyed(seed ^ 0x6772_6164, (variant as u64) << 32 | i as u64);
            random_case(variant, &mut r)?.check(epsilon)
        })
        .collect()
}
