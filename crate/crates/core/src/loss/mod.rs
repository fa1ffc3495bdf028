//! Loss family: softmax cross-entropy, the ISDA upper bound, AM-Softmax,
//! difficulty-aware AM-Softmax and the DASA upper bound, each with analytic
//! gradients.
//!
//! Every loss reduces to `log(1 + sum_{j != y} exp(a_j))` for some vector of
//! relative logits `a_j`, which is evaluated once by [`kernel`] with joint
//! max-subtraction. The per-variant code only builds `a_j` and chains the
//! kernel's weights `dL/da_j` back to the embedding and head parameters.
//!
//! The class covariance is a constant here: no gradient flows into it.

mod kernel;
pub mod gradcheck;
pub mod schedule;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{check_dim, check_finite, check_label, Error, Result};
use crate::stats::{ClassStats, CovarianceBank};

pub use schedule::{lambda_schedule, Schedule, Strength};

/// Tolerance on `|f| - 1` for the margin losses.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Last fully connected layer: one weight row per class, plus biases for the
/// softmax path and scale/margin for the margin path.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: DMatrix<f64>,
    pub biases: Vec<f64>,
    pub scale: f64,
    pub margin: f64,
}

impl ClassifierHead {
    pub fn new(weights: DMatrix<f64>, biases: Vec<f64>, scale: f64, margin: f64) -> Result<Self> {
        check_dim("head biases", weights.nrows(), biases.len())?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::invalid("head.scale", format!("must be > 0, got {scale}")));
        }
        if !(margin >= 0.0) || !margin.is_finite() {
            return Err(Error::invalid("head.margin", format!("must be >= 0, got {margin}")));
        }
        Ok(Self {
            weights,
            biases,
            scale,
            margin,
        })
    }

    /// Gaussian rows with standard deviation `1/sqrt(F)` and zero biases.
    pub fn random(num_classes: usize, dim: usize, scale: f64, margin: f64, rng: &mut crate::rng::Rng) -> Result<Self> {
        let sd = 1.0 / (dim as f64).sqrt();
        let w = DMatrix::from_fn(num_classes, dim, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
        Self::new(w, vec![0.0; num_classes], scale, margin)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Softmax,
    Isda,
    Am,
    Daam,
    Dasa,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Softmax,
        Variant::Isda,
        Variant::Am,
        Variant::Daam,
        Variant::Dasa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Softmax => "softmax",
            Variant::Isda => "isda",
            Variant::Am => "am",
            Variant::Daam => "daam",
            Variant::Dasa => "dasa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s.trim().to_ascii_lowercase())
    }

    /// True for the cosine-logit losses that expect unit-norm embeddings.
    pub fn is_margin(self) -> bool {
        matches!(self, Variant::Am | Variant::Daam | Variant::Dasa)
    }
}

/// Per-sample difficulty coefficient applied to the margin (and optionally
/// to the augmentation strength).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Difficulty {
    /// Coefficient fixed at 1.
    None,
    /// `(1 - cos_y) / 2`
    Da,
    /// `exp(1 - cos_y) / gamma`
    Dy,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::None => "none",
            Difficulty::Da => "da",
            Difficulty::Dy => "dy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Some(Difficulty::None),
            "da" => Some(Difficulty::Da),
            "dy" => Some(Difficulty::Dy),
            _ => None,
        }
    }
}

/// How the augmentation strength is chosen once the ramp is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrengthMode {
    /// `lambda = (t/T) * lambda0`
    Constant,
    /// `lambda = (t/T) * DA(cos_y)`, per sample.
    Da,
    /// `lambda = (t/T) * DY(cos_y, gamma)`, per sample.
    Dy,
}

impl StrengthMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StrengthMode::Constant => "constant",
            StrengthMode::Da => "da",
            StrengthMode::Dy => "dy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" | "const" => Some(StrengthMode::Constant),
            "da" => Some(StrengthMode::Da),
            "dy" => Some(StrengthMode::Dy),
            _ => None,
        }
    }

    pub(crate) fn coefficient(self) -> Difficulty {
        match self {
            StrengthMode::Constant => Difficulty::None,
            StrengthMode::Da => Difficulty::Da,
            StrengthMode::Dy => Difficulty::Dy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub variant: Variant,
    pub difficulty: Difficulty,
    pub strength_mode: StrengthMode,
    pub lambda0: f64,
    pub gamma: f64,
    pub schedule: Schedule,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dasa,
            difficulty: Difficulty::Da,
            strength_mode: StrengthMode::Constant,
            lambda0: 0.1,
            gamma: 2.0,
            schedule: Schedule {
                total_iters: 1,
                deferred_fraction: 0.4,
            },
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        match self.variant {
            Variant::Softmax | Variant::Isda | Variant::Am if self.difficulty != Difficulty::None => {
                return Err(Error::invalid(
                    "loss.difficulty",
                    format!("variant {} requires difficulty none", self.variant.as_str()),
                ));
            }
            Variant::Isda if self.strength_mode != StrengthMode::Constant => {
                return Err(Error::invalid(
                    "loss.strength_mode",
                    "isda has no cosine to drive a per-sample strength; use constant",
                ));
            }
            _ => {}
        }
        if !(self.lambda0 >= 0.0) || !self.lambda0.is_finite() {
            return Err(Error::invalid("sched.lambda0", format!("must be >= 0, got {}", self.lambda0)));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::invalid("loss.gamma", format!("must be > 0, got {}", self.gamma)));
        }
        self.schedule.validate()
    }

    /// The concrete loss to evaluate at iteration `t`.
    pub fn kind_at(&self, t: u64) -> LossKind {
        let gamma = self.gamma;
        match self.variant {
            Variant::Softmax => LossKind::Softmax,
            Variant::Isda => LossKind::Isda {
                lambda: lambda_schedule(t, self).fixed().unwrap_or(0.0),
            },
            Variant::Am => LossKind::Am,
            Variant::Daam => LossKind::Daam {
                difficulty: self.difficulty,
                gamma,
            },
            Variant::Dasa => LossKind::Dasa {
                difficulty: self.difficulty,
                gamma,
                strength: lambda_schedule(t, self),
            },
        }
    }
}

/// Per-sample diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SampleTerms {
    pub cos_y: f64,
    /// Margin multiplier (1 for plain AM, 0 on the softmax path).
    pub coef: f64,
    /// Effective augmentation strength for this sample.
    pub lambda: f64,
    /// Largest variance term `0.5 * lambda * Phi_j` (times `s^2` on the margin path).
    pub max_phi_term: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_embedding: Vec<f64>,
    pub grad_weights: DMatrix<f64>,
    /// Present on the softmax path only.
    pub grad_biases: Option<Vec<f64>>,
    pub terms: SampleTerms,
}

/// A fully resolved loss, ready to evaluate on one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Softmax,
    Isda { lambda: f64 },
    Am,
    Daam { difficulty: Difficulty, gamma: f64 },
    Dasa { difficulty: Difficulty, gamma: f64, strength: Strength },
}

impl LossKind {
    pub fn variant(&self) -> Variant {
        match self {
            LossKind::Softmax => Variant::Softmax,
            LossKind::Isda { .. } => Variant::Isda,
            LossKind::Am => Variant::Am,
            LossKind::Daam { .. } => Variant::Daam,
            LossKind::Dasa { .. } => Variant::Dasa,
        }
    }

    /// Evaluates the loss and its gradients. `stats` must be the label's
    /// class statistics for the bound variants; it is ignored otherwise.
    pub fn evaluate(
        &self,
        embedding: &[f64],
        head: &ClassifierHead,
        stats: Option<&ClassStats>,
        label: usize,
    ) -> Result<LossOutput> {
        if self.variant().is_margin() {
            check_unit(embedding)?;
        }
        self.evaluate_raw(embedding, head, stats, label)
    }

    /// As [`evaluate`](Self::evaluate) without the unit-norm precondition,
    /// so finite differences may step off the sphere.
    pub(crate) fn evaluate_raw(
        &self,
        embedding: &[f64],
        head: &ClassifierHead,
        stats: Option<&ClassStats>,
        label: usize,
    ) -> Result<LossOutput> {
        check_dim("embedding", head.dim(), embedding.len())?;
        check_label(label, head.num_classes())?;
        check_finite("embedding", embedding)?;
        check_finite("head weights", head.weights.as_slice())?;
        let cov = |needed: bool| -> Result<Option<&crate::stats::Covariance>> {
            if !needed {
                return Ok(None);
            }
            let s = stats.ok_or_else(|| Error::invalid("class stats", "required by the bound losses"))?;
            check_dim("class stats", head.dim(), s.dim())?;
            Ok(Some(s.cov()))
        };
        match *self {
            LossKind::Softmax => kernel::softmax_path(embedding, head, label, 0.0, None),
            LossKind::Isda { lambda } => {
                check_lambda(lambda)?;
                kernel::softmax_path(embedding, head, label, lambda, cov(lambda != 0.0)?)
            }
            LossKind::Am => kernel::margin_path(
                embedding,
                head,
                label,
                Difficulty::None,
                2.0,
                Strength::Fixed(0.0),
                None,
            ),
            LossKind::Daam { difficulty, gamma } => {
                check_gamma(gamma)?;
                kernel::margin_path(embedding, head, label, difficulty, gamma, Strength::Fixed(0.0), None)
            }
            LossKind::Dasa {
                difficulty,
                gamma,
                strength,
            } => {
                check_gamma(gamma)?;
                strength.validate()?;
                kernel::margin_path(
                    embedding,
                    head,
                    label,
                    difficulty,
                    gamma,
                    strength,
                    cov(!strength.is_zero())?,
                )
            }
        }
    }
}

fn check_unit(embedding: &[f64]) -> Result<()> {
    let n = crate::vecops::norm(embedding);
    if n == 0.0 {
        return Err(Error::ZeroNorm("embedding"));
    }
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::invalid("embedding", format!("must be unit norm, |f| = {n}")));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid("lambda", format!("must be >= 0, got {lambda}")));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid("gamma", format!("must be > 0, got {gamma}")));
    }
    Ok(())
}

/// `DA = (1 - cos_y) / 2`, with `cos_y` clamped to `[-1, 1]`.
pub fn difficulty_da(cos_y: f64) -> f64 {
    (1.0 - cos_y.clamp(-1.0, 1.0)) / 2.0
}

/// `DY = exp(1 - cos_y) / gamma`, with `cos_y` clamped to `[-1, 1]`.
pub fn difficulty_dy(cos_y: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok((1.0 - cos_y.clamp(-1.0, 1.0)).exp() / gamma)
}

/// Cross-entropy on the logits `w_j . f + b_j`.
pub fn softmax_ce(embedding: &[f64], head: &ClassifierHead, label: usize) -> Result<LossOutput> {
    LossKind::Softmax.evaluate(embedding, head, None, label)
}

/// `log sum_j exp(dw_j . f + db_j + lambda/2 * Phi_j)`.
pub fn isda_bound(
    embedding: &[f64],
    head: &ClassifierHead,
    bank: &CovarianceBank,
    lambda: f64,
    label: usize,
) -> Result<LossOutput> {
    check_lambda(lambda)?;
    LossKind::Isda { lambda }.evaluate(embedding, head, Some(bank.class(label)?), label)
}

/// AM-Softmax on unit-norm `f` and row-normalized weights.
pub fn am_softmax(embedding: &[f64], head: &ClassifierHead, label: usize) -> Result<LossOutput> {
    LossKind::Am.evaluate(embedding, head, None, label)
}

/// AM-Softmax whose margin is scaled by the sample's difficulty coefficient.
pub fn daam_softmax(
    embedding: &[f64],
    head: &ClassifierHead,
    label: usize,
    difficulty: Difficulty,
    gamma: f64,
) -> Result<LossOutput> {
    LossKind::Daam { difficulty, gamma }.evaluate(embedding, head, None, label)
}

/// DASA upper bound with the strength taken from the schedule at iteration `t`.
pub fn dasa_bound(
    embedding: &[f64],
    head: &ClassifierHead,
    bank: &CovarianceBank,
    label: usize,
    config: &LossConfig,
    t: u64,
) -> Result<LossOutput> {
    let kind = LossKind::Dasa {
        difficulty: config.difficulty,
        gamma: config.gamma,
        strength: lambda_schedule(t, config),
    };
    kind.evaluate(embedding, head, Some(bank.class(label)?), label)
}
