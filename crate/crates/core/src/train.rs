//! End-to-end training of the embedder and classifier head.
//!
//! The reference path is single-threaded: per-sample gradients are summed
//! in batch order, so a fixed seed reproduces a run bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::csvio;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::gradcheck::{central_differences, random_case, GradCheckReport};
use crate::loss::{ClassifierHead, LossConfig, LossKind, Variant};
use crate::model::{ModelGrads, OptimizerState, TinyEmbedder};
use crate::rng::{self, Stream};
use crate::stats::{ClassStats, CovMode, CovarianceBank};
use crate::verify::{build_trials, evaluate, score_trials, DcfParams, TrialSet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub scale: f64,
    pub margin: f64,
    /// Loss settings. The schedule length is overwritten with the run's
    /// total number of optimizer steps.
    pub loss: LossConfig,
    pub cov_mode: CovMode,
    /// Skip covariance updates while the schedule is still deferred.
    pub stats_after_deferred: bool,
    pub dcf: DcfParams,
    /// Nontarget trials per target trial; `None` keeps all of them.
    pub max_nontarget_per_target: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            embed_dim: 16,
            batch_size: 32,
            epochs: 60,
            lr_init: 0.05,
            lr_final: 1e-4,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            scale: 32.0,
            margin: 0.2,
            loss: LossConfig::default(),
            cov_mode: CovMode::Full,
            stats_after_deferred: false,
            dcf: DcfParams::default(),
            max_nontarget_per_target: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("model", "layer sizes must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("train.epochs", "must be >= 1"));
        }
        OptimizerState::new(
            self.lr_init,
            self.lr_final,
            1,
            self.momentum,
            self.nesterov,
            self.weight_decay,
        )?;
        ClassifierHead::new(nalgebra::DMatrix::zeros(1, 1), vec![0.0], self.scale, self.margin)?;
        self.dcf.validate()?;
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, train_size: usize) -> usize {
        train_size.div_ceil(self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub mean_cos_y: f64,
    /// Mean margin coefficient (DA/DY; 1 for AM, 0 on the softmax path).
    pub mean_coef: f64,
    /// Mean effective augmentation strength.
    pub lambda: f64,
    pub eer: f64,
    pub min_dcf: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub metrics: Vec<EpochMetrics>,
    pub model: TinyEmbedder,
    pub head: ClassifierHead,
    pub bank: CovarianceBank,
    pub trials: TrialSet,
    pub total_iters: u64,
    /// Forward passes whose output was zero before normalization.
    pub degenerate_outputs: u64,
}

impl TrainRun {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.metrics.last().expect("at least one epoch")
    }
}

/// Embeds every row of `dataset`.
pub fn embed_all(model: &TinyEmbedder, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    (0..dataset.len()).map(|i| model.forward(dataset.input(i))).collect()
}

fn diverged(t: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Diverged {
            iteration: t,
            reason: format!("non-finite {what}"),
        },
        other => other,
    }
}

/// Zero-filled gradient buffers for the head.
fn zero_head_grads(head: &ClassifierHead) -> (nalgebra::DMatrix<f64>, Vec<f64>) {
    (
        nalgebra::DMatrix::zeros(head.weights.nrows(), head.weights.ncols()),
        vec![0.0; head.biases.len()],
    )
}

/// Per-sample training diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRecord {
    pub iteration: u64,
    pub sample: usize,
    pub cos_y: f64,
    pub coef: f64,
    pub lambda: f64,
    pub loss: f64,
}

pub const SAMPLE_LOG_HEADER: &str = "iteration,sample,cos_y,coef,lambda,loss";

impl SampleRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{}",
            self.iteration,
            self.sample,
            csvio::join_f64(&[self.cos_y, self.coef, self.lambda, self.loss])
        )
    }
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainRun> {
    train_logged(config, dataset, |_| {})
}

/// [`train`], handing every per-sample evaluation to `log` in batch order.
pub fn train_logged(
    config: &TrainConfig,
    dataset: &Dataset,
    mut log: impl FnMut(SampleRecord),
) -> Result<TrainRun> {
    config.validate()?;
    let c = dataset.num_classes();
    let mut train_idx = dataset.indices(Split::Train);
    let steps = config.steps_per_epoch(train_idx.len());
    let total_iters = (steps * config.epochs) as u64;
    let mut loss_cfg = config.loss.clone();
    loss_cfg.schedule.total_iters = total_iters;
    loss_cfg.validate()?;

    let mut dims = vec![dataset.input_dim()];
    dims.extend(&config.hidden);
    dims.push(config.embed_dim);
    let mut init = rng::stream(config.seed, Stream::Init);
    let mut model = TinyEmbedder::random(&dims, &mut init)?;
    let mut head = ClassifierHead::random(c, config.embed_dim, config.scale, config.margin, &mut init)?;
    let mut bank = CovarianceBank::new(c, config.embed_dim, config.cov_mode);
    let mut opt = OptimizerState::new(
        config.lr_init,
        config.lr_final,
        total_iters,
        config.momentum,
        config.nesterov,
        config.weight_decay,
    )?;
    let trials = build_trials(dataset, config.max_nontarget_per_target, config.seed)?;
    let mut shuffle = rng::stream(config.seed, Stream::Shuffle);

    let mut metrics = Vec::with_capacity(config.epochs);
    let mut degenerate = 0u64;
    let mut t = 0u64;
    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut shuffle);
        let (mut sum_loss, mut sum_cos, mut sum_coef, mut sum_lambda) = (0.0, 0.0, 0.0, 0.0);
        for batch in train_idx.chunks(config.batch_size) {
            let kind = loss_cfg.kind_at(t);
            let mut g_model: Option<ModelGrads> = None;
            let (mut g_w, mut g_b) = zero_head_grads(&head);
            let mut embeddings = Vec::with_capacity(batch.len());
            for &i in batch {
                let y = dataset.label(i);
                let cache = model.forward_cached(dataset.input(i)).map_err(|e| diverged(t, e))?;
                degenerate += u64::from(cache.degenerate);
                let out = kind
                    .evaluate(&cache.output, &head, Some(bank.class(y)?), y)
                    .map_err(|e| diverged(t, e))?;
                sum_loss += out.value;
                sum_cos += out.terms.cos_y;
                sum_coef += out.terms.coef;
                sum_lambda += out.terms.lambda;
                log(SampleRecord {
                    iteration: t,
                    sample: i,
                    cos_y: out.terms.cos_y,
                    coef: out.terms.coef,
                    lambda: out.terms.lambda,
                    loss: out.value,
                });
                g_w += &out.grad_weights;
                if let Some(gb) = &out.grad_biases {
                    g_b.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
                }
                let g = model.backward(&cache, &out.grad_embedding)?;
                match &mut g_model {
                    Some(acc) => acc.add_assign(&g),
                    None => g_model = Some(g),
                }
                embeddings.push((cache.output, y));
            }
            let inv = 1.0 / batch.len() as f64;
            let mut g_model = g_model.expect("non-empty batch");
            g_model.scale(inv);
            g_w *= inv;
            g_b.iter_mut().for_each(|v| *v *= inv);

            let mut params = model.params_mut();
            params.push(head.weights.as_mut_slice());
            params.push(head.biases.as_mut_slice());
            let mut grads = g_model.slices();
            grads.push(g_w.as_slice());
            grads.push(&g_b);
            opt.step(t, params, grads)?;

            if !(config.stats_after_deferred && loss_cfg.schedule.is_deferred(t)) {
                for (e, y) in &embeddings {
                    bank.update(e, *y)?;
                }
            }
            t += 1;
        }

        let n = train_idx.len() as f64;
        let emb = embed_all(&model, dataset).map_err(|e| diverged(t, e))?;
        let (eer, min_dcf) = evaluate(&score_trials(&trials, &emb)?, &config.dcf)?;
        let row = EpochMetrics {
            epoch,
            loss: sum_loss / n,
            mean_cos_y: sum_cos / n,
            mean_coef: sum_coef / n,
            lambda: sum_lambda / n,
            eer,
            min_dcf,
        };
        if !row.loss.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                reason: "non-finite epoch loss".into(),
            });
        }
        metrics.push(row);
    }

    Ok(TrainRun {
        config: config.clone(),
        metrics,
        model,
        head,
        bank,
        trials,
        total_iters,
        degenerate_outputs: degenerate,
    })
}

pub fn write_metrics(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,loss,mean_cos_y,mean_coef,lambda,eer,min_dcf\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{}",
            m.epoch,
            csvio::join_f64(&[m.loss, m.mean_cos_y, m.mean_coef, m.lambda, m.eer, m.min_dcf])
        );
    }
    csvio::write_file(path, &out)
}

/// Gradient check of the composed loss `L(head, normalize(model(x)))` over
/// every backbone and head parameter.
pub fn composition_gradient_check(
    model: &TinyEmbedder,
    head: &ClassifierHead,
    kind: &LossKind,
    stats: Option<&ClassStats>,
    input: &[f64],
    label: usize,
    epsilon: f64,
) -> Result<GradCheckReport> {
    crate::loss::gradcheck::check_epsilon(epsilon)?;
    let loss = |m: &TinyEmbedder, h: &ClassifierHead| -> Result<f64> {
        Ok(kind.evaluate_raw(&m.forward(input)?, h, stats, label)?.value)
    };
    let cache = model.forward_cached(input)?;
    let out = kind.evaluate_raw(&cache.output, head, stats, label)?;
    let g_model = model.backward(&cache, &out.grad_embedding)?;
    let mut report = GradCheckReport::default();

    for (k, analytic) in g_model.slices().into_iter().enumerate() {
        let flat = model.clone().params_mut()[k].to_vec();
        let fd = central_differences(&flat, epsilon, |p| {
            let mut probe = model.clone();
            probe.params_mut()[k].copy_from_slice(p);
            loss(&probe, head)
        })?;
        for (a, n) in analytic.iter().zip(&fd) {
            report.record(*a, *n);
        }
    }

    let (rows, cols) = head.weights.shape();
    let mut probe = head.clone();
    let fd = central_differences(head.weights.as_slice(), epsilon, |w| {
        probe.weights = nalgebra::DMatrix::from_column_slice(rows, cols, w);
        loss(model, &probe)
    })?;
    for (a, n) in out.grad_weights.as_slice().iter().zip(&fd) {
        report.record(*a, *n);
    }
    if let Some(gb) = &out.grad_biases {
        let mut probe = head.clone();
        let fd = central_differences(&head.biases, epsilon, |b| {
            probe.biases.copy_from_slice(b);
            loss(model, &probe)
        })?;
        for (a, n) in gb.iter().zip(&fd) {
            report.record(*a, *n);
        }
    }
    Ok(report)
}

/// Random composition checks: a loss case from
/// [`random_case`](crate::loss::gradcheck::random_case) behind a random
/// one-hidden-layer embedder whose output dimension matches the head. Biases
/// are drawn at random so that no parameter is structurally inert.
pub fn composition_suite(trials: usize, seed: u64, epsilon: f64) -> Result<Vec<GradCheckReport>> {
    (0..trials)
        .map(|i| {
            let mut r = rng::keyed(seed ^ 0x636f_6d70, i as u64);
            let variant = Variant::ALL[i % Variant::ALL.len()];
            let case = random_case(variant, &mut r)?;
            let d_in = r.random_range(3..=6usize);
            let hidden = r.random_range(4..=8usize);
            let mut model = TinyEmbedder::random(&[d_in, hidden, case.head.dim()], &mut r)?;
            model.randomize_biases(0.5, &mut r);
            let x = rng::normal_vec(&mut r, d_in);
            composition_gradient_check(&model, &case.head, &case.kind, case.stats.as_ref(), &x, case.label, epsilon)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthSpec};
    use crate::loss::{Difficulty, StrengthMode};

    fn small_config(variant: Variant, difficulty: Difficulty) -> TrainConfig {
        TrainConfig {
            hidden: vec![16],
            embed_dim: 8,
            epochs: 6,
            loss: LossConfig {
                variant,
                difficulty,
                lambda0: 0.5,
                ..LossConfig::default()
            },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn small_data() -> Dataset {
        generate(&SynthSpec {
            num_classes: 5,
            samples_per_class: 30,
            input_dim: 6,
            sigma: 0.3,
            hard_pair_fraction: 0.5,
            seed: 3,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn separable_pair_is_learned() {
        let data = generate(&SynthSpec {
            num_classes: 2,
            samples_per_class: 40,
            sigma: 0.05,
            seed: 1,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            loss: LossConfig {
                variant: Variant::Am,
                difficulty: Difficulty::None,
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        };
        let run = train(&cfg, &data).unwrap();
        let last = run.final_metrics();
        assert!(last.loss < 0.05, "{last:?}");
        assert_eq!(last.eer, 0.0);
        assert_eq!(run.metrics.len(), 20);
    }

    #[test]
    fn fully_deferred_dasa_is_daam() {
        let data = small_data();
        let mut dasa = small_config(Variant::Dasa, Difficulty::Da);
        dasa.loss.schedule.deferred_fraction = 1.0;
        let mut daam = small_config(Variant::Daam, Difficulty::Da);
        daam.loss.schedule.deferred_fraction = 1.0;
        let (a, b) = (train(&dasa, &data).unwrap(), train(&daam, &data).unwrap());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
        assert_eq!(a.head, b.head);

        let mut isda = small_config(Variant::Isda, Difficulty::None);
        isda.loss.schedule.deferred_fraction = 1.0;
        let mut softmax = small_config(Variant::Softmax, Difficulty::None);
        softmax.loss.schedule.deferred_fraction = 1.0;
        let (a, b) = (train(&isda, &data).unwrap(), train(&softmax, &data).unwrap());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn deferred_statistics_skip_early_batches() {
        let data = small_data();
        let mut cfg = small_config(Variant::Dasa, Difficulty::Da);
        let all = train(&cfg, &data).unwrap();
        cfg.stats_after_deferred = true;
        let late = train(&cfg, &data).unwrap();
        let steps = cfg.steps_per_epoch(data.indices(Split::Train).len()) as u64;
        let deferred = (0..all.total_iters)
            .filter(|&t| (t as f64) < cfg.loss.schedule.deferred_fraction * all.total_iters as f64)
            .count() as u64;
        let seen = |r: &TrainRun| r.bank.classes().iter().map(|c| c.count()).sum::<u64>();
        let n = data.indices(Split::Train).len() as u64;
        assert_eq!(seen(&all), n * all.total_iters / steps);
        assert!(seen(&late) < seen(&all));
        assert!(deferred > 0);
        cfg.loss.schedule.deferred_fraction = 1.0;
        assert_eq!(seen(&train(&cfg, &data).unwrap()), 0);
    }

    #[test]
    fn runs_are_deterministic_and_finite() {
        let data = small_data();
        let mut cfg = small_config(Variant::Dasa, Difficulty::Dy);
        cfg.loss.strength_mode = StrengthMode::Da;
        let (a, b) = (train(&cfg, &data).unwrap(), train(&cfg, &data).unwrap());
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.bank, b.bank);
        for m in &a.metrics {
            for v in [m.loss, m.mean_cos_y, m.mean_coef, m.lambda, m.eer, m.min_dcf] {
                assert!(v.is_finite());
            }
        }
        assert!(a.metrics.last().unwrap().lambda > 0.0);
        assert!(a.metrics[0].lambda == 0.0);
        let seen: u64 = a.bank.classes().iter().map(|s| s.count()).sum();
        assert_eq!(seen, (data.indices(Split::Train).len() * cfg.epochs) as u64);
    }

    #[test]
    fn divergence_reports_the_iteration() {
        let data = small_data();
        let mut cfg = small_config(Variant::Softmax, Difficulty::None);
        cfg.lr_init = 1e300;
        cfg.lr_final = 1e300;
        match train(&cfg, &data) {
            Err(Error::Diverged { iteration, .. }) => assert!(iteration >= 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn composition_gradients_match() {
        let reports = composition_suite(10, 1, 1e-5).unwrap();
        let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        assert!(worst < 1e-5, "{worst:e}");
    }
}
