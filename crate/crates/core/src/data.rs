//! Synthetic "speaker" datasets and the dataset CSV format.
//!
//! Class centers are uniform on the unit sphere of the input space. A
//! fraction of disjoint center pairs is then pulled to a small angular
//! separation, which gives confusable classes. Samples are the center plus
//! Gaussian noise with per-class (optionally anisotropic) scales.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::csvio::{self, parse_f64, parse_usize};
use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::vecops::{axpy, dot, norm};

/// Angular separation range, in degrees, of hard center pairs.
pub const HARD_PAIR_DEGREES: (f64, f64) = (5.0, 15.0);

/// Share of each class held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// Within-class noise standard deviation.
    pub sigma: f64,
    /// Per-class, per-axis noise scales are `sigma * a^u` with `u ~ U(-1, 1)`;
    /// 1 gives isotropic noise.
    pub anisotropy: f64,
    /// Fraction of the `floor(C/2)` disjoint center pairs made hard.
    pub hard_pair_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            input_dim: 20,
            samples_per_class: 50,
            sigma: 0.2,
            anisotropy: 1.0,
            hard_pair_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(
                "data.num_classes",
                format!("must be >= 2, got {}", self.num_classes),
            ));
        }
        if self.input_dim < 2 {
            return Err(Error::invalid(
                "data.input_dim",
                format!("must be >= 2, got {}", self.input_dim),
            ));
        }
        if self.samples_per_class < 2 {
            return Err(Error::invalid(
                "data.samples_per_class",
                format!("must be >= 2, got {}", self.samples_per_class),
            ));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid("data.sigma", format!("must be > 0, got {}", self.sigma)));
        }
        if !(self.anisotropy >= 1.0) || !self.anisotropy.is_finite() {
            return Err(Error::invalid(
                "data.anisotropy",
                format!("must be >= 1, got {}", self.anisotropy),
            ));
        }
        if !(0.0..=1.0).contains(&self.hard_pair_fraction) {
            return Err(Error::invalid(
                "data.hard_pair_fraction",
                format!("must lie in [0, 1], got {}", self.hard_pair_fraction),
            ));
        }
        Ok(())
    }

    /// Number of hard center pairs: `round(h * floor(C/2))`.
    pub fn hard_pairs(&self) -> usize {
        (self.hard_pair_fraction * (self.num_classes / 2) as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "eval" => Some(Split::Eval),
            _ => None,
        }
    }
}

/// Rows of `(input, label, split)`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
    input_dim: usize,
}

impl Dataset {
    /// Checks that inputs are finite, labels are in range and every class
    /// has samples in both splits.
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        num_classes: usize,
        input_dim: usize,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be >= 1"));
        }
        crate::error::check_dim("dataset inputs", labels.len() * input_dim, inputs.len())?;
        crate::error::check_dim("dataset splits", labels.len(), splits.len())?;
        crate::error::check_finite("dataset inputs", &inputs)?;
        let mut seen = vec![(false, false); num_classes];
        for (&l, &s) in labels.iter().zip(&splits) {
            crate::error::check_label(l, num_classes)?;
            match s {
                Split::Train => seen[l].0 = true,
                Split::Eval => seen[l].1 = true,
            }
        }
        if let Some(c) = seen.iter().position(|&(t, e)| !(t && e)) {
            return Err(Error::invalid(
                "dataset",
                format!("class {c} must appear in both the train and eval splits"),
            ));
        }
        Ok(Self {
            inputs,
            labels,
            splits,
            num_classes,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Rotates `b` toward `a` so that the two unit vectors are `angle` apart,
/// keeping `b`'s direction orthogonal to `a`.
fn pull_toward(a: &[f64], b: &[f64], angle: f64, rng: &mut Rng) -> Vec<f64> {
    let mut u = b.to_vec();
    axpy(-dot(a, b), a, &mut u);
    let mut len = norm(&u);
    while len < 1e-9 {
        u = rng::normal_vec(rng, a.len());
        axpy(-dot(a, &u), a, &mut u);
        len = norm(&u);
    }
    a.iter()
        .zip(&u)
        .map(|(x, y)| angle.cos() * x + angle.sin() * y / len)
        .collect()
}

/// Draws class centers; pairs `(0,1), (2,3), ...` up to `spec.hard_pairs()`
/// are pulled to a separation in [`HARD_PAIR_DEGREES`].
pub fn class_centers(spec: &SynthSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| rng::unit_vector(rng, spec.input_dim))
        .collect();
    let (lo, hi) = HARD_PAIR_DEGREES;
    for p in 0..spec.hard_pairs() {
        let angle = rng.random_range(lo..=hi).to_radians();
        centers[2 * p + 1] = pull_toward(&centers[2 * p], &centers[2 * p + 1], angle, rng);
    }
    centers
}

/// Number of eval samples per class: `round(0.2 n)`, kept in `[1, n-1]`.
pub fn eval_count(samples_per_class: usize) -> usize {
    ((EVAL_FRACTION * samples_per_class as f64).round() as usize).clamp(1, samples_per_class - 1)
}

/// Samples the dataset. Rows are grouped by class; the last
/// [`eval_count`] samples of every class form the eval split.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let centers = class_centers(spec, &mut rng);
    let n = spec.samples_per_class;
    let d = spec.input_dim;
    let n_eval = eval_count(n);
    let log_a = spec.anisotropy.ln();

    let mut inputs = Vec::with_capacity(spec.num_classes * n * d);
    let mut labels = Vec::with_capacity(spec.num_classes * n);
    let mut splits = Vec::with_capacity(spec.num_classes * n);
    for (c, center) in centers.iter().enumerate() {
        let scales: Vec<f64> = (0..d)
            .map(|_| {
                if log_a == 0.0 {
                    spec.sigma
                } else {
                    spec.sigma * (log_a * rng.random_range(-1.0..=1.0)).exp()
                }
            })
            .collect();
        for k in 0..n {
            let z = rng::normal_vec(&mut rng, d);
            inputs.extend(center.iter().zip(&scales).zip(&z).map(|((m, s), z)| m + s * z));
            labels.push(c);
            splits.push(if k < n - n_eval { Split::Train } else { Split::Eval });
        }
    }
    Dataset::new(inputs, labels, splits, spec.num_classes, d)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("label");
    for a in 0..dataset.input_dim {
        let _ = write!(out, ",x{a}");
    }
    out.push_str(",split\n");
    for i in 0..dataset.len() {
        let _ = writeln!(
            out,
            "{},{},{}",
            dataset.labels[i],
            csvio::join_f64(dataset.input(i)),
            dataset.splits[i].as_str()
        );
    }
    csvio::write_file(path, &out)
}

/// Reads a dataset CSV. The class count is one more than the largest label.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let lines = csvio::read_lines(path)?;
    let Some(((header_line, header), rows)) = lines.split_first() else {
        return Err(Error::parse(path, 1, "no data rows"));
    };
    let cols = csvio::split(header);
    if cols.len() < 3 || cols[0] != "label" || cols[cols.len() - 1] != "split" {
        return Err(Error::parse(
            path,
            *header_line,
            "header must be label,x0,...,split",
        ));
    }
    let dim = cols.len() - 2;
    if rows.is_empty() {
        return Err(Error::parse(path, *header_line, "no data rows"));
    }
    let mut inputs = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    let mut splits = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let fields = csvio::split(row);
        if fields.len() != dim + 2 {
            return Err(Error::parse(
                path,
                *line,
                format!("expected {} fields, got {}", dim + 2, fields.len()),
            ));
        }
        labels.push(parse_usize(fields[0], path, *line)?);
        for f in &fields[1..=dim] {
            inputs.push(parse_f64(f, path, *line)?);
        }
        let split = Split::parse(fields[dim + 1])
            .ok_or_else(|| Error::parse(path, *line, format!("unknown split {:?}", fields[dim + 1])))?;
        splits.push(split);
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, splits, num_classes, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Eval accuracy of assigning each sample to the nearest true center.
    fn nearest_center_accuracy(spec: &SynthSpec) -> f64 {
        let data = generate(spec).unwrap();
        let centers = class_centers(spec, &mut rng::stream(spec.seed, Stream::Data));
        let eval = data.indices(Split::Eval);
        let hits = eval
            .iter()
            .filter(|&&i| {
                let x = data.input(i);
                let best = (0..spec.num_classes)
                    .min_by(|&a, &b| {
                        let da: f64 = x.iter().zip(&centers[a]).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = x.iter().zip(&centers[b]).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == data.label(i)
            })
            .count();
        hits as f64 / eval.len() as f64
    }

    fn two_class(h: f64, sigma: f64) -> SynthSpec {
        SynthSpec {
            num_classes: 2,
            samples_per_class: 200,
            sigma,
            hard_pair_fraction: h,
            seed: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn well_separated_classes_are_perfectly_classified() {
        assert_eq!(nearest_center_accuracy(&two_class(0.0, 0.01)), 1.0);
    }

    #[test]
    fn hard_pairs_overlap() {
        let acc = nearest_center_accuracy(&two_class(1.0, 0.5));
        assert!(acc < 0.95, "accuracy {acc}");
    }

    #[test]
    fn hard_pair_angles_are_in_range() {
        let spec = SynthSpec {
            num_classes: 9,
            hard_pair_fraction: 0.5,
            ..SynthSpec::default()
        };
        assert_eq!(spec.hard_pairs(), 2);
        let c = class_centers(&spec, &mut rng::keyed(3, 0));
        for p in 0..2 {
            let angle = dot(&c[2 * p], &c[2 * p + 1]).clamp(-1.0, 1.0).acos().to_degrees();
            assert!((5.0 - 1e-9..=15.0 + 1e-9).contains(&angle), "{angle}");
        }
        assert!(c.iter().all(|v| (norm(v) - 1.0).abs() < 1e-12));
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            anisotropy: 3.0,
            hard_pair_fraction: 1.0,
            ..SynthSpec::default()
        };
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_dataset(&generate(&spec).unwrap(), &a).unwrap();
        write_dataset(&generate(&spec).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let other = generate(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(other, read_dataset(&a).unwrap());
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let d = generate(&SynthSpec::default()).unwrap();
        write_dataset(&d, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), d);
    }

    #[test]
    fn malformed_files_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "label,x0,x1,split\n0,1.0,2.0,train\n1,1.0,eval\n").unwrap();
        match read_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "").unwrap();
        let msg = read_dataset(&p).unwrap_err().to_string();
        assert!(msg.contains("no data rows"), "{msg}");
        std::fs::write(&p, "label,x0,split\n").unwrap();
        assert!(read_dataset(&p).unwrap_err().to_string().contains("no data rows"));
        std::fs::write(&p, "label,x0,split\n0,1.0,train\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Invalid { .. })));
        std::fs::write(&p, "label,x0,split\n0,1.0,test\n").unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn spec_validation() {
        let bad = [
            SynthSpec { num_classes: 1, ..SynthSpec::default() },
            SynthSpec { samples_per_class: 1, ..SynthSpec::default() },
            SynthSpec { sigma: 0.0, ..SynthSpec::default() },
            SynthSpec { hard_pair_fraction: 1.5, ..SynthSpec::default() },
            SynthSpec { anisotropy: 0.5, ..SynthSpec::default() },
        ];
        for s in bad {
            assert!(matches!(generate(&s), Err(Error::Invalid { .. })), "{s:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn splits_are_stratified(c in 2usize..8, n in 2usize..40, seed in any::<u64>()) {
            let d = generate(&SynthSpec { num_classes: c, samples_per_class: n, input_dim: 3, seed, ..SynthSpec::default() }).unwrap();
            for class in 0..c {
                let eval = d.indices(Split::Eval).into_iter().filter(|&i| d.label(i) == class).count();
                let train = d.indices(Split::Train).into_iter().filter(|&i| d.label(i) == class).count();
                prop_assert_eq!(eval + train, n);
                prop_assert!(eval >= 1 && train >= 1);
                prop_assert!((eval as f64 - EVAL_FRACTION * n as f64).abs() <= 1.0);
            }
        }
    }
}
