//! Streaming per-class embedding statistics.
//!
//! Each class keeps a running mean and population covariance that are
//! updated one embedding at a time. The covariance feeds the quadratic
//! forms `(w_j - w_y)^T Omega_y (w_j - w_y)` used by the bound losses and
//! the Cholesky factor used to draw explicit augmentations.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix};
use rand::Rng as _;

use crate::csvio;
use crate::error::{check_dim, check_finite, check_label, Error, Result};

/// Storage layout of the per-class covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovMode {
    Full,
    /// Only the per-coordinate variances are tracked.
    Diagonal,
}

impl CovMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CovMode::Full => "full",
            CovMode::Diagonal => "diagonal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "full" => Some(CovMode::Full),
            "diagonal" | "diag" => Some(CovMode::Diagonal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(Vec<f64>),
}

impl Covariance {
    pub fn zeros(dim: usize, mode: CovMode) -> Self {
        match mode {
            CovMode::Full => Covariance::Full(DMatrix::zeros(dim, dim)),
            CovMode::Diagonal => Covariance::Diagonal(vec![0.0; dim]),
        }
    }

    pub fn mode(&self) -> CovMode {
        match self {
            Covariance::Full(_) => CovMode::Full,
            Covariance::Diagonal(_) => CovMode::Diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Covariance::Full(m) => m.nrows(),
            Covariance::Diagonal(d) => d.len(),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            Covariance::Full(m) => m.trace(),
            Covariance::Diagonal(d) => d.iter().sum(),
        }
    }

    /// `d^T Omega d`.
    pub fn quad(&self, d: &[f64]) -> f64 {
        match self {
            Covariance::Full(m) => {
                let n = m.nrows();
                let mut acc = 0.0;
                for b in 0..n {
                    let col = m.column(b);
                    let mut inner = 0.0;
                    for a in 0..n {
                        inner += d[a] * col[a];
                    }
                    acc += inner * d[b];
                }
                acc
            }
            Covariance::Diagonal(v) => v.iter().zip(d).map(|(o, x)| o * x * x).sum(),
        }
    }

    /// `Omega d`.
    pub fn apply(&self, d: &[f64]) -> Vec<f64> {
        match self {
            Covariance::Full(m) => {
                let mut out = vec![0.0; m.nrows()];
                for (col, &x) in m.column_iter().zip(d) {
                    out.iter_mut().zip(col.iter()).for_each(|(o, c)| *o += c * x);
                }
                out
            }
            Covariance::Diagonal(v) => v.iter().zip(d).map(|(o, x)| o * x).collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Covariance::Full(m) => m.clone(),
            Covariance::Diagonal(v) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v)),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Covariance::Full(m) => m.iter().all(|v| *v == 0.0),
            Covariance::Diagonal(v) => v.iter().all(|v| *v == 0.0),
        }
    }

    fn max_asymmetry(&self) -> f64 {
        match self {
            Covariance::Full(m) => {
                let n = m.nrows();
                let mut worst = 0.0f64;
                for a in 0..n {
                    for b in (a + 1)..n {
                        worst = worst.max((m[(a, b)] - m[(b, a)]).abs());
                    }
                }
                worst
            }
            Covariance::Diagonal(_) => 0.0,
        }
    }
}

/// Running count, mean and population covariance of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    class_id: usize,
    count: u64,
    mean: Vec<f64>,
    cov: Covariance,
}

impl ClassStats {
    pub fn new(class_id: usize, dim: usize, mode: CovMode) -> Self {
        Self {
            class_id,
            count: 0,
            mean: vec![0.0; dim],
            cov: Covariance::zeros(dim, mode),
        }
    }

    /// Builds stats from explicit moments (used for snapshots and for
    /// synthetic covariances in checks).
    pub fn from_moments(class_id: usize, count: u64, mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        check_dim("class mean", cov.dim(), mean.len())?;
        if let Covariance::Full(m) = &cov {
            check_dim("covariance columns", m.nrows(), m.ncols())?;
        }
        Ok(Self {
            class_id,
            count,
            mean,
            cov,
        })
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Covariance {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn push(&mut self, x: &[f64]) {
        let n = self.count as f64;
        let n1 = n + 1.0;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(xi, mi)| xi - mi).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n1;
        }
        let r = n / n1;
        match &mut self.cov {
            Covariance::Full(m) => {
                let f = delta.len();
                for b in 0..f {
                    for a in 0..=b {
                        let v = (n * m[(a, b)] + r * delta[a] * delta[b]) / n1;
                        m[(a, b)] = v;
                        m[(b, a)] = v;
                    }
                }
            }
            Covariance::Diagonal(v) => {
                for (o, d) in v.iter_mut().zip(&delta) {
                    *o = (n * *o + r * d * d) / n1;
                }
            }
        }
        self.count += 1;
    }

    /// Lower-triangular `L` with `L L^T = lambda * Omega + eps * I`, where
    /// `eps = sampler_jitter(trace(lambda * Omega), F)`.
    pub fn sampler_factor(&self, lambda: f64) -> Result<DMatrix<f64>> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::invalid("lambda", format!("must be finite and >= 0, got {lambda}")));
        }
        let asym = self.cov.max_asymmetry();
        if asym > 1e-12 {
            return Err(Error::NotSymmetric(asym));
        }
        let dim = self.dim();
        let jitter = sampler_jitter(lambda * self.cov.trace(), dim);
        match &self.cov {
            Covariance::Diagonal(v) => {
                let diag: Vec<f64> = v.iter().map(|o| lambda * o + jitter).collect();
                if diag.iter().any(|d| !(*d > 0.0)) {
                    return Err(Error::DegenerateCovariance { jitter });
                }
                let sq: Vec<f64> = diag.iter().map(|d| d.sqrt()).collect();
                Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sq)))
            }
            Covariance::Full(m) => {
                let mut a = m * lambda;
                for i in 0..dim {
                    a[(i, i)] += jitter;
                }
                Cholesky::new(a)
                    .map(|c| c.l())
                    .ok_or(Error::DegenerateCovariance { jitter })
            }
        }
    }
}

/// Diagonal jitter added before factorizing `lambda * Omega`.
pub fn sampler_jitter(scaled_trace: f64, dim: usize) -> f64 {
    1e-9 * f64::max(1.0, scaled_trace / dim.max(1) as f64)
}

/// One `ClassStats` per class, all of the same dimension and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBank {
    dim: usize,
    mode: CovMode,
    stats: Vec<ClassStats>,
}

impl CovarianceBank {
    pub fn new(num_classes: usize, dim: usize, mode: CovMode) -> Self {
        Self {
            dim,
            mode,
            stats: (0..num_classes).map(|c| ClassStats::new(c, dim, mode)).collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.stats.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> CovMode {
        self.mode
    }

    pub fn class(&self, label: usize) -> Result<&ClassStats> {
        check_label(label, self.stats.len())?;
        Ok(&self.stats[label])
    }

    pub fn classes(&self) -> &[ClassStats] {
        &self.stats
    }

    /// Replaces one class's statistics, e.g. with a synthetic covariance.
    pub fn set_class(&mut self, stats: ClassStats) -> Result<()> {
        check_label(stats.class_id, self.stats.len())?;
        check_dim("class stats", self.dim, stats.dim())?;
        if stats.cov.mode() != self.mode {
            return Err(Error::invalid("covariance mode", "does not match the bank"));
        }
        let id = stats.class_id;
        self.stats[id] = stats;
        Ok(())
    }

    /// Folds one embedding into its class's running statistics.
    pub fn update(&mut self, embedding: &[f64], label: usize) -> Result<()> {
        check_dim("embedding", self.dim, embedding.len())?;
        check_label(label, self.stats.len())?;
        check_finite("embedding", embedding)?;
        self.stats[label].push(embedding);
        Ok(())
    }

    /// `Phi_j = (w_j - w_y)^T Omega_y (w_j - w_y)` for every row `j` of `weights`.
    pub fn quadratic_forms(&self, label: usize, weights: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dim("weight columns", self.dim, weights.ncols())?;
        check_dim("weight rows", self.stats.len(), weights.nrows())?;
        let stats = self.class(label)?;
        Ok(quadratic_forms_with(stats.cov(), label, weights))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("num_classes,dim,mode\n");
        let _ = writeln!(out, "{},{},{}", self.stats.len(), self.dim, self.mode.as_str());
        out.push_str("class_id,count");
        for a in 0..self.dim {
            let _ = write!(out, ",mean_{a}");
        }
        match self.mode {
            CovMode::Full => {
                for a in 0..self.dim {
                    for b in 0..self.dim {
                        let _ = write!(out, ",cov_{a}_{b}");
                    }
                }
            }
            CovMode::Diagonal => {
                for a in 0..self.dim {
                    let _ = write!(out, ",cov_{a}_{a}");
                }
            }
        }
        out.push('\n');
        for s in &self.stats {
            let _ = write!(out, "{},{},{}", s.class_id, s.count, csvio::join_f64(&s.mean));
            match &s.cov {
                Covariance::Full(m) => {
                    for a in 0..self.dim {
                        for b in 0..self.dim {
                            let _ = write!(out, ",{}", csvio::fmt_f64(m[(a, b)]));
                        }
                    }
                }
                Covariance::Diagonal(v) => {
                    let _ = write!(out, ",{}", csvio::join_f64(v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        csvio::write_file(path, &self.to_csv())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let lines = csvio::read_lines(path)?;
        let mut it = lines.iter();
        let (_, head) = it.next().ok_or_else(|| Error::parse(path, 1, "empty bank file"))?;
        if csvio::split(head) != ["num_classes", "dim", "mode"] {
            return Err(Error::parse(path, 1, "expected header `num_classes,dim,mode`"));
        }
        let (ln, meta) = it.next().ok_or_else(|| Error::parse(path, 2, "missing bank shape"))?;
        let meta = csvio::split(meta);
        if meta.len() != 3 {
            return Err(Error::parse(path, *ln, "bank shape needs 3 fields"));
        }
        let num_classes = csvio::parse_usize(meta[0], path, *ln)?;
        let dim = csvio::parse_usize(meta[1], path, *ln)?;
        let mode = CovMode::parse(meta[2])
            .ok_or_else(|| Error::parse(path, *ln, format!("unknown mode {:?}", meta[2])))?;
        it.next()
            .ok_or_else(|| Error::parse(path, *ln + 1, "missing column header"))?;
        let cov_len = match mode {
            CovMode::Full => dim * dim,
            CovMode::Diagonal => dim,
        };
        let mut bank = CovarianceBank::new(num_classes, dim, mode);
        let mut seen = vec![false; num_classes];
        for (ln, line) in it {
            let fields = csvio::split(line);
            if fields.len() != 2 + dim + cov_len {
                return Err(Error::parse(
                    path,
                    *ln,
                    format!("expected {} fields, found {}", 2 + dim + cov_len, fields.len()),
                ));
            }
            let class_id = csvio::parse_usize(fields[0], path, *ln)?;
            if class_id >= num_classes || seen[class_id] {
                return Err(Error::parse(path, *ln, format!("bad or repeated class id {class_id}")));
            }
            seen[class_id] = true;
            let count = csvio::parse_usize(fields[1], path, *ln)? as u64;
            let nums = fields[2..]
                .iter()
                .map(|f| csvio::parse_f64(f, path, *ln))
                .collect::<Result<Vec<_>>>()?;
            let mean = nums[..dim].to_vec();
            let cov = match mode {
                CovMode::Full => Covariance::Full(DMatrix::from_row_slice(dim, dim, &nums[dim..])),
                CovMode::Diagonal => Covariance::Diagonal(nums[dim..].to_vec()),
            };
            bank.stats[class_id] = ClassStats::from_moments(class_id, count, mean, cov)?;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::parse(path, lines.len(), format!("class {missing} missing")));
        }
        Ok(bank)
    }
}

/// A random symmetric PSD matrix `A A^T / F * trace_per_dim` with Gaussian `A`,
/// so its expected trace is `F * trace_per_dim`.
pub fn random_covariance(dim: usize, trace_per_dim: f64, rng: &mut crate::rng::Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let mut m = &a * a.transpose() * (trace_per_dim / dim as f64);
    for b in 0..dim {
        for a in 0..b {
            m[(b, a)] = m[(a, b)];
        }
    }
    m
}

/// Quadratic forms against an explicit covariance; `Phi_y` is exactly zero.
pub fn quadratic_forms_with(cov: &Covariance, label: usize, weights: &DMatrix<f64>) -> Vec<f64> {
    let wy: Vec<f64> = weights.row(label).iter().copied().collect();
    (0..weights.nrows())
        .map(|j| {
            if j == label {
                return 0.0;
            }
            let d: Vec<f64> = weights.row(j).iter().zip(&wy).map(|(a, b)| a - b).collect();
            cov.quad(&d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    /// Two-pass population covariance, independent of the streaming update.
    fn two_pass(xs: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
        let n = xs.len() as f64;
        let f = xs[0].len();
        let mut mean = vec![0.0; f];
        for x in xs {
            for a in 0..f {
                mean[a] += x[a];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = DMatrix::zeros(f, f);
        for x in xs {
            for a in 0..f {
                for b in 0..f {
                    cov[(a, b)] += (x[a] - mean[a]) * (x[b] - mean[b]);
                }
            }
        }
        (mean, cov / n)
    }

    fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn random_psd(r: &mut rng::Rng, f: usize) -> DMatrix<f64> {
        random_covariance(f, 1.0, r)
    }

    #[test]
    fn first_sample_sets_mean_and_zero_cov() {
        let mut bank = CovarianceBank::new(2, 3, CovMode::Full);
        bank.update(&[1.0, -2.0, 0.5], 0).unwrap();
        let s = bank.class(0).unwrap();
        assert_eq!(s.count(), 1);
        assert_eq!(s.mean(), &[1.0, -2.0, 0.5]);
        assert!(s.cov().is_zero());
        // other class untouched
        let other = bank.class(1).unwrap();
        assert_eq!(other.count(), 0);
        assert!(other.cov().is_zero());
        assert!(other.mean().iter().all(|m| *m == 0.0));
    }

    #[test]
    fn two_samples_by_hand() {
        let mut bank = CovarianceBank::new(1, 2, CovMode::Full);
        bank.update(&[1.0, 0.0], 0).unwrap();
        bank.update(&[0.0, 1.0], 0).unwrap();
        let s = bank.class(0).unwrap();
        assert_eq!(s.mean(), &[0.5, 0.5]);
        let expected = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
        assert_eq!(s.cov().to_dense(), expected);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut bank = CovarianceBank::new(2, 3, CovMode::Full);
        assert!(matches!(
            bank.update(&[1.0, 2.0], 0),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            bank.update(&[1.0, 2.0, 3.0], 2),
            Err(Error::LabelOutOfRange { .. })
        ));
        let w = DMatrix::zeros(2, 4);
        assert!(bank.quadratic_forms(0, &w).is_err());
    }

    #[test]
    fn diagonal_mode_tracks_variances() {
        let mut full = CovarianceBank::new(1, 3, CovMode::Full);
        let mut diag = CovarianceBank::new(1, 3, CovMode::Diagonal);
        let mut r = rng::keyed(5, 0);
        for _ in 0..40 {
            let x: Vec<f64> = (0..3).map(|_| r.sample(StandardNormal)).collect();
            full.update(&x, 0).unwrap();
            diag.update(&x, 0).unwrap();
        }
        let fm = full.class(0).unwrap().cov().to_dense();
        let dm = diag.class(0).unwrap().cov().to_dense();
        for a in 0..3 {
            assert!((fm[(a, a)] - dm[(a, a)]).abs() < 1e-14);
        }
        let d = [-2.0, 0.5, -2.0];
        let direct: f64 = (0..3).map(|a| dm[(a, a)] * d[a] * d[a]).sum();
        assert!((diag.class(0).unwrap().cov().quad(&d) - direct).abs() < 1e-14);
    }

    #[test]
    fn quadratic_forms_examples() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let zero = CovarianceBank::new(2, 2, CovMode::Full);
        assert_eq!(zero.quadratic_forms(0, &w).unwrap(), vec![0.0, 0.0]);

        let mut ident = CovarianceBank::new(2, 2, CovMode::Full);
        ident
            .set_class(
                ClassStats::from_moments(0, 10, vec![0.0; 2], Covariance::Full(DMatrix::identity(2, 2)))
                    .unwrap(),
            )
            .unwrap();
        assert_eq!(ident.quadratic_forms(0, &w).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn quadratic_forms_match_triple_loop() {
        let mut r = rng::keyed(11, 0);
        for trial in 0..50 {
            let f = 2 + trial % 6;
            let c = 2 + trial % 5;
            let omega = random_psd(&mut r, f);
            let w = DMatrix::from_fn(c, f, |_, _| r.sample::<f64, _>(StandardNormal));
            let y = trial % c;
            let phi = quadratic_forms_with(&Covariance::Full(omega.clone()), y, &w);
            for j in 0..c {
                let mut naive = 0.0;
                for a in 0..f {
                    for b in 0..f {
                        naive += (w[(j, a)] - w[(y, a)]) * omega[(a, b)] * (w[(j, b)] - w[(y, b)]);
                    }
                }
                assert!((phi[j] - naive).abs() < 1e-10, "{} vs {naive}", phi[j]);
            }
            assert_eq!(phi[y], 0.0);
        }
    }

    #[test]
    fn sampler_factor_examples() {
        let zero = ClassStats::new(0, 3, CovMode::Full);
        let l = zero.sampler_factor(1.0).unwrap();
        let llt = &l * l.transpose();
        let eps = sampler_jitter(0.0, 3);
        assert!((llt - DMatrix::identity(3, 3) * eps).abs().max() < 1e-20);

        let ident =
            ClassStats::from_moments(0, 5, vec![0.0; 3], Covariance::Full(DMatrix::identity(3, 3))).unwrap();
        let l = ident.sampler_factor(4.0).unwrap();
        assert!((l - DMatrix::identity(3, 3) * 2.0).abs().max() < 1e-8);

        let mut r = rng::keyed(3, 0);
        for f in 1..8 {
            let omega = random_psd(&mut r, f);
            let s = ClassStats::from_moments(0, 5, vec![0.0; f], Covariance::Full(omega.clone())).unwrap();
            let lambda = 0.7;
            let l = s.sampler_factor(lambda).unwrap();
            let eps = sampler_jitter(lambda * omega.trace(), f);
            let target = &omega * lambda + DMatrix::identity(f, f) * eps;
            assert!((&l * l.transpose() - target).abs().max() < 1e-8);
        }
    }

    #[test]
    fn sampler_factor_rejects_asymmetric_and_negative_lambda() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let s = ClassStats::from_moments(0, 2, vec![0.0; 2], Covariance::Full(m)).unwrap();
        assert!(matches!(s.sampler_factor(1.0), Err(Error::NotSymmetric(_))));
        let ok = ClassStats::new(0, 2, CovMode::Full);
        assert!(ok.sampler_factor(-1.0).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]);
        let s = ClassStats::from_moments(0, 2, vec![0.0; 2], Covariance::Full(neg)).unwrap();
        assert!(matches!(
            s.sampler_factor(1.0),
            Err(Error::DegenerateCovariance { .. })
        ));
    }

    #[test]
    fn rank_one_covariance_factorizes_with_jitter() {
        let mut bank = CovarianceBank::new(1, 4, CovMode::Full);
        bank.update(&[1.0, 0.0, 0.0, 0.0], 0).unwrap();
        bank.update(&[0.0, 1.0, 0.0, 0.0], 0).unwrap();
        assert!(bank.class(0).unwrap().sampler_factor(1.0).is_ok());
    }

    #[test]
    fn snapshot_round_trip_is_bit_exact() {
        for mode in [CovMode::Full, CovMode::Diagonal] {
            let mut bank = CovarianceBank::new(3, 4, mode);
            let mut r = rng::keyed(9, 1);
            for i in 0..31 {
                let x: Vec<f64> = (0..4).map(|_| r.sample::<f64, _>(StandardNormal) / 3.0).collect();
                bank.update(&x, i % 2).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("bank.csv");
            bank.write_csv(&path).unwrap();
            let back = CovarianceBank::read_csv(&path).unwrap();
            assert_eq!(back, bank);
        }
    }

    #[test]
    fn snapshot_rejects_wrong_arity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.csv");
        std::fs::write(&path, "num_classes,dim,mode\n1,2,full\nclass_id,count\n0,1,0.5\n").unwrap();
        let err = CovarianceBank::read_csv(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    fn stream_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
        (1usize..7).prop_flat_map(|f| {
            (
                Just(f),
                proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, f), 2..60),
            )
        })
    }

    proptest! {
        #[test]
        fn streaming_matches_two_pass((f, xs) in stream_strategy(), shift in -50.0f64..50.0) {
            let xs: Vec<Vec<f64>> = xs.into_iter().map(|x| x.into_iter().map(|v| v + shift).collect()).collect();
            let mut bank = CovarianceBank::new(1, f, CovMode::Full);
            for x in &xs {
                bank.update(x, 0).unwrap();
            }
            let (mean, cov) = two_pass(&xs);
            let s = bank.class(0).unwrap();
            let dense = s.cov().to_dense();
            if cov.norm() > 1e-12 {
                prop_assert!(rel_frobenius(&dense, &cov) < 1e-8);
            }
            for a in 0..f {
                prop_assert!((s.mean()[a] - mean[a]).abs() <= 1e-10 * (1.0 + mean[a].abs()));
                for b in 0..f {
                    prop_assert!((dense[(a, b)] - dense[(b, a)]).abs() <= 1e-12);
                }
            }
            let eig = nalgebra::SymmetricEigen::new(dense.clone());
            let floor = -1e-9 * dense.trace() / f as f64;
            prop_assert!(eig.eigenvalues.iter().all(|e| *e >= floor - 1e-15));
        }

        #[test]
        fn phi_depends_only_on_weight_differences(
            seed in 0u64..1000, shift in proptest::collection::vec(-3.0f64..3.0, 4)
        ) {
            let mut r = rng::keyed(seed, 0);
            let omega = random_psd(&mut r, 4);
            let w = DMatrix::from_fn(5, 4, |_, _| r.sample::<f64, _>(StandardNormal));
            let mut shifted = w.clone();
            for j in 0..5 {
                for a in 0..4 {
                    shifted[(j, a)] += shift[a];
                }
            }
            let cov = Covariance::Full(omega);
            let a = quadratic_forms_with(&cov, 2, &w);
            let b = quadratic_forms_with(&cov, 2, &shifted);
            for j in 0..5 {
                prop_assert!((a[j] - b[j]).abs() <= 1e-10 * (1.0 + a[j].abs()));
            }
        }
    }
}
