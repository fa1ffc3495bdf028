//! Verification trials, cosine scoring, EER and minDCF.
//!
//! Thresholds sweep the sorted unique scores plus `+inf`; a trial is
//! accepted when `score >= threshold`. At the smallest score everything is
//! accepted (FAR = 1, FRR = 0) and at `+inf` everything is rejected, so the
//! sweep covers both trivial policies.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;

use crate::csvio::{self, parse_bool, parse_f64, parse_usize};
use crate::data::{Dataset, Split};
use crate::error::{check_dim, Error, Result};
use crate::rng::{self, Stream};
use crate::vecops::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub a: usize,
    pub b: usize,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialSet {
    trials: Vec<Trial>,
}

impl TrialSet {
    /// Requires at least one target, one nontarget and no self-pairs.
    pub fn new(trials: Vec<Trial>) -> Result<Self> {
        if let Some(t) = trials.iter().find(|t| t.a == t.b) {
            return Err(Error::invalid("trials", format!("index {} is paired with itself", t.a)));
        }
        if !trials.iter().any(|t| t.is_target) {
            return Err(Error::invalid("trials", "no target trials"));
        }
        if trials.iter().all(|t| t.is_target) {
            return Err(Error::invalid("trials", "no nontarget trials"));
        }
        Ok(Self { trials })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }
}

/// All within-class eval pairs as targets, then nontargets drawn uniformly
/// without replacement from all cross-class eval pairs, at most
/// `cap * targets` of them (`None` keeps every pair).
pub fn build_trials(dataset: &Dataset, max_nontarget_per_target: Option<usize>, seed: u64) -> Result<TrialSet> {
    let eval = dataset.indices(Split::Eval);
    let mut targets = Vec::new();
    let mut cross = Vec::new();
    for (k, &a) in eval.iter().enumerate() {
        for &b in &eval[k + 1..] {
            let is_target = dataset.label(a) == dataset.label(b);
            let t = Trial { a, b, is_target };
            if is_target {
                targets.push(t);
            } else {
                cross.push(t);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::invalid("trials", "no class has two eval samples"));
    }
    let keep = max_nontarget_per_target.map_or(cross.len(), |cap| cross.len().min(cap.saturating_mul(targets.len())));
    if keep < cross.len() {
        let mut rng = rng::stream(seed, Stream::Trials);
        let mut picked = index::sample(&mut rng, cross.len(), keep).into_vec();
        picked.sort_unstable();
        cross = picked.into_iter().map(|i| cross[i]).collect();
    }
    targets.extend(cross);
    TrialSet::new(targets)
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim("cosine_score", a.len(), b.len())?;
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::ZeroNorm("cosine_score"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    is_target: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, is_target: Vec<bool>) -> Result<Self> {
        check_dim("score labels", scores.len(), is_target.len())?;
        crate::error::check_finite("scores", &scores)?;
        Ok(Self { scores, is_target })
    }

    /// Target scores first, then nontarget scores.
    pub fn from_parts(targets: &[f64], nontargets: &[f64]) -> Result<Self> {
        let scores = targets.iter().chain(nontargets).copied().collect();
        let labels = std::iter::repeat_n(true, targets.len())
            .chain(std::iter::repeat_n(false, nontargets.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn is_target(&self) -> &[bool] {
        &self.is_target
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Scores every trial with the cosine of the two embeddings.
pub fn score_trials(trials: &TrialSet, embeddings: &[Vec<f64>]) -> Result<ScoreSet> {
    let mut scores = Vec::with_capacity(trials.len());
    for t in trials.trials() {
        let n = embeddings.len();
        if t.a >= n || t.b >= n {
            return Err(Error::invalid(
                "trials",
                format!("pair ({}, {}) indexes past {n} embeddings", t.a, t.b),
            ));
        }
        scores.push(cosine_score(&embeddings[t.a], &embeddings[t.b])?);
    }
    ScoreSet::new(scores, trials.trials().iter().map(|t| t.is_target).collect())
}

/// One point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR and FRR at every sorted unique score and at `+inf`, in increasing
/// threshold order.
pub fn sweep(scores: &ScoreSet) -> Result<Vec<SweepPoint>> {
    let n_t = scores.is_target.iter().filter(|&&t| t).count();
    let n_n = scores.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::invalid(
            "scores",
            "need at least one target and one nontarget trial",
        ));
    }
    let mut order: Vec<(f64, bool)> = scores.scores.iter().copied().zip(scores.is_target.iter().copied()).collect();
    order.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut points = Vec::new();
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].0;
        points.push(SweepPoint {
            threshold: t,
            far: (n_n - nontargets_below) as f64 / n_n as f64,
            frr: targets_below as f64 / n_t as f64,
        });
        while i < order.len() && order[i].0 == t {
            if order[i].1 {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
    }
    points.push(SweepPoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    });
    Ok(points)
}

/// Crossing of FAR and FRR, linearly interpolated between the two sweep
/// points where `FAR - FRR` changes sign. Returns `(eer, threshold)`; when
/// the crossing lies toward `+inf` the finite end of the bracket is
/// returned as threshold.
pub fn eer_from_sweep(points: &[SweepPoint]) -> (f64, f64) {
    let k = points
        .iter()
        .position(|p| p.far - p.frr <= 0.0)
        .expect("sweep ends at FAR = 0, FRR = 1");
    if k == 0 {
        return (points[0].frr, points[0].threshold);
    }
    let (p, q) = (points[k - 1], points[k]);
    let (dp, dq) = (p.far - p.frr, q.far - q.frr);
    let alpha = dp / (dp - dq);
    let eer = p.frr + alpha * (q.frr - p.frr);
    let threshold = if q.threshold.is_finite() {
        p.threshold + alpha * (q.threshold - p.threshold)
    } else {
        p.threshold
    };
    (eer, threshold)
}

pub fn compute_eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    Ok(eer_from_sweep(&sweep(scores)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::invalid(
                "eval.p_target",
                format!("must lie in (0, 1), got {}", self.p_target),
            ));
        }
        if !(self.c_miss > 0.0) || !self.c_miss.is_finite() {
            return Err(Error::invalid("eval.c_miss", format!("must be > 0, got {}", self.c_miss)));
        }
        if !(self.c_fa > 0.0) || !self.c_fa.is_finite() {
            return Err(Error::invalid("eval.c_fa", format!("must be > 0, got {}", self.c_fa)));
        }
        Ok(())
    }

    /// Detection cost normalized by the better of accept-all and reject-all.
    pub fn normalized_cost(&self, far: f64, frr: f64) -> f64 {
        let miss = self.c_miss * self.p_target;
        let fa = self.c_fa * (1.0 - self.p_target);
        (miss * frr + fa * far) / miss.min(fa)
    }
}

pub fn min_dcf_from_sweep(points: &[SweepPoint], params: &DcfParams) -> f64 {
    points
        .iter()
        .map(|p| params.normalized_cost(p.far, p.frr))
        .fold(f64::INFINITY, f64::min)
}

pub fn compute_min_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<f64> {
    params.validate()?;
    Ok(min_dcf_from_sweep(&sweep(scores)?, params))
}

/// EER and minDCF from one sweep.
pub fn evaluate(scores: &ScoreSet, params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    let points = sweep(scores)?;
    Ok((eer_from_sweep(&points).0, min_dcf_from_sweep(&points, params)))
}

/// `EER(%)=x.xxx minDCF=0.xxx`
pub fn format_metrics(eer: f64, min_dcf: f64) -> String {
    format!("EER(%)={:.3} minDCF={:.3}", 100.0 * eer, min_dcf)
}

pub fn write_trials(trials: &TrialSet, path: &Path) -> Result<()> {
    let mut out = String::from("index_a,index_b,is_target\n");
    for t in trials.trials() {
        let _ = writeln!(out, "{},{},{}", t.a, t.b, u8::from(t.is_target));
    }
    csvio::write_file(path, &out)
}

fn data_rows(path: &Path, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let lines = csvio::read_lines(path)?;
    let Some(((line, first), rows)) = lines.split_first() else {
        return Err(Error::parse(path, 1, "no data rows"));
    };
    if csvio::split(first).join(",") != header {
        return Err(Error::parse(path, *line, format!("header must be {header}")));
    }
    if rows.is_empty() {
        return Err(Error::parse(path, *line, "no data rows"));
    }
    let arity = header.split(',').count();
    rows.iter()
        .map(|(line, row)| {
            let fields: Vec<String> = csvio::split(row).into_iter().map(String::from).collect();
            if fields.len() != arity {
                return Err(Error::parse(
                    path,
                    *line,
                    format!("expected {arity} fields, got {}", fields.len()),
                ));
            }
            Ok((*line, fields))
        })
        .collect()
}

pub fn read_trials(path: &Path) -> Result<TrialSet> {
    let trials = data_rows(path, "index_a,index_b,is_target")?
        .into_iter()
        .map(|(line, f)| {
            Ok(Trial {
                a: parse_usize(&f[0], path, line)?,
                b: parse_usize(&f[1], path, line)?,
                is_target: parse_bool(&f[2], path, line)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrialSet::new(trials)
}

pub fn write_scores(trials: &TrialSet, scores: &ScoreSet, path: &Path) -> Result<()> {
    check_dim("scores", trials.len(), scores.len())?;
    let mut out = String::from("index_a,index_b,score,is_target\n");
    for (t, s) in trials.trials().iter().zip(scores.scores()) {
        let _ = writeln!(out, "{},{},{},{}", t.a, t.b, csvio::fmt_f64(*s), u8::from(t.is_target));
    }
    csvio::write_file(path, &out)
}

pub fn read_scores(path: &Path) -> Result<ScoreSet> {
    let rows = data_rows(path, "index_a,index_b,score,is_target")?;
    let mut scores = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (line, f) in rows {
        parse_usize(&f[0], path, line)?;
        parse_usize(&f[1], path, line)?;
        scores.push(parse_f64(&f[2], path, line)?);
        labels.push(parse_bool(&f[3], path, line)?);
    }
    ScoreSet::new(scores, labels)
}

/// Embeddings CSV: `index,label,e0,...`, one row per dataset index.
pub fn write_embeddings(embeddings: &[Vec<f64>], labels: &[usize], path: &Path) -> Result<()> {
    check_dim("embedding labels", embeddings.len(), labels.len())?;
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut out = String::from("index,label");
    for a in 0..dim {
        let _ = write!(out, ",e{a}");
    }
    out.push('\n');
    for (i, (e, l)) in embeddings.iter().zip(labels).enumerate() {
        check_dim("embedding", dim, e.len())?;
        let _ = writeln!(out, "{i},{l},{}", csvio::join_f64(e));
    }
    csvio::write_file(path, &out)
}

/// Reads an embeddings CSV; rows must be in index order `0, 1, ...`.
pub fn read_embeddings(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let lines = csvio::read_lines(path)?;
    let Some(((line, header), rows)) = lines.split_first() else {
        return Err(Error::parse(path, 1, "no data rows"));
    };
    let cols = csvio::split(header);
    if cols.len() < 3 || cols[0] != "index" || cols[1] != "label" {
        return Err(Error::parse(path, *line, "header must be index,label,e0,..."));
    }
    if rows.is_empty() {
        return Err(Error::parse(path, *line, "no data rows"));
    }
    let dim = cols.len() - 2;
    let mut embeddings = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for (k, (line, row)) in rows.iter().enumerate() {
        let f = csvio::split(row);
        if f.len() != dim + 2 {
            return Err(Error::parse(
                path,
                *line,
                format!("expected {} fields, got {}", dim + 2, f.len()),
            ));
        }
        if parse_usize(f[0], path, *line)? != k {
            return Err(Error::parse(path, *line, format!("expected index {k}")));
        }
        labels.push(parse_usize(f[1], path, *line)?);
        embeddings.push(f[2..].iter().map(|v| parse_f64(v, path, *line)).collect::<Result<Vec<_>>>()?);
    }
    Ok((embeddings, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SynthSpec};
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Brute force: every candidate threshold is evaluated by counting all
    /// trials directly.
    fn enumerate(scores: &[f64], labels: &[bool]) -> Vec<SweepPoint> {
        let mut cands: Vec<f64> = scores.to_vec();
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        cands.push(f64::INFINITY);
        let n_t = labels.iter().filter(|&&l| l).count();
        let n_n = labels.len() - n_t;
        cands
            .into_iter()
            .map(|t| {
                let miss = scores.iter().zip(labels).filter(|(s, &l)| l && **s < t).count();
                let fa = scores.iter().zip(labels).filter(|(s, &l)| !l && **s >= t).count();
                SweepPoint {
                    threshold: t,
                    far: fa as f64 / n_n as f64,
                    frr: miss as f64 / n_t as f64,
                }
            })
            .collect()
    }

    fn oracle_eer(points: &[SweepPoint]) -> f64 {
        let mut best = None;
        for w in points.windows(2) {
            let (dp, dq) = (w[0].far - w[0].frr, w[1].far - w[1].frr);
            if dp > 0.0 && dq <= 0.0 {
                best = Some(w[0].frr + dp / (dp - dq) * (w[1].frr - w[0].frr));
                break;
            }
        }
        best.unwrap_or(points[0].frr)
    }

    #[test]
    fn eer_examples() {
        let s = ScoreSet::from_parts(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert_eq!(compute_eer(&s).unwrap().0, 0.0);
        assert_eq!(compute_min_dcf(&s, &DcfParams::default()).unwrap(), 0.0);
        let s = ScoreSet::from_parts(&[0.8, 0.2], &[0.6, 0.4]).unwrap();
        assert_eq!(compute_eer(&s).unwrap().0, 0.5);
        let s = ScoreSet::from_parts(&[1.0], &[0.0]).unwrap();
        let (eer, t) = compute_eer(&s).unwrap();
        assert_eq!(eer, 0.0);
        assert!((0.0..=1.0).contains(&t));
    }

    #[test]
    fn same_distribution_gives_chance_eer() {
        let mut r = rng::keyed(1, 0);
        let t: Vec<f64> = (0..10_000).map(|_| r.random::<f64>()).collect();
        let n: Vec<f64> = (0..10_000).map(|_| r.random::<f64>()).collect();
        let eer = compute_eer(&ScoreSet::from_parts(&t, &n).unwrap()).unwrap().0;
        assert!((eer - 0.5).abs() <= 0.02, "{eer}");
    }

    #[test]
    fn min_dcf_anchors() {
        let s = ScoreSet::from_parts(&[0.3, 0.3], &[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(compute_min_dcf(&s, &DcfParams::default()).unwrap(), 1.0);
        let s = ScoreSet::from_parts(&[0.8, 0.2], &[0.6, 0.4]).unwrap();
        let p = DcfParams::default();
        let brute = enumerate(s.scores(), s.is_target())
            .iter()
            .map(|q| p.normalized_cost(q.far, q.frr))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(compute_min_dcf(&s, &p).unwrap(), brute);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(compute_eer(&ScoreSet::from_parts(&[0.1, 0.2], &[]).unwrap()).is_err());
        assert!(compute_eer(&ScoreSet::from_parts(&[], &[0.1]).unwrap()).is_err());
        assert!(ScoreSet::new(vec![f64::NAN], vec![true]).is_err());
        assert!(ScoreSet::new(vec![0.1], vec![true, false]).is_err());
        assert!(DcfParams { p_target: 1.0, ..DcfParams::default() }.validate().is_err());
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_score(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((cosine_score(&[h, h], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    fn tiny_dataset(classes: usize) -> Dataset {
        generate(&SynthSpec {
            num_classes: classes,
            samples_per_class: 10,
            input_dim: 3,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn trial_counts() {
        let d = tiny_dataset(2);
        let all = build_trials(&d, None, 1).unwrap();
        assert_eq!(all.num_targets(), 2);
        assert_eq!(all.len() - all.num_targets(), 4);
        let capped = build_trials(&d, Some(1), 1).unwrap();
        assert_eq!(capped.len() - capped.num_targets(), 2);
        assert_eq!(capped, build_trials(&d, Some(1), 1).unwrap());
        for t in all.trials() {
            assert_eq!(t.is_target, d.label(t.a) == d.label(t.b));
            assert_eq!(d.split(t.a), Split::Eval);
            assert_ne!(t.a, t.b);
        }
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny_dataset(3);
        let trials = build_trials(&d, None, 2).unwrap();
        let p = dir.path().join("trials.csv");
        write_trials(&trials, &p).unwrap();
        assert_eq!(read_trials(&p).unwrap(), trials);

        let emb: Vec<Vec<f64>> = (0..d.len()).map(|i| d.input(i).to_vec()).collect();
        let p = dir.path().join("emb.csv");
        write_embeddings(&emb, d.labels(), &p).unwrap();
        let (back, labels) = read_embeddings(&p).unwrap();
        assert_eq!(back, emb);
        assert_eq!(labels, d.labels());

        let scores = score_trials(&trials, &emb).unwrap();
        let p = dir.path().join("scores.csv");
        write_scores(&trials, &scores, &p).unwrap();
        assert_eq!(read_scores(&p).unwrap(), scores);

        std::fs::write(&p, "index_a,index_b,is_target\n0,1\n").unwrap();
        assert!(matches!(read_trials(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn metrics_line_format() {
        assert_eq!(format_metrics(0.01234, 0.5), "EER(%)=1.234 minDCF=0.500");
    }

    fn score_sets() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=100).prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![(-20i32..20).prop_map(|k| k as f64 / 8.0), -3.0..3.0f64], n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sweep_matches_exhaustive_enumeration((scores, labels) in score_sets()) {
            let s = ScoreSet::new(scores.clone(), labels.clone()).unwrap();
            let points = sweep(&s).unwrap();
            let brute = enumerate(&scores, &labels);
            prop_assert_eq!(&points, &brute);
            prop_assert_eq!(compute_eer(&s).unwrap().0, oracle_eer(&brute));
            let p = DcfParams::default();
            let dcf = compute_min_dcf(&s, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&dcf));
        }

        #[test]
        fn monotone_transforms_leave_metrics_unchanged((scores, labels) in score_sets()) {
            let s = ScoreSet::new(scores.clone(), labels.clone()).unwrap();
            let warped = ScoreSet::new(scores.iter().map(|x| 3.0 * x.tanh() + 1.0).collect(), labels).unwrap();
            let p = DcfParams::default();
            prop_assert_eq!(compute_eer(&s).unwrap().0, compute_eer(&warped).unwrap().0);
            prop_assert_eq!(compute_min_dcf(&s, &p).unwrap(), compute_min_dcf(&warped, &p).unwrap());
        }

        #[test]
        fn label_swap_preserves_eer((scores, labels) in score_sets()) {
            let s = ScoreSet::new(scores.clone(), labels.clone()).unwrap();
            let swapped = ScoreSet::new(
                scores.iter().map(|x| -x).collect(),
                labels.iter().map(|l| !l).collect(),
            ).unwrap();
            let (a, b) = (compute_eer(&s).unwrap().0, compute_eer(&swapped).unwrap().0);
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }
}
