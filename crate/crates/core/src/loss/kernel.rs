use super::{ClassifierHead, Difficulty, LossOutput, SampleTerms, Strength};
use crate::error::{Error, Result};
use crate::stats::Covariance;
use crate::vecops::{axpy, dot, norm, normalize_backward};
use nalgebra::DMatrix;

/// `log(1 + sum_k exp(a_k))` and its partials `dL/da_k`, stabilized by
/// subtracting `max(0, max_k a_k)`.
pub(crate) fn log1p_sum_exp(a: &[f64]) -> (f64, Vec<f64>) {
    let top = a.iter().fold(0.0f64, |m, &x| m.max(x));
    let terms: Vec<f64> = a.iter().map(|x| (x - top).exp()).collect();
    let sum: f64 = terms.iter().sum();
    let total = (-top).exp() + sum;
    let value = if top == 0.0 { sum.ln_1p() } else { top + total.ln() };
    let weights = terms.into_iter().map(|t| t / total).collect();
    (value, weights)
}

/// Difficulty coefficient and its derivative in `cos_y`; the clamp to
/// `[-1, 1]` has zero derivative outside the interval.
pub(crate) fn coefficient(difficulty: Difficulty, cos_y: f64, gamma: f64) -> (f64, f64) {
    let inside = (-1.0..=1.0).contains(&cos_y);
    let c = cos_y.clamp(-1.0, 1.0);
    match difficulty {
        Difficulty::None => (1.0, 0.0),
        Difficulty::Da => ((1.0 - c) / 2.0, if inside { -0.5 } else { 0.0 }),
        Difficulty::Dy => {
            let v = (1.0 - c).exp() / gamma;
            (v, if inside { -v } else { 0.0 })
        }
    }
}

fn finish(value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite("loss value"))
    }
}

/// Softmax path on raw logits `w_j . f + b_j`; `lambda > 0` adds the
/// ISDA variance term `lambda/2 * Phi_j` with `Phi_j` on the raw rows.
pub(crate) fn softmax_path(
    f: &[f64],
    head: &ClassifierHead,
    y: usize,
    lambda: f64,
    cov: Option<&Covariance>,
) -> Result<LossOutput> {
    let c = head.num_classes();
    let dim = head.dim();
    let w = &head.weights;
    let b = &head.biases;
    let wy: Vec<f64> = w.row(y).iter().copied().collect();

    let others: Vec<usize> = (0..c).filter(|&j| j != y).collect();
    let mut a = Vec::with_capacity(others.len());
    let mut diffs = Vec::with_capacity(others.len());
    let mut spread = Vec::with_capacity(others.len());
    let mut max_phi_term = 0.0f64;
    for &j in &others {
        let d: Vec<f64> = w.row(j).iter().zip(&wy).map(|(p, q)| p - q).collect();
        let mut aj = dot(&d, f) + (b[j] - b[y]);
        if let Some(cov) = cov {
            let od = cov.apply(&d);
            let term = 0.5 * lambda * dot(&d, &od);
            max_phi_term = max_phi_term.max(term);
            aj += term;
            spread.push(od);
        }
        a.push(aj);
        diffs.push(d);
    }
    let (value, q) = log1p_sum_exp(&a);
    let value = finish(value)?;

    let mut grad_f = vec![0.0; dim];
    let mut grad_w = DMatrix::zeros(c, dim);
    let mut grad_b = vec![0.0; c];
    let mut row_y = vec![0.0; dim];
    for (k, &j) in others.iter().enumerate() {
        let qk = q[k];
        axpy(qk, &diffs[k], &mut grad_f);
        let mut row: Vec<f64> = f.iter().map(|v| qk * v).collect();
        if cov.is_some() {
            axpy(qk * lambda, &spread[k], &mut row);
        }
        for (a_i, r) in row.iter().enumerate() {
            grad_w[(j, a_i)] = *r;
            row_y[a_i] -= r;
        }
        grad_b[j] = qk;
        grad_b[y] -= qk;
    }
    for (a_i, r) in row_y.iter().enumerate() {
        grad_w[(y, a_i)] = *r;
    }

    let wy_len = norm(&wy);
    let fn_len = norm(f);
    let cos_y = if wy_len > 0.0 && fn_len > 0.0 {
        dot(&wy, f) / (wy_len * fn_len)
    } else {
        0.0
    };
    Ok(LossOutput {
        value,
        grad_embedding: grad_f,
        grad_weights: grad_w,
        grad_biases: Some(grad_b),
        terms: SampleTerms {
            cos_y,
            coef: 0.0,
            lambda: if cov.is_some() { lambda } else { 0.0 },
            max_phi_term,
        },
    })
}

/// Margin path on cosine logits. With relative logits
/// `a_j = s (cos_j - cos_y) + s m coef(cos_y) + 0.5 lambda(cos_y) s^2 Phi_j`
/// this covers AM (`coef = 1`, `lambda = 0`), DAAM (`lambda = 0`) and DASA.
/// `Phi_j` is taken on the normalized rows.
pub(crate) fn margin_path(
    f: &[f64],
    head: &ClassifierHead,
    y: usize,
    difficulty: Difficulty,
    gamma: f64,
    strength: Strength,
    cov: Option<&Covariance>,
) -> Result<LossOutput> {
    let c = head.num_classes();
    let dim = head.dim();
    let s = head.scale;
    let m = head.margin;

    let mut unit = Vec::with_capacity(c);
    let mut lens = Vec::with_capacity(c);
    for j in 0..c {
        let row: Vec<f64> = head.weights.row(j).iter().copied().collect();
        let len = norm(&row);
        if !(len > 0.0) {
            return Err(Error::ZeroNorm("weight row"));
        }
        unit.push(row.into_iter().map(|v| v / len).collect::<Vec<f64>>());
        lens.push(len);
    }
    let cos: Vec<f64> = unit.iter().map(|u| dot(u, f)).collect();
    let cos_y = cos[y];
    let (coef, dcoef) = coefficient(difficulty, cos_y, gamma);
    let (lambda, dlambda) = match strength {
        Strength::Fixed(l) => (l, 0.0),
        Strength::Ramp { ramp, mode } => {
            let (k, dk) = coefficient(mode.coefficient(), cos_y, gamma);
            (ramp * k, ramp * dk)
        }
    };
    let with_phi = cov.is_some() && !strength.is_zero();
    let margin_term = s * m * coef;
    let half = 0.5 * lambda * s * s;

    let others: Vec<usize> = (0..c).filter(|&j| j != y).collect();
    let mut a = Vec::with_capacity(others.len());
    let mut phi = vec![0.0; others.len()];
    let mut spread: Vec<Vec<f64>> = Vec::new();
    let mut max_phi_term = 0.0f64;
    for (k, &j) in others.iter().enumerate() {
        let mut aj = s * (cos[j] - cos_y) + margin_term;
        if with_phi {
            let cov = cov.expect("checked above");
            let d: Vec<f64> = unit[j].iter().zip(&unit[y]).map(|(p, q)| p - q).collect();
            let od = cov.apply(&d);
            phi[k] = dot(&d, &od);
            let term = half * phi[k];
            max_phi_term = max_phi_term.max(term);
            aj += term;
            spread.push(od);
        }
        a.push(aj);
    }
    let (value, q) = log1p_sum_exp(&a);
    let value = finish(value)?;

    // dL/dcos_j for j != y, and the accumulated dL/dcos_y.
    let dy_common = -s + s * m * dcoef;
    let mut g_cos_y = 0.0;
    let mut grad_unit = vec![vec![0.0; dim]; c];
    let mut grad_f = vec![0.0; dim];
    for (k, &j) in others.iter().enumerate() {
        let g = s * q[k];
        let mut gy = q[k] * dy_common;
        if with_phi {
            gy += q[k] * 0.5 * s * s * phi[k] * dlambda;
        }
        g_cos_y += gy;
        axpy(g, &unit[j], &mut grad_f);
        axpy(g, f, &mut grad_unit[j]);
        if with_phi {
            let scale = q[k] * lambda * s * s;
            axpy(scale, &spread[k], &mut grad_unit[j]);
            axpy(-scale, &spread[k], &mut grad_unit[y]);
        }
    }
    axpy(g_cos_y, &unit[y], &mut grad_f);
    axpy(g_cos_y, f, &mut grad_unit[y]);

    let mut grad_w = DMatrix::zeros(c, dim);
    for j in 0..c {
        let g = normalize_backward(&unit[j], lens[j], &grad_unit[j]);
        for (a_i, v) in g.into_iter().enumerate() {
            grad_w[(j, a_i)] = v;
        }
    }

    Ok(LossOutput {
        value,
        grad_embedding: grad_f,
        grad_weights: grad_w,
        grad_biases: None,
        terms: SampleTerms {
            cos_y,
            coef,
            lambda: if with_phi { lambda } else { 0.0 },
            max_phi_term,
        },
    })
}
