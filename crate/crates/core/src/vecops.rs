//! Small dense-vector helpers shared by the numeric modules.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Projects `g` onto the tangent space at unit vector `u` and divides by `len`:
/// the Jacobian-vector product of `v -> v / |v|` at `v = len * u`.
pub fn normalize_backward(u: &[f64], len: f64, g: &[f64]) -> Vec<f64> {
    let along = dot(u, g);
    g.iter()
        .zip(u)
        .map(|(gi, ui)| (gi - ui * along) / len)
        .collect()
}
