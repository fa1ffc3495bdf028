//! Feed-forward embedder and its optimizer.
//!
//! Hidden layers use ReLU; the last layer is linear and its output is
//! L2-normalized onto the unit sphere.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::csvio::{self, parse_f64, parse_usize};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::loss::ClassifierHead;
use crate::rng::Rng;
use crate::vecops::{norm, normalize_backward};

/// One affine map `z = W a + b`, `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self {
            weights: DMatrix::zeros(self.weights.nrows(), self.weights.ncols()),
            biases: vec![0.0; self.biases.len()],
        }
    }

    fn apply(&self, a: &[f64]) -> Vec<f64> {
        (0..self.weights.nrows())
            .map(|r| {
                let mut z = self.biases[r];
                for (c, x) in a.iter().enumerate() {
                    z += self.weights[(r, c)] * x;
                }
                z
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyEmbedder {
    layers: Vec<Layer>,
}

/// Intermediate values of one forward pass, consumed by
/// [`TinyEmbedder::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by every hidden activation.
    activations: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Vec<f64>>,
    raw_norm: f64,
    pub output: Vec<f64>,
    /// The pre-normalization output was zero and `output` was set to `e_1`.
    pub degenerate: bool,
}

/// Gradients shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<Layer>,
}

impl ModelGrads {
    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights *= k;
            l.biases.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Flat view in the order of [`TinyEmbedder::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }
}

impl TinyEmbedder {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("model.layers", "need at least one layer"));
        }
        for (k, l) in layers.iter().enumerate() {
            check_dim("layer biases", l.weights.nrows(), l.biases.len())?;
            if k > 0 {
                check_dim("layer input", layers[k - 1].weights.nrows(), l.weights.ncols())?;
            }
            check_finite("layer weights", l.weights.as_slice())?;
            check_finite("layer biases", &l.biases)?;
        }
        Ok(Self { layers })
    }

    /// He-normal weights (`sd = sqrt(2/in)`) and zero biases for layer
    /// sizes `dims = [d_in, h_1, ..., F]`.
    pub fn random(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid("model.dims", format!("need >= 2 positive sizes, got {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let sd = (2.0 / w[0] as f64).sqrt();
                Layer {
                    weights: DMatrix::from_fn(w[1], w[0], |_, _| sd * rng.sample::<f64, _>(StandardNormal)),
                    biases: vec![0.0; w[1]],
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].weights.ncols()];
        d.extend(self.layers.iter().map(|l| l.weights.nrows()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.nrows()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input)?.output)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache> {
        check_dim("model input", self.input_dim(), input.len())?;
        check_finite("model input", input)?;
        let last = self.layers.len() - 1;
        let mut activations = vec![input.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&activations[k]);
            if k < last {
                activations.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        let v = &pre[last];
        check_finite("model output", v)?;
        let raw_norm = norm(v);
        let (output, degenerate) = if raw_norm > 0.0 {
            (v.iter().map(|x| x / raw_norm).collect(), false)
        } else {
            let mut e = vec![0.0; v.len()];
            e[0] = 1.0;
            (e, true)
        };
        Ok(ForwardCache {
            activations,
            pre,
            raw_norm,
            output,
            degenerate,
        })
    }

    /// Parameter gradients for an upstream gradient on the unit output.
    /// A degenerate output is a constant, so its gradients are zero.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<ModelGrads> {
        check_dim("upstream gradient", self.output_dim(), upstream.len())?;
        let mut grads = ModelGrads {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
        };
        if cache.degenerate {
            return Ok(grads);
        }
        let mut g = normalize_backward(&cache.output, cache.raw_norm, upstream);
        for k in (0..self.layers.len()).rev() {
            let a = &cache.activations[k];
            let gl = &mut grads.layers[k];
            for (r, gr) in g.iter().enumerate() {
                gl.biases[r] = *gr;
                for (c, x) in a.iter().enumerate() {
                    gl.weights[(r, c)] = gr * x;
                }
            }
            if k == 0 {
                break;
            }
            let w = &self.layers[k].weights;
            let below = &cache.pre[k - 1];
            g = (0..w.ncols())
                .map(|c| {
                    if below[c] > 0.0 {
                        (0..w.nrows()).map(|r| w[(r, c)] * g[r]).sum()
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        Ok(grads)
    }

    /// Replaces every bias with `sd * N(0, 1)`.
    pub fn randomize_biases(&mut self, sd: f64, rng: &mut Rng) {
        for l in &mut self.layers {
            l.biases.iter_mut().for_each(|b| *b = sd * rng.sample::<f64, _>(StandardNormal));
        }
    }

    /// Mutable parameter slices: each layer's weights (column-major), then biases.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }
}

/// SGD with (optionally Nesterov) momentum, exponential learning-rate decay
/// and weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_iters: u64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(
        lr_init: f64,
        lr_final: f64,
        total_iters: u64,
        momentum: f64,
        nesterov: bool,
        weight_decay: f64,
    ) -> Result<Self> {
        if !(lr_init > 0.0) || !lr_init.is_finite() {
            return Err(Error::invalid("optim.lr_init", format!("must be > 0, got {lr_init}")));
        }
        if !(lr_final > 0.0) || !lr_final.is_finite() {
            return Err(Error::invalid("optim.lr_final", format!("must be > 0, got {lr_final}")));
        }
        if total_iters == 0 {
            return Err(Error::invalid("optim total iterations", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("optim.momentum", format!("must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::invalid(
                "optim.weight_decay",
                format!("must be >= 0, got {weight_decay}"),
            ));
        }
        Ok(Self {
            lr_init,
            lr_final,
            total_iters,
            momentum,
            nesterov,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// `lr_init * (lr_final / lr_init)^(t/T)`, exact at both ends.
    pub fn lr(&self, t: u64) -> f64 {
        if t == 0 {
            self.lr_init
        } else if t >= self.total_iters {
            self.lr_final
        } else {
            self.lr_init * (self.lr_final / self.lr_init).powf(t as f64 / self.total_iters as f64)
        }
    }

    /// One update of every parameter slice with its gradient:
    /// `v' = mu v - lr g`, then `theta += mu v' - lr g` (Nesterov) or
    /// `theta += v'`, where `g` includes `weight_decay * theta`.
    pub fn step(&mut self, t: u64, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        check_dim("optimizer tensors", params.len(), grads.len())?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        check_dim("optimizer tensors", self.velocity.len(), params.len())?;
        let lr = self.lr(t);
        let mu = self.momentum;
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            check_dim("optimizer tensor", v.len(), p.len())?;
            check_dim("optimizer gradient", p.len(), g.len())?;
            for ((theta, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                let step = gi + self.weight_decay * *theta;
                *vi = mu * *vi - lr * step;
                if self.nesterov {
                    *theta += mu * *vi - lr * step;
                } else {
                    *theta += *vi;
                }
            }
        }
        Ok(())
    }
}

fn push_tensor(out: &mut String, name: &str, rows: usize, cols: usize, row_major: impl Iterator<Item = f64>) {
    let values: Vec<f64> = row_major.collect();
    let _ = writeln!(out, "{name},{rows},{cols},{}", csvio::join_f64(&values));
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| m[(r, c)]))
}

/// Model snapshot: `name,rows,cols,values...` per tensor, row-major.
pub fn write_model(model: &TinyEmbedder, head: &ClassifierHead, path: &Path) -> Result<()> {
    let mut out = String::from("name,rows,cols,values\n");
    for (k, l) in model.layers.iter().enumerate() {
        push_tensor(&mut out, &format!("layer{k}.weight"), l.weights.nrows(), l.weights.ncols(), row_major(&l.weights));
        push_tensor(&mut out, &format!("layer{k}.bias"), l.biases.len(), 1, l.biases.iter().copied());
    }
    let w = &head.weights;
    push_tensor(&mut out, "head.weight", w.nrows(), w.ncols(), row_major(w));
    push_tensor(&mut out, "head.bias", head.biases.len(), 1, head.biases.iter().copied());
    push_tensor(&mut out, "head.scale", 1, 1, std::iter::once(head.scale));
    push_tensor(&mut out, "head.margin", 1, 1, std::iter::once(head.margin));
    csvio::write_file(path, &out)
}

pub fn read_model(path: &Path) -> Result<(TinyEmbedder, ClassifierHead)> {
    let lines = csvio::read_lines(path)?;
    let mut tensors: Vec<(usize, String, DMatrix<f64>)> = Vec::new();
    for (line, row) in lines.iter().skip(1) {
        let f = csvio::split(row);
        if f.len() < 3 {
            return Err(Error::parse(path, *line, "expected name,rows,cols,values..."));
        }
        let rows = parse_usize(f[1], path, *line)?;
        let cols = parse_usize(f[2], path, *line)?;
        if f.len() != 3 + rows * cols {
            return Err(Error::parse(
                path,
                *line,
                format!("expected {} values, got {}", rows * cols, f.len() - 3),
            ));
        }
        let v = f[3..].iter().map(|x| parse_f64(x, path, *line)).collect::<Result<Vec<_>>>()?;
        tensors.push((*line, f[0].to_string(), DMatrix::from_row_slice(rows, cols, &v)));
    }
    let mut get = |name: &str| -> Result<DMatrix<f64>> {
        let k = tensors
            .iter()
            .position(|t| t.1 == name)
            .ok_or_else(|| Error::parse(path, 1, format!("missing tensor {name}")))?;
        Ok(tensors.remove(k).2)
    };
    let mut layers = Vec::new();
    while let Ok(w) = get(&format!("layer{}.weight", layers.len())) {
        let b = get(&format!("layer{}.bias", layers.len()))?;
        layers.push(Layer {
            weights: w,
            biases: b.as_slice().to_vec(),
        });
    }
    let head = ClassifierHead::new(
        get("head.weight")?,
        get("head.bias")?.as_slice().to_vec(),
        get("head.scale")?[(0, 0)],
        get("head.margin")?[(0, 0)],
    )?;
    if let Some((line, name, _)) = tensors.first() {
        return Err(Error::parse(path, *line, format!("unexpected tensor {name}")));
    }
    Ok((TinyEmbedder::new(layers)?, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::gradcheck::{central_differences, GradCheckReport};
    use crate::rng;

    /// Straight-line evaluation of the same network with plain loops.
    fn reference_forward(model: &TinyEmbedder, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = model.layers.len();
        for (k, l) in model.layers.iter().enumerate() {
            let mut z = vec![0.0; l.weights.nrows()];
            for r in 0..z.len() {
                let mut acc = l.biases[r];
                for c in 0..a.len() {
                    acc += l.weights[(r, c)] * a[c];
                }
                z[r] = if k + 1 < n && acc < 0.0 { 0.0 } else { acc };
            }
            a = z;
        }
        let len = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        a.iter().map(|v| v / len).collect()
    }

    #[test]
    fn identity_layer_maps_e1_to_e1() {
        let m = TinyEmbedder::new(vec![Layer {
            weights: DMatrix::identity(3, 3),
            biases: vec![0.0; 3],
        }])
        .unwrap();
        assert_eq!(m.forward(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn output_is_unit_and_matches_reference() {
        let mut r = rng::keyed(1, 0);
        for _ in 0..50 {
            let m = TinyEmbedder::random(&[5, 7, 6, 4], &mut r).unwrap();
            let x = rng::normal_vec(&mut r, 5);
            if m.forward_cached(&x).unwrap().degenerate {
                continue;
            }
            let y = m.forward(&x).unwrap();
            assert!((norm(&y) - 1.0).abs() < 1e-9);
            for (a, b) in y.iter().zip(reference_forward(&m, &x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_falls_back_to_e1() {
        let m = TinyEmbedder::new(vec![Layer {
            weights: DMatrix::zeros(3, 2),
            biases: vec![0.0; 3],
        }])
        .unwrap();
        let c = m.forward_cached(&[1.0, 2.0]).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.output, vec![1.0, 0.0, 0.0]);
        let g = m.backward(&c, &[1.0, 1.0, 1.0]).unwrap();
        assert!(g.slices().iter().all(|s| s.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn radial_and_zero_upstream_give_zero_gradients() {
        let mut r = rng::keyed(2, 0);
        let m = TinyEmbedder::random(&[4, 8, 5], &mut r).unwrap();
        let c = m.forward_cached(&rng::normal_vec(&mut r, 4)).unwrap();
        let radial: Vec<f64> = c.output.iter().map(|v| 2.5 * v).collect();
        for up in [radial, vec![0.0; 5]] {
            let g = m.backward(&c, &up).unwrap();
            assert!(g.slices().iter().all(|s| s.iter().all(|v| v.abs() < 1e-12)));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::keyed(3, 0);
        for _ in 0..10 {
            let mut m = TinyEmbedder::random(&[4, 6, 5, 3], &mut r).unwrap();
            m.randomize_biases(0.5, &mut r);
            let x = rng::normal_vec(&mut r, 4);
            let up = rng::normal_vec(&mut r, 3);
            let objective = |m: &TinyEmbedder| -> Result<f64> {
                Ok(m.forward(&x)?.iter().zip(&up).map(|(a, b)| a * b).sum())
            };
            let g = m.backward(&m.forward_cached(&x).unwrap(), &up).unwrap();
            let mut report = GradCheckReport::default();
            let n_tensors = g.slices().len();
            for k in 0..n_tensors {
                let base = m.clone();
                let flat = {
                    let mut b = base.clone();
                    b.params_mut()[k].to_vec()
                };
                let fd = central_differences(&flat, 1e-5, |p| {
                    let mut probe = base.clone();
                    probe.params_mut()[k].copy_from_slice(p);
                    objective(&probe)
                })
                .unwrap();
                for (a, n) in g.slices()[k].iter().zip(&fd) {
                    report.record(*a, *n);
                }
            }
            assert!(report.max_rel_error < 1e-5, "{report:?}");
        }
    }

    #[test]
    fn lr_endpoints_are_exact() {
        let o = OptimizerState::new(0.05, 1e-4, 1234, 0.9, true, 1e-4).unwrap();
        assert_eq!(o.lr(0), 0.05);
        assert_eq!(o.lr(1234), 1e-4);
        let mid = o.lr(617);
        assert!((mid - (0.05f64 * 1e-4).sqrt()).abs() < 1e-12);
        let o = OptimizerState::new(0.1, 5e-5, 7, 0.9, true, 1e-4).unwrap();
        assert_eq!((o.lr(0), o.lr(7)), (0.1, 5e-5));
    }

    #[test]
    fn nesterov_step_convention() {
        let mut o = OptimizerState::new(0.1, 0.1, 10, 0.9, true, 0.0).unwrap();
        let mut theta = [1.0];
        o.step(0, vec![&mut theta[..]], vec![&[2.0][..]]).unwrap();
        // v' = -0.2, theta = 1 + 0.9 * -0.2 - 0.2
        assert!((theta[0] - (1.0 - 0.18 - 0.2)).abs() < 1e-15);
        o.step(1, vec![&mut theta[..]], vec![&[2.0][..]]).unwrap();
        let v2 = 0.9 * -0.2 - 0.2;
        assert!((theta[0] - (0.62 + 0.9 * v2 - 0.2)).abs() < 1e-15);

        let mut o = OptimizerState::new(0.1, 0.1, 10, 0.0, false, 0.5).unwrap();
        let mut theta = [2.0];
        o.step(0, vec![&mut theta[..]], vec![&[0.0][..]]).unwrap();
        assert!((theta[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn optimizer_validation() {
        assert!(OptimizerState::new(0.0, 1e-4, 10, 0.9, true, 0.0).is_err());
        assert!(OptimizerState::new(0.1, 1e-4, 0, 0.9, true, 0.0).is_err());
        assert!(OptimizerState::new(0.1, 1e-4, 10, 1.0, true, 0.0).is_err());
        assert!(OptimizerState::new(0.1, 1e-4, 10, 0.9, true, -1.0).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut r = rng::keyed(4, 0);
        let m = TinyEmbedder::random(&[3, 5, 4], &mut r).unwrap();
        let head = ClassifierHead::random(6, 4, 30.0, 0.2, &mut r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.csv");
        write_model(&m, &head, &p).unwrap();
        let (m2, h2) = read_model(&p).unwrap();
        assert_eq!(m2, m);
        assert_eq!(h2, head);
    }
}
