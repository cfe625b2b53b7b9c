//! Dense building blocks with explicit backward passes, and the parameter
//! visitor every network implements.

use std::hash::{Hash, Hasher};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

/// Visitor over named parameter tensors. Gradients reuse the network type, so
/// the same visitor drives optimizers, checkpoints and isolation checks.
pub trait ParamSet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut("", &mut |_, _, d| {
            d.copy_from_slice(&flat[offset..offset + d.len()]);
            offset += d.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_params_mut("", &mut |_, _, d| d.fill(0.0));
        z
    }

    fn scale(&mut self, factor: f64) {
        self.visit_params_mut("", &mut |_, _, d| d.iter_mut().for_each(|x| *x *= factor));
    }

    /// `(name, shape)` for every tensor, in visiting order.
    fn shape_signature(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, shape, _| out.push((name.to_string(), shape.to_vec())));
        out
    }

    /// Hash of the exact bit patterns of every parameter.
    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.visit_params("", &mut |name, _, d| {
            name.hash(&mut h);
            d.iter().for_each(|x| x.to_bits().hash(&mut h));
        });
        h.finish()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit1(prefix: &str, name: &str, a: &Array1<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(&join(prefix, name), a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit2(prefix: &str, name: &str, a: &Array2<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(&join(prefix, name), a.shape(), a.as_slice().expect("standard layout"));
}

pub(crate) fn visit1_mut(
    prefix: &str,
    name: &str,
    a: &mut Array1<f64>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = a.shape().to_vec();
    f(&join(prefix, name), &shape, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn visit2_mut(
    prefix: &str,
    name: &str,
    a: &mut Array2<f64>,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = a.shape().to_vec();
    f(&join(prefix, name), &shape, a.as_slice_mut().expect("standard layout"));
}

/// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn uniform_fan_in(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// `grad += dy ⊗ x`.
pub(crate) fn add_outer(grad: &mut Array2<f64>, dy: ArrayView1<f64>, x: ArrayView1<f64>) {
    for (mut row, &g) in grad.rows_mut().into_iter().zip(dy.iter()) {
        if g != 0.0 {
            row.scaled_add(g, &x);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Self {
        let weight = uniform_fan_in(rng, outputs, inputs, inputs);
        let bound = 1.0 / (inputs as f64).sqrt();
        let bias = Array1::from_shape_simple_fn(outputs, || rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        self.accumulate(x, dy, grad);
        self.weight.t().dot(&dy)
    }

    pub fn accumulate(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) {
        add_outer(&mut grad.weight, dy, x);
        grad.bias += &dy;
    }
}

impl ParamSet for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(prefix, "weight", &self.weight, f);
        visit1(prefix, "bias", &self.bias, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit2_mut(prefix, "weight", &mut self.weight, f);
        visit1_mut(prefix, "bias", &mut self.bias, f);
    }
}

pub fn relu(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| if v < 0.0 { 0.0 } else { v })
}

/// Zeroes `grad` wherever the post-activation value was not positive.
pub fn relu_backward(grad: &mut Array1<f64>, activated: &Array1<f64>) {
    grad.zip_mut_with(activated, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn leaky_relu(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

pub fn leaky_relu_backward(grad: &mut Array1<f64>, pre: &Array1<f64>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|&x| x - lse).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use ndarray::array;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = stream_rng(1, Stream::Init, 0);
        let layer = Linear::new(&mut rng, 3, 2);
        let x = array![0.3, -1.2, 0.7];
        let probe = |l: &Linear, x: &Array1<f64>| l.forward(x.view()).sum();
        let mut grad = layer.zeros_like();
        let dx = layer.backward(x.view(), Array1::ones(2).view(), &mut grad);
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (probe(&layer, &xp) - probe(&layer, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
        let analytic = grad.flatten();
        let base = layer.flatten();
        for k in 0..base.len() {
            let mut p = layer.clone();
            let mut flat = base.clone();
            flat[k] += h;
            p.load_flat(&flat);
            let up = probe(&p, &x);
            flat[k] -= 2.0 * h;
            p.load_flat(&flat);
            let down = probe(&p, &x);
            assert!(((up - down) / (2.0 * h) - analytic[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn stable_primitives() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let lp = log_softmax(&[0.0, 0.0, 0.0, 0.0]);
        assert!((lp[0] + 4f64.ln()).abs() < 1e-15);
    }
}
