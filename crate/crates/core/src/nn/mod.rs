//! Minimal layer library with explicit backward passes.
//!
//! Sequences are kept time-major, `(len, batch, features)`, so that a whole
//! sequence flattens to a `(len * batch, features)` matrix with row
//! `t * batch + b`. Every layer's `forward` returns a cache that its
//! `backward` consumes; gradients accumulate into [`Param::grad`].

mod adam;
mod attention;
mod layers;
mod lstm;
mod tcn;

pub use adam::Adam;
pub use attention::{sinusoidal_positions, EncoderLayer, EncoderLayerCache, MultiHeadAttention};
pub use layers::{Embedding, LayerNorm, LayerNormCache, Linear};
pub use lstm::{Lstm, LstmCache};
pub use tcn::{CausalConv, TemporalBlock, TemporalBlockCache};

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A trainable matrix and its accumulated gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Array2<f32>,
    #[serde(skip, default)]
    pub grad: Array2<f32>,
}

impl Param {
    pub fn new(value: Array2<f32>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Array2::zeros((rows, cols)))
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Param::new(Array2::ones((rows, cols)))
    }

    /// Fan-in scaled uniform: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        Param::new(Array2::from_shape_simple_fn((rows, cols), || {
            rng.random_range(-bound..=bound)
        }))
    }

    pub fn zero_grad(&mut self) {
        if self.grad.dim() != self.value.dim() {
            self.grad = Array2::zeros(self.value.raw_dim());
        } else {
            self.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything owning parameters, visited in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>);

    fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        self.visit(&mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        self.visit_mut(&mut v);
        v
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Inverted-dropout keep mask: entries are 0 or 1/(1-p). `None` when inactive.
pub fn dropout_mask<R: Rng + ?Sized>(
    rng: Option<&mut R>,
    p: f32,
    shape: (usize, usize),
) -> Option<Array2<f32>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    Some(Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f32>() < keep {
            scale
        } else {
            0.0
        }
    }))
}

pub(crate) fn apply_mask_inplace(x: &mut Array2<f32>, mask: Option<&Array2<f32>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

pub(crate) fn relu_inplace(x: &mut Array2<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zeroes `grad` wherever the post-activation `out` is not positive.
pub(crate) fn relu_backward_inplace(grad: &mut Array2<f32>, out: ArrayView2<f32>) {
    Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Branch-free `exp` (Cephes polynomial, about 2 ulp) that vectorizes; the
/// libm call dominates recurrent-layer time otherwise.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // round-to-nearest via the 1.5 * 2^23 trick
    const ROUND: f32 = 12_582_912.0;
    let x = x.max(-87.3).min(88.7);
    let k = x * LOG2E + ROUND;
    let n = k - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    // the low mantissa bits of `k` hold `n`; integer ops keep this vectorizable
    let scale = k.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23;
    y * f32::from_bits(scale)
}

#[inline(always)]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

#[inline(always)]
pub fn tanh(x: f32) -> f32 {
    2.0 / (1.0 + fast_exp(-2.0 * x)) - 1.0
}

/// Global L2 norm of all gradients.
pub fn grad_norm(params: &[&mut Param]) -> f32 {
    params
        .iter()
        .map(|p| p.grad.iter().map(|g| g * g).sum::<f32>())
        .sum::<f32>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f32) -> f32 {
    let norm = grad_norm(params);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad *= s;
        }
    }
    norm
}

#[cfg(test)]
mod activation_tests {
    use super::*;

    #[test]
    fn fast_activations_match_libm() {
        let mut worst_exp = 0.0f64;
        let mut worst_tanh = 0.0f64;
        for i in -200_000..=200_000 {
            let x = i as f32 * 4.3e-4;
            let e = (x as f64).exp();
            worst_exp = worst_exp.max(((fast_exp(x) as f64) - e).abs() / e);
            worst_tanh = worst_tanh.max(((tanh(x) as f64) - (x as f64).tanh()).abs());
        }
        assert!(worst_exp < 5e-7, "exp rel err {worst_exp}");
        assert!(worst_tanh < 5e-7, "tanh abs err {worst_tanh}");
        assert_eq!(sigmoid(-200.0), 0.0);
        assert_eq!(sigmoid(200.0), 1.0);
        assert_eq!(tanh(50.0), 1.0);
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    pub fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let tol = 2e-2 * analytic.abs().max(numeric.abs()) + 2e-3;
        assert!(
            (analytic - numeric).abs() <= tol,
            "{what}: analytic {analytic} vs numeric {numeric}"
        );
    }

    /// Compares the gradients already accumulated in `model` against central
    /// differences of `loss`, at a spread of entries of every parameter.
    pub fn check_params<M: Parameters>(model: &mut M, loss: impl Fn(&M) -> f64, per_param: usize) {
        check_params_eps(model, loss, per_param, 1e-2)
    }

    pub fn check_params_eps<M: Parameters>(model: &mut M, loss: impl Fn(&M) -> f64, per_param: usize, eps: f32) {
        let grads: Vec<Array2<f32>> = model.params().iter().map(|p| p.grad.clone()).collect();
        for (i, g) in grads.iter().enumerate() {
            let n = g.len();
            for k in 0..per_param.min(n) {
                let flat = (k * 7919 + 13) % n;
                let idx = (flat / g.ncols(), flat % g.ncols());
                let orig = model.params()[i].value[idx];
                model.params_mut()[i].value[idx] = orig + eps;
                let up = loss(model);
                model.params_mut()[i].value[idx] = orig - eps;
                let down = loss(model);
                model.params_mut()[i].value[idx] = orig;
                let numeric = (up - down) / (2.0 * eps as f64);
                assert_close(g[idx] as f64, numeric, &format!("param {i} entry {idx:?}"));
            }
        }
    }

    /// Same check for the gradient w.r.t. an input array.
    pub fn check_input<D: ndarray::Dimension>(
        input: &mut ndarray::Array<f32, D>,
        analytic: &ndarray::Array<f32, D>,
        loss: impl Fn(&ndarray::Array<f32, D>) -> f64,
        samples: usize,
    ) {
        let eps = 1e-2f32;
        let n = input.len();
        for k in 0..samples.min(n) {
            let flat = (k * 7919 + 5) % n;
            let orig = input.as_slice_mut().unwrap()[flat];
            input.as_slice_mut().unwrap()[flat] = orig + eps;
            let up = loss(input);
            input.as_slice_mut().unwrap()[flat] = orig - eps;
            let down = loss(input);
            input.as_slice_mut().unwrap()[flat] = orig;
            let numeric = (up - down) / (2.0 * eps as f64);
            assert_close(analytic.as_slice().unwrap()[flat] as f64, numeric, &format!("input {flat}"));
        }
    }

    /// Fixed pseudo-random projection used as a scalar loss.
    pub fn projection(shape: (usize, usize)) -> Array2<f32> {
        Array2::from_shape_fn(shape, |(i, j)| (((i * 31 + j * 17) % 23) as f32 - 11.0) / 11.0)
    }

    pub fn project(y: &Array2<f32>, w: &Array2<f32>) -> f64 {
        y.iter().zip(w).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    }
}
