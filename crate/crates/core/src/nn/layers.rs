use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Param, Parameters};

/// Affine map `x W + b` over rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// (in, out)
    pub weight: Param,
    /// (1, out)
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize) -> Self {
        Linear {
            weight: Param::uniform(rng, input, output, input),
            bias: Param::uniform(rng, 1, output, input),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value.row(0);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: ArrayView2<f32>, dy: ArrayView2<f32>) -> Array2<f32> {
        self.accumulate(x, dy);
        dy.dot(&self.weight.value.t())
    }

    /// Parameter gradients only, for layers fed directly by data.
    pub fn accumulate(&mut self, x: ArrayView2<f32>, dy: ArrayView2<f32>) {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut self.weight.grad);
        let db = dy.sum_axis(Axis(0));
        let mut brow = self.bias.grad.row_mut(0);
        brow += &db;
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Lookup table for a categorical variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    /// (vocab, dim)
    pub table: Param,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, vocab: usize, dim: usize) -> Self {
        // unit-scale rows, the usual choice for embedding tables
        Embedding {
            table: Param::uniform(rng, vocab, dim, 1),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.value.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.value.ncols()
    }

    /// Writes the embedding of each index into the given column block of `out`.
    pub fn forward_into(&self, indices: impl Iterator<Item = usize>, out: &mut Array2<f32>, col: usize) {
        let d = self.dim();
        for (row, idx) in indices.enumerate() {
            out.row_mut(row)
                .slice_mut(ndarray::s![col..col + d])
                .assign(&self.table.value.row(idx));
        }
    }

    pub fn backward_from(&mut self, indices: impl Iterator<Item = usize>, dy: ArrayView2<f32>, col: usize) {
        let d = self.dim();
        for (row, idx) in indices.enumerate() {
            let mut g = self.table.grad.row_mut(idx);
            g += &dy.row(row).slice(ndarray::s![col..col + d]);
        }
    }
}

impl Parameters for Embedding {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.table);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.table);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f32>,
    inv_std: Array1<f32>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::ones(1, dim),
            beta: Param::zeros(1, dim),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> (Array2<f32>, LayerNormCache) {
        let d = x.ncols() as f32;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f32>() / d;
            let inv = 1.0 / (var + self.eps).sqrt();
            row *= inv;
            *s = inv;
        }
        let mut y = &xhat * &self.gamma.value.row(0);
        y += &self.beta.value.row(0);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: ArrayView2<f32>) -> Array2<f32> {
        let dgamma = (&dy * &cache.xhat).sum_axis(Axis(0));
        let mut grow = self.gamma.grad.row_mut(0);
        grow += &dgamma;
        let mut brow = self.beta.grad.row_mut(0);
        brow += &dy.sum_axis(Axis(0));

        let d = dy.ncols() as f32;
        let mut dx = &dy * &self.gamma.value.row(0);
        for ((mut row, xh), inv) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(g, x)| g * x).sum::<f32>() / d;
            row.zip_mut_with(&xh, |g, &x| *g = inv * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.gamma);
        out.push(&self.beta);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}
