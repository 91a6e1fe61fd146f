use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{apply_mask_inplace, dropout_mask, relu_backward_inplace, relu_inplace, Linear, Param, Parameters};

/// Dilated causal 1-D convolution over time-major rows. Tap `j` reads the
/// input `j * dilation` steps back; steps before the sequence start are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalConv {
    /// (kernel * in, out); rows `j*in..(j+1)*in` hold tap `j`.
    pub weight: Param,
    /// (1, out)
    pub bias: Param,
    pub kernel: usize,
    pub dilation: usize,
}

impl CausalConv {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, kernel: usize, dilation: usize) -> Self {
        CausalConv {
            weight: Param::uniform(rng, kernel * input, output, kernel * input),
            bias: Param::uniform(rng, 1, output, kernel * input),
            kernel,
            dilation,
        }
    }

    fn input_dim(&self) -> usize {
        self.weight.value.nrows() / self.kernel
    }

    pub fn forward(&self, x: ArrayView2<f32>, len: usize, batch: usize) -> Array2<f32> {
        let cin = self.input_dim();
        let mut y = Array2::zeros((len * batch, self.weight.value.ncols()));
        y += &self.bias.value.row(0);
        for j in 0..self.kernel {
            let lag = j * self.dilation;
            if lag >= len {
                break;
            }
            let w = self.weight.value.slice(s![j * cin..(j + 1) * cin, ..]);
            let src = x.slice(s![..(len - lag) * batch, ..]);
            let mut dst = y.slice_mut(s![lag * batch.., ..]);
            general_mat_mul(1.0, &src, &w, 1.0, &mut dst);
        }
        y
    }

    pub fn backward(&mut self, x: ArrayView2<f32>, dy: ArrayView2<f32>, len: usize, batch: usize) -> Array2<f32> {
        let cin = self.input_dim();
        let mut dx = Array2::zeros((len * batch, cin));
        for j in 0..self.kernel {
            let lag = j * self.dilation;
            if lag >= len {
                break;
            }
            let src = x.slice(s![..(len - lag) * batch, ..]);
            let g = dy.slice(s![lag * batch.., ..]);
            let mut gw = self.weight.grad.slice_mut(s![j * cin..(j + 1) * cin, ..]);
            general_mat_mul(1.0, &src.t(), &g, 1.0, &mut gw);
            let w = self.weight.value.slice(s![j * cin..(j + 1) * cin, ..]);
            let mut dsrc = dx.slice_mut(s![..(len - lag) * batch, ..]);
            general_mat_mul(1.0, &g, &w.t(), 1.0, &mut dsrc);
        }
        let mut brow = self.bias.grad.row_mut(0);
        brow += &dy.sum_axis(Axis(0));
        dx
    }

    /// Steps of history one output depends on, itself included.
    pub fn receptive_field(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }
}

impl Parameters for CausalConv {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Residual block: `relu(convs(x) + skip(x))`, each conv followed by ReLU and
/// dropout; the skip is a 1x1 projection when widths differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalBlock {
    pub convs: Vec<CausalConv>,
    pub downsample: Option<Linear>,
    pub dropout: f32,
}

#[derive(Debug, Clone)]
pub struct TemporalBlockCache {
    len: usize,
    batch: usize,
    x: Array2<f32>,
    conv_inputs: Vec<Array2<f32>>,
    activations: Vec<Array2<f32>>,
    masks: Vec<Option<Array2<f32>>>,
    out: Array2<f32>,
}

impl TemporalBlock {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        input: usize,
        channels: usize,
        kernel: usize,
        dilation: usize,
        n_convs: usize,
        dropout: f32,
    ) -> Self {
        let convs = (0..n_convs)
            .map(|i| CausalConv::new(rng, if i == 0 { input } else { channels }, channels, kernel, dilation))
            .collect();
        let downsample = (input != channels).then(|| Linear::new(rng, input, channels));
        TemporalBlock {
            convs,
            downsample,
            dropout,
        }
    }

    pub fn channels(&self) -> usize {
        self.convs[0].weight.value.ncols()
    }

    pub fn receptive_field(&self) -> usize {
        1 + self.convs.iter().map(|c| c.receptive_field() - 1).sum::<usize>()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f32>,
        len: usize,
        batch: usize,
        mut rng: Option<&mut R>,
    ) -> (Array2<f32>, TemporalBlockCache) {
        let mut conv_inputs = Vec::with_capacity(self.convs.len());
        let mut activations = Vec::with_capacity(self.convs.len());
        let mut masks = Vec::with_capacity(self.convs.len());
        let mut h = x.to_owned();
        for conv in &self.convs {
            let mut a = conv.forward(h.view(), len, batch);
            relu_inplace(&mut a);
            let mask = dropout_mask(rng.as_deref_mut(), self.dropout, a.dim());
            let mut next = a.clone();
            apply_mask_inplace(&mut next, mask.as_ref());
            conv_inputs.push(std::mem::replace(&mut h, next));
            activations.push(a);
            masks.push(mask);
        }
        match &self.downsample {
            Some(d) => h += &d.forward(x),
            None => h += &x,
        }
        relu_inplace(&mut h);
        let cache = TemporalBlockCache {
            len,
            batch,
            x: x.to_owned(),
            conv_inputs,
            activations,
            masks,
            out: h.clone(),
        };
        (h, cache)
    }

    pub fn backward(&mut self, cache: &TemporalBlockCache, dy: ArrayView2<f32>) -> Array2<f32> {
        let mut d = dy.to_owned();
        relu_backward_inplace(&mut d, cache.out.view());
        let mut dx = match &mut self.downsample {
            Some(ds) => ds.backward(cache.x.view(), d.view()),
            None => d.clone(),
        };
        for (i, conv) in self.convs.iter_mut().enumerate().rev() {
            apply_mask_inplace(&mut d, cache.masks[i].as_ref());
            relu_backward_inplace(&mut d, cache.activations[i].view());
            d = conv.backward(cache.conv_inputs[i].view(), d.view(), cache.len, cache.batch);
        }
        dx += &d;
        dx
    }
}

impl Parameters for TemporalBlock {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        for c in &self.convs {
            c.visit(out);
        }
        if let Some(d) = &self.downsample {
            d.visit(out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        for c in &mut self.convs {
            c.visit_mut(out);
        }
        if let Some(d) = &mut self.downsample {
            d.visit_mut(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (len, batch) = (7, 2);
        let conv = CausalConv::new(&mut rng, 3, 2, 3, 2);
        let x = Array2::from_shape_fn((len * batch, 3), |(i, j)| ((i * 5 + j) % 7) as f32 - 3.0);
        let y = conv.forward(x.view(), len, batch);
        for t in 0..len {
            for b in 0..batch {
                for o in 0..2 {
                    let mut acc = conv.bias.value[[0, o]];
                    for j in 0..3 {
                        if t >= 2 * j {
                            for c in 0..3 {
                                acc += x[[(t - 2 * j) * batch + b, c]] * conv.weight.value[[j * 3 + c, o]];
                            }
                        }
                    }
                    assert!((acc - y[[t * batch + b, o]]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn block_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (len, batch) = (6, 2);
        let mut block = TemporalBlock::new(&mut rng, 3, 4, 3, 2, 2, 0.0);
        let mut x = Array2::from_shape_fn((len * batch, 3), |(i, j)| ((i * 11 + j * 3) % 8) as f32 * 0.25 - 0.8);
        let w = projection((len * batch, 4));
        block.zero_grad();
        let (_, cache) = block.forward::<ChaCha8Rng>(x.view(), len, batch, None);
        let dx = block.backward(&cache, w.view());
        // small step: ReLU kinks sit close to some pre-activations
        check_params_eps(&mut block, |b| project(&b.forward::<ChaCha8Rng>(x.view(), len, batch, None).0, &w), 15, 1e-3);
        let b2 = block.clone();
        check_input(&mut x, &dx, |xi| project(&b2.forward::<ChaCha8Rng>(xi.view(), len, batch, None).0, &w), 18);
    }

    #[test]
    fn dropout_gradient_uses_same_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (len, batch) = (5, 2);
        let mut block = TemporalBlock::new(&mut rng, 4, 4, 2, 1, 1, 0.5);
        let x = Array2::from_shape_fn((len * batch, 4), |(i, j)| ((i * 3 + j * 7) % 5) as f32 * 0.3);
        let w = projection((len * batch, 4));
        block.zero_grad();
        let mut drng = ChaCha8Rng::seed_from_u64(11);
        let (_, cache) = block.forward(x.view(), len, batch, Some(&mut drng));
        block.backward(&cache, w.view());
        check_params(
            &mut block,
            |b| {
                let mut r = ChaCha8Rng::seed_from_u64(11);
                project(&b.forward(x.view(), len, batch, Some(&mut r)).0, &w)
            },
            10,
        );
    }
}
