use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::LayerNormCache;
use super::{apply_mask_inplace, dropout_mask, fast_exp, relu_backward_inplace, relu_inplace, LayerNorm, Linear, Param, Parameters};

/// Unmasked (bidirectional) multi-head self-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    /// (D, 3D): query, key and value projections side by side.
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    len: usize,
    batch: usize,
    x: Array2<f32>,
    qkv: Array2<f32>,
    /// Softmax weights per (batch, head), each (len, len).
    probs: Vec<Array2<f32>>,
    ctx: Array2<f32>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "model width must divide into heads");
        MultiHeadAttention {
            qkv: Linear::new(rng, dim, 3 * dim),
            out: Linear::new(rng, dim, dim),
            heads,
        }
    }

    fn dim(&self) -> usize {
        self.out.output_dim()
    }

    pub fn forward(&self, x: ArrayView2<f32>, len: usize, batch: usize) -> (Array2<f32>, AttentionCache) {
        let d = self.dim();
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f32).sqrt();
        let qkv = self.qkv.forward(x);
        let qkv3 = qkv.view().into_shape_with_order((len, batch, 3 * d)).expect("time-major rows");
        let mut ctx = Array2::zeros((len * batch, d));
        let mut probs = Vec::with_capacity(batch * self.heads);
        {
            let mut ctx3 = ctx.view_mut().into_shape_with_order((len, batch, d)).expect("time-major rows");
            for b in 0..batch {
                for h in 0..self.heads {
                    let q = qkv3.slice(s![.., b, h * dk..(h + 1) * dk]);
                    let k = qkv3.slice(s![.., b, d + h * dk..d + (h + 1) * dk]);
                    let v = qkv3.slice(s![.., b, 2 * d + h * dk..2 * d + (h + 1) * dk]);
                    let mut p = q.dot(&k.t());
                    for mut row in p.rows_mut() {
                        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        let mut sum = 0.0;
                        for v in row.iter_mut() {
                            *v = fast_exp((*v - mx) * scale);
                            sum += *v;
                        }
                        row /= sum;
                    }
                    ctx3.slice_mut(s![.., b, h * dk..(h + 1) * dk]).assign(&p.dot(&v));
                    probs.push(p);
                }
            }
        }
        let y = self.out.forward(ctx.view());
        (
            y,
            AttentionCache {
                len,
                batch,
                x: x.to_owned(),
                qkv,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: ArrayView2<f32>) -> Array2<f32> {
        let d = self.dim();
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f32).sqrt();
        let (len, batch) = (cache.len, cache.batch);
        let dctx = self.out.backward(cache.ctx.view(), dy);
        let dctx3 = dctx.view().into_shape_with_order((len, batch, d)).expect("time-major rows");
        let qkv3 = cache.qkv.view().into_shape_with_order((len, batch, 3 * d)).expect("time-major rows");
        let mut dqkv = Array2::zeros((len * batch, 3 * d));
        {
            let mut dqkv3 = dqkv.view_mut().into_shape_with_order((len, batch, 3 * d)).expect("time-major rows");
            for b in 0..batch {
                for h in 0..self.heads {
                    let p = &cache.probs[b * self.heads + h];
                    let q = qkv3.slice(s![.., b, h * dk..(h + 1) * dk]);
                    let k = qkv3.slice(s![.., b, d + h * dk..d + (h + 1) * dk]);
                    let v = qkv3.slice(s![.., b, 2 * d + h * dk..2 * d + (h + 1) * dk]);
                    let d_o = dctx3.slice(s![.., b, h * dk..(h + 1) * dk]);
                    let dp = d_o.dot(&v.t());
                    let dv = p.t().dot(&d_o);
                    let mut ds = dp;
                    for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let dot: f32 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                        drow.zip_mut_with(&prow, |g, &pv| *g = pv * (*g - dot) * scale);
                    }
                    dqkv3.slice_mut(s![.., b, h * dk..(h + 1) * dk]).assign(&ds.dot(&k));
                    dqkv3
                        .slice_mut(s![.., b, d + h * dk..d + (h + 1) * dk])
                        .assign(&ds.t().dot(&q));
                    dqkv3
                        .slice_mut(s![.., b, 2 * d + h * dk..2 * d + (h + 1) * dk])
                        .assign(&dv);
                }
            }
        }
        self.qkv.backward(cache.x.view(), dqkv.view())
    }
}

impl Parameters for MultiHeadAttention {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.qkv.visit(out);
        self.out.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.qkv.visit_mut(out);
        self.out.visit_mut(out);
    }
}

/// Post-norm encoder layer: `x1 = LN(x + attn(x))`, `y = LN(x1 + ffn(x1))`,
/// dropout on both residual branches and inside the feed-forward block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub dropout: f32,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerCache {
    attn: AttentionCache,
    attn_mask: Option<Array2<f32>>,
    norm1: LayerNormCache,
    x1: Array2<f32>,
    hidden: Array2<f32>,
    hidden_mask: Option<Array2<f32>>,
    hidden_dropped: Array2<f32>,
    ff_mask: Option<Array2<f32>>,
    norm2: LayerNormCache,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, dim: usize, ff_dim: usize, heads: usize, dropout: f32) -> Self {
        EncoderLayer {
            attention: MultiHeadAttention::new(rng, dim, heads),
            norm1: LayerNorm::new(dim),
            ff1: Linear::new(rng, dim, ff_dim),
            ff2: Linear::new(rng, ff_dim, dim),
            norm2: LayerNorm::new(dim),
            dropout,
        }
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<f32>,
        len: usize,
        batch: usize,
        mut rng: Option<&mut R>,
    ) -> (Array2<f32>, EncoderLayerCache) {
        let (mut a, attn) = self.attention.forward(x, len, batch);
        let attn_mask = dropout_mask(rng.as_deref_mut(), self.dropout, a.dim());
        apply_mask_inplace(&mut a, attn_mask.as_ref());
        a += &x;
        let (x1, norm1) = self.norm1.forward(a.view());

        let mut hidden = self.ff1.forward(x1.view());
        relu_inplace(&mut hidden);
        let hidden_mask = dropout_mask(rng.as_deref_mut(), self.dropout, hidden.dim());
        let mut hidden_dropped = hidden.clone();
        apply_mask_inplace(&mut hidden_dropped, hidden_mask.as_ref());
        let mut f = self.ff2.forward(hidden_dropped.view());
        let ff_mask = dropout_mask(rng.as_deref_mut(), self.dropout, f.dim());
        apply_mask_inplace(&mut f, ff_mask.as_ref());
        f += &x1;
        let (y, norm2) = self.norm2.forward(f.view());
        (
            y,
            EncoderLayerCache {
                attn,
                attn_mask,
                norm1,
                x1,
                hidden,
                hidden_mask,
                hidden_dropped,
                ff_mask,
                norm2,
            },
        )
    }

    pub fn backward(&mut self, cache: &EncoderLayerCache, dy: ArrayView2<f32>) -> Array2<f32> {
        let ds2 = self.norm2.backward(&cache.norm2, dy);
        let mut dx1 = ds2.clone();
        let mut dg = ds2;
        apply_mask_inplace(&mut dg, cache.ff_mask.as_ref());
        let mut dh = self.ff2.backward(cache.hidden_dropped.view(), dg.view());
        apply_mask_inplace(&mut dh, cache.hidden_mask.as_ref());
        relu_backward_inplace(&mut dh, cache.hidden.view());
        dx1 += &self.ff1.backward(cache.x1.view(), dh.view());

        let ds1 = self.norm1.backward(&cache.norm1, dx1.view());
        let mut dx = ds1.clone();
        let mut da = ds1;
        apply_mask_inplace(&mut da, cache.attn_mask.as_ref());
        dx += &self.attention.backward(&cache.attn, da.view());
        dx
    }
}

impl Parameters for EncoderLayer {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.attention.visit(out);
        self.norm1.visit(out);
        self.ff1.visit(out);
        self.ff2.visit(out);
        self.norm2.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.attention.visit_mut(out);
        self.norm1.visit_mut(out);
        self.ff1.visit_mut(out);
        self.ff2.visit_mut(out);
        self.norm2.visit_mut(out);
    }
}

/// Fixed sinusoidal position table, (len, dim).
pub fn sinusoidal_positions(len: usize, dim: usize) -> Array2<f32> {
    Array2::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        (if i % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(len: usize, batch: usize, d: usize) -> Array2<f32> {
        Array2::from_shape_fn((len * batch, d), |(i, j)| ((i * 7 + j * 5) % 11) as f32 * 0.2 - 1.0)
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (len, batch, d) = (4, 2, 6);
        let mut mha = MultiHeadAttention::new(&mut rng, d, 2);
        let mut x = input(len, batch, d);
        let w = projection((len * batch, d));
        mha.zero_grad();
        let (_, cache) = mha.forward(x.view(), len, batch);
        let dx = mha.backward(&cache, w.view());
        check_params(&mut mha, |m| project(&m.forward(x.view(), len, batch).0, &w), 20);
        let m2 = mha.clone();
        check_input(&mut x, &dx, |xi| project(&m2.forward(xi.view(), len, batch).0, &w), 24);
    }

    #[test]
    fn encoder_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (len, batch, d) = (3, 2, 4);
        let mut layer = EncoderLayer::new(&mut rng, d, 8, 2, 0.0);
        let mut x = input(len, batch, d);
        let w = projection((len * batch, d));
        layer.zero_grad();
        let (_, cache) = layer.forward::<ChaCha8Rng>(x.view(), len, batch, None);
        let dx = layer.backward(&cache, w.view());
        check_params(&mut layer, |l| project(&l.forward::<ChaCha8Rng>(x.view(), len, batch, None).0, &w), 12);
        let l2 = layer.clone();
        check_input(&mut x, &dx, |xi| project(&l2.forward::<ChaCha8Rng>(xi.view(), len, batch, None).0, &w), 24);
    }

    #[test]
    fn attention_mixes_all_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (len, batch, d) = (5, 1, 4);
        let mha = MultiHeadAttention::new(&mut rng, d, 2);
        let x = input(len, batch, d);
        let (y0, _) = mha.forward(x.view(), len, batch);
        let mut x2 = x.clone();
        x2.row_mut(len - 1).fill(3.0);
        let (y1, _) = mha.forward(x2.view(), len, batch);
        // the first output row sees the last input row
        assert_ne!(y0.row(0), y1.row(0));
    }

    #[test]
    fn positions_are_bounded() {
        let pe = sinusoidal_positions(90, 64);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe[[0, 0]], 0.0);
        assert_eq!(pe[[0, 1]], 1.0);
    }
}
