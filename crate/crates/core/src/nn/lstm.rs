use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, tanh, Param, Parameters};

/// One unidirectional LSTM layer with gate order (input, forget, cell, output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    /// (in, 4H)
    pub input_weight: Param,
    /// (H, 4H)
    pub recurrent_weight: Param,
    /// (1, 4H)
    pub bias: Param,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    len: usize,
    batch: usize,
    x: Array2<f32>,
    /// Activated gates, (len * batch, 4H).
    gates: Array2<f32>,
    /// Cell states, ((len + 1) * batch, H); block 0 is the zero initial state.
    cells: Array2<f32>,
    /// Hidden states, same layout as `cells`.
    hiddens: Array2<f32>,
    /// `tanh` of the cell states, (len * batch, H).
    cell_tanh: Array2<f32>,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Self {
        Lstm {
            input_weight: Param::uniform(rng, input, 4 * hidden, hidden),
            recurrent_weight: Param::uniform(rng, hidden, 4 * hidden, hidden),
            bias: Param::uniform(rng, 1, 4 * hidden, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent_weight.value.nrows()
    }

    /// `x` is time-major `(len * batch, in)`; returns `(len * batch, H)`.
    pub fn forward(&self, x: ArrayView2<f32>, len: usize, batch: usize) -> (Array2<f32>, LstmCache) {
        let h = self.hidden();
        let mut gates = x.dot(&self.input_weight.value);
        gates += &self.bias.value.row(0);
        let mut cells = Array2::zeros(((len + 1) * batch, h));
        let mut hiddens = Array2::zeros(((len + 1) * batch, h));
        let mut cell_tanh = Array2::zeros((len * batch, h));

        for t in 0..len {
            let rows = t * batch..(t + 1) * batch;
            let h_prev = hiddens.slice(s![rows.clone(), ..]);
            let mut g = gates.slice_mut(s![rows.clone(), ..]);
            general_mat_mul(1.0, &h_prev, &self.recurrent_weight.value, 1.0, &mut g);
            let gs = g.as_slice_mut().expect("contiguous gates");
            let (c_all, c_next_all) = cells
                .as_slice_mut()
                .expect("contiguous cells")
                .split_at_mut((t + 1) * batch * h);
            let c_prev_all = &c_all[t * batch * h..];
            let h_next_all = &mut hiddens.as_slice_mut().expect("contiguous hiddens")[(t + 1) * batch * h..(t + 2) * batch * h];
            let tc_all = &mut cell_tanh.as_slice_mut().expect("contiguous")[t * batch * h..(t + 1) * batch * h];
            for b in 0..batch {
                let gr = &mut gs[b * 4 * h..(b + 1) * 4 * h];
                let (ifg, o) = gr.split_at_mut(3 * h);
                let (i_f, cg) = ifg.split_at_mut(2 * h);
                i_f.iter_mut().for_each(|v| *v = sigmoid(*v));
                o.iter_mut().for_each(|v| *v = sigmoid(*v));
                cg.iter_mut().for_each(|v| *v = tanh(*v));
                let (i, f) = i_f.split_at(h);
                let c_prev = &c_prev_all[b * h..(b + 1) * h];
                let c_next = &mut c_next_all[b * h..(b + 1) * h];
                for ((((c, &cp), &fv), &iv), &gv) in c_next.iter_mut().zip(c_prev).zip(f).zip(i).zip(cg.iter()) {
                    *c = fv * cp + iv * gv;
                }
                let tc = &mut tc_all[b * h..(b + 1) * h];
                for (t, &c) in tc.iter_mut().zip(c_next.iter()) {
                    *t = tanh(c);
                }
                let h_next = &mut h_next_all[b * h..(b + 1) * h];
                for ((hv, &ov), &t) in h_next.iter_mut().zip(o.iter()).zip(tc.iter()) {
                    *hv = ov * t;
                }
            }
        }
        let out = hiddens.slice(s![batch.., ..]).to_owned();
        (
            out,
            LstmCache {
                len,
                batch,
                x: x.to_owned(),
                gates,
                cells,
                hiddens,
                cell_tanh,
            },
        )
    }

    /// Backpropagation through time. `dy` is `(len * batch, H)`.
    pub fn backward(&mut self, cache: &LstmCache, dy: ArrayView2<f32>) -> Array2<f32> {
        let h = self.hidden();
        let (len, batch) = (cache.len, cache.batch);
        let mut dpre = Array2::<f32>::zeros((len * batch, 4 * h));
        let mut dh_next = Array2::<f32>::zeros((batch, h));
        let mut dc_next = Array2::<f32>::zeros((batch, h));

        for t in (0..len).rev() {
            let rows = t * batch..(t + 1) * batch;
            let gates = cache.gates.slice(s![rows.clone(), ..]);
            let gates = gates.as_slice().expect("contiguous gates");
            let c_prev_all = &cache.cells.as_slice().expect("contiguous cells")[t * batch * h..(t + 1) * batch * h];
            let tc_all = &cache.cell_tanh.as_slice().expect("contiguous")[t * batch * h..(t + 1) * batch * h];
            let dy_t = dy.slice(s![rows.clone(), ..]);
            {
                let mut da_blk = dpre.slice_mut(s![rows.clone(), ..]);
                let da_all = da_blk.as_slice_mut().expect("contiguous");
                let dhn = dh_next.as_slice().expect("contiguous");
                let dcn = dc_next.as_slice_mut().expect("contiguous");
                for b in 0..batch {
                    let g = &gates[b * 4 * h..(b + 1) * 4 * h];
                    let da = &mut da_all[b * 4 * h..(b + 1) * 4 * h];
                    let dyr = dy_t.row(b);
                    for j in 0..h {
                        let k = b * h + j;
                        let (i, f, cg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                        let tc = tc_all[k];
                        let dh = dyr[j] + dhn[k];
                        let dc = dh * o * (1.0 - tc * tc) + dcn[k];
                        dcn[k] = dc * f;
                        da[j] = dc * cg * i * (1.0 - i);
                        da[h + j] = dc * c_prev_all[k] * f * (1.0 - f);
                        da[2 * h + j] = dc * i * (1.0 - cg * cg);
                        da[3 * h + j] = dh * tc * o * (1.0 - o);
                    }
                }
            }
            let da = dpre.slice(s![rows, ..]);
            general_mat_mul(1.0, &da, &self.recurrent_weight.value.t(), 0.0, &mut dh_next);
        }

        // h_{t-1} for every step, one product for the whole sequence
        let h_prev = cache.hiddens.slice(s![..len * batch, ..]);
        general_mat_mul(1.0, &h_prev.t(), &dpre, 1.0, &mut self.recurrent_weight.grad);

        general_mat_mul(1.0, &cache.x.t(), &dpre, 1.0, &mut self.input_weight.grad);
        let mut brow = self.bias.grad.row_mut(0);
        brow += &dpre.sum_axis(Axis(0));
        dpre.dot(&self.input_weight.value.t())
    }
}

impl Parameters for Lstm {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        out.push(&self.input_weight);
        out.push(&self.recurrent_weight);
        out.push(&self.bias);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        out.push(&mut self.input_weight);
        out.push(&mut self.recurrent_weight);
        out.push(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (len, batch, input, hidden) = (5, 3, 4, 6);
        let mut lstm = Lstm::new(&mut rng, input, hidden);
        lstm.bias.value.mapv_inplace(|v| v * 3.0);
        let mut x = Array2::from_shape_fn((len * batch, input), |(i, j)| ((i * 13 + j * 7) % 9) as f32 * 0.3 - 1.2);
        let w = projection((len * batch, hidden));
        lstm.zero_grad();
        let (_, cache) = lstm.forward(x.view(), len, batch);
        let dx = lstm.backward(&cache, w.view());
        check_params(&mut lstm, |l| project(&l.forward(x.view(), len, batch).0, &w), 25);
        let l2 = lstm.clone();
        check_input(&mut x, &dx, |xi| project(&l2.forward(xi.view(), len, batch).0, &w), 30);
    }

    #[test]
    fn outputs_are_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (len, batch) = (6, 2);
        let lstm = Lstm::new(&mut rng, 3, 4);
        let x = Array2::from_shape_fn((len * batch, 3), |(i, j)| (i + j) as f32 * 0.1);
        let (y0, _) = lstm.forward(x.view(), len, batch);
        let mut x2 = x.clone();
        x2.row_mut((len - 1) * batch).fill(9.0);
        let (y1, _) = lstm.forward(x2.view(), len, batch);
        assert_eq!(
            y0.slice(s![..(len - 1) * batch, ..]),
            y1.slice(s![..(len - 1) * batch, ..])
        );
        assert_ne!(y0, y1);
    }
}
