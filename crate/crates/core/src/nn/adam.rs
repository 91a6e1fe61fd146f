use ndarray::{Array2, Zip};

use super::Param;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    first: Vec<Array2<f32>>,
    second: Vec<Array2<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f32) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Applies one update. Parameters must be passed in the same order every call.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let Param { value, grad } = &mut **p;
            Zip::from(value)
                .and(&*grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new(Array2::from_elem((1, 2), 1.0));
        p.grad = Array2::from_shape_vec((1, 2), vec![0.5, -2.0]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p]);
        assert!((p.value[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.value[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::new(Array2::from_elem((1, 1), 5.0));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            p.grad = p.value.mapv(|w| 2.0 * (w - 1.5));
            opt.step(&mut [&mut p]);
        }
        assert!((p.value[[0, 0]] - 1.5).abs() < 1e-2);
    }
}
