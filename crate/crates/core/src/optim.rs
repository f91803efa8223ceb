//! First-order update rules.

use crate::tensor::Tensor;

/// `p ← p − lr·g`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Update rule selected at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        Self::Adam(Adam::new(lr))
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        match self {
            Self::Sgd { lr } => sgd_step(params, grads, *lr),
            Self::Adam(a) => a.step(params, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::matrix(1, 2, vec![1.0, -1.0]);
        let g = Tensor::matrix(1, 2, vec![0.5, -3.0]);
        let mut opt = Adam::new(0.1);
        opt.step(&mut [&mut p], &[g]);
        // Bias-corrected first step is lr·sign(g) up to eps.
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Tensor::matrix(1, 2, vec![1.0, -1.0]);
        let before = p.clone();
        let g = Tensor::matrix(1, 2, vec![0.5, -3.0]);
        Adam::new(0.0).step(&mut [&mut p], &[g.clone()]);
        sgd_step(&mut [&mut p], &[g], 0.0);
        assert_eq!(p, before);
    }
}
