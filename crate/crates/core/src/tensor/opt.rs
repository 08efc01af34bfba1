//! Gradient-descent optimizers over flat parameter lists.
//!
//! Parameters live in the model structs; each training step registers them on
//! a fresh tape in a fixed order, and the optimizer state is keyed by that
//! order.

use crate::tensor::{Real, Tensor};

/// SGD with classical momentum: v ← μv + g, p ← p − αv.
pub struct SgdMomentum {
    lr: Real,
    momentum: Real,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: Real, momentum: Real) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn lr(&self) -> Real {
        self.lr
    }

    pub fn set_lr(&mut self, lr: Real) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + *gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

/// Adam with bias correction; the default for the embedding networks.
pub struct Adam {
    lr: Real,
    beta1: Real,
    beta2: Real,
    eps: Real,
    t: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: Real) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    /// One small-rate step on a fixed batch must not increase the loss.
    #[test]
    fn sgd_step_descends_quadratic() {
        let mut p = vec![Tensor::new(vec![2], vec![3.0, -2.0]).unwrap()];
        let mut opt = SgdMomentum::new(1e-2, 0.9);
        let loss_of = |p: &Tensor| -> (Real, Tensor) {
            let mut tape = Tape::new();
            let v = tape.param(p.clone());
            let l = tape.sum_sq(v);
            let value = tape.value(l).data()[0];
            let grads = tape.backward(l).unwrap();
            (value, grads.get(v).unwrap().clone())
        };
        let (before, g) = loss_of(&p[0]);
        opt.step(&mut p, &[g]);
        let (after, _) = loss_of(&p[0]);
        assert!(after < before);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = vec![Tensor::new(vec![2], vec![3.0, -2.0]).unwrap()];
        let mut opt = Adam::new(0.1);
        for _ in 0..200 {
            let mut tape = Tape::new();
            let v = tape.param(p[0].clone());
            let l = tape.sum_sq(v);
            let grads = tape.backward(l).unwrap();
            let g = grads.get(v).unwrap().clone();
            opt.step(&mut p, &[g]);
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2));
    }
}
