//! Adaptive-moment gradient optimizer operating on a [`ParamStore`].

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::graph::Gradients;
use crate::params::Bound;
use crate::matrix::Matrix;
use crate::params::ParamStore;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| Matrix::zeros(e.value.rows(), e.value.cols()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t: 0,
        }
    }

    /// Gradient ascent step on the objective whose gradients are in `grads`.
    pub fn ascend(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        self.step(store, bound, grads, 1.0)
    }

    /// Gradient descent step.
    pub fn descend(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) {
        self.step(store, bound, grads, -1.0)
    }

    fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, sign: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            if !store.entries()[i].trainable {
                continue;
            }
            let g = match grads.get(&bound.vars()[i]) {
                Some(g) => g.clone(),
                None => continue, // parameter unused by this loss
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            *m = m.scale(self.beta1).add(&g.scale(1.0 - self.beta1));
            *v = v
                .scale(self.beta2)
                .add(&g.hadamard(&g).scale(1.0 - self.beta2));
            let mut new_value = store.entries()[i].value.clone();
            {
                let nd = new_value.data_mut();
                let md = m.data();
                let vd = v.data();
                for k in 0..nd.len() {
                    let mhat = md[k] / bc1;
                    let vhat = vd[k] / bc2;
                    nd[k] += sign * self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            store.set_value_at(i, new_value);
        }
    }
}
