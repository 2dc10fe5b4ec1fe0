use std::collections::HashMap;

use super::{Gradients, Matrix, ParamId, ParamStore};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, (Matrix, Matrix)>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched,
    /// including their weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.params() {
            let (m, v) = self.moments.entry(id).or_insert_with(|| {
                (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols()))
            });
            let w = store.value_mut(id);
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                let wi = &mut w.data_mut()[i];
                *wi -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *wi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamGroup, Tape};

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store
            .insert("x", ParamGroup::Backbone, Matrix::column(vec![3.0, -2.0]))
            .unwrap();
        let mut opt = AdamW::new(0.1).with_weight_decay(0.0);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let loss = tape.sum_squares(x);
            let g = tape.backward(loss).unwrap();
            opt.step(&mut store, &g);
        }
        assert!(store.value(id).max_abs() < 1e-2);
    }
}
