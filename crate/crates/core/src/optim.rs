//! Adam optimiser over a [`ParamStore`].

use ndarray::Array2;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| Array2::zeros(p.dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update with `grads` in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Array2<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in store.values_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.dim() != p.dim() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.dim(), p.dim())));
            }
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("w", Array2::from_elem((1, 3), 1.0));
        let mut adam = Adam::new(&store, 0.1);
        let g = Array2::from_shape_vec((1, 3), vec![2.0, -0.5, 0.0]).unwrap();
        adam.step(&mut store, &[g]).unwrap();
        let w = store.iter().next().unwrap().1;
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);
        assert_eq!(w[[0, 2]], 1.0);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Array2::from_elem((1, 1), 5.0));
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let x = store.iter().next().unwrap().1[[0, 0]];
            adam.step(&mut store, &[Array2::from_elem((1, 1), 2.0 * (x - 1.5))]).unwrap();
        }
        assert!((store.iter().next().unwrap().1[[0, 0]] - 1.5).abs() < 1e-2);
    }

    #[test]
    fn gradient_count_checked() {
        let mut store = ParamStore::new();
        store.add("x", Array2::zeros((1, 1)));
        let mut adam = Adam::new(&store, 0.1);
        assert!(matches!(adam.step(&mut store, &[]), Err(Error::Shape(_))));
    }
}
