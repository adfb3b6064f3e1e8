//! Adam with bias correction.

use pmp_autodiff::{ParamGrads, ParamStore, Scalar, Tensor};

use crate::config::OptimizerConfig;
use crate::error::{PmpError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore<F>) -> Self {
        let zeros: Vec<Tensor<F>> = store
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
            .collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>) -> Result<()> {
        if grads.tensors().len() != self.m.len() || store.len() != self.m.len() {
            return Err(PmpError::Shape(format!(
                "optimizer tracks {} tensors, got {} gradients for {} parameters",
                self.m.len(),
                grads.tensors().len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - self.beta1), F::lit(1.0 - self.beta2));
        let step_size = F::lit(self.lr / c1);
        let c2_sqrt = F::lit(c2.sqrt());
        let eps = F::lit(self.eps);
        let iter = store
            .entries_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((entry, g), (m, v)) in iter {
            let p = entry.value.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let mi = b1 * m.data()[i] + one_b1 * gi;
                let vi = b2 * v.data()[i] + one_b2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p[i] = p[i] - step_size * mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}
