//! Adam with bias correction.

use crate::autodiff::Mat;
use crate::error::{PigError, Result};
use crate::nn::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub step: u64,
    /// First-moment estimates, one per parameter in store order.
    pub m: Vec<Mat>,
    /// Second-moment estimates, one per parameter in store order.
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, p)| Mat::zeros(p.value.dim())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Clears the moments and the step counter, keeping the hyperparameters.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|x| x.fill(0.0));
    }

    /// Applies one update from `(param, gradient)` pairs. A gradient for a
    /// frozen parameter violates the freeze contract and is rejected before
    /// anything is written.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Mat)]) -> Result<()> {
        for (id, g) in grads {
            let p = store.get(*id);
            if !p.trainable {
                return Err(PigError::Invariant(format!(
                    "gradient update requested for frozen parameter {}",
                    p.name
                )));
            }
            if g.dim() != p.value.dim() {
                return Err(PigError::shape(
                    "adam",
                    &[g.nrows(), g.ncols()],
                    &[p.value.nrows(), p.value.ncols()],
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (id, g) in grads {
            let i = id.index();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let value = store.value_mut(*id);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}
