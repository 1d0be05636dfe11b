//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::array::{Array, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Array<T>>) -> Self {
        let m: Vec<Array<T>> = params.into_iter().map(|p| Array::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: Vec<&mut Array<T>>, grads: &[Array<T>], hyper: &AdamHyper) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for g in grads {
            g.check_finite("gradient")?;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
        let c1 = T::lit(1.0 - hyper.beta1.powi(t));
        let c2 = T::lit(1.0 - hyper.beta2.powi(t));
        let (lr, eps) = (T::lit(hyper.lr), T::lit(hyper.eps));
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            p.expect_same_shape(g, "adam param/grad")?;
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi = *pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
