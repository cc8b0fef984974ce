//! Adam with bias correction; the only optimizer the trainer uses.

use ndarray::ArrayD;

use super::tensor::Element;
use super::Parameter;
use crate::error::{CoreError, Result};

pub struct Adam<E: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64) -> Self {
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

    /// One update over all parameters. Moment buffers are created on
    /// the first call and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut [Parameter<E>], grads: &[ArrayD<E>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(CoreError::invalid(
                "adam",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(CoreError::invalid(
                "adam",
                format!("state holds {} slots but got {} parameters", self.m.len(), params.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.value.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(CoreError::invalid(
                    "adam",
                    format!(
                        "shape mismatch at '{}': param {:?}, grad {:?}",
                        p.name,
                        p.value.shape(),
                        g.shape()
                    ),
                ));
            }
        }

        self.t += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let corr1 = E::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = E::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = E::from_f64(self.lr);
        let eps = E::from_f64(self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|pv, mv, vv, &ge| {
                    *mv = b1 * *mv + (one - b1) * ge;
                    *vv = b2 * *vv + (one - b2) * ge * ge;
                    let mh = *mv / corr1;
                    let vh = *vv / corr2;
                    *pv = *pv - lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(())
    }
}
