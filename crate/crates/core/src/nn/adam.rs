use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam moments for an ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub const DEFAULT_LR: f64 = 0.0005;

    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, lr: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .unzip();
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m,
            v,
        }
    }

    /// One bias-corrected Adam update using the gradients stored on
    /// `params`. Gradients are left in place; callers reset them.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam state tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::contract(format!("parameter {i} has no gradient")));
            }
            if p.numel() != self.m[i].len() {
                return Err(Error::dim("adam", p.shape(), &[self.m[i].len()]));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad().expect("checked").to_vec();
            for (((w, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g)
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
