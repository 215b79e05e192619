use crate::error::{Error, Result};
use crate::nn::params::ParamVector;
use crate::scalar::Scalar;

/// Adam moments for one [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn new(len: usize) -> Self {
        Self::with_betas(len, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_betas(len: usize, beta1: T, beta2: T, eps: T) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_params(p: &ParamVector<T>) -> Self {
        Self::new(p.len())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected step over every value. Gradients are left in place.
    pub fn update(&mut self, p: &mut ParamVector<T>, lr: T) -> Result<()> {
        self.update_where(p, lr, |_| true)
    }

    /// Same as [`AdamState::update`] but only touches segments accepted by `filter`.
    pub fn update_where(
        &mut self,
        p: &mut ParamVector<T>,
        lr: T,
        filter: impl Fn(&str) -> bool,
    ) -> Result<()> {
        if !(lr > T::zero()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if self.m.len() != p.len() {
            return Err(Error::Layout(format!(
                "adam state for {} values, params have {}",
                self.m.len(),
                p.len()
            )));
        }
        if p.grads().iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adam_update" });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let ranges: Vec<_> = p
            .layout()
            .segments()
            .iter()
            .filter(|s| filter(&s.name))
            .map(|s| s.range())
            .collect();
        for r in ranges {
            for k in r {
                let g = p.grads()[k];
                self.m[k] = self.beta1 * self.m[k] + (T::one() - self.beta1) * g;
                self.v[k] = self.beta2 * self.v[k] + (T::one() - self.beta2) * g * g;
                let m_hat = self.m[k] / bc1;
                let v_hat = self.v[k] / bc2;
                p.values_mut()[k] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
