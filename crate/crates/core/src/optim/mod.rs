//! Adam with post-step proximal hooks, and the mini-batch training loop.

mod train;

pub use train::{train, EpochStats, StepInfo, TrainLog, TrainRecipe};

use crate::dpl::{project_columns_in_place, shrink};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Post-update operation attached to a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hook {
    /// l1 proximal step. The threshold for coordinate `i` is
    /// `weight * lr / (sqrt(v_hat_i) + eps)`, i.e. `weight` times Adam's
    /// per-coordinate step size for a unit gradient.
    SoftThreshold { weight: f64 },
    /// Rescale columns of a matrix parameter into the unit ball.
    ProjectColumns,
}

/// A named, mutable view of one parameter tensor and its hooks.
#[derive(Debug)]
pub struct ParamMut<'a, T: Scalar> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    pub hooks: Vec<Hook>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    step: u64,
    names: Vec<String>,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            names: Vec::new(),
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor<T>> {
        self.first.get(index)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor<T>> {
        self.second.get(index)
    }

    fn check(&mut self, params: &[ParamMut<'_, T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.value.shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        if self.step == 0 {
            self.names = params.iter().map(|p| p.name.clone()).collect();
            self.first = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect();
            self.second = self.first.clone();
        } else {
            for (i, p) in params.iter().enumerate() {
                if self.names.get(i) != Some(&p.name) || self.first[i].shape() != p.value.shape() {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {i} ({}) does not match optimizer state",
                        p.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update followed by each parameter's hooks, in order.
    /// Nothing is modified when a gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [ParamMut<'_, T>], grads: &[Tensor<T>]) -> Result<()> {
        self.check(params, grads)?;
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_m_b1, one_m_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));

        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let shrink_weight = param.hooks.iter().find_map(|h| match h {
                Hook::SoftThreshold { weight } => Some(T::from_f64(*weight)),
                _ => None,
            });
            let values = param.value.data_mut();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &g), m), v) in values.iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let rate = lr / ((*v * inv_bc2).sqrt() + eps);
                *w -= rate * (*m * inv_bc1);
                if let Some(weight) = shrink_weight {
                    *w = shrink(*w, weight * rate);
                }
            }
            for hook in &param.hooks {
                if let Hook::ProjectColumns = hook {
                    project_columns_in_place(param.value)?;
                }
            }
        }
        Ok(())
    }
}
