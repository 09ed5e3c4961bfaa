//! Adam with bias correction.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: IndexMap<String, Tensor<T>>,
    second: IndexMap<String, Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.second.get(name)
    }

    /// One update of every parameter; a parameter absent from `grads` is
    /// treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradStore<T>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adam: parameter `{name}` is {:?} but gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of(c.learning_rate);
        let eps = T::of(c.epsilon);
        for (name, p) in params.iter_mut() {
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            if m.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "adam: moment for `{name}` is {:?} but parameter is {:?}",
                    m.shape(),
                    p.shape()
                )));
            }
            let g = grads.get(name);
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
