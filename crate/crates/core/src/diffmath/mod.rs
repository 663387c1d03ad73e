//! Dense `f64` arrays, a reverse-mode computation graph, and parameter
//! updates.

mod graph;
mod tensor;

pub use graph::{Axis, Graph, Var};
pub use tensor::{logsumexp, Tensor};
pub(crate) use tensor::{log_softmax_lane, matmul as matmul_tensors, matmul_acc};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named trainable tensor together with its optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            value,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        }
    }
}

/// Ordered set of uniquely named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    updates: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(self.params.len() - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.params[index].value
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Number of optimizer updates applied so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Resets the optimizer moments and update counter, keeping values.
    pub fn reset_optimizer_state(&mut self) {
        self.updates = 0;
        for p in &mut self.params {
            p.first_moment.iter_mut().for_each(|m| *m = 0.0);
            p.second_moment.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub rule: UpdateRule,
    pub learning_rate: f64,
    /// Rescale the joint gradient when its L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rule: UpdateRule::default(),
            learning_rate: 1e-3,
            clip_norm: Some(5.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("clip_norm must be positive, got {c}")));
            }
        }
        if let UpdateRule::Adam { beta1, beta2, epsilon } = self.rule {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(epsilon > 0.0) {
                return Err(Error::InvalidConfig("adam hyperparameters out of range".into()));
            }
        }
        Ok(())
    }
}

/// Applies one optimizer update. `grads` is aligned with the store order;
/// parameters with `trainable[i] == false` are left untouched (their moments
/// too).
pub fn step(
    store: &mut ParamStore,
    grads: &[Vec<f64>],
    config: &OptimizerConfig,
    trainable: Option<&[bool]>,
) -> Result<()> {
    config.validate()?;
    if grads.len() != store.params.len() {
        return Err(Error::InvalidInput(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.params.len()
        )));
    }
    for (p, g) in store.params.iter().zip(grads) {
        if p.value.len() != g.len() {
            return Err(Error::Shape {
                op: "step",
                lhs: p.value.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
    }
    let is_trainable = |i: usize| trainable.map_or(true, |t| t[i]);

    let mut factor = 1.0;
    if let Some(max_norm) = config.clip_norm {
        let norm = grads
            .iter()
            .enumerate()
            .filter(|(i, _)| is_trainable(*i))
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            factor = max_norm / norm;
        }
    }

    store.updates += 1;
    let t = store.updates as i32;
    let lr = config.learning_rate;
    for (i, (p, g)) in store.params.iter_mut().zip(grads).enumerate() {
        if !is_trainable(i) {
            continue;
        }
        match config.rule {
            UpdateRule::GradientDescent => {
                for (w, &gi) in p.value.data_mut().iter_mut().zip(g) {
                    *w -= lr * factor * gi;
                }
            }
            UpdateRule::Adam { beta1, beta2, epsilon } => {
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let Parameter {
                    value,
                    first_moment,
                    second_moment,
                    ..
                } = p;
                for (((w, &gi), m), v) in value
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .zip(first_moment.iter_mut())
                    .zip(second_moment.iter_mut())
                {
                    let gi = gi * factor;
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        if p.value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("optimizer step"));
        }
    }
    Ok(())
}
