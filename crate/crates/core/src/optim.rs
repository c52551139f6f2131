//! First-order optimizers, selectable by name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::archive::Tensor;
use crate::model::{Gradients, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Momentum for plain SGD.
    #[serde(default)]
    pub momentum: f64,
}

fn default_name() -> String {
    "adam".into()
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: default_name(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            momentum: 0.0,
        }
    }
}

/// Serializable optimizer internals: per-parameter buffers plus a step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub name: String,
    pub step: u64,
    pub buffers: Vec<Tensor>,
}

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64);

    fn state(&self) -> OptimizerState;

    fn load_state(&mut self, state: OptimizerState) -> Result<()>;
}

fn buffers_like(params: &ModelParams, prefix: &str) -> Vec<Tensor> {
    params
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(format!("{prefix}.{}", t.name), t.shape.clone()))
        .collect()
}

fn check_buffers(name: &str, expected: &[Tensor], got: &[Tensor]) -> Result<()> {
    let same = expected.len() == got.len()
        && expected
            .iter()
            .zip(got)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if same {
        Ok(())
    } else {
        Err(Error::Compatibility(format!("{name} state does not match the model layout")))
    }
}

/// Adaptive moment estimation with bias correction.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, params: &ModelParams) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: buffers_like(params, "adam.m"),
            v: buffers_like(params, "adam.v"),
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &g), m), v) in p.data.iter_mut().zip(g).zip(&mut m.data).zip(&mut v.data) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            }
        }
    }

    fn state(&self) -> OptimizerState {
        OptimizerState {
            name: self.name().into(),
            step: self.step,
            buffers: self.m.iter().chain(&self.v).cloned().collect(),
        }
    }

    fn load_state(&mut self, state: OptimizerState) -> Result<()> {
        if state.name != self.name() {
            return Err(Error::Compatibility(format!("cannot load {} state into adam", state.name)));
        }
        let n = self.m.len();
        if state.buffers.len() != 2 * n {
            return Err(Error::Compatibility("adam state has the wrong number of buffers".into()));
        }
        let mut buffers = state.buffers;
        let v = buffers.split_off(n);
        check_buffers("adam", &self.m, &buffers)?;
        check_buffers("adam", &self.v, &v)?;
        self.m = buffers;
        self.v = v;
        self.step = state.step;
        Ok(())
    }
}

/// Stochastic gradient descent with optional heavy-ball momentum.
pub struct Sgd {
    momentum: f64,
    step: u64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(cfg: &OptimizerConfig, params: &ModelParams) -> Self {
        Self {
            momentum: cfg.momentum,
            step: 0,
            velocity: buffers_like(params, "sgd.velocity"),
        }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        self.step += 1;
        let mu = self.momentum;
        for ((p, g), vel) in params
            .tensors_mut()
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.velocity)
        {
            for ((w, &g), v) in p.data.iter_mut().zip(g).zip(&mut vel.data) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
    }

    fn state(&self) -> OptimizerState {
        OptimizerState {
            name: self.name().into(),
            step: self.step,
            buffers: self.velocity.clone(),
        }
    }

    fn load_state(&mut self, state: OptimizerState) -> Result<()> {
        if state.name != self.name() {
            return Err(Error::Compatibility(format!("cannot load {} state into sgd", state.name)));
        }
        check_buffers("sgd", &self.velocity, &state.buffers)?;
        self.velocity = state.buffers;
        self.step = state.step;
        Ok(())
    }
}

type Factory = fn(&OptimizerConfig, &ModelParams) -> Box<dyn Optimizer>;

/// Name -> constructor table for optimizers.
pub struct OptimizerRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl Default for OptimizerRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("adam", |c, p| Box::new(Adam::new(c, p)));
        r.register("sgd", |c, p| Box::new(Sgd::new(c, p)));
        r
    }
}

impl OptimizerRegistry {
    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, cfg: &OptimizerConfig, params: &ModelParams) -> Result<Box<dyn Optimizer>> {
        let factory = self
            .factories
            .get(cfg.name.as_str())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "optimizer",
                name: cfg.name.clone(),
                available: self.names().join(", "),
            })?;
        Ok(factory(cfg, params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn unit_grads(p: &ModelParams) -> Gradients {
        Gradients {
            tensors: p.tensors().iter().map(|t| vec![1.0; t.len()]).collect(),
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ModelParams::init(ModelConfig::toy(), 0).unwrap();
        let before = p.clone();
        let g = unit_grads(&p);
        let mut opt = OptimizerRegistry::default()
            .build(&OptimizerConfig::default(), &p)
            .unwrap();
        opt.step(&mut p, &g, 1e-3);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((y - x - 1e-3).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sgd_step() {
        let mut p = ModelParams::init(ModelConfig::toy(), 0).unwrap();
        let before = p.clone();
        let cfg = OptimizerConfig {
            name: "sgd".into(),
            ..Default::default()
        };
        let mut opt = OptimizerRegistry::default().build(&cfg, &p).unwrap();
        let g = unit_grads(&p);
        opt.step(&mut p, &g, 0.5);
        assert!((before.tensors()[0].data[0] - p.tensors()[0].data[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip() {
        let mut p = ModelParams::init(ModelConfig::toy(), 0).unwrap();
        let reg = OptimizerRegistry::default();
        let mut opt = reg.build(&OptimizerConfig::default(), &p).unwrap();
        let g = unit_grads(&p);
        opt.step(&mut p, &g, 1e-3);
        let st = opt.state();
        let mut fresh = reg.build(&OptimizerConfig::default(), &p).unwrap();
        fresh.load_state(st.clone()).unwrap();
        assert_eq!(fresh.state(), st);
        let sgd = OptimizerConfig {
            name: "sgd".into(),
            ..Default::default()
        };
        assert!(reg.build(&sgd, &p).unwrap().load_state(st).is_err());
    }

    #[test]
    fn unknown_optimizer_lists_choices() {
        let p = ModelParams::init(ModelConfig::toy(), 0).unwrap();
        let cfg = OptimizerConfig {
            name: "lbfgs".into(),
            ..Default::default()
        };
        let err = OptimizerRegistry::default().build(&cfg, &p).err().unwrap();
        assert!(err.to_string().contains("adam, sgd"));
    }
}
