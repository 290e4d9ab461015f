use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdagradConfig {
    pub lr: f64,
    pub initial_accumulator: f64,
}

impl Default for AdagradConfig {
    fn default() -> Self {
        AdagradConfig {
            lr: 0.15,
            initial_accumulator: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Multiplier on the scheduled rate; 1.0 is the plain schedule.
    pub lr_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 8000,
            lr_factor: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adagrad(AdagradConfig),
    AdamWarmup(AdamConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::AdamWarmup(AdamConfig::default())
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            OptimizerConfig::Adagrad(c) => c.lr > 0.0 && c.initial_accumulator > 0.0,
            OptimizerConfig::AdamWarmup(c) => {
                (0.0..1.0).contains(&c.beta1)
                    && (0.0..1.0).contains(&c.beta2)
                    && c.eps > 0.0
                    && c.warmup_steps > 0
                    && c.lr_factor > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn warmup_rate(d_model: usize, step: u64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adagrad {
    pub config: AdagradConfig,
    pub accumulators: Vec<Tensor>,
}

impl Adagrad {
    pub fn new(config: AdagradConfig, params: &ParamStore) -> Self {
        let accumulators = params
            .tensors()
            .iter()
            .map(|t| Tensor::filled(t.shape(), config.initial_accumulator))
            .collect();
        Adagrad { config, accumulators }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check_aligned(params, grads, &self.accumulators)?;
        let lr = self.config.lr;
        for ((p, g), acc) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.accumulators) {
            for ((w, &gi), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
                *a += gi * gi;
                *w -= lr * gi / a.sqrt();
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWarmup {
    pub config: AdamConfig,
    pub d_model: usize,
    /// Updates applied so far.
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamWarmup {
    pub fn new(config: AdamConfig, d_model: usize, params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamWarmup {
            config,
            d_model,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Rate used by the next update.
    pub fn next_rate(&self) -> f64 {
        self.config.lr_factor * warmup_rate(self.d_model, self.step + 1, self.config.warmup_steps)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        check_aligned(params, grads, &self.first_moment)?;
        let lr = self.next_rate();
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adagrad(Adagrad),
    AdamWarmup(AdamWarmup),
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig, d_model: usize, params: &ParamStore) -> Self {
        match config {
            OptimizerConfig::Adagrad(c) => Optimizer::Adagrad(Adagrad::new(c.clone(), params)),
            OptimizerConfig::AdamWarmup(c) => Optimizer::AdamWarmup(AdamWarmup::new(c.clone(), d_model, params)),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Adagrad(o) => o.step(params, grads),
            Optimizer::AdamWarmup(o) => o.step(params, grads),
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        match self {
            Optimizer::Adagrad(o) => OptimizerConfig::Adagrad(o.config.clone()),
            Optimizer::AdamWarmup(o) => OptimizerConfig::AdamWarmup(o.config.clone()),
        }
    }

    /// Named state tensors, in a stable order.
    pub fn slots(&self) -> Vec<(&'static str, &[Tensor])> {
        match self {
            Optimizer::Adagrad(o) => vec![("accumulator", &o.accumulators)],
            Optimizer::AdamWarmup(o) => vec![("first_moment", &o.first_moment), ("second_moment", &o.second_moment)],
        }
    }

    pub fn slots_mut(&mut self) -> Vec<(&'static str, &mut Vec<Tensor>)> {
        match self {
            Optimizer::Adagrad(o) => vec![("accumulator", &mut o.accumulators)],
            Optimizer::AdamWarmup(o) => vec![
                ("first_moment", &mut o.first_moment),
                ("second_moment", &mut o.second_moment),
            ],
        }
    }

    pub fn update_count(&self) -> u64 {
        match self {
            Optimizer::Adagrad(_) => 0,
            Optimizer::AdamWarmup(o) => o.step,
        }
    }

    pub fn set_update_count(&mut self, n: u64) {
        if let Optimizer::AdamWarmup(o) = self {
            o.step = n;
        }
    }
}

fn check_aligned(params: &ParamStore, grads: &[Tensor], state: &[Tensor]) -> Result<()> {
    if grads.len() != params.len() || state.len() != params.len() {
        return Err(Error::shape("optimizer", &[params.len()], &[grads.len(), state.len()]));
    }
    for ((p, g), s) in params.tensors().iter().zip(grads).zip(state) {
        if p.shape() != g.shape() || p.shape() != s.shape() {
            return Err(Error::shape("optimizer", p.shape(), g.shape()));
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
