use ndarray::{s, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::SyntheticDataset;
use super::noise::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::model::SparseDit;
use crate::params::Params;
use crate::rng::{stream, Purpose};
use crate::schedule::PruneSchedule;

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::Config {
                field: "optimizer".into(),
                reason: reason.into(),
            })
        };
        match *self {
            OptimizerConfig::Sgd { lr, momentum } => {
                if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
                    return bad("sgd needs lr > 0 and momentum in [0, 1)");
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(lr > 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return bad("adam needs lr > 0, betas in [0, 1) and eps > 0");
                }
            }
        }
        Ok(())
    }
}

/// First-order optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, len: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        match self.cfg {
            OptimizerConfig::Sgd { lr, momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

fn default_label_dropout() -> f64 {
    0.1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Probability of replacing the label with the null class.
    #[serde(default = "default_label_dropout")]
    pub label_dropout: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config {
                field: "train.batch".into(),
                reason: "must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            return Err(Error::Config {
                field: "train.label_dropout".into(),
                reason: format!("{} outside [0, 1]", self.label_dropout),
            });
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grid: TokenGrid,
}

/// One training example after noising.
#[derive(Clone, Debug)]
pub struct NoisedExample {
    pub x_t: Array3<f64>,
    pub eps: Array3<f64>,
    pub t: usize,
    pub y: usize,
}

pub struct Trainer {
    pub model: SparseDit,
    pub noise: NoiseSchedule,
    pub schedule: Option<PruneSchedule>,
    pub data: SyntheticDataset,
    pub cfg: TrainConfig,
    opt: Optimizer,
    step: usize,
}

impl Trainer {
    /// `schedule = None` trains on the dense grid with uniform timesteps.
    pub fn new(
        model: SparseDit,
        noise: NoiseSchedule,
        schedule: Option<PruneSchedule>,
        data: SyntheticDataset,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        if noise.len() != mc.timesteps {
            return Err(Error::Config {
                field: "noise.timesteps".into(),
                reason: format!("{} does not match model timesteps {}", noise.len(), mc.timesteps),
            });
        }
        if let Some(s) = &schedule {
            if s.steps() != mc.timesteps || s.dense() != mc.dense_grid() {
                return Err(Error::Config {
                    field: "schedule".into(),
                    reason: format!(
                        "schedule over {} steps on {} does not match the model ({} steps, {})",
                        s.steps(),
                        s.dense(),
                        mc.timesteps,
                        mc.dense_grid()
                    ),
                });
            }
        }
        if data.size != mc.img.h || data.size != mc.img.w || mc.img.channels != 1 || data.classes > mc.num_classes {
            return Err(Error::Config {
                field: "dataset".into(),
                reason: "dataset images or classes do not match the model".into(),
            });
        }
        let opt = Optimizer::new(cfg.optimizer, model.param_count());
        Ok(Self {
            model,
            noise,
            schedule,
            data,
            cfg,
            opt,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Timesteps and their shared grid for `step`.
    pub fn batch_timesteps(&self, step: usize) -> Result<(Vec<usize>, TokenGrid)> {
        let dense = self.model.dense_grid();
        match &self.schedule {
            Some(s) => {
                let b = s.sample_for_worker(self.cfg.batch, self.cfg.seed, step as u64, 0)?;
                for &t in &b.timesteps {
                    let g = s.grid_at(t)?;
                    if g != b.grid {
                        return Err(Error::Schedule(format!("batch mixes grids {g} and {} at step {step}", b.grid)));
                    }
                }
                Ok((b.timesteps, b.grid))
            }
            None => {
                let mut rng = stream(self.cfg.seed, Purpose::Timestep, step as u64, 0);
                let ts = (0..self.cfg.batch).map(|_| rng.random_range(0..self.noise.len())).collect();
                Ok((ts, dense))
            }
        }
    }

    pub fn example(&self, step: usize, i: usize, t: usize) -> Result<NoisedExample> {
        let index = (step * self.cfg.batch + i) as u64;
        let (x0, label) = self.data.sample(index);
        let mut rng = stream(self.cfg.seed, Purpose::Noise, step as u64, i as u64);
        let eps = Array3::from_shape_simple_fn(x0.dim(), || rng.sample(StandardNormal));
        let mut lrng = stream(self.cfg.seed, Purpose::Label, step as u64, i as u64);
        let y = if lrng.random::<f64>() < self.cfg.label_dropout {
            self.model.null_label()
        } else {
            label
        };
        let x_t = self.noise.q_sample(x0.view(), t, eps.view())?;
        Ok(NoisedExample { x_t, eps, t, y })
    }

    /// Loss and gradient over a batch of examples, without updating.
    pub fn loss_and_grad(&self, examples: &[NoisedExample], grid: TokenGrid) -> Result<(f64, Vec<f64>, Vec<(String, f64)>)> {
        let b = examples.len() as f64;
        let per: Vec<Result<(f64, Vec<f64>, Vec<(String, f64)>)>> = examples
            .par_iter()
            .map(|ex| {
                let (out, cache) = self.model.forward_train(ex.x_t.view(), ex.t as f64, ex.y, grid)?;
                let ch = ex.eps.dim().2;
                let pred = out.slice(s![.., .., ..ch]);
                let diff = &pred - &ex.eps;
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;
                let mut dout = Array3::zeros(out.dim());
                dout.slice_mut(s![.., .., ..ch]).assign(&(&diff * (2.0 / (diff.len() as f64 * b))));
                let mut grad = self.model.zeros_like();
                self.model.backward(&cache, dout.view(), &mut grad)?;
                Ok((loss, grad.to_flat(), cache.activation_norms))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = vec![0.0; self.model.param_count()];
        let mut worst_norms = Vec::new();
        for r in per {
            let (loss, g, norms) = r?;
            if !loss.is_finite() && worst_norms.is_empty() {
                worst_norms = norms;
            }
            total += loss;
            for (acc, v) in grads.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        Ok((total / b, grads, worst_norms))
    }

    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let step = self.step;
        let (timesteps, grid) = self.batch_timesteps(step)?;
        let examples = timesteps
            .iter()
            .enumerate()
            .map(|(i, &t)| self.example(step, i, t))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads, norms) = self.loss_and_grad(&examples, grid)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let norms = norms
                .iter()
                .map(|(n, v)| format!("{n}={v:.3e}"))
                .collect::<Vec<_>>()
                .join(" ");
            return Err(Error::NonFiniteLoss { step, norms });
        }
        let mut params = self.model.to_flat();
        self.opt.step(&mut params, &grads);
        self.model.assign_flat(&params);
        self.step += 1;
        Ok(StepMetrics {
            step,
            loss,
            lr: self.cfg.optimizer.lr(),
            grid,
        })
    }

    /// Runs the remaining configured steps, reporting each to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepMetrics) -> Result<()>) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::with_capacity(self.cfg.steps.saturating_sub(self.step));
        while self.step < self.cfg.steps {
            let m = self.train_step()?;
            on_step(&m)?;
            out.push(m);
        }
        Ok(out)
    }
}
