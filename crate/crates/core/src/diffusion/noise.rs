use ndarray::{Array, ArrayView, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Linear beta ramp. With `scale_to_steps` both endpoints are multiplied by
/// `1000 / T`, which keeps `alpha_bar_{T-1}` near zero for short chains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    #[serde(default)]
    pub scale_to_steps: bool,
}

fn default_beta_start() -> f64 {
    1e-4
}

fn default_beta_end() -> f64 {
    2e-2
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config {
                field: "timesteps".into(),
                reason: "must be positive".into(),
            });
        }
        if let Some((t, b)) = betas.iter().enumerate().find(|(_, b)| !(0.0..1.0).contains(*b)) {
            return Err(Error::Config {
                field: "betas".into(),
                reason: format!("beta_{t} = {b} outside [0, 1)"),
            });
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let betas = match timesteps {
            0 => Vec::new(),
            1 => vec![beta_start],
            _ => (0..timesteps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
                .collect(),
        };
        Self::from_betas(betas)
    }

    pub fn from_config(cfg: &NoiseConfig) -> Result<Self> {
        let s = if cfg.scale_to_steps && cfg.timesteps > 0 {
            1000.0 / cfg.timesteps as f64
        } else {
            1.0
        };
        Self::linear(cfg.timesteps, cfg.beta_start * s, cfg.beta_end * s)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::TimestepOutOfRange { t, total: self.len() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `alpha_bar` one step earlier, 1 before the chain starts.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior variance `beta_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        if ab >= 1.0 {
            return 0.0;
        }
        self.beta(t) * (1.0 - self.alpha_bar_prev(t)) / (1.0 - ab)
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
    pub fn q_sample<D: Dimension>(&self, x0: ArrayView<f64, D>, t: usize, eps: ArrayView<f64, D>) -> Result<Array<f64, D>> {
        self.check(t)?;
        if x0.shape() != eps.shape() {
            return Err(shape_err("q_sample", x0.shape(), eps.shape()));
        }
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = x0.to_owned();
        out.zip_mut_with(&eps, |x, &e| *x = a * *x + b * e);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn endpoints() {
        let x0 = array![0.5, -1.0];
        let eps = array![2.0, 3.0];
        let clean = NoiseSchedule::from_betas(vec![0.0, 0.5]).unwrap();
        assert_eq!(clean.q_sample(x0.view(), 0, eps.view()).unwrap(), x0);
        let mut full = NoiseSchedule::from_betas(vec![0.1]).unwrap();
        full.alpha_bars[0] = 0.0;
        assert_eq!(full.q_sample(x0.view(), 0, eps.view()).unwrap(), eps);
        assert!(matches!(
            clean.q_sample(x0.view(), 2, eps.view()),
            Err(Error::TimestepOutOfRange { t: 2, total: 2 })
        ));
    }

    #[test]
    fn linear_invariants() {
        for cfg in [
            NoiseConfig { timesteps: 1000, beta_start: 1e-4, beta_end: 2e-2, scale_to_steps: false },
            NoiseConfig { timesteps: 100, beta_start: 1e-4, beta_end: 2e-2, scale_to_steps: true },
        ] {
            let ns = NoiseSchedule::from_config(&cfg).unwrap();
            assert!((0..ns.len()).all(|t| ns.beta(t) > 0.0 && ns.beta(t) < 1.0));
            assert!((1..ns.len()).all(|t| ns.alpha_bar(t) < ns.alpha_bar(t - 1)));
            assert!(ns.alpha_bar(0) > 0.99);
            assert!(ns.alpha_bar(ns.len() - 1) < 1e-3);
        }
    }
}
