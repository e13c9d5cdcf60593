use ndarray::{s, Array3, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::noise::NoiseSchedule;
use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::model::SparseDit;
use crate::rng::{stream, Purpose};
use crate::schedule::PruneSchedule;

/// Guided noise prediction `eps_u + scale·(eps_c − eps_u)`. A scale of 1
/// runs a single conditional forward.
pub fn cfg_predict(model: &SparseDit, x: ArrayView3<f64>, t: usize, y: usize, scale: f64, grid: TokenGrid) -> Result<Array3<f64>> {
    Ok(guided_eps(model, x, t, y, scale, grid)?.0)
}

fn eps_part(model: &SparseDit, x: ArrayView3<f64>, t: usize, y: usize, grid: TokenGrid) -> Result<Array3<f64>> {
    let out = model.forward(x, t as f64, y, grid)?;
    let ch = model.config().img.channels;
    Ok(out.slice(s![.., .., ..ch]).to_owned())
}

/// Returns the prediction and the number of forwards spent.
fn guided_eps(model: &SparseDit, x: ArrayView3<f64>, t: usize, y: usize, scale: f64, grid: TokenGrid) -> Result<(Array3<f64>, usize)> {
    let cond = eps_part(model, x, t, y, grid)?;
    if scale == 1.0 {
        return Ok((cond, 1));
    }
    let uncond = eps_part(model, x, t, model.null_label(), grid)?;
    Ok((&uncond + &((&cond - &uncond) * scale), 2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRun {
    pub samples: Vec<Array3<f64>>,
    /// Grid used at each visited timestep, in sampling order.
    pub grid_trace: Vec<(usize, TokenGrid)>,
    /// Model forwards over all samples.
    pub model_evals: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions<'a> {
    pub schedule: Option<&'a PruneSchedule>,
    pub guidance: f64,
    pub seed: u64,
    /// Clamp each predicted `x0` to `[-clip, clip]` before stepping.
    pub clip_denoised: Option<f64>,
}

fn grid_for(model: &SparseDit, schedule: Option<&PruneSchedule>, t: usize) -> Result<TokenGrid> {
    match schedule {
        Some(s) => s.grid_at(t),
        None => Ok(model.dense_grid()),
    }
}

fn noise_like(rng: &mut ChaCha8Rng, dim: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

fn check_finite(x: &Array3<f64>, what: &str, t: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: format!("{what} state at t={t}"),
        })
    }
}

/// Clamps the implied `x0` and returns the noise consistent with it.
fn clipped_eps(ns: &NoiseSchedule, x: &Array3<f64>, eps: &Array3<f64>, t: usize, clip: f64) -> (Array3<f64>, Array3<f64>) {
    let ab = ns.alpha_bar(t);
    let x0 = ((x - &(eps * (1.0 - ab).sqrt())) / ab.sqrt()).mapv(|v| v.clamp(-clip, clip));
    let eps = (x - &(&x0 * ab.sqrt())) / (1.0 - ab).sqrt();
    (x0, eps)
}

/// One reverse step `t → prev` (`prev = None` past the last step). Noise is
/// drawn only when the step variance is positive, so DDPM and full-length
/// DDIM consume the stream identically.
#[allow(clippy::too_many_arguments)]
fn ddim_step(
    ns: &NoiseSchedule,
    x: &Array3<f64>,
    eps: &Array3<f64>,
    t: usize,
    prev: Option<usize>,
    eta: f64,
    clip: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let ab = ns.alpha_bar(t);
    let ab_prev = prev.map_or(1.0, |p| ns.alpha_bar(p));
    let (x0, eps) = match clip {
        Some(c) => clipped_eps(ns, x, eps, t, c),
        None => ((x - &(eps * (1.0 - ab).sqrt())) / ab.sqrt(), eps.clone()),
    };
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut next = x0 * ab_prev.sqrt() + &eps * dir;
    if sigma > 0.0 {
        next += &(noise_like(rng, x.dim()) * sigma);
    }
    next
}

fn ddpm_step(ns: &NoiseSchedule, x: &Array3<f64>, eps: &Array3<f64>, t: usize, clip: Option<f64>, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut mean = match clip {
        // posterior mean from the clamped x0
        Some(c) => {
            let (ab, ab_prev) = (ns.alpha_bar(t), ns.alpha_bar_prev(t));
            let (x0, _) = clipped_eps(ns, x, eps, t, c);
            x0 * (ab_prev.sqrt() * ns.beta(t) / (1.0 - ab)) + x * (ns.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab))
        }
        None => {
            let coef = ns.beta(t) / (1.0 - ns.alpha_bar(t)).sqrt();
            (x - &(eps * coef)) / ns.alpha(t).sqrt()
        }
    };
    let var = ns.posterior_variance(t);
    if var > 0.0 {
        mean += &(noise_like(rng, x.dim()) * var.sqrt());
    }
    mean
}

enum Method {
    Ddpm,
    Ddim { eta: f64 },
}

fn run_chain(
    model: &SparseDit,
    labels: &[usize],
    ns: &NoiseSchedule,
    opts: SampleOptions<'_>,
    timesteps: &[usize],
    method: Method,
) -> Result<SampleRun> {
    let img = model.config().img;
    let dim = (img.h, img.w, img.channels);
    let grid_trace = timesteps
        .iter()
        .rev()
        .map(|&t| Ok((t, grid_for(model, opts.schedule, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<Result<(Array3<f64>, usize)>> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut rng = stream(opts.seed, Purpose::Sample, i as u64, 0);
            let mut x = noise_like(&mut rng, dim);
            let mut evals = 0;
            for (k, &(t, grid)) in grid_trace.iter().enumerate() {
                let (eps, n) = guided_eps(model, x.view(), t, y, opts.guidance, grid)?;
                evals += n;
                x = match method {
                    Method::Ddpm => ddpm_step(ns, &x, &eps, t, opts.clip_denoised, &mut rng),
                    Method::Ddim { eta } => {
                        let prev = grid_trace.get(k + 1).map(|&(p, _)| p);
                        ddim_step(ns, &x, &eps, t, prev, eta, opts.clip_denoised, &mut rng)
                    }
                };
                check_finite(&x, "sampler", t)?;
            }
            Ok((x, evals))
        })
        .collect();
    let mut samples = Vec::with_capacity(labels.len());
    let mut model_evals = 0;
    for r in results {
        let (x, n) = r?;
        samples.push(x);
        model_evals += n;
    }
    Ok(SampleRun {
        samples,
        grid_trace,
        model_evals,
    })
}

fn check_model(model: &SparseDit, ns: &NoiseSchedule) -> Result<()> {
    if ns.len() != model.config().timesteps {
        return Err(Error::Config {
            field: "noise.timesteps".into(),
            reason: format!("{} does not match model timesteps {}", ns.len(), model.config().timesteps),
        });
    }
    Ok(())
}

/// Ancestral sampling over every timestep `T−1 → 0`, one sample per label.
pub fn ddpm_sample(model: &SparseDit, labels: &[usize], ns: &NoiseSchedule, opts: SampleOptions<'_>) -> Result<SampleRun> {
    check_model(model, ns)?;
    let ts: Vec<usize> = (0..ns.len()).collect();
    run_chain(model, labels, ns, opts, &ts, Method::Ddpm)
}

/// Uniformly strided timesteps `floor(i·T/steps)`, ascending.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument {
            op: "ddim_sample",
            reason: format!("steps must be in [1, {total}], got {steps}"),
        });
    }
    Ok((0..steps).map(|i| i * total / steps).collect())
}

pub fn ddim_sample(
    model: &SparseDit,
    labels: &[usize],
    ns: &NoiseSchedule,
    steps: usize,
    eta: f64,
    opts: SampleOptions<'_>,
) -> Result<SampleRun> {
    check_model(model, ns)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidArgument {
            op: "ddim_sample",
            reason: format!("eta must be in [0, 1], got {eta}"),
        });
    }
    let ts = ddim_timesteps(ns.len(), steps)?;
    run_chain(model, labels, ns, opts, &ts, Method::Ddim { eta })
}
