//! Subcommand bodies. Each returns the text printed on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayViewD};
use rand::Rng;
use rand_distr::StandardNormal;
use sparsedit_core::analysis::{ablate_uniform_attention, attn_variance_profile, Probe};
use sparsedit_core::diffusion::{ddim_sample, ddpm_sample, eval_proxy, SampleOptions, StepMetrics, Trainer};
use sparsedit_core::flops::{count_dense, count_model, count_with_schedule};
use sparsedit_core::model::{import_dense, read_checkpoint, write_checkpoint, Block, ModelConfig, SparseDit};
use sparsedit_core::rng::{stream, Purpose};
use sparsedit_core::schedule::PruneSchedule;
use sparsedit_core::TokenGrid;

use crate::config::{RunConfig, SampleMethod};
use crate::error::CliError;
use crate::output::{append_csv, line_chart_svg, pgm, Series};

/// Dataset indices used for probes, far from the training stream.
const PROBE_OFFSET: u64 = 1 << 41;

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

/// Loads `checkpoint` or builds a fresh model from the run seed. A loaded
/// model must match the configured architecture.
fn model_for(cfg: &RunConfig, mc: &ModelConfig, checkpoint: Option<&PathBuf>, field: &str) -> Result<SparseDit, CliError> {
    match checkpoint {
        Some(p) => {
            require(p)?;
            let m = SparseDit::load(p)?;
            if m.config() != mc {
                return Err(CliError::config(field, format!("{} was saved with a different model config", p.display())));
            }
            Ok(m)
        }
        None => Ok(SparseDit::new(mc.clone(), &mut stream(cfg.seed, Purpose::Init, 0, 0))?),
    }
}

pub fn train(cfg: &RunConfig) -> Result<String, CliError> {
    let mc = cfg.model_config()?;
    let (tc, init) = cfg.train_config()?;
    let model = model_for(cfg, &mc, init.as_ref(), "train.init")?;
    let ns = cfg.noise_schedule(mc.timesteps)?;
    let schedule = cfg.prune_schedule(&mc, mc.timesteps)?;
    let data = cfg.dataset()?;
    let mut trainer = Trainer::new(model, ns, schedule, data, tc)?;

    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    let metrics_path = dir.join("metrics.csv");
    let mut losses = Vec::new();
    trainer.run(|m: &StepMetrics| {
        losses.push(m.loss);
        let row = format!("step,loss,lr,grid\n{},{:.12e},{:e},{}\n", m.step, m.loss, m.lr, m.grid);
        append_csv(&metrics_path, &row).map_err(|e| sparsedit_core::Error::Io(std::io::Error::other(e.to_string())))
    })?;
    let ckpt = dir.join("model.ckpt");
    trainer.model.save(&ckpt)?;

    let window = 20.min(losses.len() / 2).max(1).min(losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    Ok(format!(
        "steps={} first_window_loss={:.6} last_window_loss={:.6} checkpoint={} metrics={}\n",
        losses.len(),
        mean(&losses[..window]),
        mean(&losses[losses.len().saturating_sub(window)..]),
        ckpt.display(),
        metrics_path.display()
    ))
}

pub fn sample(cfg: &RunConfig) -> Result<String, CliError> {
    let sc = cfg.sample.as_ref().ok_or_else(|| CliError::config("sample", "section missing"))?;
    let mc = cfg.model_config()?;
    let model = model_for(cfg, &mc, sc.checkpoint.as_ref(), "sample.checkpoint")?;
    if sc.n == 0 {
        return Err(CliError::config("sample.n", "must be positive"));
    }
    let labels: Vec<usize> = match &sc.labels {
        Some(l) if l.len() != sc.n => {
            return Err(CliError::config("sample.labels", format!("{} labels for n = {}", l.len(), sc.n)))
        }
        Some(l) => l.clone(),
        None => (0..sc.n).map(|i| i % cfg.data.classes.min(mc.num_classes)).collect(),
    };
    if let Some(&bad) = labels.iter().find(|&&y| y >= mc.num_classes) {
        return Err(CliError::config("sample.labels", format!("label {bad} >= num_classes {}", mc.num_classes)));
    }
    let ns = cfg.noise_schedule(mc.timesteps)?;
    let schedule = if sc.use_schedule { cfg.prune_schedule(&mc, mc.timesteps)? } else { None };
    let opts = SampleOptions {
        schedule: schedule.as_ref(),
        guidance: sc.guidance,
        seed: cfg.seed,
        clip_denoised: sc.clip_denoised.then_some(1.0),
    };
    let run = match sc.method {
        SampleMethod::Ddpm => ddpm_sample(&model, &labels, &ns, opts)?,
        SampleMethod::Ddim => {
            let steps = sc.steps.unwrap_or(mc.timesteps);
            ddim_sample(&model, &labels, &ns, steps, sc.eta, opts)?
        }
    };

    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    let tensors: Vec<(String, ArrayViewD<f64>)> = run
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("samples.{i:04}"), s.view().into_dyn()))
        .collect();
    let meta = serde_json::json!({
        "kind": "samples",
        "method": match sc.method { SampleMethod::Ddpm => "ddpm", SampleMethod::Ddim => "ddim" },
        "seed": cfg.seed,
        "labels": labels,
        "guidance": sc.guidance,
        "model_evals": run.model_evals,
    });
    let samples_path = dir.join("samples.ckpt");
    write_checkpoint(&samples_path, meta, &tensors)?;
    for (i, s) in run.samples.iter().enumerate() {
        write_file(&dir.join(format!("sample_{i:04}.pgm")), pgm(s))?;
    }
    let mut trace = String::from("t,grid\n");
    for (t, g) in &run.grid_trace {
        writeln!(trace, "{t},{g}").unwrap();
    }
    write_file(&dir.join("grid_trace.csv"), trace)?;

    let finite = run.samples.iter().all(|s| s.iter().all(|v| v.is_finite()));
    let mut out = format!(
        "samples={} model_evals={} finite={finite} output={}\n",
        run.samples.len(),
        run.model_evals,
        samples_path.display()
    );
    if run.samples.len() >= sparsedit_core::diffusion::eval::MIN_EVAL_SAMPLES {
        let data = cfg.dataset()?;
        let st = eval_proxy(&run.samples, Some(&labels), &data)?;
        let acc = st.blob_accuracy.map_or(String::new(), |a| format!("{a:.6}"));
        write_file(
            &dir.join("eval.csv"),
            format!(
                "samples,mean_distance,var_distance,moment_distance,blob_accuracy\n{},{:.9},{:.9},{:.9},{acc}\n",
                st.samples, st.mean_distance, st.var_distance, st.moment_distance
            ),
        )?;
        writeln!(out, "moment_distance={:.6} blob_accuracy={acc}", st.moment_distance).unwrap();
    }
    Ok(out)
}

pub fn flops(cfg: &RunConfig) -> Result<String, CliError> {
    let mc = cfg.model_config()?;
    let fc = cfg.flops.clone().unwrap_or_default();
    let steps = fc.timesteps.unwrap_or(mc.timesteps);
    if steps == 0 {
        return Err(CliError::config("flops.timesteps", "must be positive"));
    }
    let report = match cfg.prune_schedule(&mc, steps)? {
        Some(s) => count_with_schedule(&mc, &s, fc.cfg_doubling),
        None if mc.has_sparse_tokens() => {
            return Err(CliError::config("schedule", "a model with sparse blocks needs a [schedule] section"))
        }
        None if fc.cfg_doubling => count_model(&mc, steps, |_| mc.dense_grid(), true),
        None => count_dense(&mc, steps),
    };
    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let path = dir.join("flops.csv");
    write_file(&path, csv)?;
    Ok(format!("{}\nGFLOPs {:.2} (GMACs {:.2}) csv={}\n", report.summary(), report.gflops(), report.gmacs(), path.display()))
}

pub fn import_ckpt(cfg: &RunConfig, dense: &Path, out: &Path) -> Result<String, CliError> {
    let mc = cfg.model_config()?;
    require(dense)?;
    let donor = read_checkpoint(dense)?;
    let (model, report) = import_dense(&donor, mc)?;
    let mut merges = 0;
    for (i, b) in model.blocks.iter().enumerate() {
        if let Block::Recover(r) = b {
            let c = r.w2.weight.nrows();
            if r.w1.weight.iter().any(|&v| v != 0.0) || r.w2.weight != Array2::<f64>::eye(c) {
                return Err(CliError::new("import", format!("blocks.{i} merge is not w1 = 0, w2 = I after import")));
            }
            merges += 1;
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    model.save(out)?;
    let mut s = format!(
        "imported {} -> {} merges_verified={merges} dropped_qk={} created={} unused_donor_blocks={:?}\n",
        dense.display(),
        out.display(),
        report.dropped_qk.len(),
        report.created.len(),
        report.unused_blocks
    );
    for n in &report.dropped_qk {
        writeln!(s, "dropped {n}").unwrap();
    }
    for n in &report.created {
        writeln!(s, "created {n}").unwrap();
    }
    Ok(s)
}

fn probes(cfg: &RunConfig, model: &SparseDit, schedule: Option<&PruneSchedule>, t: usize, n: usize) -> Result<Vec<Probe>, CliError> {
    let mc = model.config();
    if t >= mc.timesteps {
        return Err(CliError::config("t", format!("timestep {t} outside [0, {})", mc.timesteps)));
    }
    let ns = cfg.noise_schedule(mc.timesteps)?;
    let data = cfg.dataset()?;
    let grid: TokenGrid = match schedule {
        Some(s) => s.grid_at(t)?,
        None => model.dense_grid(),
    };
    (0..n)
        .map(|i| {
            let (x0, y) = data.sample(PROBE_OFFSET + i as u64);
            let mut rng = stream(cfg.seed, Purpose::Noise, t as u64, PROBE_OFFSET + i as u64);
            let eps = Array3::from_shape_simple_fn(x0.dim(), || rng.sample::<f64, _>(StandardNormal));
            Ok(Probe {
                x: ns.q_sample(x0.view(), t, eps.view())?,
                t,
                y,
                grid,
            })
        })
        .collect()
}

pub fn attn_profile(cfg: &RunConfig) -> Result<String, CliError> {
    let pc = cfg.profile.as_ref().ok_or_else(|| CliError::config("profile", "section missing"))?;
    if pc.timesteps.is_empty() || pc.probes == 0 {
        return Err(CliError::config("profile", "need at least one timestep and one probe"));
    }
    let mc = cfg.model_config()?;
    let model = model_for(cfg, &mc, pc.checkpoint.as_ref(), "profile.checkpoint")?;
    let schedule = cfg.prune_schedule(&mc, mc.timesteps)?;
    let groups = pc
        .timesteps
        .iter()
        .map(|&t| probes(cfg, &model, schedule.as_ref(), t, pc.probes).map_err(|e| rename(e, "profile.timesteps")))
        .collect::<Result<Vec<_>, _>>()?;
    let prof = attn_variance_profile(&model, &groups)?;

    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    let mut csv = Vec::new();
    prof.write_csv(&mut csv)?;
    write_file(&dir.join("attn_profile.csv"), csv)?;
    let series: Vec<Series> = prof
        .timesteps
        .iter()
        .zip(&prof.normalized)
        .map(|(t, row)| Series {
            label: format!("t={t}"),
            points: row.iter().enumerate().map(|(l, &v)| (l as f64, v)).collect(),
        })
        .collect();
    write_file(
        &dir.join("attn_profile.svg"),
        line_chart_svg("Normalized attention-map variance", "layer", "normalized variance", &series),
    )?;
    Ok(format!(
        "layers={} timesteps={} rows={} csv={}\n",
        prof.layers.len(),
        prof.timesteps.len(),
        prof.layers.len() * prof.timesteps.len(),
        dir.join("attn_profile.csv").display()
    ))
}

fn rename(mut e: CliError, field: &str) -> CliError {
    if e.field.as_deref() == Some("t") {
        e.field = Some(field.into());
    }
    e
}

pub fn ablate(cfg: &RunConfig) -> Result<String, CliError> {
    let ac = cfg.ablate.as_ref().ok_or_else(|| CliError::config("ablate", "section missing"))?;
    let mc = cfg.model_config()?;
    let model = model_for(cfg, &mc, ac.checkpoint.as_ref(), "ablate.checkpoint")?;
    if ac.k > model.blocks.len() {
        return Err(CliError::config("ablate.k", format!("k = {} exceeds the {} attention layers", ac.k, model.blocks.len())));
    }
    if ac.probes == 0 {
        return Err(CliError::config("ablate.probes", "must be positive"));
    }
    let schedule = cfg.prune_schedule(&mc, mc.timesteps)?;
    let ps = probes(cfg, &model, schedule.as_ref(), ac.t, ac.probes).map_err(|e| rename(e, "ablate.t"))?;
    let rep = ablate_uniform_attention(&model, ac.k, &ps)?;

    let dir = &cfg.output.dir;
    ensure_dir(dir)?;
    let mut csv = Vec::new();
    rep.write_csv(&mut csv)?;
    write_file(&dir.join("ablation.csv"), csv)?;
    let series = [Series {
        label: format!("k={}", rep.k),
        points: rep.per_layer_mse.iter().enumerate().map(|(l, &v)| (l as f64, v)).collect(),
    }];
    write_file(
        &dir.join("ablation.svg"),
        line_chart_svg("Block output MSE under uniform attention", "layer", "mse", &series),
    )?;
    Ok(format!("k={} output_mse={:.12e} csv={}\n", rep.k, rep.output_mse, dir.join("ablation.csv").display()))
}
