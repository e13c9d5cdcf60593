use ndarray::Array3;

use super::data::{count_blobs, SyntheticDataset};
use crate::error::{Error, Result};

pub const MIN_EVAL_SAMPLES: usize = 64;
pub const DETECTOR_THRESHOLD: f64 = 0.0;
/// Reference images drawn from the dataset to estimate its moments.
pub const REFERENCE_SIZE: usize = 2048;
const REFERENCE_OFFSET: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub samples: usize,
    /// |mean of per-pixel means − dataset's|.
    pub mean_distance: f64,
    /// |mean of per-pixel variances − dataset's|.
    pub var_distance: f64,
    pub moment_distance: f64,
    /// Fraction of samples whose detected blob count matches their label.
    pub blob_accuracy: Option<f64>,
}

/// Average over pixels of the per-pixel mean and variance across images.
pub fn averaged_moments(images: &[Array3<f64>]) -> (f64, f64) {
    let n = images.len() as f64;
    let mut sum = Array3::<f64>::zeros(images[0].dim());
    let mut sq = Array3::<f64>::zeros(images[0].dim());
    for im in images {
        sum += im;
        sq += &(im * im);
    }
    let mean = &sum / n;
    let var = &sq / n - &(&mean * &mean);
    (mean.mean().unwrap_or(0.0), var.mean().unwrap_or(0.0))
}

pub fn dataset_moments(data: &SyntheticDataset) -> (f64, f64) {
    let refs: Vec<Array3<f64>> = (0..REFERENCE_SIZE as u64)
        .map(|i| data.sample(REFERENCE_OFFSET + i).0)
        .collect();
    averaged_moments(&refs)
}

pub fn eval_proxy(samples: &[Array3<f64>], labels: Option<&[usize]>, data: &SyntheticDataset) -> Result<EvalStats> {
    if samples.len() < MIN_EVAL_SAMPLES {
        return Err(Error::InvalidArgument {
            op: "eval_proxy",
            reason: format!("need at least {MIN_EVAL_SAMPLES} samples, got {}", samples.len()),
        });
    }
    if let Some(l) = labels {
        if l.len() != samples.len() {
            return Err(Error::InvalidArgument {
                op: "eval_proxy",
                reason: format!("{} labels for {} samples", l.len(), samples.len()),
            });
        }
    }
    let (ms, vs) = averaged_moments(samples);
    let (md, vd) = dataset_moments(data);
    let blob_accuracy = labels.map(|l| {
        let hits = samples
            .iter()
            .zip(l)
            .filter(|(s, &y)| count_blobs(s, DETECTOR_THRESHOLD) == SyntheticDataset::blob_count(y))
            .count();
        hits as f64 / samples.len() as f64
    });
    let (mean_distance, var_distance) = ((ms - md).abs(), (vs - vd).abs());
    Ok(EvalStats {
        samples: samples.len(),
        mean_distance,
        var_distance,
        moment_distance: mean_distance + var_distance,
        blob_accuracy,
    })
}
