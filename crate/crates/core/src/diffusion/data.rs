//! Class-conditional synthetic images: `label + 1` bright discs on a dark
//! background.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub size: usize,
    pub classes: usize,
    pub radius: usize,
    pub seed: u64,
}

impl Default for SyntheticDataset {
    fn default() -> Self {
        Self {
            size: 16,
            classes: 4,
            radius: 2,
            seed: 0,
        }
    }
}

impl SyntheticDataset {
    pub fn new(size: usize, classes: usize, radius: usize, seed: u64) -> Result<Self> {
        let d = Self {
            size,
            classes,
            radius,
            seed,
        };
        // every class must be placeable on a grid of centres 2r+2 apart
        let per_row = size.saturating_sub(2 * radius) / (2 * radius + 2) + 1;
        if classes == 0 || size < 2 * radius + 1 || per_row * per_row < classes {
            return Err(Error::Config {
                field: "dataset".into(),
                reason: format!("{classes} discs of radius {radius} do not fit in {size}x{size}"),
            });
        }
        Ok(d)
    }

    pub fn blob_count(label: usize) -> usize {
        label + 1
    }

    /// Draws image `index` with a label chosen uniformly.
    pub fn sample(&self, index: u64) -> (Array3<f64>, usize) {
        let mut rng = stream(self.seed, Purpose::Data, index, 0);
        let label = rng.random_range(0..self.classes);
        (self.render(label, &mut rng), label)
    }

    pub fn sample_with_label(&self, index: u64, label: usize) -> Array3<f64> {
        let mut rng = stream(self.seed, Purpose::Data, index, 1);
        self.render(label, &mut rng)
    }

    fn render<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> Array3<f64> {
        let (n, r) = (self.size as i64, self.radius as i64);
        let min_gap = (2 * r + 2) as f64;
        let centres = loop {
            let mut placed: Vec<(i64, i64)> = Vec::new();
            for _ in 0..200 {
                let c = (rng.random_range(r..n - r), rng.random_range(r..n - r));
                if placed.iter().all(|p| (((p.0 - c.0).pow(2) + (p.1 - c.1).pow(2)) as f64).sqrt() >= min_gap) {
                    placed.push(c);
                    if placed.len() == Self::blob_count(label) {
                        break;
                    }
                }
            }
            if placed.len() == Self::blob_count(label) {
                break placed;
            }
        };
        let mut img = Array3::from_elem((self.size, self.size, 1), -1.0);
        for (ci, cj) in centres {
            for i in (ci - r).max(0)..=(ci + r).min(n - 1) {
                for j in (cj - r).max(0)..=(cj + r).min(n - 1) {
                    if (i - ci).pow(2) + (j - cj).pow(2) <= r * r {
                        img[[i as usize, j as usize, 0]] = 1.0;
                    }
                }
            }
        }
        img
    }
}

/// Number of 4-connected components of pixels above `threshold` in the
/// first channel.
pub fn count_blobs(img: &Array3<f64>, threshold: f64) -> usize {
    let (h, w, _) = img.dim();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || img[[start / w, start % w, 0]] <= threshold {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (i, j) = (p / w, p % w);
            let mut nbrs = Vec::with_capacity(4);
            if i > 0 {
                nbrs.push(p - w);
            }
            if i + 1 < h {
                nbrs.push(p + w);
            }
            if j > 0 {
                nbrs.push(p - 1);
            }
            if j + 1 < w {
                nbrs.push(p + 1);
            }
            for q in nbrs {
                if !seen[q] && img[[q / w, q % w, 0]] > threshold {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    count
}
