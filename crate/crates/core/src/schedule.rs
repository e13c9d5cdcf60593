//! Timestep-wise pruning rate, the rate ↔ sparse-grid mapping, and the
//! piecewise timestep sampler that keeps every training batch on one grid.
//!
//! `t` is the diffusion noise index: sampling runs `t = T−1 → 0`, and the
//! low-noise steps `t < T/4` keep the most tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::rng::{stream, Purpose};

/// Pruning rate `r = 1 − M/N` of a sparse grid inside a dense grid.
pub fn rate_from_grid(dense: TokenGrid, sparse: TokenGrid) -> Result<f64> {
    if sparse.len() > dense.len() {
        return Err(Error::Grid(format!("sparse grid {sparse} has more tokens than dense grid {dense}")));
    }
    Ok(1.0 - sparse.len() as f64 / dense.len() as f64)
}

const TIE_EPS: f64 = 1e-12;

/// Ladder entry whose pruning rate is nearest `r`; ties go to the entry
/// with more tokens.
pub fn grid_from_rate(dense: TokenGrid, r: f64, ladder: &[TokenGrid]) -> Result<TokenGrid> {
    let mut best: Option<(TokenGrid, f64)> = None;
    for &g in ladder {
        let d = (rate_from_grid(dense, g)? - r).abs();
        best = match best {
            None => Some((g, d)),
            Some((bg, bd)) => {
                let closer = d < bd - TIE_EPS;
                let tie_more_tokens = (d - bd).abs() <= TIE_EPS && g.len() > bg.len();
                if closer || tie_more_tokens {
                    Some((g, d))
                } else {
                    Some((bg, bd))
                }
            }
        };
    }
    best.map(|(g, _)| g).ok_or_else(|| Error::Schedule("empty grid ladder".into()))
}

/// Square grids from the one realizing `r_min` down to the one realizing
/// `r_max`, for a square dense grid.
pub fn default_ladder(dense: TokenGrid, r_min: f64, r_max: f64) -> Result<Vec<TokenGrid>> {
    if dense.h != dense.w {
        return Err(Error::Schedule(format!(
            "default ladder needs a square dense grid, got {dense}; give the ladder explicitly"
        )));
    }
    let side = |r: f64| ((dense.len() as f64 * (1.0 - r)).sqrt().round() as usize).clamp(1, dense.h);
    let (hi, lo) = (side(r_min), side(r_max));
    (lo..=hi).rev().map(TokenGrid::square).collect()
}

/// Contiguous timestep interval `[start, end)` mapped to one sparse grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub start: usize,
    pub end: usize,
    pub grid: TokenGrid,
}

impl Piece {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub steps: usize,
    pub dense: TokenGrid,
    #[serde(default)]
    pub ladder: Option<Vec<TokenGrid>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneSchedule {
    r_min: f64,
    r_max: f64,
    steps: usize,
    dense: TokenGrid,
    ladder: Vec<TokenGrid>,
    pieces: Vec<Piece>,
}

/// Output of the batch sampler: every timestep maps to `grid`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimestepBatch {
    pub timesteps: Vec<usize>,
    pub grid: TokenGrid,
    pub piece: usize,
}

impl PruneSchedule {
    pub fn new(r_min: f64, r_max: f64, steps: usize, dense: TokenGrid, ladder: Vec<TokenGrid>) -> Result<Self> {
        if !(0.0..1.0).contains(&r_min) || !(r_min < r_max && r_max < 1.0) {
            return Err(Error::Schedule(format!("need 0 <= r_min < r_max < 1, got [{r_min}, {r_max}]")));
        }
        if steps == 0 {
            return Err(Error::Schedule("total timesteps must be positive".into()));
        }
        if ladder.is_empty() {
            return Err(Error::Schedule("empty grid ladder".into()));
        }
        let mut prev = f64::NEG_INFINITY;
        for g in &ladder {
            if !g.fits_in(&dense) {
                return Err(Error::Schedule(format!("ladder grid {g} does not fit in dense grid {dense}")));
            }
            let r = rate_from_grid(dense, *g)?;
            if r <= prev {
                return Err(Error::Schedule("ladder pruning rates must be strictly increasing".into()));
            }
            prev = r;
        }
        let mut s = Self {
            r_min,
            r_max,
            steps,
            dense,
            ladder,
            pieces: Vec::new(),
        };
        s.pieces = s.compute_pieces();
        Ok(s)
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        let ladder = match &cfg.ladder {
            Some(l) => l.clone(),
            None => default_ladder(cfg.dense, cfg.r_min, cfg.r_max)?,
        };
        Self::new(cfg.r_min, cfg.r_max, cfg.steps, cfg.dense, ladder)
    }

    pub fn to_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            r_min: self.r_min,
            r_max: self.r_max,
            steps: self.steps,
            dense: self.dense,
            ladder: Some(self.ladder.clone()),
        }
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dense(&self) -> TokenGrid {
        self.dense
    }

    pub fn ladder(&self) -> &[TokenGrid] {
        &self.ladder
    }

    /// `r_min` for `t < T/4`, then linear from `r_min` at `T/4` to `r_max`
    /// at `T`: `((4T − 4t)/(3T))·r_min + ((4t − T)/(3T))·r_max`.
    pub fn pruning_rate_at(&self, t: usize) -> Result<f64> {
        if t >= self.steps {
            return Err(Error::TimestepOutOfRange { t, total: self.steps });
        }
        let (t, total) = (t as f64, self.steps as f64);
        if t < total / 4.0 {
            return Ok(self.r_min);
        }
        let a = (4.0 * total - 4.0 * t) / (3.0 * total);
        let b = (4.0 * t - total) / (3.0 * total);
        Ok(a * self.r_min + b * self.r_max)
    }

    pub fn grid_at(&self, t: usize) -> Result<TokenGrid> {
        grid_from_rate(self.dense, self.pruning_rate_at(t)?, &self.ladder)
    }

    fn compute_pieces(&self) -> Vec<Piece> {
        let grids: Vec<TokenGrid> = (0..self.steps).map(|t| self.grid_at(t).expect("t in range")).collect();
        let mut pieces = Vec::with_capacity(self.ladder.len());
        let mut t = 0;
        for &g in &self.ladder {
            let start = t;
            while t < self.steps && grids[t] == g {
                t += 1;
            }
            pieces.push(Piece { start, end: t, grid: g });
        }
        debug_assert_eq!(t, self.steps, "quantized grid sequence is not monotone");
        pieces
    }

    /// One piece per ladder entry (possibly empty), in ladder order; the
    /// pieces partition `[0, T)`.
    pub fn build_pieces(&self) -> &[Piece] {
        &self.pieces
    }

    /// Picks a piece with probability proportional to its length, then
    /// draws `batch` timesteps uniformly inside it.
    pub fn sample_timestep_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<TimestepBatch> {
        sample_from_pieces(&self.pieces, batch, rng)
    }

    /// [`Self::sample_timestep_batch`] on the stream keyed by `(seed, step, worker)`.
    pub fn sample_for_worker(&self, batch: usize, seed: u64, step: u64, worker: u64) -> Result<TimestepBatch> {
        let mut rng = stream(seed, Purpose::Timestep, step, worker);
        self.sample_timestep_batch(batch, &mut rng)
    }
}

/// Piece selection and within-piece sampling over an explicit partition.
pub fn sample_from_pieces<R: Rng + ?Sized>(pieces: &[Piece], batch: usize, rng: &mut R) -> Result<TimestepBatch> {
    if batch == 0 {
        return Err(Error::InvalidArgument {
            op: "sample_timestep_batch",
            reason: "batch must be at least 1".into(),
        });
    }
    let total: usize = pieces.iter().map(Piece::len).sum();
    if total == 0 {
        return Err(Error::Schedule("no timesteps to sample".into()));
    }
    let u = rng.random_range(0..total);
    let (idx, piece) = pieces
        .iter()
        .enumerate()
        .find(|(_, p)| p.contains(u))
        .expect("pieces cover [0, total)");
    let timesteps = (0..batch).map(|_| rng.random_range(piece.start..piece.end)).collect();
    Ok(TimestepBatch {
        timesteps,
        grid: piece.grid,
        piece: idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(s: usize) -> TokenGrid {
        TokenGrid::square(s).unwrap()
    }

    fn paper_ladder() -> Vec<TokenGrid> {
        (6..=10).rev().map(sq).collect()
    }

    fn sched(steps: usize) -> PruneSchedule {
        PruneSchedule::new(0.61, 0.86, steps, sq(16), paper_ladder()).unwrap()
    }

    #[test]
    fn rate_examples() {
        let s = sched(100);
        assert_eq!(s.pruning_rate_at(10).unwrap(), 0.61);
        assert!((s.pruning_rate_at(25).unwrap() - 0.61).abs() < 1e-15);
        let r = s.pruning_rate_at(99).unwrap();
        // coefficients 4/300 and 296/300
        assert!((r - (4.0 / 300.0 * 0.61 + 296.0 / 300.0 * 0.86)).abs() < 1e-15);
        assert!((r - 0.856667).abs() < 1e-6);
        assert!(matches!(s.pruning_rate_at(100), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn grid_rates() {
        assert_eq!(rate_from_grid(sq(16), sq(10)).unwrap(), 0.609375);
        assert_eq!(rate_from_grid(sq(16), sq(6)).unwrap(), 0.859375);
        assert_eq!(rate_from_grid(sq(16), sq(16)).unwrap(), 0.0);
        assert!(rate_from_grid(sq(4), sq(5)).is_err());
    }

    #[test]
    fn quantization_examples() {
        let l = paper_ladder();
        assert_eq!(grid_from_rate(sq(16), 0.61, &l).unwrap(), sq(10));
        assert_eq!(grid_from_rate(sq(16), 0.86, &l).unwrap(), sq(6));
        // midway between 10x10 (0.609375) and 9x9 (0.68359375)
        let mid = (0.609375 + 0.68359375) / 2.0;
        assert_eq!(grid_from_rate(sq(16), mid, &l).unwrap(), sq(10));
        assert!(grid_from_rate(sq(16), 0.5, &[]).is_err());
    }

    #[test]
    fn default_ladders() {
        assert_eq!(default_ladder(sq(16), 0.61, 0.86).unwrap(), paper_ladder());
        let l = default_ladder(sq(16), 0.44, 0.61).unwrap();
        assert_eq!(l, vec![sq(12), sq(11), sq(10)]);
    }

    #[test]
    fn single_grid_ladder_is_one_piece() {
        let s = PruneSchedule::new(0.3, 0.8, 50, sq(8), vec![sq(4)]).unwrap();
        assert_eq!(s.build_pieces(), &[Piece { start: 0, end: 50, grid: sq(4) }]);
    }

    #[test]
    fn pieces_match_a_full_scan() {
        let s = sched(100);
        let pieces = s.build_pieces();
        assert_eq!(pieces[0].grid, sq(10));
        assert_eq!(pieces[0].start, 0);
        assert!(pieces[0].end > 25, "10x10 piece covers t < T/4 and the start of the ramp");
        for t in 0..100 {
            let owners: Vec<_> = pieces.iter().filter(|p| p.contains(t)).collect();
            assert_eq!(owners.len(), 1);
            assert_eq!(owners[0].grid, s.grid_at(t).unwrap());
        }
    }

    #[test]
    fn invalid_schedules() {
        assert!(PruneSchedule::new(0.8, 0.6, 10, sq(16), paper_ladder()).is_err());
        assert!(PruneSchedule::new(0.6, 1.0, 10, sq(16), paper_ladder()).is_err());
        assert!(PruneSchedule::new(0.6, 0.8, 10, sq(16), vec![sq(6), sq(10)]).is_err());
        assert!(PruneSchedule::new(0.6, 0.8, 10, sq(8), vec![sq(10)]).is_err());
        assert!(PruneSchedule::new(0.6, 0.8, 0, sq(16), paper_ladder()).is_err());
    }

    #[test]
    fn single_piece_sampling_is_plain_uniform() {
        let s = PruneSchedule::new(0.3, 0.8, 10, sq(8), vec![sq(4)]).unwrap();
        let mut counts = [0usize; 10];
        let mut rng = stream(1, Purpose::Timestep, 0, 0);
        for _ in 0..10_000 {
            let b = s.sample_timestep_batch(1, &mut rng).unwrap();
            counts[b.timesteps[0]] += 1;
        }
        assert!(counts.iter().all(|&c| (800..1200).contains(&c)), "{counts:?}");
    }

    #[test]
    fn worker_streams_are_deterministic() {
        let s = sched(100);
        let a = s.sample_for_worker(8, 42, 5, 1).unwrap();
        assert_eq!(a, s.sample_for_worker(8, 42, 5, 1).unwrap());
        assert!(a.timesteps.iter().all(|&t| s.grid_at(t).unwrap() == a.grid));
    }

    proptest! {
        #[test]
        fn rate_is_monotone_and_bounded(steps in 4usize..400, lo in 0.0f64..0.5, span in 0.01f64..0.45) {
            let hi = lo + span;
            let s = PruneSchedule::new(lo, hi, steps, sq(16), vec![sq(16)]).unwrap();
            let mut prev = 0.0;
            for t in 0..steps {
                let r = s.pruning_rate_at(t).unwrap();
                if (t as f64) < steps as f64 / 4.0 {
                    prop_assert_eq!(r, lo);
                }
                prop_assert!(r >= prev - 1e-15);
                prop_assert!(r <= hi + 1e-12);
                prev = r;
            }
        }

        #[test]
        fn ladder_round_trip(lo_side in 2usize..8, n in 1usize..5) {
            let ladder: Vec<_> = (lo_side..lo_side + n).rev().map(sq).collect();
            for g in &ladder {
                let r = rate_from_grid(sq(16), *g).unwrap();
                prop_assert_eq!(grid_from_rate(sq(16), r, &ladder).unwrap(), *g);
            }
        }
    }
}
