//! Planar Euclidean TSP on the unit square with an exact Held–Karp oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map};

use super::{Dataset, Instance, TaskTag};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::permutation::Permutation;

/// Largest node count for which training targets are produced.
pub const TSP_TARGET_MAX_N: usize = 13;
/// Largest node count accepted by [`held_karp`] (`n * 2^n` table).
pub const HELD_KARP_MAX_N: usize = 20;

/// Rotation and direction of target tours.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TspStart {
    /// Start at input index 0; the second node has a lower index than the
    /// last (closed tours). Open paths start at their lower-index end.
    Index,
    /// Start at the leftmost point (ties: lowest y); closed tours continue
    /// toward the start's neighbor with the lower y. Open paths start at
    /// their leftmost end. Depends only on coordinates, so a model that
    /// cannot see input positions can still learn the target.
    Leftmost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TspConfig {
    /// Inclusive node-count range.
    pub n_range: [usize; 2],
    pub count: usize,
    /// Tours return to their start.
    pub closed_tour: bool,
    /// Attach Held–Karp targets (requires `n_range[1] <= 13`).
    pub targets: bool,
    #[serde(default = "default_start")]
    pub start: TspStart,
    pub seed: u64,
}

fn default_start() -> TspStart {
    TspStart::Index
}

impl Default for TspConfig {
    fn default() -> Self {
        Self {
            n_range: [5, 10],
            count: 1000,
            closed_tour: true,
            targets: true,
            start: TspStart::Index,
            seed: 0,
        }
    }
}

impl TspConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.n_range;
        if lo < 3 || lo > hi {
            return Err(Error::Config(format!("tsp n_range [{lo}, {hi}] must satisfy 3 <= min <= max")));
        }
        if self.targets && hi > TSP_TARGET_MAX_N {
            return Err(Error::Config(format!(
                "tsp targets need n <= {TSP_TARGET_MAX_N}, got max {hi}; disable targets for eval-only sets"
            )));
        }
        Ok(())
    }
}

fn dist(p: &Matrix, a: usize, b: usize) -> f64 {
    let (x, y) = (p.row(a), p.row(b));
    (x[0] - y[0]).hypot(x[1] - y[1])
}

fn check_points(points: &Matrix) -> Result<()> {
    if points.cols() != 2 {
        return Err(Error::Shape(format!("points must be n x 2, got {:?}", points.shape())));
    }
    Ok(())
}

/// Sum of Euclidean edge lengths along `perm`, plus the closing edge when
/// `closed`.
pub fn tour_length(points: &Matrix, perm: &Permutation, closed: bool) -> Result<f64> {
    check_points(points)?;
    if perm.len() != points.rows() {
        return Err(Error::InvalidPermutation(format!(
            "tour of length {} over {} points",
            perm.len(),
            points.rows()
        )));
    }
    let idx = perm.indices();
    let mut total: f64 = idx.windows(2).map(|w| dist(points, w[0], w[1])).sum();
    if closed && idx.len() > 1 {
        total += dist(points, idx[idx.len() - 1], idx[0]);
    }
    Ok(total)
}

/// Exact optimal tour by dynamic programming over subsets.
///
/// Closed tours start at node 0; of the optimal tours the lexicographically
/// smallest is returned, so the second node has a lower index than the last.
/// Open tours are Hamiltonian paths with free endpoints, again the
/// lexicographically smallest optimum (which starts at its lower endpoint).
pub fn held_karp(points: &Matrix, closed: bool) -> Result<(Permutation, f64)> {
    check_points(points)?;
    let n = points.rows();
    if !(2..=HELD_KARP_MAX_N).contains(&n) {
        return Err(Error::InvalidArgument(format!("held_karp needs 2 <= n <= {HELD_KARP_MAX_N}, got {n}")));
    }
    let d: Vec<f64> = (0..n * n).map(|k| dist(points, k / n, k % n)).collect();
    let full = (1usize << n) - 1;

    // best[mask * n + j]: shortest path covering `mask` and ending at j.
    // Closed: paths start at node 0. Open: paths start anywhere in `mask`.
    let mut best = vec![f64::INFINITY; (full + 1) * n];
    if closed {
        best[n] = 0.0;
    } else {
        for j in 0..n {
            best[(1 << j) * n + j] = 0.0;
        }
    }
    for mask in 1..=full {
        if closed && mask & 1 == 0 {
            continue;
        }
        for j in 0..n {
            let cur = best[mask * n + j];
            if mask & (1 << j) == 0 || !cur.is_finite() {
                continue;
            }
            for k in 0..n {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next = (mask | (1 << k)) * n + k;
                let cand = cur + d[j * n + k];
                if cand < best[next] {
                    best[next] = cand;
                }
            }
        }
    }

    // Cost of finishing from node j once `mask` is covered. Reversing the
    // remaining path turns it into a table lookup by symmetry of `d`.
    let completion = |mask: usize, j: usize| -> f64 {
        if mask == full {
            return if closed { d[j * n] } else { 0.0 };
        }
        let rest = (full & !mask) | (1 << j) | usize::from(closed);
        best[rest * n + j]
    };

    let (start, optimum) = if closed {
        (0, (0..n).map(|j| best[full * n + j] + d[j * n]).fold(f64::INFINITY, f64::min))
    } else {
        let opt = (0..n).map(|j| best[full * n + j]).fold(f64::INFINITY, f64::min);
        let s = (0..n).find(|&s| best[full * n + s] <= opt + tie_tol(opt)).expect("some endpoint is optimal");
        (s, opt)
    };

    let mut tour = vec![start];
    let mut mask = 1usize << start;
    let mut cur = start;
    let mut remaining = optimum;
    while mask != full {
        let next = (0..n)
            .filter(|&k| mask & (1 << k) == 0)
            .find(|&k| d[cur * n + k] + completion(mask | (1 << k), k) <= remaining + tie_tol(optimum))
            .expect("an optimal continuation exists");
        remaining -= d[cur * n + next];
        mask |= 1 << next;
        cur = next;
        tour.push(next);
    }
    Ok((Permutation::new(tour)?, optimum))
}

/// Rotates/reverses an optimal tour into the `start` convention. The tour
/// length is unchanged.
pub fn canonical_tour(points: &Matrix, tour: &Permutation, closed: bool, start: TspStart) -> Result<Permutation> {
    check_points(points)?;
    let t = tour.indices();
    let n = t.len();
    if n < 2 {
        return Ok(tour.clone());
    }
    let key = |i: usize| {
        let r = points.row(i);
        (r[0], r[1], i)
    };
    let lower = |a: usize, b: usize| match start {
        TspStart::Index => a < b,
        TspStart::Leftmost => key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less),
    };
    let out: Vec<usize> = if closed {
        let first = (0..n).fold(0, |best, p| if lower(t[p], t[best]) { p } else { best });
        let mut rot: Vec<usize> = t[first..].iter().chain(&t[..first]).copied().collect();
        let (second, last) = (rot[1], rot[n - 1]);
        let forward = match start {
            TspStart::Index => second < last,
            TspStart::Leftmost => {
                let y = |i: usize| (points.row(i)[1], i);
                y(second).partial_cmp(&y(last)) != Some(std::cmp::Ordering::Greater)
            }
        };
        if !forward {
            rot[1..].reverse();
        }
        rot
    } else if lower(t[n - 1], t[0]) {
        t.iter().rev().copied().collect()
    } else {
        t.to_vec()
    };
    Permutation::new(out)
}

fn tie_tol(scale: f64) -> f64 {
    1e-9 * (1.0 + scale)
}

/// Uniform points in `[0, 1]^2`; with targets, the Held–Karp tour and its
/// length are attached.
pub fn gen_tsp(cfg: &TspConfig) -> Result<Dataset> {
    cfg.validate()?;
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut rng = SeededRng::derive(cfg.seed, i as u64);
            let n = rng.int_inclusive(cfg.n_range[0], cfg.n_range[1]);
            let data = (0..2 * n).map(|_| rng.uniform()).collect();
            let points = Matrix::from_vec(n, 2, data)?;
            let mut meta = Map::new();
            meta.insert("closed".into(), json!(cfg.closed_tour));
            let target = if cfg.targets {
                let (tour, len) = held_karp(&points, cfg.closed_tour)?;
                meta.insert("optimal_length".into(), json!(len));
                Some(match cfg.start {
                    TspStart::Index => tour,
                    start => canonical_tour(&points, &tour, cfg.closed_tour, start)?,
                })
            } else {
                None
            };
            Instance::new(points, target, TaskTag::Tsp, meta)
        })
        .collect()
}
