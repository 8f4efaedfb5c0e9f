//! Transition down / up between point sets of different cardinality:
//! farthest point sampling with inverse-distance interpolation (objects) and
//! grid pooling with grid unpooling (scenes).

use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::numcore::{Tape, Tensor, Var};
use crate::pointio::Point;

pub const DEFAULT_K: usize = 3;
const INTERP_EPS: f64 = 1e-8;
const COINCIDENT: f64 = 1e-12;

#[inline]
fn dist2(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy farthest point sampling seeded at index 0. Each pick maximizes the
/// distance to the already-selected set; ties go to the smallest index.
pub fn fps(coords: &[Point], m: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 || m > n {
        return Err(contract(format!("cannot sample {m} of {n} points")));
    }
    let mut selected = Vec::with_capacity(m);
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = 0;
    for _ in 0..m {
        selected.push(current);
        let c = coords[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in coords.iter().enumerate() {
            let d = dist2(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        current = best.1;
    }
    Ok(selected)
}

/// Neighbour indices and normalized inverse-square-distance weights, `k` per
/// destination point (`k` is capped at the source count).
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    pub k: usize,
    pub idx: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn interp_weights(src: &[Point], dst: &[Point], k: usize) -> Result<Interpolation> {
    if src.is_empty() {
        return Err(contract("interpolation needs at least one source point"));
    }
    if k == 0 {
        return Err(contract("interpolation needs k >= 1"));
    }
    let k = k.min(src.len());
    let mut idx = Vec::with_capacity(dst.len() * k);
    let mut weights = Vec::with_capacity(dst.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(src.len());
    for q in dst {
        cand.clear();
        cand.extend(src.iter().enumerate().map(|(i, s)| (dist2(q, s), i)));
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
        }
        cand.sort_by(by_dist);
        if cand[0].0.sqrt() < COINCIDENT {
            for (j, &(_, i)) in cand.iter().enumerate() {
                idx.push(i);
                weights.push(if j == 0 { 1.0 } else { 0.0 });
            }
            continue;
        }
        let inv: Vec<f64> = cand.iter().map(|&(d, _)| 1.0 / (d + INTERP_EPS)).collect();
        let total: f64 = inv.iter().sum();
        for (&(_, i), w) in cand.iter().zip(inv) {
            idx.push(i);
            weights.push(w / total);
        }
    }
    Ok(Interpolation { k, idx, weights })
}

/// Features at `dst` as inverse-distance blends of the `k` nearest sources.
pub fn interp_up(src_coords: &[Point], src_feats: &Tensor, dst_coords: &[Point], k: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let f = tape.constant(src_feats.clone());
    let y = interp_up_on(&tape, src_coords, f, dst_coords, k)?;
    let out = tape.value(y).clone();
    Ok(out)
}

/// Differentiable (in the features) form of [`interp_up`].
pub fn interp_up_on(tape: &Tape, src_coords: &[Point], src_feats: Var, dst_coords: &[Point], k: usize) -> Result<Var> {
    if tape.shape(src_feats)[0] != src_coords.len() {
        return Err(contract("source features and coordinates disagree in length"));
    }
    let w = interp_weights(src_coords, dst_coords, k)?;
    tape.weighted_gather(src_feats, &w.idx, &w.weights, w.k)
}

/// Voxel assignment of a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAssignment {
    /// Output row of every input point.
    pub assignment: Vec<usize>,
    /// Centroid of every occupied voxel, in first-occurrence order.
    pub pooled_coords: Vec<Point>,
    pub grid_size: f64,
}

impl GridAssignment {
    pub fn num_voxels(&self) -> usize {
        self.pooled_coords.len()
    }
}

pub fn grid_assign(coords: &[Point], grid_size: f64) -> Result<GridAssignment> {
    if !(grid_size > 0.0) || !grid_size.is_finite() {
        return Err(contract(format!("grid size must be positive, got {grid_size}")));
    }
    let mut slots: HashMap<[i64; 3], usize> = HashMap::new();
    let mut sums: Vec<([f64; 3], usize)> = Vec::new();
    let mut assignment = Vec::with_capacity(coords.len());
    for p in coords {
        let key = p.map(|v| (v / grid_size).floor() as i64);
        let row = *slots.entry(key).or_insert_with(|| {
            sums.push(([0.0; 3], 0));
            sums.len() - 1
        });
        let s = &mut sums[row];
        for k in 0..3 {
            s.0[k] += p[k];
        }
        s.1 += 1;
        assignment.push(row);
    }
    let pooled_coords = sums.into_iter().map(|(s, c)| s.map(|v| v / c as f64)).collect();
    Ok(GridAssignment {
        assignment,
        pooled_coords,
        grid_size,
    })
}

/// Voxel-mean pooling. Returns the pooled features and the assignment.
pub fn grid_pool(coords: &[Point], feats: &Tensor, grid_size: f64) -> Result<(Tensor, GridAssignment)> {
    let g = grid_assign(coords, grid_size)?;
    let tape = Tape::new();
    let f = tape.constant(feats.clone());
    let pooled = tape.segment_mean(f, &g.assignment, g.num_voxels())?;
    let out = tape.value(pooled).clone();
    Ok((out, g))
}

/// `feats[i] = pooled[assignment[i]]`.
pub fn grid_unpool(pooled: &Tensor, assignment: &[usize]) -> Result<Tensor> {
    let tape = Tape::new();
    let p = tape.constant(pooled.clone());
    let y = grid_unpool_on(&tape, p, assignment)?;
    let out = tape.value(y).clone();
    Ok(out)
}

pub fn grid_unpool_on(tape: &Tape, pooled: Var, assignment: &[usize]) -> Result<Var> {
    let rows = tape.shape(pooled)[0];
    if let Some(&bad) = assignment.iter().find(|&&a| a >= rows) {
        return Err(contract(format!("assignment {bad} dangles past {rows} pooled rows")));
    }
    tape.gather_rows(pooled, assignment)
}

/// How one stage's point set maps to the next coarser one.
#[derive(Debug, Clone, PartialEq)]
pub enum Resampling {
    /// Coarse set = `selected` rows; coming back up interpolates from the
    /// `k_neighbors` nearest coarse points.
    Fps { selected: Vec<usize>, k_neighbors: usize },
    /// Coarse set = occupied voxels; coming back up is a gather.
    Grid(GridAssignment),
}

impl Resampling {
    pub fn fps(coords: &[Point], m: usize, k_neighbors: usize) -> Result<Self> {
        if k_neighbors == 0 {
            return Err(contract("interpolation needs k >= 1"));
        }
        Ok(Resampling::Fps {
            selected: fps(coords, m)?,
            k_neighbors,
        })
    }

    pub fn grid(coords: &[Point], grid_size: f64) -> Result<Self> {
        Ok(Resampling::Grid(grid_assign(coords, grid_size)?))
    }

    /// Number of points in the coarse set.
    pub fn output_len(&self) -> usize {
        match self {
            Resampling::Fps { selected, .. } => selected.len(),
            Resampling::Grid(g) => g.num_voxels(),
        }
    }

    pub fn coarse_coords(&self, fine: &[Point]) -> Vec<Point> {
        match self {
            Resampling::Fps { selected, .. } => selected.iter().map(|&i| fine[i]).collect(),
            Resampling::Grid(g) => g.pooled_coords.clone(),
        }
    }

    /// Fine features `[n, c]` to coarse features.
    pub fn down(&self, tape: &Tape, fine: Var) -> Result<Var> {
        match self {
            Resampling::Fps { selected, .. } => tape.gather_rows(fine, selected),
            Resampling::Grid(g) => tape.segment_mean(fine, &g.assignment, g.num_voxels()),
        }
    }

    /// Coarse features back onto the fine point set.
    pub fn up(&self, tape: &Tape, coarse: Var, coarse_coords: &[Point], fine_coords: &[Point]) -> Result<Var> {
        match self {
            Resampling::Fps { k_neighbors, .. } => interp_up_on(tape, coarse_coords, coarse, fine_coords, *k_neighbors),
            Resampling::Grid(g) => grid_unpool_on(tape, coarse, &g.assignment),
        }
    }
}
