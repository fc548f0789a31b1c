//! K-nearest-neighbor completion of a channel grid, also the coarse first
//! stage of the two-step method. Neighbors are found with an expanding square-ring search over
//! the lattice; distances are compared as exact integer squared distances
//! with ties broken by (row, col).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellIndex, ChannelGrid};
use crate::par::{self, Parallelism};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    Uniform,
    InverseDistance,
}

impl FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "distance" | "inverse-distance" => Ok(Weighting::InverseDistance),
            other => Err(Error::InvalidParameter(format!("unknown weighting {other:?}"))),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Uniform => "uniform",
            Weighting::InverseDistance => "distance",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub weighting: Weighting,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 5, weighting: Weighting::InverseDistance }
    }
}

impl KnnConfig {
    pub fn new(k: usize, weighting: Weighting) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        Ok(KnnConfig { k, weighting })
    }
}

/// Nearest valid cells of a target, closest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors {
    /// `(cell, squared distance in cells)`.
    pub cells: Vec<(CellIndex, usize)>,
    /// Fewer than `k` valid cells existed.
    pub short: bool,
}

impl Neighbors {
    pub fn distances(&self) -> impl Iterator<Item = (CellIndex, f64)> + '_ {
        self.cells.iter().map(|&(c, d2)| (c, (d2 as f64).sqrt()))
    }
}

fn ring(target: CellIndex, rho: usize, rows: usize, cols: usize, mut visit: impl FnMut(CellIndex)) {
    let (tr, tc) = (target.row as isize, target.col as isize);
    let rho = rho as isize;
    let in_bounds = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols;
    for r in (tr - rho)..=(tr + rho) {
        if (r - tr).abs() == rho {
            for c in (tc - rho)..=(tc + rho) {
                if in_bounds(r, c) {
                    visit(CellIndex::new(r as usize, c as usize));
                }
            }
        } else {
            for c in [tc - rho, tc + rho] {
                if in_bounds(r, c) {
                    visit(CellIndex::new(r as usize, c as usize));
                }
            }
        }
    }
}

/// The `k` valid cells closest to `target` in Euclidean cell distance.
/// Returns all valid cells, flagged `short`, when fewer than `k` exist.
pub fn nearest_valid(grid: &ChannelGrid, target: CellIndex, k: usize) -> Result<Neighbors> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let (rows, cols) = grid.shape();
    if target.row >= rows || target.col >= cols {
        return Err(Error::Shape(format!("target {target:?} outside {rows}x{cols} grid")));
    }
    let key = |&(c, d2): &(CellIndex, usize)| (d2, c.row, c.col);
    let mut found: Vec<(CellIndex, usize)> = Vec::new();
    let max_rho = rows.max(cols);
    for rho in 0..=max_rho {
        ring(target, rho, rows, cols, |c| {
            if grid.is_valid(c) {
                found.push((c, c.dist2(target)));
            }
        });
        if found.len() >= k {
            found.sort_by_key(key);
            // every cell on a later ring is at least rho + 1 away
            if found[k - 1].1 < (rho + 1) * (rho + 1) {
                break;
            }
        }
    }
    found.sort_by_key(key);
    let short = found.len() < k;
    found.truncate(k);
    Ok(Neighbors { cells: found, short })
}

/// Weighted mean of the neighbor values.
pub fn weighted_mean(grid: &ChannelGrid, neighbors: &Neighbors, weighting: Weighting) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (cell, d) in neighbors.distances() {
        let w = match weighting {
            Weighting::Uniform => 1.0,
            Weighting::InverseDistance => {
                debug_assert!(d > 0.0, "inverse-distance weight at zero distance");
                1.0 / d
            }
        };
        num += w * grid.values()[[cell.row, cell.col]];
        den += w;
    }
    num / den
}

/// Fills every invalid cell with the weighted mean of its `k` nearest valid
/// cells. Valid cells are copied through. The result is fully valid; callers
/// keep the input grid when they need the original mask.
pub fn knn_fill(grid: &ChannelGrid, cfg: &KnnConfig) -> Result<ChannelGrid> {
    knn_fill_with(grid, cfg, Parallelism::default())
}

pub fn knn_fill_with(grid: &ChannelGrid, cfg: &KnnConfig, par: Parallelism) -> Result<ChannelGrid> {
    if cfg.k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if grid.valid_count() == 0 {
        return Err(Error::NoValidEntries);
    }
    let (rows, cols) = grid.shape();
    let mut values = grid.values().clone();
    let slice = values.as_slice_mut().expect("standard layout");
    par::for_each_chunk_mut(par, slice, cols, |r, row| {
        for (c, v) in row.iter_mut().enumerate() {
            let cell = CellIndex::new(r, c);
            if grid.is_valid(cell) {
                continue;
            }
            let nb = nearest_valid(grid, cell, cfg.k).expect("k checked above");
            *v = weighted_mean(grid, &nb, cfg.weighting);
        }
    });
    debug_assert_eq!(values.dim(), (rows, cols));
    ChannelGrid::complete(*grid.spec(), values)
}
