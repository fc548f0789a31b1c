//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use chandb::convnet::{ConvNet, Layer};
use chandb::gp_model::GpParams;
use chandb::grid::{CellIndex, ChannelGrid, GridSpec};
use chandb::knn::Weighting;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random grid with roughly `fraction` valid cells (at least one).
pub fn random_grid(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fraction: f64, q: f64) -> ChannelGrid {
    let spec = GridSpec::with_shape(rows, cols, q).unwrap();
    let values = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-110.0..-40.0));
    let mut mask = Array2::from_shape_fn((rows, cols), |_| rng.random_bool(fraction));
    if !mask.iter().any(|&m| m) {
        mask[[rng.random_range(0..rows), rng.random_range(0..cols)]] = true;
    }
    ChannelGrid::from_parts(spec, values, mask).unwrap()
}

/// Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let m = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= m * a[k][j];
            }
            b[i] -= m * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

fn euclid(a: CellIndex, b: CellIndex) -> f64 {
    let dr = a.row as f64 - b.row as f64;
    let dc = a.col as f64 - b.col as f64;
    (dr * dr + dc * dc).sqrt()
}

pub fn mean_at(grid: &ChannelGrid, p: &GpParams, c: CellIndex) -> f64 {
    let q = grid.spec().q;
    let dr = c.row as f64 - p.bs_position.0;
    let dc = c.col as f64 - p.bs_position.1;
    p.g0 - 10.0 * p.eta * (q * (dr * dr + dc * dc).sqrt()).log10()
}

/// Conditional mean and variance of `target` given every valid cell.
pub fn dense_mmse(grid: &ChannelGrid, p: &GpParams, target: CellIndex) -> (f64, f64) {
    let cells: Vec<CellIndex> = grid.valid_cells().map(|(c, _)| c).collect();
    let psi = p.sigma_psi_sq.unwrap_or(p.total_var);
    let cov = |a: CellIndex, b: CellIndex| {
        if a == b {
            p.total_var
        } else {
            psi * (-euclid(a, b) / p.d0).exp()
        }
    };
    let c: Vec<Vec<f64>> = cells.iter().map(|&a| cells.iter().map(|&b| cov(a, b)).collect()).collect();
    let a: Vec<f64> = cells.iter().map(|&b| psi * (-euclid(target, b) / p.d0).exp()).collect();
    let resid: Vec<f64> = cells.iter().map(|&b| grid.values()[[b.row, b.col]] - mean_at(grid, p, b)).collect();
    let w = gauss_solve(c.clone(), resid);
    let s = gauss_solve(c, a.clone());
    let value = mean_at(grid, p, target) + a.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>();
    let mse = p.total_var - a.iter().zip(&s).map(|(x, y)| x * y).sum::<f64>();
    (value, mse)
}

/// Exhaustive KNN: every valid cell is ranked by (squared distance, row,
/// col) and the first `k` are averaged. One result per `(k, weighting)`.
pub fn brute_knn_many(grid: &ChannelGrid, configs: &[(usize, Weighting)]) -> Vec<Array2<f64>> {
    let cells: Vec<(CellIndex, f64)> = grid.valid_cells().collect();
    let kmax = configs.iter().map(|c| c.0).max().unwrap_or(0).min(cells.len());
    let mut outs = vec![grid.values().clone(); configs.len()];
    let mut all = Vec::with_capacity(cells.len());
    for ((r, c), &m) in grid.mask().indexed_iter() {
        if m {
            continue;
        }
        all.clear();
        all.extend(cells.iter().map(|&(b, val)| {
            let d2 = (b.row as i64 - r as i64).pow(2) + (b.col as i64 - c as i64).pow(2);
            (d2 as usize, b.row, b.col, val)
        }));
        let key = |e: &(usize, usize, usize, f64)| (e.0, e.1, e.2);
        if kmax < all.len() {
            all.select_nth_unstable_by_key(kmax, key);
        }
        all[..kmax].sort_by_key(key);
        for (out, &(k, weighting)) in outs.iter_mut().zip(configs) {
            let (mut num, mut den) = (0.0, 0.0);
            for &(d2, _, _, val) in all.iter().take(k.min(kmax)) {
                let w = match weighting {
                    Weighting::Uniform => 1.0,
                    Weighting::InverseDistance => 1.0 / (d2 as f64).sqrt(),
                };
                num += w * val;
                den += w;
            }
            out[[r, c]] = num / den;
        }
    }
    outs
}

pub fn brute_knn(grid: &ChannelGrid, k: usize, weighting: Weighting) -> Array2<f64> {
    brute_knn_many(grid, &[(k, weighting)]).pop().unwrap()
}

/// Dense conditional mean of every cell of `eval` given all valid cells,
/// solved by Gaussian elimination.
pub fn dense_mmse_field(grid: &ChannelGrid, p: &GpParams, eval: &Array2<bool>) -> Array2<f64> {
    let cells: Vec<CellIndex> = grid.valid_cells().map(|(c, _)| c).collect();
    let psi = p.sigma_psi_sq.unwrap_or(p.total_var);
    let c: Vec<Vec<f64>> = cells
        .iter()
        .map(|&a| cells.iter().map(|&b| if a == b { p.total_var } else { psi * (-euclid(a, b) / p.d0).exp() }).collect())
        .collect();
    let resid: Vec<f64> = cells.iter().map(|&b| grid.values()[[b.row, b.col]] - mean_at(grid, p, b)).collect();
    let w = gauss_solve(c, resid);
    let mut out = grid.values().clone();
    for ((r, col), &m) in eval.indexed_iter() {
        if m {
            let t = CellIndex::new(r, col);
            let s: f64 = cells.iter().zip(&w).map(|(&b, wi)| psi * (-euclid(t, b) / p.d0).exp() * wi).sum();
            out[[r, col]] = mean_at(grid, p, t) + s;
        }
    }
    out
}

/// Direct nested-loop valid convolution of one layer.
pub fn naive_layer(l: &Layer, x: &Array3<f64>, relu: bool) -> Array3<f64> {
    let (tin, h, w) = x.dim();
    assert_eq!(tin, l.tiers_in);
    let f = l.spec.filter_size;
    let s = l.spec.stride;
    let ho = (h - f) / s + 1;
    let wo = (w - f) / s + 1;
    let mut out = Array3::zeros((l.spec.tiers_out, ho, wo));
    for t in 0..l.spec.tiers_out {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = l.bias[t];
                for ti in 0..tin {
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += l.weight(t, ti, dy, dx) * x[[ti, i * s + dy, j * s + dx]];
                        }
                    }
                }
                out[[t, i, j]] = if relu { acc.max(0.0) } else { acc };
            }
        }
    }
    out
}

pub fn naive_forward(net: &ConvNet, x: &Array3<f64>) -> Array2<f64> {
    let n = net.layers().len();
    let mut cur = x.clone();
    for (i, l) in net.layers().iter().enumerate() {
        let relu = i + 1 < n || net.final_relu();
        cur = naive_layer(l, &cur, relu);
    }
    cur.index_axis_move(ndarray::Axis(0), 0)
}

/// Masked squared-error sum recomputed from scratch.
pub fn loss_sum(net: &ConvNet, x: &Array3<f64>, truth: &Array2<f64>, mask: &Array2<bool>) -> f64 {
    let out = net.forward(x).unwrap();
    out.indexed_iter().filter(|(ix, _)| mask[*ix]).map(|(ix, &o)| (o - truth[ix]).powi(2)).sum()
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter, with `|a−n| / max(|a|, |n|, floor)`.
pub fn gradient_check(net: &ConvNet, x: &Array3<f64>, truth: &Array2<f64>, mask: &Array2<bool>, h: f64, floor: f64) -> (f64, usize) {
    let (_, grads) = net.backward(x, truth, mask).unwrap();
    let analytic: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().copied()).collect();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let mut k = 0;
    let sizes = net.param_sizes();
    for (block, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let orig = probe.params_mut()[block][i];
            probe.params_mut()[block][i] = orig + h;
            let up = loss_sum(&probe, x, truth, mask);
            probe.params_mut()[block][i] = orig - h;
            let down = loss_sum(&probe, x, truth, mask);
            probe.params_mut()[block][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            k += 1;
        }
    }
    (worst, k)
}

/// RMSE by an explicit loop.
pub fn loop_rmse(pred: &Array2<f64>, truth: &Array2<f64>, mask: &Array2<bool>) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for r in 0..pred.nrows() {
        for c in 0..pred.ncols() {
            if mask[[r, c]] {
                s += (pred[[r, c]] - truth[[r, c]]).powi(2);
                n += 1;
            }
        }
    }
    (s / n as f64).sqrt()
}

/// Zero-initialized biases leave pre-activations exactly on the ReLU kink
/// wherever an upstream layer is dead; central differences are one-sided
/// there. Small random biases move the check point off the kink.
pub fn jitter_biases(net: &mut ConvNet, rng: &mut ChaCha8Rng) {
    for (block, p) in net.params_mut().into_iter().enumerate() {
        if block % 2 == 1 {
            p.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
}
