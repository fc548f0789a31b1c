//! Synthetic ground-truth channel fields: log-distance path loss plus
//! exponentially correlated shadowing plus white fading, all in dB.
//!
//! Shadowing is drawn exactly from its multivariate Gaussian law through a
//! dense Cholesky factor of the correlation matrix. The factor depends only
//! on the grid shape and `d0`, so [`ShadowingSampler`] keeps it and reuses it
//! across seeds. Grids above [`DENSE_CELL_LIMIT`] must use
//! [`ShadowingMethod::Tiled`], which generates tiles in raster order, each
//! conditioned on the already generated cells within a halo around it.

use faer::prelude::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellIndex, GridSpec};
use crate::linalg::SpdFactor;

/// Largest grid (in cells) sampled with a single dense factorization.
pub const DENSE_CELL_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    /// Antenna-gain constant, dB.
    pub g0: f64,
    /// Path-loss exponent.
    pub eta: f64,
    /// Shadowing correlation distance in cells.
    pub d0: f64,
    /// Shadowing standard deviation, dB.
    pub sigma_psi: f64,
    /// Non-shadowing fading standard deviation, dB.
    pub sigma_zeta: f64,
    /// Base-station location in (fractional) cell units, (row, col).
    pub bs_position: (f64, f64),
}

impl FieldParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.g0, self.eta, self.d0, self.sigma_psi, self.sigma_zeta].iter().all(|v| v.is_finite());
        if !finite || !self.bs_position.0.is_finite() || !self.bs_position.1.is_finite() {
            return Err(Error::InvalidParameter("field parameters must be finite".into()));
        }
        if self.sigma_psi < 0.0 || self.sigma_zeta < 0.0 {
            return Err(Error::InvalidParameter("standard deviations must be non-negative".into()));
        }
        if self.d0 <= 0.0 {
            return Err(Error::InvalidParameter(format!("d0={} must be positive", self.d0)));
        }
        Ok(())
    }
}

/// Distance in meters between a cell center and the base station.
pub fn bs_distance(spec: &GridSpec, bs_position: (f64, f64), cell: CellIndex) -> f64 {
    let dr = cell.row as f64 - bs_position.0;
    let dc = cell.col as f64 - bs_position.1;
    spec.q * (dr * dr + dc * dc).sqrt()
}

/// Log-distance mean `g0 − 10·eta·log10 L`.
pub fn path_loss_db(g0: f64, eta: f64, distance_m: f64) -> f64 {
    g0 - 10.0 * eta * distance_m.log10()
}

/// Deterministic part of the channel at every cell.
pub fn mean_field(params: &FieldParams, spec: &GridSpec) -> Result<Array2<f64>> {
    params.validate()?;
    let (rows, cols) = spec.shape();
    let mut out = Array2::zeros((rows, cols));
    for ((r, c), v) in out.indexed_iter_mut() {
        let l = bs_distance(spec, params.bs_position, CellIndex::new(r, c));
        if l <= 0.0 {
            return Err(Error::ZeroDistance { row: r, col: c });
        }
        *v = path_loss_db(params.g0, params.eta, l);
    }
    Ok(out)
}

/// Exponential correlation `exp(−d/d0)` between two cells, d in cell units.
pub fn correlation(a: CellIndex, b: CellIndex, d0: f64) -> f64 {
    (-a.dist(b) / d0).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShadowingMethod {
    /// One dense factorization of the full correlation matrix.
    Dense,
    /// Sequential conditional simulation on `tile × tile` blocks, each
    /// conditioned on generated cells within `halo` cells of the block.
    Tiled { tile: usize, halo: usize },
}

impl ShadowingMethod {
    /// Dense when the grid fits under the limit, tiled otherwise.
    pub fn auto(spec: &GridSpec, d0: f64) -> Self {
        if spec.cell_count() <= DENSE_CELL_LIMIT {
            ShadowingMethod::Dense
        } else {
            ShadowingMethod::Tiled { tile: 32, halo: (3.0 * d0).ceil().max(1.0) as usize }
        }
    }
}

/// Reusable shadowing + fading generator for one (params, grid) pair.
pub struct ShadowingSampler {
    params: FieldParams,
    spec: GridSpec,
    method: ShadowingMethod,
    dense: Option<SpdFactor>,
}

impl ShadowingSampler {
    pub fn new(params: &FieldParams, spec: &GridSpec, method: ShadowingMethod) -> Result<Self> {
        params.validate()?;
        spec.validate()?;
        let (rows, cols) = spec.shape();
        let n = rows * cols;
        let dense = match method {
            ShadowingMethod::Dense if params.sigma_psi > 0.0 => {
                if n > DENSE_CELL_LIMIT {
                    return Err(Error::GridTooLarge { cells: n, limit: DENSE_CELL_LIMIT });
                }
                let cell = |k: usize| CellIndex::new(k / cols, k % cols);
                Some(SpdFactor::from_fn(n, 1.0, |i, j| correlation(cell(i), cell(j), params.d0))?)
            }
            ShadowingMethod::Dense => None,
            ShadowingMethod::Tiled { tile, .. } => {
                if tile == 0 {
                    return Err(Error::InvalidParameter("tile size must be positive".into()));
                }
                None
            }
        };
        Ok(ShadowingSampler { params: *params, spec: *spec, method, dense })
    }

    /// Shadowing plus fading realization `ψ + ζ` for `seed`.
    ///
    /// The first `H·W` standard normals from the seeded stream drive `ψ`
    /// and the next `H·W` drive `ζ`, so the fading draw does not depend on
    /// the shadowing parameters.
    pub fn sample(&self, seed: u64) -> Result<Array2<f64>> {
        let (rows, cols) = self.spec.shape();
        let n = rows * cols;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();

        let mut psi = vec![0.0; n];
        if self.params.sigma_psi > 0.0 {
            match self.method {
                ShadowingMethod::Dense => {
                    let l = self.dense.as_ref().expect("dense factor").lower();
                    for (i, out) in psi.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (j, zj) in z.iter().enumerate().take(i + 1) {
                            acc += l[(i, j)] * zj;
                        }
                        *out = acc;
                    }
                }
                ShadowingMethod::Tiled { tile, halo } => {
                    tiled_correlated(rows, cols, self.params.d0, tile, halo, &z, &mut psi)?;
                }
            }
        }
        let sp = self.params.sigma_psi;
        let sz = self.params.sigma_zeta;
        let field: Vec<f64> = psi.iter().zip(&w).map(|(p, w)| sp * p + sz * w).collect();
        Ok(Array2::from_shape_vec((rows, cols), field).expect("shape"))
    }
}

/// Unit-variance correlated field by raster-order conditional tiles.
fn tiled_correlated(rows: usize, cols: usize, d0: f64, tile: usize, halo: usize, z: &[f64], out: &mut [f64]) -> Result<()> {
    let mut cursor = 0;
    for r0 in (0..rows).step_by(tile) {
        for c0 in (0..cols).step_by(tile) {
            let r1 = (r0 + tile).min(rows);
            let c1 = (c0 + tile).min(cols);
            let block: Vec<CellIndex> = (r0..r1).flat_map(|r| (c0..c1).map(move |c| CellIndex::new(r, c))).collect();
            // already generated cells: earlier tile rows, or same tile row to the left
            let generated = |cell: CellIndex| cell.row < r0 || (cell.row < r1 && cell.col < c0);
            let cond: Vec<CellIndex> = (r0.saturating_sub(halo)..(r1 + halo).min(rows))
                .flat_map(|r| (c0.saturating_sub(halo)..(c1 + halo).min(cols)).map(move |c| CellIndex::new(r, c)))
                .filter(|&c| generated(c))
                .collect();

            let nb = block.len();
            let zb = &z[cursor..cursor + nb];
            cursor += nb;

            let (mean, cov) = if cond.is_empty() {
                (vec![0.0; nb], Mat::from_fn(nb, nb, |i, j| correlation(block[i], block[j], d0)))
            } else {
                let nc = cond.len();
                let cc = SpdFactor::from_fn(nc, 1.0, |i, j| correlation(cond[i], cond[j], d0))?;
                let xc: Vec<f64> = cond.iter().map(|c| out[c.row * cols + c.col]).collect();
                let alpha = cc.solve(&xc);
                let cross = Mat::from_fn(nb, nc, |i, j| correlation(block[i], cond[j], d0));
                let mean: Vec<f64> = (0..nb).map(|i| (0..nc).map(|j| cross[(i, j)] * alpha[j]).sum()).collect();
                // conditional covariance R_bb − R_bc R_cc⁻¹ R_cb
                let mut x = cross.transpose().to_owned();
                for k in 0..nb {
                    let col: Vec<f64> = (0..nc).map(|j| x[(j, k)]).collect();
                    let s = cc.solve(&col);
                    for (j, v) in s.into_iter().enumerate() {
                        x[(j, k)] = v;
                    }
                }
                let reduce = &cross * &x;
                let cov = Mat::from_fn(nb, nb, |i, j| correlation(block[i], block[j], d0) - reduce[(i, j)]);
                (mean, cov)
            };
            let factor = SpdFactor::new(cov, 1.0)?;
            let l = factor.lower();
            for i in 0..nb {
                let mut acc = mean[i];
                for (j, zj) in zb.iter().enumerate().take(i + 1) {
                    acc += l[(i, j)] * zj;
                }
                let c = block[i];
                out[c.row * cols + c.col] = acc;
            }
        }
    }
    Ok(())
}

/// Zero-mean shadowing + fading with the method chosen by grid size.
pub fn sample_shadowing(params: &FieldParams, spec: &GridSpec, seed: u64) -> Result<Array2<f64>> {
    let method = if spec.cell_count() <= DENSE_CELL_LIMIT {
        ShadowingMethod::Dense
    } else {
        return Err(Error::GridTooLarge { cells: spec.cell_count(), limit: DENSE_CELL_LIMIT });
    };
    ShadowingSampler::new(params, spec, method)?.sample(seed)
}

/// Full synthetic channel: `mean_field + ψ + ζ`.
pub fn synth_field(params: &FieldParams, spec: &GridSpec, seed: u64) -> Result<Array2<f64>> {
    Ok(mean_field(params, spec)? + sample_shadowing(params, spec, seed)?)
}

/// [`synth_field`] with an explicit, reusable sampler.
pub fn synth_field_with(sampler: &ShadowingSampler, seed: u64) -> Result<Array2<f64>> {
    Ok(mean_field(&sampler.params, &sampler.spec)? + sampler.sample(seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(sigma_psi: f64, sigma_zeta: f64, d0: f64) -> FieldParams {
        FieldParams { g0: 0.0, eta: 2.0, d0, sigma_psi, sigma_zeta, bs_position: (4.5, 4.5) }
    }

    #[test]
    fn path_loss_plug_in() {
        assert!((path_loss_db(0.0, 2.0, 10.0) + 20.0).abs() < 1e-12);
        let drop = path_loss_db(0.0, 2.0, 5.0) - path_loss_db(0.0, 2.0, 10.0);
        assert!((drop - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!((drop - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn mean_field_uses_meters() {
        let spec = GridSpec::with_shape(3, 3, 0.5).unwrap();
        let p = FieldParams { bs_position: (0.0, -20.0), ..params(0.0, 0.0, 1.0) };
        let m = mean_field(&p, &spec).unwrap();
        // cell (0, 0) is 20 cells = 10 m away
        assert!((m[[0, 0]] + 20.0).abs() < 1e-12);
    }

    #[test]
    fn mean_field_rejects_bs_on_cell() {
        let spec = GridSpec::with_shape(3, 3, 0.5).unwrap();
        let p = FieldParams { bs_position: (1.0, 1.0), ..params(1.0, 0.0, 1.0) };
        assert!(matches!(mean_field(&p, &spec), Err(Error::ZeroDistance { row: 1, col: 1 })));
    }

    #[test]
    fn zero_variances_give_zero_field() {
        let spec = GridSpec::with_shape(10, 10, 0.5).unwrap();
        let s = sample_shadowing(&params(0.0, 0.0, 3.0), &spec, 7).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        let f = synth_field(&params(0.0, 0.0, 3.0), &spec, 7).unwrap();
        assert_eq!(f, mean_field(&params(0.0, 0.0, 3.0), &spec).unwrap());
    }

    #[test]
    fn correlation_at_one_d0() {
        let a = CellIndex::new(0, 0);
        let b = CellIndex::new(3, 4);
        assert!((correlation(a, b, 5.0) - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn seeds_reproduce_and_differ() {
        let spec = GridSpec::with_shape(10, 10, 0.5).unwrap();
        let p = params(4.0, 1.0, 3.0);
        let a = synth_field(&p, &spec, 1).unwrap();
        assert_eq!(a, synth_field(&p, &spec, 1).unwrap());
        let b = synth_field(&p, &spec, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn large_grid_requires_tiling() {
        let spec = GridSpec::with_shape(101, 100, 0.5).unwrap();
        assert!(matches!(sample_shadowing(&params(1.0, 0.0, 2.0), &spec, 0), Err(Error::GridTooLarge { .. })));
    }

    #[test]
    fn invalid_params_rejected() {
        let spec = GridSpec::with_shape(4, 4, 0.5).unwrap();
        assert!(sample_shadowing(&params(-1.0, 0.0, 2.0), &spec, 0).is_err());
        assert!(sample_shadowing(&params(1.0, 0.0, 0.0), &spec, 0).is_err());
    }

    #[test]
    fn tiled_matches_dense_statistics() {
        // 24x24 with 8x8 tiles: the variance and lag-1 correlation of the
        // tiled draw should match the exact model closely.
        let spec = GridSpec::with_shape(24, 24, 0.5).unwrap();
        let p = params(1.0, 0.0, 3.0);
        let sampler = ShadowingSampler::new(&p, &spec, ShadowingMethod::Tiled { tile: 8, halo: 9 }).unwrap();
        let mut var = 0.0;
        let mut lag1 = 0.0;
        let mut n = 0.0;
        let mut n1 = 0.0;
        for seed in 0..40 {
            let f = sampler.sample(seed).unwrap();
            for r in 0..24 {
                for c in 0..24 {
                    var += f[[r, c]] * f[[r, c]];
                    n += 1.0;
                    if c + 1 < 24 {
                        lag1 += f[[r, c]] * f[[r, c + 1]];
                        n1 += 1.0;
                    }
                }
            }
        }
        let var = var / n;
        let rho = lag1 / n1 / var;
        assert!((var - 1.0).abs() < 0.15, "variance {var}");
        assert!((rho - (-1.0f64 / 3.0).exp()).abs() < 0.05, "lag-1 correlation {rho}");
    }
}
