//! Model-based interpolation: log-distance mean plus exponentially
//! correlated shadowing, predicted with the linear MMSE estimator over a
//! square neighborhood of valid cells.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_synth::{bs_distance, path_loss_db};
use crate::grid::{CellIndex, ChannelGrid};
use crate::linalg::{dot, SpdFactor};
use crate::par::{self, Parallelism};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpParams {
    pub g0: f64,
    pub eta: f64,
    /// Correlation distance in cells.
    pub d0: f64,
    /// σψ² + σζ², dB².
    pub total_var: f64,
    /// σψ² alone. `None` means σζ² = 0, i.e. σψ² = `total_var`.
    pub sigma_psi_sq: Option<f64>,
    /// Base-station location in cell units, (row, col).
    pub bs_position: (f64, f64),
}

impl GpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.total_var >= 0.0 && self.total_var.is_finite()) {
            return Err(Error::InvalidParameter(format!("total_var={} must be >= 0", self.total_var)));
        }
        if !(self.d0 > 0.0 && self.d0.is_finite()) {
            return Err(Error::InvalidParameter(format!("d0={} must be positive", self.d0)));
        }
        if let Some(s) = self.sigma_psi_sq {
            if !(0.0..=self.total_var).contains(&s) {
                return Err(Error::InvalidParameter(format!("sigma_psi_sq={s} must lie in [0, total_var={}]", self.total_var)));
            }
        }
        if !(self.g0.is_finite() && self.eta.is_finite()) {
            return Err(Error::InvalidParameter("path-loss parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn sigma_psi_sq(&self) -> f64 {
        self.sigma_psi_sq.unwrap_or(self.total_var)
    }

    /// Sets σψ² as a fraction of the total variance.
    pub fn with_psi_fraction(mut self, fraction: f64) -> Self {
        self.sigma_psi_sq = Some(self.total_var * fraction.clamp(0.0, 1.0));
        self
    }
}

/// Half-width `N_n` of the square prediction window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub n_range: usize,
}

impl Neighborhood {
    pub fn new(n_range: usize) -> Result<Self> {
        if n_range == 0 {
            return Err(Error::InvalidParameter("neighborhood range must be at least 1".into()));
        }
        Ok(Neighborhood { n_range })
    }
}

/// Least-squares fit of `(g0, eta)` to the valid entries.
pub fn fit_pathloss(grid: &ChannelGrid, bs_position: (f64, f64)) -> Result<(f64, f64)> {
    let spec = grid.spec();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (cell, y) in grid.valid_cells() {
        let l = bs_distance(spec, bs_position, cell);
        if l <= 0.0 {
            return Err(Error::ZeroDistance { row: cell.row, col: cell.col });
        }
        xs.push(-10.0 * l.log10());
        ys.push(y);
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::RankDeficient);
    }
    // Normal equations of the two-column design [1, -10 log10 l], solved
    // in centered form.
    let nf = n as f64;
    let x_mean = xs.iter().sum::<f64>() / nf;
    let y_mean = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_mean) * (y - y_mean)).sum();
    if sxx <= 1e-20 * nf * (1.0 + x_mean * x_mean) {
        return Err(Error::RankDeficient);
    }
    let eta = sxy / sxx;
    let g0 = y_mean - eta * x_mean;
    Ok((g0, eta))
}

/// Fading residuals of the valid cells after removing the fitted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub cells: Vec<(CellIndex, f64)>,
    /// Population variance of the residuals (divide by V).
    pub total_var: f64,
}

pub fn residual_fading(grid: &ChannelGrid, g0: f64, eta: f64, bs_position: (f64, f64)) -> Result<Residuals> {
    let spec = grid.spec();
    let mut cells = Vec::with_capacity(grid.valid_count());
    for (cell, y) in grid.valid_cells() {
        let l = bs_distance(spec, bs_position, cell);
        if l <= 0.0 {
            return Err(Error::ZeroDistance { row: cell.row, col: cell.col });
        }
        cells.push((cell, y - g0 + 10.0 * eta * l.log10()));
    }
    if cells.is_empty() {
        return Err(Error::NoValidEntries);
    }
    let n = cells.len() as f64;
    let mean = cells.iter().map(|c| c.1).sum::<f64>() / n;
    let total_var = cells.iter().map(|c| (c.1 - mean).powi(2)).sum::<f64>() / n;
    Ok(Residuals { cells, total_var })
}

/// One MMSE prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    /// Predicted channel, dB.
    pub value: f64,
    /// Minimum MSE of the prediction, dB².
    pub mse: f64,
    /// Number of valid cells in the window used for the prediction.
    pub neighbors: usize,
    /// No valid cell in the window; the value is the path-loss mean.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Every valid cell in the window is used, including the target if valid.
    Standard,
    /// The target's own entry is excluded.
    LeaveOneOut,
}

/// exp(−d/d0) for all lattice offsets up to the grid extent.
struct CorrTable {
    cols: usize,
    table: Vec<f64>,
}

impl CorrTable {
    fn new(d0: f64, max_dr: usize, max_dc: usize) -> Self {
        let cols = max_dc + 1;
        let mut table = Vec::with_capacity((max_dr + 1) * cols);
        for dr in 0..=max_dr {
            for dc in 0..=max_dc {
                let d = ((dr * dr + dc * dc) as f64).sqrt();
                table.push((-d / d0).exp());
            }
        }
        CorrTable { cols, table }
    }

    fn get(&self, a: CellIndex, b: CellIndex) -> f64 {
        self.table[a.row.abs_diff(b.row) * self.cols + a.col.abs_diff(b.col)]
    }
}

/// Shared state for predicting many cells of one grid.
struct Predictor<'a> {
    grid: &'a ChannelGrid,
    params: GpParams,
    nbhd: Neighborhood,
    mean: Array2<f64>,
    corr: CorrTable,
}

impl<'a> Predictor<'a> {
    fn new(grid: &'a ChannelGrid, params: &GpParams, nbhd: Neighborhood) -> Result<Self> {
        params.validate()?;
        if nbhd.n_range == 0 {
            return Err(Error::InvalidParameter("neighborhood range must be at least 1".into()));
        }
        let (rows, cols) = grid.shape();
        let spec = grid.spec();
        let mut mean = Array2::zeros((rows, cols));
        for ((r, c), u) in mean.indexed_iter_mut() {
            let l = bs_distance(spec, params.bs_position, CellIndex::new(r, c));
            if l <= 0.0 {
                return Err(Error::ZeroDistance { row: r, col: c });
            }
            *u = path_loss_db(params.g0, params.eta, l);
        }
        let reach = 2 * nbhd.n_range;
        let corr = CorrTable::new(params.d0, reach.min(rows - 1), reach.min(cols - 1));
        Ok(Predictor { grid, params: *params, nbhd, mean, corr })
    }

    fn window(&self, target: CellIndex, mode: PredictMode) -> Vec<CellIndex> {
        let (rows, cols) = self.grid.shape();
        let n = self.nbhd.n_range;
        let r0 = target.row.saturating_sub(n);
        let r1 = (target.row + n).min(rows - 1);
        let c0 = target.col.saturating_sub(n);
        let c1 = (target.col + n).min(cols - 1);
        let mut out = Vec::new();
        for r in r0..=r1 {
            for c in c0..=c1 {
                let cell = CellIndex::new(r, c);
                if !self.grid.is_valid(cell) || (mode == PredictMode::LeaveOneOut && cell == target) {
                    continue;
                }
                out.push(cell);
            }
        }
        out
    }

    fn predict(&self, target: CellIndex, mode: PredictMode) -> Result<Prediction> {
        let (rows, cols) = self.grid.shape();
        if target.row >= rows || target.col >= cols {
            return Err(Error::Shape(format!("target {target:?} outside {rows}x{cols} grid")));
        }
        let u = self.mean[[target.row, target.col]];
        let total = self.params.total_var;
        let psi = self.params.sigma_psi_sq();
        let nbrs = self.window(target, mode);
        if nbrs.is_empty() || psi == 0.0 {
            return Ok(Prediction { value: u, mse: total, neighbors: nbrs.len(), fallback: nbrs.is_empty() });
        }
        let n = nbrs.len();
        let factor = SpdFactor::from_fn(n, total, |i, j| if i == j { total } else { psi * self.corr.get(nbrs[i], nbrs[j]) })?;
        let a: Vec<f64> = nbrs.iter().map(|&b| psi * self.corr.get(target, b)).collect();
        let s = factor.solve(&a);
        let resid: Vec<f64> = nbrs.iter().map(|b| self.grid.values()[[b.row, b.col]] - self.mean[[b.row, b.col]]).collect();
        let value = dot(&s, &resid) + u;
        let mse = (total - dot(&a, &s)).clamp(0.0, total);
        Ok(Prediction { value, mse, neighbors: n, fallback: false })
    }
}

/// MMSE prediction of `target` from the valid cells in its window.
pub fn mmse_predict(grid: &ChannelGrid, params: &GpParams, nbhd: Neighborhood, target: CellIndex) -> Result<Prediction> {
    Predictor::new(grid, params, nbhd)?.predict(target, PredictMode::Standard)
}

/// Leave-one-out variant: the target's own entry is not used.
pub fn mmse_predict_loo(grid: &ChannelGrid, params: &GpParams, nbhd: Neighborhood, target: CellIndex) -> Result<Prediction> {
    Predictor::new(grid, params, nbhd)?.predict(target, PredictMode::LeaveOneOut)
}

/// Minimum MSE `σψ² + σζ² − aᵀ C⁻¹ a` of the windowed predictor at `target`.
pub fn predict_mse(params: &GpParams, nbhd: Neighborhood, target: CellIndex, grid: &ChannelGrid) -> Result<f64> {
    Ok(mmse_predict(grid, params, nbhd, target)?.mse)
}

/// Lattice of candidate correlation distances, in cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct D0Search {
    pub d_min: f64,
    pub d_max: f64,
    pub step: f64,
}

impl Default for D0Search {
    fn default() -> Self {
        D0Search { d_min: 1.0, d_max: 50.0, step: 1.0 }
    }
}

impl D0Search {
    pub fn candidates(&self) -> Vec<f64> {
        if !(self.d_min > 0.0 && self.step > 0.0 && self.d_max >= self.d_min) {
            return Vec::new();
        }
        let count = ((self.d_max - self.d_min) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|k| self.d_min + k as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct D0Fit {
    pub d0: f64,
    /// `(candidate, mean squared leave-one-out error)` for every candidate.
    pub curve: Vec<(f64, f64)>,
}

/// Mean squared leave-one-out prediction error over all valid cells.
pub fn loo_mse(grid: &ChannelGrid, params: &GpParams, nbhd: Neighborhood) -> Result<f64> {
    loo_mse_with(grid, params, nbhd, Parallelism::default())
}

pub fn loo_mse_with(grid: &ChannelGrid, params: &GpParams, nbhd: Neighborhood, par: Parallelism) -> Result<f64> {
    let predictor = Predictor::new(grid, params, nbhd)?;
    let cells: Vec<(CellIndex, f64)> = grid.valid_cells().collect();
    if cells.is_empty() {
        return Err(Error::NoValidEntries);
    }
    let errs = par::map_range(par, cells.len(), |i| {
        let (cell, y) = cells[i];
        predictor.predict(cell, PredictMode::LeaveOneOut).map(|p| (p.value - y).powi(2))
    });
    let mut sum = 0.0;
    for e in errs {
        sum += e?;
    }
    Ok(sum / cells.len() as f64)
}

/// One-dimensional search for the correlation distance minimizing the
/// leave-one-out MSE. `base.d0` is ignored. Ties resolve to the smaller d0.
pub fn fit_d0(grid: &ChannelGrid, base: &GpParams, nbhd: Neighborhood, search: &D0Search) -> Result<D0Fit> {
    fit_d0_with(grid, base, nbhd, search, Parallelism::default())
}

pub fn fit_d0_with(grid: &ChannelGrid, base: &GpParams, nbhd: Neighborhood, search: &D0Search, par: Parallelism) -> Result<D0Fit> {
    let candidates = search.candidates();
    if candidates.is_empty() {
        return Err(Error::InvalidParameter(format!("empty d0 search lattice {search:?}")));
    }
    let mut curve = Vec::with_capacity(candidates.len());
    let mut best = (f64::INFINITY, candidates[0]);
    for d0 in candidates {
        let mse = loo_mse_with(grid, &GpParams { d0, ..*base }, nbhd, par)?;
        if mse < best.0 {
            best = (mse, d0);
        }
        curve.push((d0, mse));
    }
    Ok(D0Fit { d0: best.1, curve })
}

/// Full parameter estimation: path loss, residual variance, then d0.
/// `psi_fraction` is σψ²/(σψ²+σζ²); `None` assumes σζ² = 0.
pub fn fit_gp(
    grid: &ChannelGrid,
    bs_position: (f64, f64),
    nbhd: Neighborhood,
    search: &D0Search,
    psi_fraction: Option<f64>,
) -> Result<GpParams> {
    let (g0, eta) = fit_pathloss(grid, bs_position)?;
    let res = residual_fading(grid, g0, eta, bs_position)?;
    let mut params =
        GpParams { g0, eta, d0: search.d_min.max(f64::MIN_POSITIVE), total_var: res.total_var, sigma_psi_sq: None, bs_position };
    if let Some(f) = psi_fraction {
        params = params.with_psi_fraction(f);
    }
    let fit = fit_d0(grid, &params, nbhd, search)?;
    params.d0 = fit.d0;
    Ok(params)
}

/// A completed grid with per-cell predicted MSE.
#[derive(Debug, Clone, PartialEq)]
pub struct GpInterpolation {
    pub grid: ChannelGrid,
    /// Predicted MSE; 0 on originally valid cells.
    pub mse: Array2<f64>,
    /// Cells filled with the path-loss mean because their window was empty.
    pub fallback: Array2<bool>,
}

impl GpInterpolation {
    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }
}

/// Fills every invalid cell with its windowed MMSE prediction.
pub fn gp_interpolate(grid: &ChannelGrid, params: &GpParams, nbhd: Neighborhood) -> Result<GpInterpolation> {
    gp_interpolate_with(grid, params, nbhd, Parallelism::default())
}

pub fn gp_interpolate_with(grid: &ChannelGrid, params: &GpParams, nbhd: Neighborhood, par: Parallelism) -> Result<GpInterpolation> {
    let predictor = Predictor::new(grid, params, nbhd)?;
    let (rows, cols) = grid.shape();
    let preds = par::map_range(par, rows * cols, |k| {
        let cell = CellIndex::new(k / cols, k % cols);
        if grid.is_valid(cell) {
            Ok(None)
        } else {
            predictor.predict(cell, PredictMode::Standard).map(Some)
        }
    });
    let mut values = grid.values().clone();
    let mut mse = Array2::zeros((rows, cols));
    let mut fallback = Array2::from_elem((rows, cols), false);
    for (k, p) in preds.into_iter().enumerate() {
        if let Some(p) = p? {
            let (r, c) = (k / cols, k % cols);
            values[[r, c]] = p.value;
            mse[[r, c]] = p.mse;
            fallback[[r, c]] = p.fallback;
        }
    }
    Ok(GpInterpolation { grid: ChannelGrid::complete(*grid.spec(), values)?, mse, fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_synth::{mean_field, FieldParams};
    use crate::grid::GridSpec;

    fn sparse(shape: (usize, usize), q: f64, cells: &[((usize, usize), f64)]) -> ChannelGrid {
        let spec = GridSpec::with_shape(shape.0, shape.1, q).unwrap();
        let mut values = Array2::zeros(shape);
        let mut mask = Array2::from_elem(shape, false);
        for &((r, c), v) in cells {
            values[[r, c]] = v;
            mask[[r, c]] = true;
        }
        ChannelGrid::from_parts(spec, values, mask).unwrap()
    }

    fn params(total: f64, psi: Option<f64>, d0: f64) -> GpParams {
        GpParams { g0: 0.0, eta: 0.0, d0, total_var: total, sigma_psi_sq: psi, bs_position: (-10.5, -10.5) }
    }

    #[test]
    fn pathloss_recovered_from_noiseless_field() {
        let spec = GridSpec::with_shape(12, 12, 0.5).unwrap();
        let fp = FieldParams { g0: 5.0, eta: 3.0, d0: 1.0, sigma_psi: 0.0, sigma_zeta: 0.0, bs_position: (5.5, 5.5) };
        let m = mean_field(&fp, &spec).unwrap();
        let g = ChannelGrid::complete(spec, m).unwrap();
        let (g0, eta) = fit_pathloss(&g, fp.bs_position).unwrap();
        assert!((g0 - 5.0).abs() < 1e-9 && (eta - 3.0).abs() < 1e-9, "{g0} {eta}");

        let res = residual_fading(&g, g0, eta, fp.bs_position).unwrap();
        assert!(res.cells.iter().all(|c| c.1.abs() < 1e-9));
        assert!(res.total_var < 1e-18);
    }

    #[test]
    fn equidistant_samples_are_rank_deficient() {
        let g = sparse((5, 5), 1.0, &[((0, 2), -1.0), ((2, 0), -2.0), ((4, 2), -3.0), ((2, 4), -4.0)]);
        assert!(matches!(fit_pathloss(&g, (2.0, 2.0)), Err(Error::RankDeficient)));
        let one = sparse((5, 5), 1.0, &[((0, 2), -1.0)]);
        assert!(matches!(fit_pathloss(&one, (2.5, 2.5)), Err(Error::RankDeficient)));
    }

    #[test]
    fn two_point_population_variance() {
        // eta = 0, g0 = 0 → residuals are the raw values
        let g = sparse((3, 3), 1.0, &[((0, 0), 2.0), ((2, 2), -2.0)]);
        let res = residual_fading(&g, 0.0, 0.0, (1.5, 1.5)).unwrap();
        assert_eq!(res.total_var, 4.0);
    }

    #[test]
    fn single_neighbor_closed_form() {
        // total 5, psi 4, neighbor at distance 2 (same row), d0 = 3
        let g = sparse((1, 5), 1.0, &[((0, 2), 1.7)]);
        let p = params(5.0, Some(4.0), 3.0);
        let pred = mmse_predict(&g, &p, Neighborhood::new(2).unwrap(), CellIndex::new(0, 0)).unwrap();
        // u is identically 0 since eta = 0 and g0 = 0
        let expected = 4.0 * (-2.0f64 / 3.0).exp() / 5.0 * 1.7;
        assert!((pred.value - expected).abs() < 1e-12);
        let mse_expected = 5.0 - (4.0 * (-2.0f64 / 3.0).exp()).powi(2) / 5.0;
        assert!((pred.mse - mse_expected).abs() < 1e-12);
        assert!(!pred.fallback);
    }

    #[test]
    fn zero_shadowing_variance_returns_mean() {
        let g = sparse((4, 4), 1.0, &[((0, 1), 3.0), ((2, 2), -1.0)]);
        let p = GpParams { g0: 1.5, ..params(2.0, Some(0.0), 2.0) };
        let pred = mmse_predict(&g, &p, Neighborhood::new(3).unwrap(), CellIndex::new(1, 1)).unwrap();
        assert_eq!(pred.value, 1.5);
        assert_eq!(pred.mse, 2.0);
    }

    #[test]
    fn empty_window_falls_back_to_mean() {
        let g = sparse((10, 10), 1.0, &[((9, 9), 3.0)]);
        let p = params(2.0, None, 2.0);
        let pred = mmse_predict(&g, &p, Neighborhood::new(2).unwrap(), CellIndex::new(0, 0)).unwrap();
        assert!(pred.fallback);
        assert_eq!(pred.value, 0.0);
        assert_eq!(pred.mse, 2.0);
        let full = gp_interpolate(&g, &p, Neighborhood::new(2).unwrap()).unwrap();
        assert!(full.fallback[[0, 0]] && !full.fallback[[8, 8]]);
    }

    #[test]
    fn perfect_correlation_gives_zero_mse() {
        // the target itself is valid: a neighbor at distance 0, σζ² = 0
        let g = sparse((3, 3), 1.0, &[((1, 1), 4.0)]);
        let p = params(3.0, None, 2.0);
        let mse = predict_mse(&p, Neighborhood::new(1).unwrap(), CellIndex::new(1, 1), &g).unwrap();
        assert!(mse.abs() < 1e-12);
    }

    #[test]
    fn leave_one_out_excludes_target() {
        let g = sparse((3, 3), 1.0, &[((1, 1), 4.0)]);
        let p = params(3.0, None, 2.0);
        let pred = mmse_predict_loo(&g, &p, Neighborhood::new(1).unwrap(), CellIndex::new(1, 1)).unwrap();
        assert!(pred.fallback);
    }

    #[test]
    fn interpolation_keeps_valid_cells() {
        let g = sparse((5, 5), 1.0, &[((0, 0), 1.0), ((3, 1), -2.0), ((4, 4), 0.5)]);
        let out = gp_interpolate(&g, &params(2.0, None, 1.5), Neighborhood::new(2).unwrap()).unwrap();
        for (cell, v) in g.valid_cells() {
            assert_eq!(out.grid.get(cell), Some(v));
            assert_eq!(out.mse[[cell.row, cell.col]], 0.0);
        }
        assert_eq!(out.grid.valid_count(), 25);
    }

    #[test]
    fn search_lattice() {
        assert_eq!(D0Search::default().candidates().len(), 50);
        let s = D0Search { d_min: 0.5, d_max: 2.0, step: 0.5 };
        assert_eq!(s.candidates(), vec![0.5, 1.0, 1.5, 2.0]);
        let empty = D0Search { d_min: 3.0, d_max: 2.0, step: 1.0 };
        assert!(empty.candidates().is_empty());
        let g = sparse((3, 3), 1.0, &[((0, 0), 1.0), ((2, 2), 2.0)]);
        assert!(fit_d0(&g, &params(1.0, None, 1.0), Neighborhood::new(1).unwrap(), &empty).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(params(-1.0, None, 1.0).validate().is_err());
        assert!(params(1.0, None, 0.0).validate().is_err());
        assert!(params(1.0, Some(2.0), 1.0).validate().is_err());
        assert!(Neighborhood::new(0).is_err());
    }
}
