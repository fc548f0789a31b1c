//! End-to-end experiments: the two-step method, the comparison baselines,
//! RMSE evaluation and structure sweeps.

mod eval;
mod fullnn;
mod two_step;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use eval::{evaluate, EvalReport};
pub use fullnn::{fullnn_baseline, Mlp, MlpConfig};
pub use two_step::{
    assemble, network_input, two_step_interpolate, two_step_interpolate_with, two_step_train, two_step_train_with, LossRecord,
    Normalization, TrainConfig, TrainOutcome, TrainedModel, TwoStepResult,
};

use crate::convnet::NetStructure;
use crate::error::{Error, Result};
use crate::field_synth::{FieldParams, ShadowingMethod, ShadowingSampler};
use crate::gp_model::{fit_gp, gp_interpolate, D0Search, GpParams, Neighborhood};
use crate::grid::{CellIndex, ChannelGrid, GridSpec};
use crate::knn::{knn_fill, KnnConfig, Weighting};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    Gp,
    KnnUniform,
    KnnDistance,
    TwoStep,
    FullNnBaseline,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Gp, Method::KnnUniform, Method::KnnDistance, Method::TwoStep, Method::FullNnBaseline];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Gp => "gp",
            Method::KnnUniform => "knn-uniform",
            Method::KnnDistance => "knn-distance",
            Method::TwoStep => "two-step",
            Method::FullNnBaseline => "fullnn-baseline",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Observed grid, ground truth and the cells to score.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: ChannelGrid,
    pub truth: Array2<f64>,
    pub eval_mask: Array2<bool>,
    pub bs_position: (f64, f64),
}

impl Dataset {
    /// Observes `round(valid_fraction · H·W)` random cells of `truth`; the
    /// rest become the evaluation set.
    pub fn sample_from_truth(spec: GridSpec, truth: Array2<f64>, valid_fraction: f64, seed: u64, bs_position: (f64, f64)) -> Result<Self> {
        if truth.dim() != spec.shape() {
            return Err(Error::Shape("truth does not match grid spec".into()));
        }
        if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!("valid fraction {valid_fraction} not in (0, 1)")));
        }
        let (rows, cols) = spec.shape();
        let n = rows * cols;
        let keep = (valid_fraction * n as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask = Array2::from_elem((rows, cols), false);
        for i in rand::seq::index::sample(&mut rng, n, keep).iter() {
            mask[[i / cols, i % cols]] = true;
        }
        let eval_mask = mask.mapv(|m| !m);
        let grid = ChannelGrid::from_parts(spec, truth.clone(), mask)?;
        Ok(Dataset { grid, truth, eval_mask, bs_position })
    }
}

/// The fixed synthetic stand-in used by all comparative checks: an 80×80
/// grid at 0.5 m with the base station in the middle, half the cells observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBenchmark {
    pub rows: usize,
    pub cols: usize,
    pub q: f64,
    pub field: FieldParams,
    pub valid_fraction: f64,
}

pub const REFERENCE_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

impl Default for ReferenceBenchmark {
    fn default() -> Self {
        ReferenceBenchmark {
            rows: 80,
            cols: 80,
            q: 0.5,
            field: FieldParams { g0: 0.0, eta: 3.5, d0: 6.0, sigma_psi: 8.0, sigma_zeta: 2.0, bs_position: (39.5, 39.5) },
            valid_fraction: 0.5,
        }
    }
}

impl ReferenceBenchmark {
    /// Same benchmark with the fading term removed.
    pub fn without_fading(mut self) -> Self {
        self.field.sigma_zeta = 0.0;
        self
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec::with_shape(self.rows, self.cols, self.q).expect("reference spec is valid")
    }

    /// Generator with the covariance factor computed once.
    pub fn sampler(&self) -> Result<ShadowingSampler> {
        ShadowingSampler::new(&self.field, &self.spec(), ShadowingMethod::Dense)
    }

    /// The ground truth and observation pattern for `seed`.
    pub fn dataset(&self, sampler: &ShadowingSampler, seed: u64) -> Result<Dataset> {
        let truth = crate::field_synth::synth_field_with(sampler, seed)?;
        Dataset::sample_from_truth(self.spec(), truth, self.valid_fraction, seed.wrapping_add(0x5eed_0000), self.field.bs_position)
    }

    /// GP parameters matching the generating model.
    pub fn true_gp_params(&self) -> GpParams {
        let psi = self.field.sigma_psi.powi(2);
        GpParams {
            g0: self.field.g0,
            eta: self.field.eta,
            d0: self.field.d0,
            total_var: psi + self.field.sigma_zeta.powi(2),
            sigma_psi_sq: Some(psi),
            bs_position: self.field.bs_position,
        }
    }
}

/// Everything needed to run one method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub knn: KnnConfig,
    pub neighborhood: Neighborhood,
    pub d0_search: D0Search,
    /// σψ²/(σψ²+σζ²) used by the GP; `None` assumes no fading term.
    pub psi_fraction: Option<f64>,
    /// Skip parameter estimation and use these.
    pub gp_params: Option<GpParams>,
    pub structure: NetStructure,
    pub train: TrainConfig,
    pub mlp: MlpConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::TwoStep,
            knn: KnnConfig::default(),
            neighborhood: Neighborhood { n_range: 4 },
            d0_search: D0Search::default(),
            psi_fraction: None,
            gp_params: None,
            structure: reference_structure(),
            train: TrainConfig::default(),
            mlp: MlpConfig::default(),
            seed: 1,
        }
    }
}

/// `9-1-5(64-32-1)`, the structure runtimes are normalized against.
pub fn reference_structure() -> NetStructure {
    "9-1-5(64-32-1)".parse().expect("valid structure")
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub completed: ChannelGrid,
    /// Per-cell predicted MSE (GP only).
    pub mse: Option<Array2<f64>>,
    pub gp_params: Option<GpParams>,
    pub loss_log: Option<Vec<LossRecord>>,
    pub model: Option<TrainedModel>,
}

/// Runs one method and scores it on the dataset's evaluation cells. For the
/// two-step method `wall_seconds` is the training-loop time only.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let grid = &data.grid;
    let knn_with = |w: Weighting| KnnConfig { weighting: w, ..cfg.knn };
    let mut outcome = match cfg.method {
        Method::Gp => {
            let params = match cfg.gp_params {
                Some(p) => p,
                None => fit_gp(grid, data.bs_position, cfg.neighborhood, &cfg.d0_search, cfg.psi_fraction)?,
            };
            let interp = gp_interpolate(grid, &params, cfg.neighborhood)?;
            let mut report = evaluate(interp.grid.values(), &data.truth, &data.eval_mask)?;
            report.detail = format!(
                "n_range={} g0={:.4} eta={:.4} d0={} total_var={:.4}",
                cfg.neighborhood.n_range, params.g0, params.eta, params.d0, params.total_var
            );
            ExperimentOutcome {
                report,
                completed: interp.grid,
                mse: Some(interp.mse),
                gp_params: Some(params),
                loss_log: None,
                model: None,
            }
        }
        Method::KnnUniform | Method::KnnDistance => {
            let w = if cfg.method == Method::KnnUniform { Weighting::Uniform } else { Weighting::InverseDistance };
            let filled = knn_fill(grid, &knn_with(w))?;
            let mut report = evaluate(filled.values(), &data.truth, &data.eval_mask)?;
            report.detail = format!("k={}", cfg.knn.k);
            ExperimentOutcome { report, completed: filled, mse: None, gp_params: None, loss_log: None, model: None }
        }
        Method::TwoStep => {
            let trained = two_step_train(grid, &cfg.knn, &cfg.structure, &cfg.train, cfg.seed)?;
            let out = two_step_interpolate(grid, &trained.model, &cfg.knn)?;
            let mut report = evaluate(out.grid.values(), &data.truth, &data.eval_mask)?;
            report.detail = format!("structure={} k={} iterations={}", cfg.structure, cfg.knn.k, cfg.train.iterations);
            report.wall_seconds = trained.train_seconds;
            ExperimentOutcome {
                report,
                completed: out.grid,
                mse: None,
                gp_params: None,
                loss_log: Some(trained.log),
                model: Some(trained.model),
            }
        }
        Method::FullNnBaseline => {
            let report = fullnn_baseline(grid, &data.truth, &data.eval_mask, &cfg.mlp, cfg.seed)?;
            ExperimentOutcome { report, completed: grid.clone(), mse: None, gp_params: None, loss_log: None, model: None }
        }
    };
    outcome.report.method = cfg.method.to_string();
    if cfg.method != Method::TwoStep {
        outcome.report.wall_seconds = start.elapsed().as_secs_f64();
    }
    Ok(outcome)
}

/// One line of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub structure: Option<String>,
    pub k: usize,
    pub rmse_db: f64,
    pub runtime_s: f64,
    pub runtime_normalized: Option<f64>,
}

pub const SWEEP_HEADER: &str = "method,structure,k,rmse_db,runtime_s,runtime_normalized";

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.method,
            self.structure.as_deref().unwrap_or(""),
            self.k,
            self.rmse_db,
            self.runtime_s,
            self.runtime_normalized.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

/// Filter sizes of the structure sweep.
pub const SWEEP_FILTER_SIZES: [&[usize]; 5] = [&[9, 1, 5], &[9, 3, 5], &[9, 5, 5], &[9, 3, 3, 5], &[9, 3, 3, 3, 5]];
/// First-layer filter counts of the structure sweep.
pub const SWEEP_FIRST_TIERS: [usize; 4] = [32, 64, 128, 256];

/// Filter counts `first-32-16-…-16-1` for a given depth.
pub fn sweep_tiers(first: usize, depth: usize) -> Vec<usize> {
    let mut t = vec![first];
    if depth >= 2 {
        for i in 1..depth - 1 {
            t.push(if i == 1 { 32 } else { 16 });
        }
        t.push(1);
    } else {
        t[0] = 1;
    }
    t
}

/// Every sweep structure × first-layer filter count.
pub fn default_sweep_structures() -> Vec<NetStructure> {
    let mut out = Vec::new();
    for filters in SWEEP_FILTER_SIZES {
        for first in SWEEP_FIRST_TIERS {
            out.push(NetStructure { filters: filters.to_vec(), tiers: sweep_tiers(first, filters.len()) });
        }
    }
    out
}

/// Runs each config on `data`. Two-step runtimes are normalized by the
/// run of the reference structure, which is added when missing.
pub fn sweep(configs: &[ExperimentConfig], data: &Dataset) -> Result<Vec<SweepRow>> {
    let mut configs = configs.to_vec();
    let reference = reference_structure();
    let has_two_step = configs.iter().any(|c| c.method == Method::TwoStep);
    if has_two_step && !configs.iter().any(|c| c.method == Method::TwoStep && c.structure == reference) {
        let base = configs.iter().find(|c| c.method == Method::TwoStep).expect("present").clone();
        configs.insert(0, ExperimentConfig { structure: reference.clone(), ..base });
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let out = run_experiment(cfg, data)?;
        rows.push(SweepRow {
            method: cfg.method,
            structure: (cfg.method == Method::TwoStep).then(|| cfg.structure.to_string()),
            k: cfg.knn.k,
            rmse_db: out.report.rmse,
            runtime_s: out.report.wall_seconds,
            runtime_normalized: None,
        });
    }
    let reference = reference.to_string();
    if let Some(base) = rows.iter().find(|r| r.structure.as_deref() == Some(reference.as_str())).map(|r| r.runtime_s) {
        for r in rows.iter_mut().filter(|r| r.method == Method::TwoStep) {
            r.runtime_normalized = Some(r.runtime_s / base);
        }
    }
    Ok(rows)
}

/// Parses flat `key = value` text. Blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Convenience for reports: cells of `mask` in row-major order.
pub fn mask_cells(mask: &Array2<bool>) -> Vec<CellIndex> {
    mask.indexed_iter().filter(|(_, &m)| m).map(|((r, c), _)| CellIndex::new(r, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("kriging".parse::<Method>().is_err());
    }

    #[test]
    fn sweep_structures() {
        let all = default_sweep_structures();
        assert_eq!(all.len(), 20);
        let names: Vec<String> = all.iter().map(|s| s.to_string()).collect();
        for want in ["9-1-5(64-32-1)", "9-3-5(256-32-1)", "9-3-3-5(64-32-16-1)", "9-3-3-3-5(64-32-16-16-1)"] {
            assert!(names.iter().any(|n| n == want), "{want}");
        }
    }

    #[test]
    fn config_parsing() {
        let kv = parse_config("# experiment\nmethod = gp\n\n k=3 \nstructure=9-1-5(64-32-1)\n").unwrap();
        assert_eq!(kv, vec![("method".into(), "gp".into()), ("k".into(), "3".into()), ("structure".into(), "9-1-5(64-32-1)".into())]);
        assert!(parse_config("oops").is_err());
        assert!(parse_config("=1").is_err());
    }

    #[test]
    fn dataset_split_counts() {
        let spec = GridSpec::with_shape(10, 10, 0.5).unwrap();
        let d = Dataset::sample_from_truth(spec, Array2::from_elem((10, 10), -50.0), 0.5, 3, (4.5, 4.5)).unwrap();
        assert_eq!(d.grid.valid_count(), 50);
        assert_eq!(d.eval_mask.iter().filter(|&&m| m).count(), 50);
        assert!(d.grid.mask().iter().zip(d.eval_mask.iter()).all(|(a, b)| a != b));
    }
}
