//! Fully connected coordinate-to-gain regressor used as a comparison
//! baseline.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport};
use crate::convnet::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::grid::{CellIndex, ChannelGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub adam: AdamConfig,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: vec![10, 10], iterations: 5000, adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() } }
    }
}

/// ReLU hidden layers, linear scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

impl Mlp {
    pub fn new(inputs: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![inputs];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let std = (2.0 / w[0] as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((w[0], w[1]), || std * rng.sample::<f64, _>(StandardNormal)));
            biases.push(Array1::zeros(w[1]));
        }
        Mlp { weights, biases }
    }

    fn activations(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![x.clone()];
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[i].dot(w) + b;
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn predict(&self, x: &Array2<f64>) -> Array1<f64> {
        self.activations(x).pop().expect("output").index_axis_move(Axis(1), 0)
    }

    /// Mean squared error and its gradients.
    fn gradients(&self, x: &Array2<f64>, y: &Array1<f64>) -> (f64, Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let acts = self.activations(x);
        let n = x.nrows() as f64;
        let out = acts.last().expect("output").column(0).to_owned();
        let err = &out - y;
        let loss = err.mapv(|e| e * e).sum() / n;
        let mut delta = (err * (2.0 / n)).insert_axis(Axis(1));
        let mut gw = vec![Array2::zeros((0, 0)); self.weights.len()];
        let mut gb = vec![Array1::zeros(0); self.weights.len()];
        for i in (0..self.weights.len()).rev() {
            gw[i] = acts[i].t().dot(&delta).as_standard_layout().into_owned();
            gb[i] = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut back = delta.dot(&self.weights[i].t());
                ndarray::Zip::from(&mut back).and(&acts[i]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        (loss, gw, gb)
    }

    fn sizes(&self) -> Vec<usize> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w.len(), b.len()]).collect()
    }

    pub fn train(&mut self, x: &Array2<f64>, y: &Array1<f64>, cfg: &MlpConfig) -> Vec<f64> {
        let mut adam = AdamState::new(cfg.adam, &self.sizes());
        let mut losses = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let (loss, gw, gb) = self.gradients(x, y);
            losses.push(loss);
            let grads: Vec<&[f64]> =
                gw.iter().zip(&gb).flat_map(|(w, b)| [w.as_slice().expect("layout"), b.as_slice().expect("layout")]).collect();
            let mut params: Vec<&mut [f64]> = Vec::new();
            for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
                params.push(w.as_slice_mut().expect("layout"));
                params.push(b.as_slice_mut().expect("layout"));
            }
            adam.update(&mut params, &grads);
        }
        losses
    }
}

fn unit_coords(grid: &ChannelGrid, cell: CellIndex) -> [f64; 2] {
    let (rows, cols) = grid.shape();
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    [norm(cell.row, rows), norm(cell.col, cols)]
}

/// Trains the regressor on the valid cells of `grid` and scores it on `eval_mask`.
pub fn fullnn_baseline(
    grid: &ChannelGrid,
    truth: &Array2<f64>,
    eval_mask: &Array2<bool>,
    cfg: &MlpConfig,
    seed: u64,
) -> Result<EvalReport> {
    let start = Instant::now();
    let train: Vec<(CellIndex, f64)> = grid.valid_cells().collect();
    if train.is_empty() {
        return Err(Error::NoValidEntries);
    }
    let n = train.len();
    let mean = train.iter().map(|t| t.1).sum::<f64>() / n as f64;
    let var = train.iter().map(|t| (t.1 - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };

    let x = Array2::from_shape_fn((n, 2), |(i, j)| unit_coords(grid, train[i].0)[j]);
    let y = Array1::from_iter(train.iter().map(|t| (t.1 - mean) / scale));
    let mut mlp = Mlp::new(2, &cfg.hidden, seed);
    mlp.train(&x, &y, cfg);

    let (rows, cols) = grid.shape();
    let all = Array2::from_shape_fn((rows * cols, 2), |(k, j)| unit_coords(grid, CellIndex::new(k / cols, k % cols))[j]);
    let pred = mlp.predict(&all).mapv(|z| z * scale + mean);
    let pred = pred.into_shape_with_order((rows, cols)).expect("shape");
    let filled = super::two_step::assemble(grid, &pred)?;
    let mut report = evaluate(&filled, truth, eval_mask)?;
    report.method = "fullnn-baseline".into();
    report.detail = format!("hidden={:?}", cfg.hidden);
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
