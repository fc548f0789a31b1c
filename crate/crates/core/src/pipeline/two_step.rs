//! KNN coarse fill followed by CNN refinement, trained on a held-out part
//! of the valid cells.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::convnet::{im2col, pad_two_tier, AdamConfig, AdamState, ConvNet, Layer, LayerSpec, NetStructure};
use crate::error::{Error, Result};
use crate::grid::{split_valid, ChannelGrid};
use crate::knn::{knn_fill, KnnConfig};
use crate::par::Parallelism;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Share of the valid cells kept as training inputs; the rest are labels.
    pub split_fraction: f64,
    pub final_relu: bool,
    /// Loss-log period in iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iterations: 200_000, adam: AdamConfig::default(), split_fraction: 0.8, final_relu: true, log_every: 100 }
    }
}

/// Affine map between dB and the network's value space: `z = (x − offset)/scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    /// Offset at the minimum and scale at the population standard deviation
    /// of the valid values, so every training target is non-negative.
    pub fn from_valid(grid: &ChannelGrid) -> Result<Self> {
        let vals: Vec<f64> = grid.valid_cells().map(|(_, v)| v).collect();
        if vals.is_empty() {
            return Err(Error::NoValidEntries);
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let offset = vals.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Normalization { offset, scale: if std > 0.0 { std } else { 1.0 } })
    }

    pub fn forward(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.scale + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    /// RMSE over the label cells, dB.
    pub rmse_db: f64,
}

/// A trained refinement network together with everything needed to apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: ConvNet,
    pub normalization: Normalization,
    pub grid_shape: (usize, usize),
    pub knn: KnnConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub log: Vec<LossRecord>,
    /// Wall-clock time of the optimization loop only.
    pub train_seconds: f64,
}

/// Builds the padded two-tier input `[E; M]` in normalized value space.
pub fn network_input(coarse: &Array2<f64>, mask: &Array2<bool>, norm: &Normalization, shrink: usize) -> Result<Array3<f64>> {
    let values = coarse.mapv(|v| norm.forward(v));
    let mask = mask.mapv(|m| if m { 1.0 } else { 0.0 });
    pad_two_tier(&values, &mask, shrink)
}

/// Splits the valid set, coarse-fills the training part with KNN and fits
/// the network to the held-out labels.
pub fn two_step_train(grid: &ChannelGrid, knn: &KnnConfig, structure: &NetStructure, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    two_step_train_with(grid, knn, structure, cfg, seed, Parallelism::default())
}

pub fn two_step_train_with(
    grid: &ChannelGrid,
    knn: &KnnConfig,
    structure: &NetStructure,
    cfg: &TrainConfig,
    seed: u64,
    par: Parallelism,
) -> Result<TrainOutcome> {
    if cfg.log_every == 0 {
        return Err(Error::InvalidParameter("log period must be at least 1".into()));
    }
    let split = split_valid(grid, cfg.split_fraction, seed)?;
    let coarse = knn_fill(&split.train, knn)?;
    let norm = Normalization::from_valid(&split.train)?;

    let mut net = ConvNet::from_structure(structure, 2, cfg.final_relu, seed.wrapping_add(1))?;
    let shrink = net.shrink()?;
    let input = network_input(coarse.values(), split.train.mask(), &norm, shrink)?;
    let truth = ndarray::Zip::from(grid.values()).and(&split.label_mask).map_collect(|&v, &m| if m { norm.forward(v) } else { 0.0 });
    let first_cols = im2col(&input, net.layers()[0].spec.filter_size, 1, par)?;

    let sizes = net.param_sizes();
    let mut adam = AdamState::new(cfg.adam, &sizes);
    let mut log = Vec::with_capacity(cfg.iterations / cfg.log_every + 2);
    let rmse = |sum_mean: f64| sum_mean.sqrt() * norm.scale;

    let start = Instant::now();
    for it in 0..cfg.iterations {
        let (loss, grads) = net.backward_with(&input, Some(&first_cols), &truth, &split.label_mask, par)?;
        if it % cfg.log_every == 0 {
            log.push(LossRecord { iteration: it, rmse_db: rmse(loss.mean()) });
        }
        adam.update(&mut net.params_mut(), &grads.slices());
    }
    let train_seconds = start.elapsed().as_secs_f64();

    let out = net.forward_with(&input, par)?;
    let last = crate::convnet::masked_loss(&out, &truth, &split.label_mask)?;
    log.push(LossRecord { iteration: cfg.iterations, rmse_db: rmse(last.mean()) });

    Ok(TrainOutcome { model: TrainedModel { net, normalization: norm, grid_shape: grid.shape(), knn: *knn }, log, train_seconds })
}

/// Output of the interpolation step.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStepResult {
    /// Final database: original values on valid cells, network output elsewhere.
    pub grid: ChannelGrid,
    /// Raw refined matrix `F` in dB.
    pub refined: Array2<f64>,
}

/// Coarse-fills all valid data, refines it with the network and restores
/// the original values on valid cells.
pub fn two_step_interpolate(grid: &ChannelGrid, model: &TrainedModel, knn: &KnnConfig) -> Result<TwoStepResult> {
    two_step_interpolate_with(grid, model, knn, Parallelism::default())
}

pub fn two_step_interpolate_with(grid: &ChannelGrid, model: &TrainedModel, knn: &KnnConfig, par: Parallelism) -> Result<TwoStepResult> {
    if grid.shape() != model.grid_shape {
        return Err(Error::Shape(format!("model was trained on a {:?} grid, got {:?}", model.grid_shape, grid.shape())));
    }
    let coarse = knn_fill(grid, knn)?;
    let shrink = model.net.shrink()?;
    let input = network_input(coarse.values(), grid.mask(), &model.normalization, shrink)?;
    let raw = model.net.forward_with(&input, par)?;
    let refined = raw.mapv(|z| model.normalization.inverse(z));
    let values = assemble(grid, &refined)?;
    Ok(TwoStepResult { grid: ChannelGrid::complete(*grid.spec(), values)?, refined })
}

/// `G = (1 − M) ⊙ F + D`, taking valid cells verbatim from `D`.
pub fn assemble(grid: &ChannelGrid, refined: &Array2<f64>) -> Result<Array2<f64>> {
    if refined.dim() != grid.shape() {
        return Err(Error::Shape("refined matrix does not match grid".into()));
    }
    Ok(ndarray::Zip::from(grid.values()).and(grid.mask()).and(refined).map_collect(|&d, &m, &f| if m { d } else { f }))
}

const MODEL_FORMAT: &str = "chandb-convnet";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerFile {
    filter_size: usize,
    stride: usize,
    tiers_in: usize,
    tiers_out: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    structure: String,
    final_relu: bool,
    grid_shape: (usize, usize),
    knn: KnnConfig,
    normalization: Normalization,
    layers: Vec<LayerFile>,
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .net
            .layers()
            .iter()
            .map(|l| LayerFile {
                filter_size: l.spec.filter_size,
                stride: l.spec.stride,
                tiers_in: l.tiers_in,
                tiers_out: l.spec.tiers_out,
                weights: l.weights.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            structure: self.net.structure().to_string(),
            final_relu: self.net.final_relu(),
            grid_shape: self.grid_shape,
            knn: self.knn,
            normalization: self.normalization,
            layers,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::Model(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != MODEL_VERSION {
            return Err(Error::Model(format!("unsupported version {}", file.version)));
        }
        let layers = file
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let k = l.tiers_in * l.filter_size * l.filter_size;
                let weights =
                    Array2::from_shape_vec((l.tiers_out, k), l.weights).map_err(|e| Error::Model(format!("layer {i} weights: {e}")))?;
                Ok(Layer {
                    spec: LayerSpec { filter_size: l.filter_size, stride: l.stride, tiers_out: l.tiers_out },
                    tiers_in: l.tiers_in,
                    weights,
                    bias: Array1::from(l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainedModel {
            net: ConvNet::from_layers(layers, file.final_relu)?,
            normalization: file.normalization,
            grid_shape: file.grid_shape,
            knn: file.knn,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
