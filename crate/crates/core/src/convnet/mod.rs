//! A small convolutional network written from scratch: stacked valid
//! convolutions, each followed by ReLU, trained on a masked squared-error
//! loss with analytic gradients and Adam.
//!
//! Tensors are `(tiers, rows, cols)` arrays. Convolutions run as im2col
//! followed by a single matrix product per layer.

mod adam;

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};

use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::par::{self, Parallelism};

/// Output extent of a valid convolution: `floor((c_in − f)/s) + 1`.
pub fn conv_output_size(c_in: usize, f: usize, s: usize) -> Result<usize> {
    if f == 0 || s == 0 {
        return Err(Error::InvalidParameter("filter size and stride must be at least 1".into()));
    }
    if c_in < f {
        return Err(Error::InvalidParameter(format!("input extent {c_in} smaller than filter {f}")));
    }
    Ok((c_in - f) / s + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub filter_size: usize,
    pub stride: usize,
    pub tiers_out: usize,
}

impl LayerSpec {
    pub fn new(filter_size: usize, tiers_out: usize) -> Self {
        LayerSpec { filter_size, stride: 1, tiers_out }
    }
}

/// Filter sizes and filter counts written as `f1-f2-…(T1-T2-…)`,
/// e.g. `9-1-5(64-32-1)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetStructure {
    pub filters: Vec<usize>,
    pub tiers: Vec<usize>,
}

impl NetStructure {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.filters.iter().zip(&self.tiers).map(|(&f, &t)| LayerSpec::new(f, t)).collect()
    }

    /// Filter sizes only, e.g. `9-3-5`.
    pub fn filters_label(&self) -> String {
        join(&self.filters)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-")
}

impl fmt::Display for NetStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", join(&self.filters), join(&self.tiers))
    }
}

impl FromStr for NetStructure {
    type Err = Error;

    fn from_str(input: &str) -> Result<Self> {
        let err = |reason: &str| Error::Structure { input: input.to_string(), reason: reason.to_string() };
        let compact: String = input.chars().filter(|c| !c.is_whitespace()).collect();
        let (head, rest) = compact.split_once('(').ok_or_else(|| err("missing '('"))?;
        let tail = rest.strip_suffix(')').ok_or_else(|| err("missing closing ')'"))?;
        let parse_list = |s: &str| -> Result<Vec<usize>> {
            s.split('-')
                .map(|t| t.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| err(&format!("{t:?} is not a positive integer"))))
                .collect()
        };
        let filters = parse_list(head)?;
        let tiers = parse_list(tail)?;
        if filters.len() != tiers.len() {
            return Err(err("filter sizes and filter counts differ in length"));
        }
        if tiers.last() != Some(&1) {
            return Err(err("the last layer must have exactly one filter"));
        }
        Ok(NetStructure { filters, tiers })
    }
}

/// One convolution layer. `weights` is `(tiers_out, tiers_in·f·f)`, with the
/// column index `(tier_in·f + dy)·f + dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub tiers_in: usize,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn weight(&self, tier_out: usize, tier_in: usize, dy: usize, dx: usize) -> f64 {
        let f = self.spec.filter_size;
        self.weights[[tier_out, (tier_in * f + dy) * f + dx]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    layers: Vec<Layer>,
    final_relu: bool,
}

/// Gradients with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    /// Flat views in the order of [`ConvNet::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }
}

/// Masked squared error: `sum` over `count` label cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub sum: f64,
    pub count: usize,
}

impl MaskedLoss {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Squared error summed over the cells where `label_mask` is set.
pub fn masked_loss(output: &Array2<f64>, truth: &Array2<f64>, label_mask: &Array2<bool>) -> Result<MaskedLoss> {
    if output.dim() != truth.dim() || output.dim() != label_mask.dim() {
        return Err(Error::Shape(format!("output {:?}, truth {:?}, label mask {:?}", output.dim(), truth.dim(), label_mask.dim())));
    }
    let mut sum = 0.0;
    let mut count = 0;
    Zip::from(output).and(truth).and(label_mask).for_each(|&o, &t, &m| {
        if m {
            sum += (o - t) * (o - t);
            count += 1;
        }
    });
    Ok(MaskedLoss { sum, count })
}

/// Unfolds `x` into a `(tiers·f·f, out_rows·out_cols)` patch matrix.
pub fn im2col(x: &Array3<f64>, f: usize, stride: usize, par: Parallelism) -> Result<Array2<f64>> {
    let (c, h, w) = x.dim();
    let ho = conv_output_size(h, f, stride)?;
    let wo = conv_output_size(w, f, stride)?;
    let p = ho * wo;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * f * f, p));
    par::for_each_chunk_mut(par, cols.as_slice_mut().expect("standard layout"), p, |k, row| {
        let ci = k / (f * f);
        let dy = (k / f) % f;
        let dx = k % f;
        for y in 0..ho {
            let base = ci * h * w + (y * stride + dy) * w + dx;
            let dst = &mut row[y * wo..(y + 1) * wo];
            if stride == 1 {
                dst.copy_from_slice(&xs[base..base + wo]);
            } else {
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = xs[base + xo * stride];
                }
            }
        }
    });
    Ok(cols)
}

/// Adjoint of [`im2col`]: folds patch gradients back onto a `(c, h, w)` input.
fn col2im(dcols: &Array2<f64>, (c, h, w): (usize, usize, usize), f: usize, stride: usize, par: Parallelism) -> Array3<f64> {
    let ho = (h - f) / stride + 1;
    let wo = (w - f) / stride + 1;
    let mut out = Array3::zeros((c, h, w));
    let src = dcols.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let p = ho * wo;
    par::for_each_chunk_mut(par, out.as_slice_mut().expect("standard layout"), h * w, |ci, plane| {
        for dy in 0..f {
            for dx in 0..f {
                let k = (ci * f + dy) * f + dx;
                let row = &src[k * p..(k + 1) * p];
                for y in 0..ho {
                    let base = (y * stride + dy) * w + dx;
                    let src = &row[y * wo..(y + 1) * wo];
                    if stride == 1 {
                        for (d, v) in plane[base..base + wo].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (xo, v) in src.iter().enumerate() {
                            plane[base + xo * stride] += v;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Layers with at most this many output tiers (and unit stride) convolve
/// directly on the input planes; wider layers use im2col and one matrix
/// product.
const DIRECT_MAX_TIERS_OUT: usize = 4;

impl Layer {
    fn is_direct(&self) -> bool {
        self.spec.stride == 1 && self.spec.tiers_out <= DIRECT_MAX_TIERS_OUT
    }
}

/// Pre-activation `(tiers_out, ho·wo)` of a unit-stride layer, accumulated
/// plane by plane.
fn direct_forward(l: &Layer, x: &Array3<f64>, par: Parallelism) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let f = l.spec.filter_size;
    let (ho, wo) = (h + 1 - f, w + 1 - f);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array2::zeros((l.spec.tiers_out, ho * wo));
    par::for_each_chunk_mut(par, out.as_slice_mut().expect("standard layout"), ho * wo, |t, row| {
        row.fill(l.bias[t]);
        for ci in 0..c {
            for dy in 0..f {
                for dx in 0..f {
                    let wt = l.weights[[t, (ci * f + dy) * f + dx]];
                    for y in 0..ho {
                        let src = &xs[ci * h * w + (y + dy) * w + dx..][..wo];
                        for (d, v) in row[y * wo..(y + 1) * wo].iter_mut().zip(src) {
                            *d += wt * v;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Weight gradient of a direct layer: `grad` correlated with each shifted
/// input plane.
fn direct_weight_grad(grad: &Array2<f64>, x: &Array3<f64>, f: usize, par: Parallelism) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h + 1 - f, w + 1 - f);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let grad = grad.as_standard_layout();
    let gs = grad.as_slice().expect("standard layout");
    let k = c * f * f;
    let mut gw = Array2::zeros((grad.nrows(), k));
    par::for_each_chunk_mut(par, gw.as_slice_mut().expect("standard layout"), k, |t, row| {
        let g = &gs[t * ho * wo..(t + 1) * ho * wo];
        for ci in 0..c {
            for dy in 0..f {
                for dx in 0..f {
                    let mut acc = 0.0;
                    for y in 0..ho {
                        let src = &xs[ci * h * w + (y + dy) * w + dx..][..wo];
                        acc += dot(&g[y * wo..(y + 1) * wo], src);
                    }
                    row[(ci * f + dy) * f + dx] = acc;
                }
            }
        }
    });
    gw
}

/// Input gradient `(c, h·w)` of a direct layer.
fn direct_input_grad(grad: &Array2<f64>, l: &Layer, (c, h, w): (usize, usize, usize), par: Parallelism) -> Array2<f64> {
    let f = l.spec.filter_size;
    let (ho, wo) = (h + 1 - f, w + 1 - f);
    let grad = grad.as_standard_layout();
    let gs = grad.as_slice().expect("standard layout");
    let mut dx_all = Array2::zeros((c, h * w));
    par::for_each_chunk_mut(par, dx_all.as_slice_mut().expect("standard layout"), h * w, |ci, plane| {
        for t in 0..l.spec.tiers_out {
            let g = &gs[t * ho * wo..(t + 1) * ho * wo];
            for dy in 0..f {
                for dx in 0..f {
                    let wt = l.weights[[t, (ci * f + dy) * f + dx]];
                    for y in 0..ho {
                        let dst = &mut plane[(y + dy) * w + dx..][..wo];
                        for (d, v) in dst.iter_mut().zip(&g[y * wo..(y + 1) * wo]) {
                            *d += wt * v;
                        }
                    }
                }
            }
        }
    });
    dx_all
}

struct LayerTrace {
    /// `None` when the caller supplied the first layer's patches or the
    /// layer is direct.
    cols: Option<Array2<f64>>,
    /// Layer input, kept for direct layers only.
    input: Option<Array3<f64>>,
    /// Pre-activation, `(tiers_out, out_rows·out_cols)`.
    pre: Array2<f64>,
    in_dim: (usize, usize, usize),
}

impl ConvNet {
    /// He-initialized network: weights `N(0, 2/(f²·T_in))`, biases 0.
    pub fn new(input_tiers: usize, specs: &[LayerSpec], final_relu: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut tiers_in = input_tiers;
        for spec in specs {
            let k = tiers_in * spec.filter_size * spec.filter_size;
            let std = (2.0 / k.max(1) as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((spec.tiers_out, k), || std * rng.sample::<f64, _>(StandardNormal));
            layers.push(Layer { spec: *spec, tiers_in, weights, bias: Array1::zeros(spec.tiers_out) });
            tiers_in = spec.tiers_out;
        }
        Self::from_layers(layers, final_relu)
    }

    pub fn from_structure(structure: &NetStructure, input_tiers: usize, final_relu: bool, seed: u64) -> Result<Self> {
        Self::new(input_tiers, &structure.layer_specs(), final_relu, seed)
    }

    /// Checks that tier counts chain and the last layer has one output tier.
    pub fn from_layers(layers: Vec<Layer>, final_relu: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let bad = |reason: String| Error::Layer { layer: i, reason };
            if l.spec.filter_size == 0 || l.spec.stride == 0 || l.spec.tiers_out == 0 || l.tiers_in == 0 {
                return Err(bad("filter size, stride and tier counts must be positive".into()));
            }
            let k = l.tiers_in * l.spec.filter_size * l.spec.filter_size;
            if l.weights.dim() != (l.spec.tiers_out, k) || l.bias.len() != l.spec.tiers_out {
                return Err(bad(format!(
                    "weights {:?} / bias {} do not match {}x{}x{}x{}",
                    l.weights.dim(),
                    l.bias.len(),
                    l.spec.filter_size,
                    l.spec.filter_size,
                    l.tiers_in,
                    l.spec.tiers_out
                )));
            }
            if i > 0 && layers[i - 1].spec.tiers_out != l.tiers_in {
                return Err(bad(format!(
                    "expects {} input tiers but previous layer produces {}",
                    l.tiers_in,
                    layers[i - 1].spec.tiers_out
                )));
            }
        }
        if layers.last().map(|l| l.spec.tiers_out) != Some(1) {
            return Err(Error::Layer { layer: layers.len() - 1, reason: "final layer must output exactly one tier".into() });
        }
        Ok(ConvNet { layers, final_relu })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_tiers(&self) -> usize {
        self.layers[0].tiers_in
    }

    pub fn final_relu(&self) -> bool {
        self.final_relu
    }

    pub fn structure(&self) -> NetStructure {
        NetStructure {
            filters: self.layers.iter().map(|l| l.spec.filter_size).collect(),
            tiers: self.layers.iter().map(|l| l.spec.tiers_out).collect(),
        }
    }

    /// Spatial output size for a `rows × cols` input, by chaining the
    /// valid-convolution size law layer by layer.
    pub fn output_size(&self, rows: usize, cols: usize) -> Result<(usize, usize)> {
        let mut hw = (rows, cols);
        for (i, l) in self.layers.iter().enumerate() {
            let step =
                |c| conv_output_size(c, l.spec.filter_size, l.spec.stride).map_err(|e| Error::Layer { layer: i, reason: e.to_string() });
            hw = (step(hw.0)?, step(hw.1)?);
        }
        Ok(hw)
    }

    /// Total per-axis shrink `Σ(f − 1)`; only defined for unit strides.
    pub fn shrink(&self) -> Result<usize> {
        if let Some(i) = self.layers.iter().position(|l| l.spec.stride != 1) {
            return Err(Error::Layer { layer: i, reason: "padding for aligned output requires stride 1".into() });
        }
        Ok(self.layers.iter().map(|l| l.spec.filter_size - 1).sum())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Sizes of the buffers returned by [`Self::params_mut`].
    pub fn param_sizes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.weights.len(), l.bias.len()]).collect()
    }

    /// Weight and bias buffers, layer by layer.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn relu_at(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.final_relu
    }

    fn run(&self, input: &Array3<f64>, first_cols: Option<&Array2<f64>>, par: Parallelism) -> Result<(Array2<f64>, Vec<LayerTrace>)> {
        let (c, h, w) = input.dim();
        if c != self.input_tiers() {
            return Err(Error::Layer { layer: 0, reason: format!("expects {} input tiers, got {c}", self.input_tiers()) });
        }
        let (oh, ow) = self.output_size(h, w)?;
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut current: Option<Array3<f64>> = None;
        for (i, l) in self.layers.iter().enumerate() {
            let x = current.as_ref().unwrap_or(input);
            let in_dim = x.dim();
            let f = l.spec.filter_size;
            let ho = conv_output_size(in_dim.1, f, l.spec.stride)?;
            let wo = conv_output_size(in_dim.2, f, l.spec.stride)?;
            let (own_cols, own_input, pre) = if l.is_direct() {
                (None, Some(x.to_owned()), direct_forward(l, x, par))
            } else {
                let own_cols = match (i, first_cols) {
                    (0, Some(fc)) => {
                        if fc.dim() != (c * f * f, ho * wo) {
                            return Err(Error::Shape("cached first-layer patches do not match input".into()));
                        }
                        None
                    }
                    _ => Some(im2col(x, f, l.spec.stride, par)?),
                };
                let cols = own_cols.as_ref().or(first_cols).expect("patches");
                let mut pre = l.weights.dot(cols);
                for (mut row, &b) in pre.axis_iter_mut(Axis(0)).zip(l.bias.iter()) {
                    row += b;
                }
                (own_cols, None, pre)
            };
            let act = if self.relu_at(i) { pre.mapv(|z| z.max(0.0)) } else { pre.clone() };
            current = Some(act.into_shape_with_order((l.spec.tiers_out, ho, wo)).expect("shape"));
            traces.push(LayerTrace { cols: own_cols, input: own_input, pre, in_dim });
        }
        let out = current.expect("at least one layer");
        debug_assert_eq!(out.dim(), (1, oh, ow));
        Ok((out.index_axis_move(Axis(0), 0), traces))
    }

    /// Network output (one tier) for a pre-padded input stack.
    pub fn forward(&self, input: &Array3<f64>) -> Result<Array2<f64>> {
        self.forward_with(input, Parallelism::default())
    }

    pub fn forward_with(&self, input: &Array3<f64>, par: Parallelism) -> Result<Array2<f64>> {
        Ok(self.run(input, None, par)?.0)
    }

    /// Loss and parameter gradients of [`masked_loss`] at the current weights.
    pub fn backward(&self, input: &Array3<f64>, truth: &Array2<f64>, label_mask: &Array2<bool>) -> Result<(MaskedLoss, Gradients)> {
        self.backward_with(input, None, truth, label_mask, Parallelism::default())
    }

    /// [`Self::backward`] with optional precomputed first-layer patches
    /// (`im2col(input, f1, s1)`), which stay fixed during training.
    pub fn backward_with(
        &self,
        input: &Array3<f64>,
        first_cols: Option<&Array2<f64>>,
        truth: &Array2<f64>,
        label_mask: &Array2<bool>,
        par: Parallelism,
    ) -> Result<(MaskedLoss, Gradients)> {
        let (out, traces) = self.run(input, first_cols, par)?;
        let loss = masked_loss(&out, truth, label_mask)?;

        let (oh, ow) = out.dim();
        let mut grad = Array2::zeros((1, oh * ow));
        for (k, g) in grad.iter_mut().enumerate() {
            let (r, c) = (k / ow, k % ow);
            if label_mask[[r, c]] {
                *g = 2.0 * (out[[r, c]] - truth[[r, c]]);
            }
        }

        let n = self.layers.len();
        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        for i in (0..n).rev() {
            let l = &self.layers[i];
            let t = &traces[i];
            if self.relu_at(i) {
                Zip::from(&mut grad).and(&t.pre).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            gb[i] = grad.sum_axis(Axis(1));
            if let Some(x) = &t.input {
                gw[i] = direct_weight_grad(&grad, x, l.spec.filter_size, par);
                if i > 0 {
                    grad = direct_input_grad(&grad, l, t.in_dim, par);
                }
            } else {
                let cols = t.cols.as_ref().or(first_cols).expect("patches");
                gw[i] = grad.dot(&cols.t());
                if i > 0 {
                    let dcols = l.weights.t().dot(&grad);
                    let dx = col2im(&dcols, t.in_dim, l.spec.filter_size, l.spec.stride, par);
                    let (c, h, w) = t.in_dim;
                    grad = dx.into_shape_with_order((c, h * w)).expect("shape");
                }
            }
        }
        Ok((loss, Gradients { weights: gw, biases: gb }))
    }
}

/// Pads a value tier (edge replication) and a mask tier (zeros) by `shrink`
/// cells in total per axis, `shrink/2` on the low side and the rest on the
/// high side, and stacks them as the two-tier network input.
pub fn pad_two_tier(values: &Array2<f64>, mask: &Array2<f64>, shrink: usize) -> Result<Array3<f64>> {
    if values.dim() != mask.dim() {
        return Err(Error::Shape("value and mask tiers differ in shape".into()));
    }
    let (h, w) = values.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty input".into()));
    }
    let lo = shrink / 2;
    let (ph, pw) = (h + shrink, w + shrink);
    let mut out = Array3::zeros((2, ph, pw));
    for r in 0..ph {
        let sr = r.saturating_sub(lo).min(h - 1);
        for c in 0..pw {
            let sc = c.saturating_sub(lo).min(w - 1);
            out[[0, r, c]] = values[[sr, sc]];
        }
    }
    out.slice_mut(s![1, lo..lo + h, lo..lo + w]).assign(mask);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_law() {
        assert_eq!(conv_output_size(11, 9, 1).unwrap(), 3);
        assert_eq!(conv_output_size(17, 1, 1).unwrap(), 17);
        assert_eq!(conv_output_size(10, 3, 2).unwrap(), 4);
        let a = conv_output_size(301, 9, 1).unwrap();
        let b = conv_output_size(a, 1, 1).unwrap();
        assert_eq!(conv_output_size(b, 5, 1).unwrap(), 289);
        assert!(conv_output_size(4, 5, 1).is_err());
        assert!(conv_output_size(4, 0, 1).is_err());
    }

    #[test]
    fn structure_notation() {
        let s: NetStructure = "9-1-5 (64-32-1)".parse().unwrap();
        assert_eq!(s.filters, vec![9, 1, 5]);
        assert_eq!(s.tiers, vec![64, 32, 1]);
        assert_eq!(s.to_string(), "9-1-5(64-32-1)");
        assert_eq!("9-3-3-3-5(64-32-16-16-1)".parse::<NetStructure>().unwrap().filters.len(), 5);
        for bad in ["9-1-5", "9-1-5(64-32)", "9-1-5(64-32-2)", "9-x-5(64-32-1)", "9-0-5(64-32-1)"] {
            assert!(bad.parse::<NetStructure>().is_err(), "{bad}");
        }
    }

    #[test]
    fn constant_output_from_bias() {
        let layer = Layer { spec: LayerSpec::new(1, 1), tiers_in: 1, weights: Array2::zeros((1, 1)), bias: Array1::from_elem(1, 0.75) };
        let net = ConvNet::from_layers(vec![layer], true).unwrap();
        let out = net.forward(&Array3::from_elem((1, 4, 3), -9.0)).unwrap();
        assert!(out.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn linear_regime_scales_input() {
        let layer = Layer { spec: LayerSpec::new(1, 1), tiers_in: 1, weights: Array2::from_elem((1, 1), 2.5), bias: Array1::zeros(1) };
        let net = ConvNet::from_layers(vec![layer], true).unwrap();
        let input = Array3::from_shape_fn((1, 3, 3), |(_, r, c)| (r * 3 + c) as f64);
        let out = net.forward(&input).unwrap();
        assert_eq!(out, input.index_axis(Axis(0), 0).mapv(|v| 2.5 * v));
    }

    #[test]
    fn chain_violation_names_layer() {
        let mk = |tin, tout, f| Layer {
            spec: LayerSpec::new(f, tout),
            tiers_in: tin,
            weights: Array2::zeros((tout, tin * f * f)),
            bias: Array1::zeros(tout),
        };
        let err = ConvNet::from_layers(vec![mk(2, 4, 3), mk(3, 1, 1)], true).unwrap_err();
        assert!(matches!(err, Error::Layer { layer: 1, .. }));
        let err = ConvNet::from_layers(vec![mk(2, 4, 3)], true).unwrap_err();
        assert!(matches!(err, Error::Layer { layer: 0, .. }));

        let net = ConvNet::new(2, &[LayerSpec::new(5, 2), LayerSpec::new(5, 1)], true, 0).unwrap();
        assert!(matches!(net.forward(&Array3::zeros((2, 7, 7))), Err(Error::Layer { layer: 1, .. })));
        assert!(matches!(net.forward(&Array3::zeros((3, 20, 20))), Err(Error::Layer { layer: 0, .. })));
    }

    #[test]
    fn masked_loss_examples() {
        let t = Array2::from_shape_fn((3, 3), |(r, c)| (r + c) as f64);
        let mut m = Array2::from_elem((3, 3), true);
        assert_eq!(masked_loss(&t, &t, &m).unwrap().sum, 0.0);
        m.fill(false);
        m[[1, 2]] = true;
        let mut o = t.clone();
        o[[1, 2]] += 3.0;
        o[[0, 0]] += 100.0;
        let l = masked_loss(&o, &t, &m).unwrap();
        assert_eq!((l.sum, l.count, l.mean()), (9.0, 1, 9.0));
    }

    #[test]
    fn zero_label_mask_zero_gradient() {
        let net = ConvNet::new(2, &[LayerSpec::new(3, 4), LayerSpec::new(3, 1)], true, 5).unwrap();
        let input = Array3::from_shape_fn((2, 8, 8), |(t, r, c)| ((t + r * 3 + c) % 5) as f64 * 0.3);
        let truth = Array2::ones((4, 4));
        let mask = Array2::from_elem((4, 4), false);
        let (loss, g) = net.backward(&input, &truth, &mask).unwrap();
        assert_eq!(loss.sum, 0.0);
        assert!(g.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_linear_layer_gradient_closed_form() {
        // f = 1, one input tier, no final ReLU: out = w·u + b
        let layer =
            Layer { spec: LayerSpec::new(1, 1), tiers_in: 1, weights: Array2::from_elem((1, 1), 0.5), bias: Array1::from_elem(1, 0.1) };
        let net = ConvNet::from_layers(vec![layer], false).unwrap();
        let u = Array2::from_shape_fn((3, 4), |(r, c)| r as f64 - c as f64 * 0.5);
        let truth = Array2::from_shape_fn((3, 4), |(r, c)| (r * c) as f64 * 0.2);
        let mask = Array2::from_shape_fn((3, 4), |(r, c)| (r + c) % 2 == 0);
        let (_, g) = net.backward(&u.clone().insert_axis(Axis(0)), &truth, &mask).unwrap();
        let mut gw = 0.0;
        let mut gb = 0.0;
        for ((r, c), &m) in mask.indexed_iter() {
            if m {
                let e = 2.0 * (0.5 * u[[r, c]] + 0.1 - truth[[r, c]]);
                gw += e * u[[r, c]];
                gb += e;
            }
        }
        assert!((g.weights[0][[0, 0]] - gw).abs() < 1e-12);
        assert!((g.biases[0][0] - gb).abs() < 1e-12);
    }

    #[test]
    fn padding_aligns_output() {
        let values = Array2::from_shape_fn((5, 6), |(r, c)| (r * 10 + c) as f64);
        let mask = Array2::ones((5, 6));
        let p = pad_two_tier(&values, &mask, 5).unwrap();
        assert_eq!(p.dim(), (2, 10, 11));
        // low side gets 2, high side 3
        assert_eq!(p[[0, 0, 0]], 0.0);
        assert_eq!(p[[0, 2, 2]], 0.0);
        assert_eq!(p[[0, 9, 10]], 45.0);
        assert_eq!(p[[1, 1, 2]], 0.0);
        assert_eq!(p[[1, 2, 2]], 1.0);
        assert_eq!(p[[1, 7, 2]], 0.0);
    }

    #[test]
    fn im2col_roundtrip_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = Array3::from_shape_fn((2, 7, 6), |(a, b, c)| ((a * 31 + b * 7 + c * 3) % 11) as f64 - 5.0);
        let cols = im2col(&x, 3, 2, Parallelism::Sequential).unwrap();
        let y = Array2::from_shape_fn(cols.dim(), |(i, j)| ((i * 5 + j * 13) % 7) as f64 - 3.0);
        let lhs: f64 = (&cols * &y).sum();
        let back = col2im(&y, x.dim(), 3, 2, Parallelism::Sequential);
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
