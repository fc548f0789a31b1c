//! Quantization of scattered channel samples onto a regular grid.
//!
//! A [`ChannelGrid`] pairs the value matrix with a boolean validity mask.
//! Invalid cells always hold `0.0`; validity is decided by the mask alone,
//! so a genuine 0 dB measurement is representable.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One user record: a planar position in meters and the measured gain in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x1: f64,
    pub x2: f64,
    pub gain_db: f64,
}

impl Sample {
    pub fn new(x1: f64, x2: f64, gain_db: f64) -> Result<Self> {
        let s = Sample { x1, x2, gain_db };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x1.is_finite() && self.x2.is_finite()) {
            return Err(Error::InvalidParameter(format!("sample coordinate ({}, {}) is not finite", self.x1, self.x2)));
        }
        if !self.gain_db.is_finite() {
            return Err(Error::InvalidParameter(format!("sample gain {} is not finite", self.gain_db)));
        }
        Ok(())
    }
}

/// Zero-based (row, col) position of a grid cell. Rows follow the first
/// coordinate axis, columns the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub const fn new(row: usize, col: usize) -> Self {
        CellIndex { row, col }
    }

    /// The same cell in 1-based (matrix) indexing.
    pub fn one_based(self) -> (usize, usize) {
        (self.row + 1, self.col + 1)
    }

    /// Squared Euclidean distance in cell units.
    pub fn dist2(self, other: CellIndex) -> usize {
        let dr = self.row.abs_diff(other.row);
        let dc = self.col.abs_diff(other.col);
        dr * dr + dc * dc
    }

    pub fn dist(self, other: CellIndex) -> f64 {
        (self.dist2(other) as f64).sqrt()
    }
}

/// Bounding box and resolution of a channel database.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x1_min: f64,
    pub x1_max: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    /// Cell size in meters.
    pub q: f64,
}

impl GridSpec {
    pub fn new(x1_min: f64, x1_max: f64, x2_min: f64, x2_max: f64, q: f64) -> Result<Self> {
        let spec = GridSpec { x1_min, x1_max, x2_min, x2_max, q };
        spec.validate()?;
        Ok(spec)
    }

    /// A spec with its lower corner at the origin and exactly `rows × cols` cells.
    pub fn with_shape(rows: usize, cols: usize, q: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidSpec("grid must have at least one row and column".into()));
        }
        Self::new(0.0, (rows - 1) as f64 * q, 0.0, (cols - 1) as f64 * q, q)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.x1_min, self.x1_max, self.x2_min, self.x2_max, self.q];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("bounds and resolution must be finite".into()));
        }
        if self.q <= 0.0 {
            return Err(Error::InvalidSpec(format!("resolution q={} must be positive", self.q)));
        }
        if self.x1_max < self.x1_min || self.x2_max < self.x2_min {
            return Err(Error::InvalidSpec("upper bound below lower bound".into()));
        }
        Ok(())
    }

    /// H = round((x1_max − x1_min)/q) + 1.
    pub fn rows(&self) -> usize {
        ((self.x1_max - self.x1_min) / self.q).round() as usize + 1
    }

    /// W = round((x2_max − x2_min)/q) + 1.
    pub fn cols(&self) -> usize {
        ((self.x2_max - self.x2_min) / self.q).round() as usize + 1
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn cell_count(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Physical coordinate of a cell's center.
    pub fn cell_center(&self, cell: CellIndex) -> (f64, f64) {
        (self.x1_min + cell.row as f64 * self.q, self.x2_min + cell.col as f64 * self.q)
    }

    /// Maps a coordinate to the cell whose center is nearest along each axis.
    /// Ties at exactly half a cell round away from zero.
    pub fn map_coordinate(&self, x1: f64, x2: f64) -> Result<CellIndex> {
        if !(x1.is_finite() && x2.is_finite()) {
            return Err(Error::OutOfBounds { x1, x2 });
        }
        let r = ((x1 - self.x1_min) / self.q).round();
        let c = ((x2 - self.x2_min) / self.q).round();
        if r < 0.0 || c < 0.0 || r >= self.rows() as f64 || c >= self.cols() as f64 {
            return Err(Error::OutOfBounds { x1, x2 });
        }
        Ok(CellIndex::new(r as usize, c as usize))
    }
}

/// The database matrix `D` with its validity mask `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrid {
    spec: GridSpec,
    values: Array2<f64>,
    mask: Array2<bool>,
}

impl ChannelGrid {
    /// A grid with no valid cells.
    pub fn empty(spec: GridSpec) -> Self {
        let shape = spec.shape();
        ChannelGrid { spec, values: Array2::zeros(shape), mask: Array2::from_elem(shape, false) }
    }

    /// Assembles a grid from a value and mask matrix. Values under a false
    /// mask are cleared to 0.
    pub fn from_parts(spec: GridSpec, mut values: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        let shape = spec.shape();
        if values.dim() != shape || mask.dim() != shape {
            return Err(Error::Shape(format!("spec is {}x{}, values {:?}, mask {:?}", shape.0, shape.1, values.dim(), mask.dim())));
        }
        for (v, &m) in values.iter_mut().zip(mask.iter()) {
            if !m {
                *v = 0.0;
            } else if !v.is_finite() {
                return Err(Error::InvalidParameter(format!("valid entry {v} is not finite")));
            }
        }
        Ok(ChannelGrid { spec, values, mask })
    }

    /// A fully valid grid holding `values`.
    pub fn complete(spec: GridSpec, values: Array2<f64>) -> Result<Self> {
        let mask = Array2::from_elem(values.dim(), true);
        Self::from_parts(spec, values, mask)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn is_valid(&self, cell: CellIndex) -> bool {
        self.mask[[cell.row, cell.col]]
    }

    pub fn get(&self, cell: CellIndex) -> Option<f64> {
        self.is_valid(cell).then(|| self.values[[cell.row, cell.col]])
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Valid cells in row-major order.
    pub fn valid_cells(&self) -> impl Iterator<Item = (CellIndex, f64)> + '_ {
        self.mask.indexed_iter().filter(|(_, &m)| m).map(|((r, c), _)| (CellIndex::new(r, c), self.values[[r, c]]))
    }

    /// Mask as a 0/1 float matrix.
    pub fn mask_f64(&self) -> Array2<f64> {
        self.mask.mapv(|m| if m { 1.0 } else { 0.0 })
    }

    /// Keeps only the cells where `keep` is true (and already valid).
    pub fn restrict(&self, keep: &Array2<bool>) -> Result<Self> {
        if keep.dim() != self.shape() {
            return Err(Error::Shape("restriction mask does not match grid".into()));
        }
        let mask = ndarray::Zip::from(&self.mask).and(keep).map_collect(|&m, &k| m && k);
        Self::from_parts(self.spec, self.values.clone(), mask)
    }
}

/// Quantizes samples onto the grid. Cells hit by several samples hold the
/// arithmetic mean of their dB gains.
pub fn build_grid(spec: &GridSpec, samples: &[Sample]) -> Result<ChannelGrid> {
    spec.validate()?;
    let (rows, cols) = spec.shape();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); rows * cols];
    for s in samples {
        s.validate()?;
        let cell = spec.map_coordinate(s.x1, s.x2)?;
        buckets[cell.row * cols + cell.col].push(s.gain_db);
    }
    let mut grid = ChannelGrid::empty(*spec);
    for (idx, bucket) in buckets.iter_mut().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        // sorted summation keeps the mean independent of sample order
        bucket.sort_by(f64::total_cmp);
        let mean = bucket.iter().sum::<f64>() / bucket.len() as f64;
        let (r, c) = (idx / cols, idx % cols);
        grid.values[[r, c]] = mean;
        grid.mask[[r, c]] = true;
    }
    Ok(grid)
}

/// Result of dividing the valid set into a training subset and a labeling subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Grid restricted to the training subset.
    pub train: ChannelGrid,
    /// Cells that were valid but held out (`M_V − M_T`).
    pub label_mask: Array2<bool>,
}

impl Split {
    pub fn label_count(&self) -> usize {
        self.label_mask.iter().filter(|&&m| m).count()
    }
}

/// Randomly keeps `round(fraction · V)` valid entries for training; the
/// remainder forms the label mask. Deterministic in `seed`.
pub fn split_valid(grid: &ChannelGrid, fraction: f64, seed: u64) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::DegenerateSplit(format!("fraction {fraction} not in (0, 1)")));
    }
    let valid: Vec<CellIndex> = grid.valid_cells().map(|(c, _)| c).collect();
    let v = valid.len();
    let n_train = (fraction * v as f64).round() as usize;
    if n_train == 0 || n_train >= v {
        return Err(Error::DegenerateSplit(format!("{v} valid entries with fraction {fraction} leave an empty training or label set")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, v, n_train);
    let mut keep = Array2::from_elem(grid.shape(), false);
    for i in chosen.iter() {
        let c = valid[i];
        keep[[c.row, c.col]] = true;
    }
    let train = grid.restrict(&keep)?;
    let label_mask = ndarray::Zip::from(grid.mask()).and(&keep).map_collect(|&m, &k| m && !k);
    Ok(Split { train, label_mask })
}
