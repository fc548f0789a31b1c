use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::CellIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// Free-form method parameters (structure, k, ...).
    pub detail: String,
    pub rmse: f64,
    /// `|predicted − truth|` per evaluated cell, row-major.
    pub abs_errors: Vec<(CellIndex, f64)>,
    pub wall_seconds: f64,
    /// Training time divided by the reference structure's, when applicable.
    pub runtime_normalized: Option<f64>,
}

/// Root mean squared error over the cells selected by `eval_mask`.
pub fn evaluate(predicted: &Array2<f64>, truth: &Array2<f64>, eval_mask: &Array2<bool>) -> Result<EvalReport> {
    if predicted.dim() != truth.dim() || truth.dim() != eval_mask.dim() {
        return Err(Error::Shape(format!("predicted {:?}, truth {:?}, eval mask {:?}", predicted.dim(), truth.dim(), eval_mask.dim())));
    }
    let mut abs_errors = Vec::new();
    let mut sq = 0.0;
    for ((r, c), &m) in eval_mask.indexed_iter() {
        if m {
            let e = predicted[[r, c]] - truth[[r, c]];
            sq += e * e;
            abs_errors.push((CellIndex::new(r, c), e.abs()));
        }
    }
    if abs_errors.is_empty() {
        return Err(Error::InvalidParameter("evaluation mask selects no cells".into()));
    }
    Ok(EvalReport {
        method: String::new(),
        detail: String::new(),
        rmse: (sq / abs_errors.len() as f64).sqrt(),
        abs_errors,
        wall_seconds: 0.0,
        runtime_normalized: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let t = Array2::from_shape_fn((3, 3), |(r, c)| (r * c) as f64);
        let m = Array2::from_elem((3, 3), true);
        assert_eq!(evaluate(&t, &t, &m).unwrap().rmse, 0.0);
    }

    #[test]
    fn two_cell_plug_in() {
        let t = Array2::zeros((2, 2));
        let mut p = Array2::zeros((2, 2));
        p[[0, 0]] = 3.0;
        p[[1, 1]] = -4.0;
        p[[0, 1]] = 100.0;
        let mut m = Array2::from_elem((2, 2), false);
        m[[0, 0]] = true;
        m[[1, 1]] = true;
        let r = evaluate(&p, &t, &m).unwrap();
        assert!((r.rmse - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.abs_errors.len(), 2);
    }

    #[test]
    fn empty_mask_rejected() {
        let t = Array2::zeros((2, 2));
        assert!(evaluate(&t, &t, &Array2::from_elem((2, 2), false)).is_err());
    }
}
