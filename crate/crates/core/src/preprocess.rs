//! Standard scaling fit on the reweighting data.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{DfrError, Result};

/// Columns whose population std falls below this are treated as constant.
pub const DEGENERATE_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Scaler {
    /// Zero mean, unit std: `apply` is the identity.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: Array1::zeros(d),
            std: Array1::ones(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        apply_scaler(self, features)
    }
}

/// Column means and population standard deviations (divide by `n`).
pub fn fit_scaler(features: ArrayView2<'_, f64>) -> Result<Scaler> {
    let n = features.nrows();
    if n == 0 {
        return Err(DfrError::InvalidArgument("cannot fit a scaler on zero rows".into()));
    }
    let mean = features.mean_axis(Axis(0)).expect("n > 0");
    let mut var = Array1::<f64>::zeros(features.ncols());
    for row in features.rows() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            let dx = x - m;
            *v += dx * dx;
        }
    }
    let std = var.mapv(|v| {
        let s = (v / n as f64).sqrt();
        if s < DEGENERATE_STD || !s.is_finite() {
            1.0
        } else {
            s
        }
    });
    Ok(Scaler { mean, std })
}

pub fn apply_scaler(scaler: &Scaler, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if features.ncols() != scaler.dim() {
        return Err(DfrError::DimensionMismatch {
            context: "scaler input width",
            expected: scaler.dim(),
            found: features.ncols(),
        });
    }
    let mut out = features.to_owned();
    for mut row in out.rows_mut() {
        for ((x, m), s) in row.iter_mut().zip(&scaler.mean).zip(&scaler.std) {
            *x = (*x - m) / s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_statistics() {
        let s = fit_scaler(array![[1.0, 2.0], [3.0, 4.0]].view()).unwrap();
        assert_eq!(s.mean, array![2.0, 3.0]);
        assert_eq!(s.std, array![1.0, 1.0]);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let x = array![[5.0, 1.0], [5.0, 2.0], [5.0, 6.0]];
        let s = fit_scaler(x.view()).unwrap();
        assert_eq!(s.std[0], 1.0);
        let z = apply_scaler(&s, x.view()).unwrap();
        assert!(z.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row() {
        let x = array![[3.0, -2.0, 7.5]];
        let s = fit_scaler(x.view()).unwrap();
        assert_eq!(s.std, array![1.0, 1.0, 1.0]);
        assert!(apply_scaler(&s, x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_scaler() {
        let x = array![[1.5, -2.0], [0.25, 8.0]];
        assert_eq!(apply_scaler(&Scaler::identity(2), x.view()).unwrap(), x);
    }

    #[test]
    fn width_mismatch() {
        let s = Scaler::identity(3);
        assert!(matches!(
            apply_scaler(&s, array![[1.0, 2.0]].view()),
            Err(DfrError::DimensionMismatch { expected: 3, found: 2, .. })
        ));
    }

    #[test]
    fn statistics_do_not_transfer_to_shifted_data() {
        let fit = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let shifted = fit.mapv(|v| 2.0 * v + 5.0);
        let s = fit_scaler(fit.view()).unwrap();
        let z = apply_scaler(&s, shifted.view()).unwrap();
        let means = z.mean_axis(Axis(0)).unwrap();
        assert!(means.iter().all(|m| m.abs() > 1.0), "{means}");
    }

    proptest! {
        #[test]
        fn fit_then_apply_standardizes(
            rows in 2usize..40,
            values in proptest::collection::vec(-1e3f64..1e3, 2 * 40 * 3),
        ) {
            let x = Array2::from_shape_vec((rows, 3), values[..rows * 3].to_vec()).unwrap();
            let s = fit_scaler(x.view()).unwrap();
            let z = apply_scaler(&s, x.view()).unwrap();
            for j in 0..3 {
                let col = z.column(j);
                let mean = col.mean().unwrap();
                prop_assert!(mean.abs() < 1e-10);
                if s.std[j] != 1.0 || col.iter().any(|v| *v != 0.0) {
                    let sd = (col.mapv(|v| (v - mean).powi(2)).sum() / rows as f64).sqrt();
                    prop_assert!((sd - 1.0).abs() < 1e-8, "sd {}", sd);
                }
                // affine and invertible
                for (zi, xi) in col.iter().zip(x.column(j)) {
                    prop_assert!((zi * s.std[j] + s.mean[j] - xi).abs() < 1e-9 * (1.0 + xi.abs()));
                }
            }
        }
    }
}
