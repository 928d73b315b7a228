use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Scales each feature by its maximum absolute value on the fit data.
/// Zeros stay zeros, so sparse abundance columns keep their sparsity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxAbsScaler {
    pub max_abs: Vec<f64>,
}

impl MaxAbsScaler {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let max_abs = x
            .columns()
            .into_iter()
            .map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .collect();
        Self { max_abs }
    }

    fn scale(&self, j: usize) -> f64 {
        if self.max_abs[j] == 0.0 {
            1.0
        } else {
            self.max_abs[j]
        }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let s = self.scale(j);
            col.mapv_inplace(|v| v / s);
        }
        out
    }

    pub fn inverse_transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let s = self.scale(j);
            col.mapv_inplace(|v| v * s);
        }
        out
    }
}
