use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Masked errors over entries with a nonzero target. MAPE is in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub count: usize,
}

/// Running sums for pooling masked errors over many windows.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsAccumulator {
    abs: f64,
    sq: f64,
    pct: f64,
    count: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, y: f64, y_hat: f64) {
        if y == 0.0 {
            return;
        }
        let e = (y_hat - y).abs();
        self.abs += e;
        self.sq += e * e;
        self.pct += e / y.abs();
        self.count += 1;
    }

    pub fn push_slices(&mut self, y: &[f64], y_hat: &[f64]) {
        for (&a, &b) in y.iter().zip(y_hat) {
            self.push(a, b);
        }
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.pct += other.pct;
        self.count += other.count;
    }

    /// `None` when every target was masked out.
    pub fn finish(&self) -> Option<Metrics> {
        (self.count > 0).then(|| {
            let c = self.count as f64;
            Metrics {
                mae: self.abs / c,
                rmse: (self.sq / c).sqrt(),
                mape: 100.0 * self.pct / c,
                count: self.count,
            }
        })
    }
}

/// Masked MAE, RMSE and MAPE of `y_hat` against `y`, skipping `y == 0`.
pub fn masked_metrics(y: &Tensor, y_hat: &Tensor) -> Result<Option<Metrics>> {
    if y.shape() != y_hat.shape() {
        return Err(Error::dim("masked_metrics", y.shape(), y_hat.shape()));
    }
    let mut acc = MetricsAccumulator::new();
    acc.push_slices(y.data(), y_hat.data());
    Ok(acc.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(d: &[f64]) -> Tensor {
        Tensor::new(vec![d.len()], d.to_vec()).unwrap()
    }

    #[test]
    fn worked_example() {
        let m = masked_metrics(&t(&[1.0, 2.0]), &t(&[2.0, 4.0])).unwrap().unwrap();
        assert!((m.mae - 1.5).abs() < 1e-12);
        assert!((m.rmse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((m.mape - 100.0).abs() < 1e-12);
    }

    #[test]
    fn zero_targets_are_excluded() {
        let m = masked_metrics(&t(&[0.0, 2.0]), &t(&[5.0, 2.0])).unwrap().unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.count, 1);
        assert!(masked_metrics(&t(&[0.0, 0.0]), &t(&[1.0, 1.0])).unwrap().is_none());
    }

    #[test]
    fn shape_mismatch() {
        assert!(masked_metrics(&t(&[1.0]), &t(&[1.0, 2.0])).is_err());
    }
}
