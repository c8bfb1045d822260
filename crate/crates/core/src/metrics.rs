//! Horizon-wise MAE / RMSE / MAPE.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tensor};

/// Horizons reported individually (steps ahead, 1-based).
pub const REPORT_HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    abs: f64,
    sq: f64,
    count: u64,
    ape: f64,
    ape_count: u64,
}

impl Sums {
    fn cell(&self) -> MetricCell {
        if self.count == 0 {
            return MetricCell::default();
        }
        let n = self.count as f64;
        MetricCell {
            mae: self.abs / n,
            rmse: (self.sq / n).sqrt(),
            mape: if self.ape_count == 0 {
                0.0
            } else {
                100.0 * self.ape / self.ape_count as f64
            },
        }
    }
}

/// Streams raw-scale predictions and targets laid out `[rows, F]`.
#[derive(Debug, Clone)]
pub struct MetricsAccumulator {
    per_horizon: Vec<Sums>,
    mape_threshold: f64,
}

impl MetricsAccumulator {
    pub fn new(horizon: usize, mape_threshold: f64) -> Self {
        Self {
            per_horizon: vec![Sums::default(); horizon],
            mape_threshold,
        }
    }

    pub fn push<T: Real>(&mut self, pred: &Tensor<T>, target: &Tensor<T>) {
        let f = self.per_horizon.len();
        assert_eq!(pred.len(), target.len(), "prediction/target size mismatch");
        assert_eq!(pred.len() % f, 0, "rows must have {f} horizons");
        for (p_row, y_row) in pred.data().chunks(f).zip(target.data().chunks(f)) {
            for ((s, &p), &y) in self.per_horizon.iter_mut().zip(p_row).zip(y_row) {
                let (p, y) = (p.to_f64(), y.to_f64());
                let e = p - y;
                s.abs += e.abs();
                s.sq += e * e;
                s.count += 1;
                if y.abs() > self.mape_threshold {
                    s.ape += e.abs() / y.abs();
                    s.ape_count += 1;
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.per_horizon.iter().all(|s| s.count == 0)
    }

    pub fn report(&self) -> MetricsReport {
        let horizons = REPORT_HORIZONS
            .iter()
            .filter(|&&h| h <= self.per_horizon.len())
            .map(|&h| (h, self.per_horizon[h - 1].cell()))
            .collect();
        let total = self.per_horizon.iter().fold(Sums::default(), |a, s| Sums {
            abs: a.abs + s.abs,
            sq: a.sq + s.sq,
            count: a.count + s.count,
            ape: a.ape + s.ape,
            ape_count: a.ape_count + s.ape_count,
        });
        MetricsReport {
            horizons,
            average: total.cell(),
            epoch_seconds: None,
            peak_resident_bytes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `(h, cell)` for each reported horizon `h` that the model predicts.
    pub horizons: Vec<(usize, MetricCell)>,
    /// Over every entry of every horizon.
    pub average: MetricCell,
    pub epoch_seconds: Option<f64>,
    pub peak_resident_bytes: Option<u64>,
}

impl MetricsReport {
    pub fn horizon(&self, h: usize) -> Option<MetricCell> {
        self.horizons.iter().find(|(k, _)| *k == h).map(|(_, c)| *c)
    }

    /// `(label, cell)` in table order: each horizon, then the average.
    pub fn columns(&self) -> Vec<(String, MetricCell)> {
        self.horizons
            .iter()
            .map(|(h, c)| (format!("@{h}"), *c))
            .chain(std::iter::once(("Avg.".to_string(), self.average)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,mae,rmse,mape\n");
        for (label, c) in self.columns() {
            s.push_str(&format!("{label},{:.6},{:.6},{:.6}\n", c.mae, c.rmse, c.mape));
        }
        s
    }
}

/// Table layout: one row per metric, one column per horizon plus `Avg.`.
impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = self.columns();
        write!(f, "{:<6}", "Metric")?;
        for (label, _) in &cols {
            write!(f, " {label:>10}")?;
        }
        writeln!(f)?;
        type Pick = fn(&MetricCell) -> String;
        let rows: [(&str, Pick); 3] = [
            ("MAE", |c| format!("{:.2}", c.mae)),
            ("RMSE", |c| format!("{:.2}", c.rmse)),
            ("MAPE", |c| format!("{:.2}%", c.mape)),
        ];
        for (name, pick) in rows {
            write!(f, "{name:<6}")?;
            for (_, c) in &cols {
                write!(f, " {:>10}", pick(c))?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let mut acc = MetricsAccumulator::new(1, 1.0);
        let pred = Tensor::<f64>::new(&[2, 1], vec![12.0, 16.0]).unwrap();
        let y = Tensor::<f64>::new(&[2, 1], vec![10.0, 20.0]).unwrap();
        acc.push(&pred, &y);
        let r = acc.report();
        assert!(r.horizons.is_empty());
        assert_eq!(r.average.mae, 3.0);
        assert!((r.average.rmse - 10f64.sqrt()).abs() < 1e-12);
        assert!((r.average.mape - 20.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_are_zero() {
        let mut acc = MetricsAccumulator::new(12, 1.0);
        let y = Tensor::<f32>::full(&[4, 12], 7.0);
        acc.push(&y, &y);
        let r = acc.report();
        assert_eq!(r.horizons.len(), 3);
        assert!(r.columns().iter().all(|(_, c)| *c == MetricCell::default()));
    }

    #[test]
    fn mape_skips_small_targets() {
        let mut acc = MetricsAccumulator::new(1, 1.0);
        let pred = Tensor::<f64>::new(&[3, 1], vec![5.0, 0.5, 11.0]).unwrap();
        let y = Tensor::<f64>::new(&[3, 1], vec![0.0, 1.0, 10.0]).unwrap();
        acc.push(&pred, &y);
        assert!((acc.report().average.mape - 10.0).abs() < 1e-12);
    }

    #[test]
    fn table_has_twelve_cells() {
        let mut acc = MetricsAccumulator::new(12, 1.0);
        acc.push(&Tensor::<f32>::full(&[2, 12], 3.0), &Tensor::full(&[2, 12], 4.0));
        let text = acc.report().to_string();
        assert!(text.contains("@3") && text.contains("@12") && text.contains("Avg."));
        assert_eq!(text.matches('%').count(), 4);
        assert_eq!(acc.report().to_csv().lines().count(), 5);
    }
}
