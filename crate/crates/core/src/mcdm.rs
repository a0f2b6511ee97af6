//! Entropy-weighted multi-criteria scoring, generic over the float type.
//!
//! Raw criteria are min-max normalised into benefit form (cost columns inverted,
//! constant columns mapped to 0.5). Column weights come from the Shannon
//! entropy of each column's distribution: a column that does not discriminate
//! between alternatives has entropy 1 and gets weight 0.

use num_traits::Float;
use thiserror::Error;

use crate::model::TelemetrySnapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum McdmError {
    #[error("entropy weighting needs at least 2 alternatives, got {0}")]
    DegenerateMatrix(usize),
    #[error("rows have inconsistent lengths")]
    Ragged,
    #[error("matrix entries must be finite and non-negative")]
    InvalidEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    Benefit,
    Cost,
}

/// Telemetry criteria in column order: cpu_load, ram_free, battery, rtt, temperature.
pub const TELEMETRY_ORIENTATION: [Orientation; 5] = [
    Orientation::Cost,
    Orientation::Benefit,
    Orientation::Benefit,
    Orientation::Cost,
    Orientation::Cost,
];

/// Rows are alternatives (workers), columns are benefit-oriented criteria.
#[derive(Debug, Clone, PartialEq)]
pub struct CriteriaMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Float> CriteriaMatrix<T> {
    /// Takes values that are already benefit-oriented and non-negative.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, McdmError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(McdmError::Ragged);
        }
        let values: Vec<T> = rows.iter().flatten().copied().collect();
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(McdmError::InvalidEntry);
        }
        Ok(CriteriaMatrix {
            rows: rows.len(),
            cols,
            values,
        })
    }

    /// Min-max normalises raw rows into [0, 1] benefit values.
    pub fn normalized(raw: &[Vec<T>], orientation: &[Orientation]) -> Result<Self, McdmError> {
        let cols = orientation.len();
        if raw.iter().any(|r| r.len() != cols) {
            return Err(McdmError::Ragged);
        }
        if raw.iter().flatten().any(|v| !v.is_finite()) {
            return Err(McdmError::InvalidEntry);
        }
        let half = T::from(0.5).unwrap();
        let mut values = vec![T::zero(); raw.len() * cols];
        for (j, dir) in orientation.iter().enumerate() {
            let (lo, hi) = raw
                .iter()
                .fold((T::infinity(), T::neg_infinity()), |(lo, hi), r| {
                    (lo.min(r[j]), hi.max(r[j]))
                });
            let span = hi - lo;
            for (i, r) in raw.iter().enumerate() {
                values[i * cols + j] = if span <= T::zero() {
                    half
                } else {
                    match dir {
                        Orientation::Benefit => (r[j] - lo) / span,
                        Orientation::Cost => (hi - r[j]) / span,
                    }
                };
            }
        }
        Ok(CriteriaMatrix {
            rows: raw.len(),
            cols,
            values,
        })
    }

    pub fn from_telemetry(snapshots: &[&TelemetrySnapshot]) -> Self {
        let raw: Vec<Vec<T>> = snapshots.iter().map(|s| telemetry_row(s)).collect();
        Self::normalized(&raw, &TELEMETRY_ORIENTATION)
            .expect("telemetry rows have 5 finite columns")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = T> + '_ {
        (0..self.rows).map(move |i| self.get(i, j))
    }

    /// Per-row weighted sum.
    pub fn scores(&self, weights: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|i| (0..self.cols).fold(T::zero(), |acc, j| acc + weights[j] * self.get(i, j)))
            .collect()
    }
}

pub fn telemetry_row<T: Float>(s: &TelemetrySnapshot) -> Vec<T> {
    [
        s.cpu_load,
        s.ram_free_bytes as f64,
        s.battery_fraction,
        s.rtt_ms,
        s.temperature_c,
    ]
    .iter()
    .map(|&v| T::from(v).unwrap())
    .collect()
}

/// Shannon entropy weights; non-negative and summing to one.
pub fn entropy_weights<T: Float>(m: &CriteriaMatrix<T>) -> Result<Vec<T>, McdmError> {
    if m.rows < 2 {
        return Err(McdmError::DegenerateMatrix(m.rows));
    }
    let rows = T::from(m.rows).unwrap();
    let k = T::one() / rows.ln();

    let divergence: Vec<T> = (0..m.cols)
        .map(|j| {
            let first = m.get(0, j);
            if m.column(j).all(|v| v == first) {
                // p_ij = 1/m exactly, so e_j = 1.
                return T::zero();
            }
            let total = m.column(j).fold(T::zero(), |a, v| a + v);
            let entropy = m.column(j).fold(T::zero(), |acc, v| {
                let p = v / total;
                if p > T::zero() {
                    acc - p * p.ln()
                } else {
                    acc
                }
            });
            (T::one() - k * entropy).max(T::zero())
        })
        .collect();

    let sum = divergence.iter().fold(T::zero(), |a, &d| a + d);
    if sum <= T::zero() {
        let uniform = T::one() / T::from(m.cols).unwrap();
        return Ok(vec![uniform; m.cols]);
    }
    Ok(divergence.into_iter().map(|d| d / sum).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_column_gets_no_weight() {
        let m = CriteriaMatrix::from_rows(&[
            vec![0.3, 1.0, 5.0],
            vec![0.3, 2.0, 1.0],
            vec![0.3, 0.5, 3.0],
        ])
        .unwrap();
        let w = entropy_weights(&m).unwrap();
        assert!(w[0] <= 1e-9);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn single_varying_column_takes_all_weight() {
        let m = CriteriaMatrix::from_rows(&[vec![1.0f32, 0.2, 4.0], vec![1.0, 0.9, 4.0]]).unwrap();
        assert_eq!(entropy_weights(&m).unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn symmetric_identity_matrix() {
        let m = CriteriaMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(entropy_weights(&m).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn all_constant_falls_back_to_uniform() {
        let m = CriteriaMatrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(entropy_weights(&m).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn one_row_is_degenerate() {
        let m = CriteriaMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(entropy_weights(&m), Err(McdmError::DegenerateMatrix(1)));
    }

    #[test]
    fn entropy_matches_hand_computation() {
        // Column [1, 3]: p = [0.25, 0.75], e = -(p ln p summed)/ln 2.
        let m = CriteriaMatrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 1.0]]).unwrap();
        let e: f64 = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln()) / 2f64.ln();
        let d0 = 1.0 - e;
        let d1 = 1.0;
        let w = entropy_weights(&m).unwrap();
        assert!((w[0] - d0 / (d0 + d1)).abs() < 1e-15);
        assert!((w[1] - d1 / (d0 + d1)).abs() < 1e-15);
    }

    #[test]
    fn normalisation_orients_costs() {
        let m = CriteriaMatrix::normalized(
            &[vec![10.0, 1.0, 7.0], vec![20.0, 3.0, 7.0]],
            &[Orientation::Benefit, Orientation::Cost, Orientation::Cost],
        )
        .unwrap();
        assert_eq!(m.column(0).collect::<Vec<_>>(), vec![0.0, 1.0]);
        assert_eq!(m.column(1).collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(m.column(2).collect::<Vec<_>>(), vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(
            CriteriaMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]),
            Err(McdmError::Ragged)
        );
        assert_eq!(
            CriteriaMatrix::from_rows(&[vec![-1.0], vec![1.0]]),
            Err(McdmError::InvalidEntry)
        );
    }
}
