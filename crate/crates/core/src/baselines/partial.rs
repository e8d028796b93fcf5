use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::observation::{ObservationMode, ObservationSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedCell {
    pub row: usize,
    pub col: usize,
    /// Mean of every observation of this cell in `mode`.
    pub value: f64,
    pub count: usize,
    pub mode: ObservationMode,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Slot {
    sum: f64,
    count: usize,
    mode: ObservationMode,
}

/// A partially observed matrix `A_obs`: the observed cells with their
/// averaged values and provenance, zero elsewhere.
///
/// A cell holds observations of one mode only. An entry-mode observation
/// replaces any column-mode value already stored for the cell, and later
/// column-mode observations of it are dropped, so `Omega_c` and `Omega_e`
/// stay disjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialMatrix {
    rows: usize,
    cols: usize,
    cells: BTreeMap<(usize, usize), Slot>,
}

impl PartialMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: BTreeMap::new(),
        }
    }

    pub fn from_observations(obs: &ObservationSet) -> Result<Self> {
        let mut p = Self::new(obs.rows, obs.cols);
        for c in &obs.column_samples {
            for (i, &v) in c.values.iter().enumerate() {
                p.insert(i, c.col, v, ObservationMode::Column)?;
            }
        }
        for e in &obs.entry_samples {
            p.insert(e.row, e.col, e.value, ObservationMode::Entry)?;
        }
        Ok(p)
    }

    fn check(&self, row: usize, col: usize, value: f64) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::dims(format!("cell ({row}, {col}) outside {}x{}", self.rows, self.cols)));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { row, col });
        }
        Ok(())
    }

    /// Adds one observation, averaging with earlier ones of the same mode.
    pub fn insert(&mut self, row: usize, col: usize, value: f64, mode: ObservationMode) -> Result<()> {
        self.check(row, col, value)?;
        let fresh = Slot { sum: value, count: 1, mode };
        match self.cells.get_mut(&(row, col)) {
            None => {
                self.cells.insert((row, col), fresh);
            }
            Some(slot) if slot.mode == mode => {
                slot.sum += value;
                slot.count += 1;
            }
            Some(slot) => {
                if mode == ObservationMode::Entry {
                    *slot = fresh;
                }
            }
        }
        Ok(())
    }

    /// Overwrites the cell, discarding earlier observations. Returns whether
    /// a value was replaced.
    pub fn set(&mut self, row: usize, col: usize, value: f64, mode: ObservationMode) -> Result<bool> {
        self.check(row, col, value)?;
        Ok(self
            .cells
            .insert((row, col), Slot { sum: value, count: 1, mode })
            .is_some())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        self.cells.get(&(row, col)).map(|s| s.sum / s.count as f64)
    }

    pub fn mode(&self, row: usize, col: usize) -> Option<ObservationMode> {
        self.cells.get(&(row, col)).map(|s| s.mode)
    }

    /// Observed cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = ObservedCell> + '_ {
        self.cells.iter().map(|(&(row, col), s)| ObservedCell {
            row,
            col,
            value: s.sum / s.count as f64,
            count: s.count,
            mode: s.mode,
        })
    }

    /// Cells of one mode, or all cells for `None`.
    pub fn omega(&self, mode: Option<ObservationMode>) -> Vec<(usize, usize)> {
        self.cells()
            .filter(|c| mode.map_or(true, |m| c.mode == m))
            .map(|c| (c.row, c.col))
            .collect()
    }

    pub fn count(&self, mode: ObservationMode) -> usize {
        self.cells.values().filter(|s| s.mode == mode).count()
    }

    /// `A_obs`: observed means, zero elsewhere.
    pub fn to_dense(&self) -> DenseMatrix {
        DenseMatrix::wrap(self.zero_filled())
    }

    pub(crate) fn zero_filled(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for c in self.cells() {
            m[(c.row, c.col)] = c.value;
        }
        m
    }

    /// The cells for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(&ObservedCell) -> bool) -> PartialMatrix {
        let mut out = Self::new(self.rows, self.cols);
        for (&k, s) in &self.cells {
            let cell = ObservedCell {
                row: k.0,
                col: k.1,
                value: s.sum / s.count as f64,
                count: s.count,
                mode: s.mode,
            };
            if keep(&cell) {
                out.cells.insert(k, *s);
            }
        }
        out
    }

    /// Per-column mean of the observed cells; `None` for unobserved columns.
    pub fn column_means(&self) -> Vec<Option<f64>> {
        let mut sum = vec![0.0; self.cols];
        let mut count = vec![0usize; self.cols];
        for c in self.cells() {
            sum[c.col] += c.value;
            count[c.col] += 1;
        }
        sum.into_iter()
            .zip(count)
            .map(|(s, k)| (k > 0).then(|| s / k as f64))
            .collect()
    }
}

/// `P_Omega(Z)`: `Z` on the listed cells, zero elsewhere.
pub fn project_omega(z: &DenseMatrix, omega: &[(usize, usize)]) -> Result<DenseMatrix> {
    let mut out = DMatrix::zeros(z.rows(), z.cols());
    for &(i, j) in omega {
        if i >= z.rows() || j >= z.cols() {
            return Err(Error::dims(format!("cell ({i}, {j}) outside {}x{}", z.rows(), z.cols())));
        }
        out[(i, j)] = z[(i, j)];
    }
    Ok(DenseMatrix::wrap(out))
}
