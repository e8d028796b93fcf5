//! The two-cost observation model: prices, noise levels, budget accounting
//! and the noisy sampling primitives.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::sketch::{self, SketchMatrix};

/// Relative slack when comparing currency amounts against the budget.
const BUDGET_RTOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoCostModel {
    /// Price of one low-noise entry observation.
    pub p_e: f64,
    /// Price of one high-noise full-column observation.
    pub p_c: f64,
    pub sigma_e: f64,
    pub sigma_c: f64,
    pub budget: f64,
}

impl TwoCostModel {
    pub fn new(p_e: f64, p_c: f64, sigma_e: f64, sigma_c: f64, budget: f64) -> Result<Self> {
        let model = Self {
            p_e,
            p_c,
            sigma_e,
            sigma_c,
            budget,
        };
        model.validate()?;
        Ok(model)
    }

    /// Column price from the ratio `alpha = p_c / (m p_e)`.
    pub fn from_alpha(m: usize, p_e: f64, alpha: f64, sigma_e: f64, sigma_c: f64, budget: f64) -> Result<Self> {
        Self::new(p_e, alpha * m as f64 * p_e, sigma_e, sigma_c, budget)
    }

    pub fn alpha(&self, m: usize) -> f64 {
        self.p_c / (m as f64 * self.p_e)
    }

    fn validate(&self) -> Result<()> {
        let all = [self.p_e, self.p_c, self.sigma_e, self.sigma_c, self.budget];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("two-cost model parameters must be finite"));
        }
        if self.p_e <= 0.0 || self.p_c <= 0.0 {
            return Err(Error::invalid("observation prices must be positive"));
        }
        if self.sigma_e < 0.0 || self.sigma_c < 0.0 {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        if self.budget < 0.0 {
            return Err(Error::invalid("budget must be non-negative"));
        }
        Ok(())
    }

    /// The regime the model is meant for: columns are cheaper than `m`
    /// entries and noisier than entries. Noise-free toy settings fail this
    /// check but are still valid inputs to the samplers.
    pub fn check_regime(&self, m: usize) -> Result<()> {
        if self.p_c >= m as f64 * self.p_e {
            return Err(Error::invalid(format!(
                "column price {} is not below m * p_e = {}",
                self.p_c,
                m as f64 * self.p_e
            )));
        }
        if self.sigma_c <= self.sigma_e {
            return Err(Error::invalid(format!(
                "column noise {} must exceed entry noise {}",
                self.sigma_c, self.sigma_e
            )));
        }
        Ok(())
    }

    /// Largest number of entries the whole budget can buy.
    pub fn affordable_entries(&self) -> usize {
        self.entries_after(0.0)
    }

    /// Largest number of entries still affordable once `spent` is committed.
    pub fn entries_after(&self, spent: f64) -> usize {
        let left = self.budget - spent;
        if left < 0.0 {
            return 0;
        }
        floor_count(left / self.p_e, |k| spent + k * self.p_e <= self.budget)
    }
}

/// `floor(x)` nudged up by one when floating-point division rounded just
/// below an integer that is in fact affordable.
fn floor_count(x: f64, affordable: impl Fn(f64) -> bool) -> usize {
    let base = x.max(0.0).floor();
    if affordable(base + 1.0) {
        (base + 1.0) as usize
    } else {
        base as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub d: usize,
    pub s: usize,
    pub spent: f64,
    pub leftover: f64,
}

/// `d p_c + (s n) p_e`, in the one evaluation order every caller uses.
pub fn plan_cost(model: &TwoCostModel, n: usize, d: usize, s: usize) -> f64 {
    d as f64 * model.p_c + (s * n) as f64 * model.p_e
}

/// Spends `d p_c` on columns and the floor of what remains on full rows of
/// `n` entries each. Unspent budget is reported, never rounded into a row.
pub fn plan_split(model: &TwoCostModel, n: usize, d: usize) -> Result<SamplingPlan> {
    if n == 0 {
        return Err(Error::invalid("matrix has no columns"));
    }
    let column_cost = d as f64 * model.p_c;
    if column_cost > model.budget {
        return Err(Error::InfeasiblePlan(format!(
            "{d} columns cost {column_cost}, budget is {}",
            model.budget
        )));
    }
    let remaining = model.budget - column_cost;
    let s = floor_count(remaining / (n as f64 * model.p_e), |k| {
        plan_cost(model, n, d, k as usize) <= model.budget
    });
    let spent = plan_cost(model, n, d, s);
    Ok(SamplingPlan {
        d,
        s,
        spent,
        leftover: model.budget - spent,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObservationMode {
    /// Low-noise, individually priced entry (or full row of entries).
    Entry,
    /// High-noise entry obtained as part of a column observation.
    Column,
}

/// Audited spend: every observation that is actually drawn is charged here,
/// and a charge that would pass the budget is refused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    budget: f64,
    spent: f64,
    pub columns: usize,
    pub entries: usize,
}

impl BudgetLedger {
    pub fn new(budget: f64) -> Self {
        Self {
            budget,
            spent: 0.0,
            columns: 0,
            entries: 0,
        }
    }

    fn charge(&mut self, amount: f64) -> Result<()> {
        if self.spent + amount > self.budget * (1.0 + BUDGET_RTOL) {
            return Err(Error::BudgetExceeded {
                charge: amount,
                spent: self.spent,
                budget: self.budget,
            });
        }
        self.spent += amount;
        Ok(())
    }

    pub fn charge_columns(&mut self, model: &TwoCostModel, count: usize) -> Result<()> {
        self.charge(count as f64 * model.p_c)?;
        self.columns += count;
        Ok(())
    }

    pub fn charge_entries(&mut self, model: &TwoCostModel, count: usize) -> Result<()> {
        self.charge(count as f64 * model.p_e)?;
        self.entries += count;
        Ok(())
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn leftover(&self) -> f64 {
        self.budget - self.spent
    }

    pub fn within_budget(&self) -> bool {
        self.spent <= self.budget * (1.0 + BUDGET_RTOL)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnSample {
    pub col: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntrySample {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Raw noisy samples, in draw order, split by observation mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub rows: usize,
    pub cols: usize,
    pub column_samples: Vec<ColumnSample>,
    pub entry_samples: Vec<EntrySample>,
}

impl ObservationSet {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            ..Default::default()
        }
    }

    pub fn push_column(&mut self, col: usize, values: Vec<f64>) -> Result<()> {
        if col >= self.cols || values.len() != self.rows {
            return Err(Error::dims(format!("column sample {col} does not fit {}x{}", self.rows, self.cols)));
        }
        self.column_samples.push(ColumnSample { col, values });
        Ok(())
    }

    pub fn push_entry(&mut self, row: usize, col: usize, value: f64) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::dims(format!("entry ({row}, {col}) outside {}x{}", self.rows, self.cols)));
        }
        self.entry_samples.push(EntrySample { row, col, value });
        Ok(())
    }

    pub fn extend(&mut self, other: ObservationSet) -> Result<()> {
        if (other.rows, other.cols) != (self.rows, self.cols) {
            return Err(Error::dims("observation sets of different shapes"));
        }
        self.column_samples.extend(other.column_samples);
        self.entry_samples.extend(other.entry_samples);
        Ok(())
    }

    pub fn cost(&self, model: &TwoCostModel) -> f64 {
        self.column_samples.len() as f64 * model.p_c + self.entry_samples.len() as f64 * model.p_e
    }

    pub fn distinct_entry_cells(&self) -> usize {
        let mut cells: Vec<(usize, usize)> = self.entry_samples.iter().map(|e| (e.row, e.col)).collect();
        cells.sort_unstable();
        cells.dedup();
        cells.len()
    }
}

fn add_noise<R: Rng + ?Sized>(m: &mut DMatrix<f64>, sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] += sigma * z;
        }
    }
}

/// `d` columns drawn uniformly with replacement, each entry observed with
/// independent `N(0, sigma_c^2)` noise (fresh noise for repeated columns).
pub fn sample_columns<R: Rng + ?Sized>(
    a: &DenseMatrix,
    d: usize,
    sigma_c: f64,
    rng: &mut R,
) -> Result<(DenseMatrix, Vec<usize>)> {
    let indices = draw_column_indices(a.cols(), d, rng)?;
    let c = noisy_columns(a, &indices, sigma_c, rng);
    Ok((c, indices))
}

pub(crate) fn draw_column_indices<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<Vec<usize>> {
    if d == 0 {
        return Err(Error::invalid("need at least one column sample"));
    }
    if n == 0 {
        return Err(Error::invalid("matrix has no columns"));
    }
    let pick = Uniform::new(0, n).expect("n > 0");
    Ok((0..d).map(|_| pick.sample(rng)).collect())
}

pub(crate) fn noisy_columns<R: Rng + ?Sized>(
    a: &DenseMatrix,
    indices: &[usize],
    sigma_c: f64,
    rng: &mut R,
) -> DenseMatrix {
    let mut c = DMatrix::zeros(a.rows(), indices.len());
    for (k, &j) in indices.iter().enumerate() {
        c.set_column(k, &a.column(j));
    }
    add_noise(&mut c, sigma_c, rng);
    DenseMatrix::wrap(c)
}

/// `Y = S^T A + E_e` with i.i.d. `N(0, sigma_e^2)` entries in `E_e`.
pub fn sample_rows_noisy<R: Rng + ?Sized>(
    a: &DenseMatrix,
    s: &SketchMatrix,
    sigma_e: f64,
    rng: &mut R,
) -> Result<DenseMatrix> {
    let mut y = sketch::sketch_rows(s, a.as_matrix())?;
    add_noise(&mut y, sigma_e, rng);
    Ok(DenseMatrix::wrap(y))
}

#[derive(Clone, Debug, PartialEq)]
pub enum EntryDistribution {
    Uniform,
    /// Unnormalised non-negative weights over the `m * n` cells, row-major.
    Weights(Vec<f64>),
}

/// `count` cells drawn i.i.d. with replacement, each observed with fresh
/// `N(0, sigma_e^2)` noise.
pub fn sample_entries<R: Rng + ?Sized>(
    a: &DenseMatrix,
    count: usize,
    sigma_e: f64,
    rng: &mut R,
    distribution: &EntryDistribution,
) -> Result<ObservationSet> {
    if count == 0 {
        return Err(Error::invalid("need at least one entry sample"));
    }
    let (m, n) = (a.rows(), a.cols());
    if m * n == 0 {
        return Err(Error::invalid("cannot sample entries of an empty matrix"));
    }
    let cells: Vec<usize> = match distribution {
        EntryDistribution::Uniform => {
            let pick = Uniform::new(0, m * n).expect("m n > 0");
            (0..count).map(|_| pick.sample(rng)).collect()
        }
        EntryDistribution::Weights(w) => {
            if w.len() != m * n {
                return Err(Error::invalid(format!("{} weights for {} cells", w.len(), m * n)));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::invalid("entry weights must be finite and non-negative"));
            }
            let pick = WeightedIndex::new(w).map_err(|e| Error::invalid(format!("entry weights: {e}")))?;
            (0..count).map(|_| pick.sample(rng)).collect()
        }
    };
    let mut obs = ObservationSet::new(m, n);
    for cell in cells {
        let (i, j) = (cell / n, cell % n);
        let noise = if sigma_e == 0.0 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(rng);
            sigma_e * z
        };
        obs.entry_samples.push(EntrySample {
            row: i,
            col: j,
            value: a[(i, j)] + noise,
        });
    }
    Ok(obs)
}

/// Entry-wise signal-to-noise ratio `||A||_F^2 / (m n sigma_c^2)`.
pub fn snr(a: &DenseMatrix, sigma_c: f64) -> Result<f64> {
    if !(sigma_c > 0.0) {
        return Err(Error::invalid("SNR needs a positive column noise level"));
    }
    let cells = (a.rows() * a.cols()) as f64;
    Ok(a.frobenius_sq() / (cells * sigma_c * sigma_c))
}
