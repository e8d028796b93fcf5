//! Comparison methods: CUR+, nuclear-norm completion on all entries (NNa)
//! or with split column/entry constraints (NNs), and two-phase leverage
//! sampling, with the budgeted samplers that feed them.

mod admm;
mod chen;
mod curplus;
mod partial;
mod select;

pub use admm::{nna, nna_warm, nns, nns_warm, svt, AdmmIterate, AdmmOutcome, AdmmSettings, AdmmState, NnsParams};
pub use chen::{chen_two_phase, ChenOutcome, ChenSettings};
pub use curplus::{curplus, CurPlusFit};
pub use partial::{project_omega, ObservedCell, PartialMatrix};
pub use select::{select_delta, select_nns, NnSearch, NnsSelection, Selection};

use nalgebra::DMatrix;
use rand::distr::{Distribution, Uniform};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::observation::{
    self, plan_split, sample_entries, BudgetLedger, EntryDistribution, ObservationSet, SamplingPlan, TwoCostModel,
};
use crate::rng::{SeedStreams, Stream};

/// Observations bought for one baseline run, with the audited spend.
#[derive(Clone, Debug)]
pub struct Purchase {
    pub raw: ObservationSet,
    pub partial: PartialMatrix,
    pub ledger: BudgetLedger,
}

/// The whole budget on uniformly sampled entries.
pub fn buy_entries(a: &DenseMatrix, model: &TwoCostModel, streams: &SeedStreams) -> Result<Purchase> {
    let count = model.affordable_entries();
    if count == 0 {
        return Err(Error::InfeasiblePlan(format!(
            "budget {} buys no entry at price {}",
            model.budget, model.p_e
        )));
    }
    let mut ledger = BudgetLedger::new(model.budget);
    ledger.charge_entries(model, count)?;
    let raw = sample_entries(
        a,
        count,
        model.sigma_e,
        &mut streams.rng(Stream::EntrySampling),
        &EntryDistribution::Uniform,
    )?;
    let partial = PartialMatrix::from_observations(&raw)?;
    Ok(Purchase { raw, partial, ledger })
}

/// `d` noisy columns plus `s` accurate full rows (uniform, with
/// replacement), `s` as large as the budget allows.
pub fn buy_columns_and_rows(
    a: &DenseMatrix,
    model: &TwoCostModel,
    d: usize,
    streams: &SeedStreams,
) -> Result<(Purchase, SamplingPlan)> {
    let (m, n) = (a.rows(), a.cols());
    let plan = plan_split(model, n, d)?;
    let mut ledger = BudgetLedger::new(model.budget);
    let mut raw = ObservationSet::new(m, n);
    if d > 0 {
        ledger.charge_columns(model, d)?;
        let idx = observation::draw_column_indices(n, d, &mut streams.rng(Stream::ColumnSampling))?;
        let c = observation::noisy_columns(a, &idx, model.sigma_c, &mut streams.rng(Stream::ColumnNoise));
        for (k, &j) in idx.iter().enumerate() {
            raw.push_column(j, c.column(k).iter().copied().collect())?;
        }
    }
    if plan.s > 0 {
        ledger.charge_entries(model, plan.s * n)?;
        let pick = Uniform::new(0, m).map_err(|e| Error::invalid(e.to_string()))?;
        let mut idx_rng = streams.rng(Stream::RowSampling);
        let mut noise_rng = streams.rng(Stream::EntryNoise);
        for _ in 0..plan.s {
            let i = pick.sample(&mut idx_rng);
            for j in 0..n {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                raw.push_entry(i, j, a[(i, j)] + model.sigma_e * z)?;
            }
        }
    }
    let partial = PartialMatrix::from_observations(&raw)?;
    Ok((Purchase { raw, partial, ledger }, plan))
}

#[derive(Clone, Debug)]
pub struct CurPlusPurchase {
    pub c: DenseMatrix,
    pub r: DenseMatrix,
    pub entries: PartialMatrix,
    pub ledger: BudgetLedger,
    pub column_indices: Vec<usize>,
    pub row_indices: Vec<usize>,
}

/// `ceil(d/2)` noisy columns and `floor(d/2)` noisy rows, each priced at
/// `p_c` with noise `sigma_c`, then uniform entries with what is left.
pub fn buy_for_curplus(
    a: &DenseMatrix,
    model: &TwoCostModel,
    d: usize,
    streams: &SeedStreams,
) -> Result<CurPlusPurchase> {
    let (m, n) = (a.rows(), a.cols());
    let (d1, d2) = (d.div_ceil(2), d / 2);
    let mut ledger = BudgetLedger::new(model.budget);
    ledger
        .charge_columns(model, d)
        .map_err(|_| Error::InfeasiblePlan(format!("{d} noisy samples cost more than the budget {}", model.budget)))?;

    let (c, column_indices) = if d1 > 0 {
        let idx = observation::draw_column_indices(n, d1, &mut streams.rng(Stream::ColumnSampling))?;
        (observation::noisy_columns(a, &idx, model.sigma_c, &mut streams.rng(Stream::ColumnNoise)), idx)
    } else {
        (DenseMatrix::zeros(m, 0), Vec::new())
    };
    let (r, row_indices) = if d2 > 0 {
        let at = DenseMatrix::wrap(a.transpose());
        let idx = observation::draw_column_indices(m, d2, &mut streams.rng(Stream::RowSampling))?;
        let rt = observation::noisy_columns(&at, &idx, model.sigma_c, &mut streams.rng(Stream::Auxiliary));
        (DenseMatrix::wrap(rt.transpose()), idx)
    } else {
        (DenseMatrix::wrap(DMatrix::zeros(0, n)), Vec::new())
    };

    let count = model.entries_after(ledger.spent());
    let entries = if count > 0 {
        ledger.charge_entries(model, count)?;
        let raw = sample_entries(
            a,
            count,
            model.sigma_e,
            &mut streams.rng(Stream::EntrySampling),
            &EntryDistribution::Uniform,
        )?;
        PartialMatrix::from_observations(&raw)?
    } else {
        PartialMatrix::new(m, n)
    };
    Ok(CurPlusPurchase {
        c,
        r,
        entries,
        ledger,
        column_indices,
        row_indices,
    })
}
