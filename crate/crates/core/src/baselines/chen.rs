//! Two-phase entry sampling: uniform entries to estimate leverage, then
//! entries drawn from the estimated leverage product.

use serde::{Deserialize, Serialize};

use super::admm::{nna, AdmmSettings};
use super::partial::PartialMatrix;
use super::select::{select_delta, NnSearch};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::observation::{sample_entries, BudgetLedger, EntryDistribution, EntrySample, TwoCostModel};
use crate::rng::{SeedStreams, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChenSettings {
    pub phase1_fraction: f64,
    /// Rank of the leverage estimate.
    pub rank: usize,
    pub admm: AdmmSettings,
    pub search: NnSearch,
}

impl ChenSettings {
    pub fn new(rank: usize) -> Self {
        Self {
            phase1_fraction: 0.5,
            rank,
            admm: AdmmSettings::default(),
            search: NnSearch::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ChenOutcome {
    pub a_bar: DenseMatrix,
    pub ledger: BudgetLedger,
    pub phase1_samples: Vec<EntrySample>,
    pub phase2_samples: Vec<EntrySample>,
    /// Phase-two sampling distribution over cells, row-major.
    pub phase2_distribution: Vec<f64>,
    pub delta: f64,
    pub converged: bool,
}

/// Shrinked leverage estimates `(rows, cols)` from the rank-`r` SVD of the
/// zero-filled phase-one matrix; uniform if that matrix is zero.
pub(crate) fn leverage_estimates(obs: &PartialMatrix, rank: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, n) = (obs.rows(), obs.cols());
    let svd = linalg::thin_svd(&obs.zero_filled())?;
    let r = rank.min(svd.rank());
    let est = |len: usize, norm: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..len)
            .map(|i| if r == 0 { 1.0 / len as f64 } else { 0.5 * norm(i) / r as f64 + 0.5 / len as f64 })
            .collect()
    };
    let rows = est(m, &|i| svd.u.row(i).columns(0, r).norm_squared());
    let cols = est(n, &|j| svd.v_t.column(j).rows(0, r).norm_squared());
    Ok((rows, cols))
}

pub fn chen_two_phase(
    a: &DenseMatrix,
    model: &TwoCostModel,
    settings: &ChenSettings,
    streams: &SeedStreams,
) -> Result<ChenOutcome> {
    let f = settings.phase1_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::invalid(format!("phase-one fraction {f} outside (0, 1)")));
    }
    if settings.rank == 0 {
        return Err(Error::invalid("leverage estimate needs rank >= 1"));
    }
    let (m, n) = (a.rows(), a.cols());
    let total = model.affordable_entries();
    let n1 = (f * total as f64).floor() as usize;
    let n2 = total - n1;
    if n1 == 0 || n2 == 0 {
        return Err(Error::InfeasiblePlan(format!(
            "budget buys {total} entries, phase split {n1} + {n2} leaves a phase empty"
        )));
    }
    let mut ledger = BudgetLedger::new(model.budget);
    let mut rng = streams.rng(Stream::EntrySampling);

    ledger.charge_entries(model, n1)?;
    let phase1 = sample_entries(a, n1, model.sigma_e, &mut rng, &EntryDistribution::Uniform)?;
    let p1 = PartialMatrix::from_observations(&phase1)?;
    let (mu, nu) = leverage_estimates(&p1, settings.rank)?;
    let weights: Vec<f64> = mu.iter().flat_map(|&u| nu.iter().map(move |&v| u * v)).collect();

    ledger.charge_entries(model, n2)?;
    let phase2 = sample_entries(a, n2, model.sigma_e, &mut rng, &EntryDistribution::Weights(weights.clone()))?;
    let mut union = phase1.clone();
    union.extend(phase2.clone())?;
    let p = PartialMatrix::from_observations(&union)?;

    let sel = select_delta(&p, model.sigma_e, &settings.search, &settings.admm, &mut streams.rng(Stream::CrossValidation))?;
    let out = nna(&p, sel.value, &settings.admm)?;
    debug_assert_eq!(weights.len(), m * n);
    Ok(ChenOutcome {
        a_bar: out.z,
        ledger,
        phase1_samples: phase1.entry_samples,
        phase2_samples: phase2.entry_samples,
        phase2_distribution: weights,
        delta: sel.value,
        converged: out.converged,
    })
}
