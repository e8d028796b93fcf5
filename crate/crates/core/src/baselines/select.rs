//! Hold-out selection of the nuclear-norm constraint parameters.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::admm::{nna_warm, nns_warm, AdmmSettings, AdmmState, NnsParams};
use super::partial::PartialMatrix;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::ncur::log_grid;
use crate::observation::ObservationMode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnSearch {
    pub points: usize,
    /// Grid multipliers on the natural scale of each parameter.
    pub lo: f64,
    pub hi: f64,
    /// Share of entry-mode cells held out for validation.
    pub holdout: f64,
}

impl Default for NnSearch {
    fn default() -> Self {
        Self {
            points: 20,
            lo: 1e-2,
            hi: 1e2,
            holdout: 0.2,
        }
    }
}

impl NnSearch {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || !(self.lo > 0.0 && self.hi >= self.lo) {
            return Err(Error::invalid("search grid needs points >= 1 and 0 < lo <= hi"));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::invalid("holdout share must lie in (0, 1)"));
        }
        Ok(())
    }

    fn grid(&self) -> Vec<f64> {
        log_grid(self.lo, self.hi, self.points)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub value: f64,
    /// `(candidate, held-out mean squared error)` in evaluation order.
    pub curve: Vec<(f64, f64)>,
}

struct Split {
    train: PartialMatrix,
    held: Vec<(usize, usize, f64)>,
}

fn split_entries<R: Rng + ?Sized>(obs: &PartialMatrix, share: f64, rng: &mut R) -> Option<Split> {
    let mut entries: Vec<_> = obs.cells().filter(|c| c.mode == ObservationMode::Entry).collect();
    if entries.len() < 2 {
        return None;
    }
    entries.shuffle(rng);
    let k = entries.len();
    let h = ((share * k as f64).round() as usize).clamp(1, k - 1);
    let held: Vec<_> = entries[..h].iter().map(|c| (c.row, c.col, c.value)).collect();
    let mut out: Vec<_> = held.iter().map(|&(i, j, _)| (i, j)).collect();
    out.sort_unstable();
    let train = obs.filter(|c| out.binary_search(&(c.row, c.col)).is_err());
    Some(Split { train, held })
}

fn held_out_mse(z: &DenseMatrix, held: &[(usize, usize, f64)]) -> f64 {
    held.iter().map(|&(i, j, v)| (z[(i, j)] - v).powi(2)).sum::<f64>() / held.len() as f64
}

/// Smallest error wins; ties go to the later candidate.
fn pick(curve: &[(f64, f64)]) -> f64 {
    let mut best = 0;
    for (k, &(_, e)) in curve.iter().enumerate() {
        if e <= curve[best].1 * (1.0 + 1e-12) {
            best = k;
        }
    }
    curve[best].0
}

/// `delta` for NNa on a log grid around `sqrt(|Omega_e|) sigma_e`. The
/// training fit uses `delta sqrt(train share)` so the noise budget per cell
/// is unchanged. With no noise the constraint is exact (`delta = 0`).
pub fn select_delta<R: Rng + ?Sized>(
    obs: &PartialMatrix,
    sigma_e: f64,
    search: &NnSearch,
    settings: &AdmmSettings,
    rng: &mut R,
) -> Result<Selection> {
    search.validate()?;
    let k = obs.count(ObservationMode::Entry);
    let natural = (k as f64).sqrt() * sigma_e;
    if natural == 0.0 {
        return Ok(Selection { value: 0.0, curve: Vec::new() });
    }
    let Some(split) = split_entries(obs, search.holdout, rng) else {
        return Ok(Selection { value: natural, curve: Vec::new() });
    };
    let shrink = ((k - split.held.len()) as f64 / k as f64).sqrt();
    let mut grid: Vec<f64> = search.grid().into_iter().map(|g| g * natural).collect();
    // Large delta first: the zero-ish solutions warm-start the harder fits.
    grid.reverse();
    let mut warm: Option<AdmmState> = None;
    let mut curve = Vec::with_capacity(grid.len());
    for &delta in &grid {
        let out = nna_warm(&split.train, delta * shrink, settings, warm.as_ref())?;
        curve.push((delta, held_out_mse(&out.z, &split.held)));
        warm = Some(out.state);
    }
    // Evaluation ran in descending order; tie-break toward larger delta.
    curve.reverse();
    Ok(Selection { value: pick(&curve), curve })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnsSelection {
    pub c1: f64,
    pub c2: f64,
    pub c1_curve: Vec<(f64, f64)>,
    pub c2_curve: Vec<(f64, f64)>,
}

/// Coordinate search: `C1` on its grid with `C2 = 1`, then `C2` with the
/// chosen `C1`. A constant whose ball has zero radius whatever its value
/// (no noise of that kind) is left at 1.
pub fn select_nns<R: Rng + ?Sized>(
    obs: &PartialMatrix,
    d: usize,
    sigma_c: f64,
    sigma_e: f64,
    search: &NnSearch,
    settings: &AdmmSettings,
    rng: &mut R,
) -> Result<NnsSelection> {
    search.validate()?;
    let mut sel = NnsSelection {
        c1: 1.0,
        c2: 1.0,
        c1_curve: Vec::new(),
        c2_curve: Vec::new(),
    };
    let Some(split) = split_entries(obs, search.holdout, rng) else {
        return Ok(sel);
    };
    let params = |c1: f64, c2: f64| NnsParams {
        c1,
        c2,
        d,
        m: obs.rows(),
        f: split.train.count(ObservationMode::Entry),
        sigma_c,
        sigma_e,
    };
    let sweep = |fix: &dyn Fn(f64) -> NnsParams| -> Result<Vec<(f64, f64)>> {
        let mut grid = search.grid();
        grid.reverse();
        let mut warm: Option<AdmmState> = None;
        let mut curve = Vec::with_capacity(grid.len());
        for &g in &grid {
            let out = nns_warm(&split.train, &fix(g), settings, warm.as_ref())?;
            curve.push((g, held_out_mse(&out.z, &split.held)));
            warm = Some(out.state);
        }
        curve.reverse();
        Ok(curve)
    };
    if sigma_c > 0.0 && d > 0 {
        sel.c1_curve = sweep(&|g| params(g, 1.0))?;
        sel.c1 = pick(&sel.c1_curve);
    }
    if sigma_e > 0.0 {
        let c1 = sel.c1;
        sel.c2_curve = sweep(&|g| params(c1, g))?;
        sel.c2 = pick(&sel.c2_curve);
    }
    Ok(sel)
}
