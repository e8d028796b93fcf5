//! The noisy CUR estimator: noisy columns, a leverage-based row sketch built
//! from their span, accurate sketched rows, and a ridge fit on top.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, RANK_RTOL};
use crate::observation::{self, SamplingPlan};
use crate::rng::{SeedStreams, Stream};
use crate::sketch::{self, LeverageProfile, SketchMatrix};

/// Tolerance used for the per-run subspace-embedding diagnostic.
pub const EMBEDDING_EPS: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisyCurConfig {
    pub d: usize,
    pub s: usize,
    pub sigma_c: f64,
    pub sigma_e: f64,
    pub lambda: f64,
}

impl NoisyCurConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.s == 0 {
            return Err(Error::invalid(format!("need d >= 1 and s >= 1, got d={} s={}", self.d, self.s)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("ridge parameter {} must be finite and >= 0", self.lambda)));
        }
        if !(self.sigma_c >= 0.0 && self.sigma_e >= 0.0) || !self.sigma_c.is_finite() || !self.sigma_e.is_finite() {
            return Err(Error::invalid("noise levels must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RidgeMethod {
    Cholesky,
    PseudoInverse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeSolution {
    pub x: DMatrix<f64>,
    pub method: RidgeMethod,
    /// Set when `lambda = 0` met a rank-deficient design.
    pub rank_deficient: bool,
}

/// `X = (B^T B + lambda I)^{-1} B^T Y`.
///
/// Cholesky for `lambda > 0`; the SVD form `V diag(sigma/(sigma^2+lambda)) U^T Y`
/// for `lambda = 0` (the pseudoinverse solution) or when the factorisation
/// breaks down numerically.
pub fn ridge_solve(b: &DenseMatrix, y: &DenseMatrix, lambda: f64) -> Result<RidgeSolution> {
    ridge(b.as_matrix(), y.as_matrix(), lambda)
}

pub(crate) fn ridge(b: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RidgeSolution> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("ridge parameter {lambda} must be finite and >= 0")));
    }
    if b.nrows() != y.nrows() {
        return Err(Error::dims(format!("B has {} rows, Y has {}", b.nrows(), y.nrows())));
    }
    if lambda > 0.0 {
        let mut gram = b.tr_mul(b);
        for k in 0..gram.nrows() {
            gram[(k, k)] += lambda;
        }
        if let Some(ch) = Cholesky::new(gram) {
            return Ok(RidgeSolution {
                x: ch.solve(&b.tr_mul(y)),
                method: RidgeMethod::Cholesky,
                rank_deficient: false,
            });
        }
        log::warn!("Cholesky of the ridge system failed at lambda={lambda}; using the SVD form");
    }
    let svd = linalg::thin_svd(b)?;
    let tol = svd.rank_tolerance();
    let d = b.ncols();
    let mut rank = 0;
    let mut filt = svd.u.tr_mul(y);
    for (k, &sigma) in svd.singular_values.iter().enumerate() {
        let f = if lambda == 0.0 {
            if sigma > tol {
                rank += 1;
                1.0 / sigma
            } else {
                0.0
            }
        } else {
            rank += usize::from(sigma > tol);
            sigma / (sigma * sigma + lambda)
        };
        filt.row_mut(k).scale_mut(f);
    }
    let rank_deficient = lambda == 0.0 && rank < d;
    if rank_deficient {
        log::warn!("ridge with lambda=0 on a rank-{rank} design with {d} columns; returning the minimum-norm solution");
    }
    Ok(RidgeSolution {
        x: svd.v_t.tr_mul(&filt),
        method: RidgeMethod::PseudoInverse,
        rank_deficient,
    })
}

/// Everything the sampler observed for one run, before any fitting.
#[derive(Clone, Debug)]
pub struct NoisyCurObservations {
    pub c_tilde: DenseMatrix,
    pub column_indices: Vec<usize>,
    pub basis: DenseMatrix,
    pub leverage: LeverageProfile,
    pub sketch: SketchMatrix,
    pub y: DenseMatrix,
}

impl NoisyCurObservations {
    /// Assembles observations gathered elsewhere; the basis and leverage
    /// scores are recomputed from `c_tilde`.
    pub fn from_parts(c_tilde: DenseMatrix, sketch: SketchMatrix, y: DenseMatrix) -> Result<Self> {
        if sketch.source_rows() != c_tilde.rows() || y.rows() != sketch.sample_count() {
            return Err(Error::dims("columns, sketch and sketched rows do not line up"));
        }
        let basis = linalg::orthonormal_basis(&c_tilde)?;
        let leverage = sketch::shrinked_row_scores(&basis)?;
        Ok(Self {
            c_tilde,
            column_indices: Vec::new(),
            basis,
            leverage,
            sketch,
            y,
        })
    }

    /// The sketched design `S^T C~`, materialised.
    pub fn sketched_columns(&self) -> Result<DMatrix<f64>> {
        sketch::sketch_rows(&self.sketch, self.c_tilde.as_matrix())
    }
}

/// Draws the columns and sketched rows for one run.
pub fn observe(a: &DenseMatrix, cfg: &NoisyCurConfig, streams: &SeedStreams) -> Result<NoisyCurObservations> {
    cfg.validate()?;
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::invalid("input matrix is empty"));
    }
    let column_indices = observation::draw_column_indices(a.cols(), cfg.d, &mut streams.rng(Stream::ColumnSampling))?;
    let c_tilde = observation::noisy_columns(a, &column_indices, cfg.sigma_c, &mut streams.rng(Stream::ColumnNoise));
    let basis = match linalg::orthonormal_basis(&c_tilde) {
        Ok(u) => u,
        // All sampled columns are exactly zero: any sketch is as good as any
        // other and the fit is zero, so fall back to the uniform one.
        Err(Error::EmptyBasis) => DenseMatrix::zeros(a.rows(), 0),
        Err(e) => return Err(e),
    };
    let leverage = if basis.cols() == 0 {
        LeverageProfile::uniform(a.rows())?
    } else {
        sketch::shrinked_row_scores(&basis)?
    };
    let sketch = sketch::build_sketch(&leverage, cfg.s, &mut streams.rng(Stream::RowSampling))?;
    let y = observation::sample_rows_noisy(a, &sketch, cfg.sigma_e, &mut streams.rng(Stream::EntryNoise))?;
    Ok(NoisyCurObservations {
        c_tilde,
        column_indices,
        basis,
        leverage,
        sketch,
        y,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub lambda: f64,
    pub ridge_method: RidgeMethod,
    pub rank_deficient: bool,
    /// `sigma_d(S^T C~)`, zero when fewer than `d` distinct rows were drawn.
    pub sigma_d_sketched: f64,
    pub sigma_d_columns: f64,
    pub basis_rank: usize,
    /// Realised distortion of `S` on `span(C~)`.
    pub embedding_distortion: f64,
    /// Whether `S` is an `EMBEDDING_EPS` subspace embedding for `span(C~)`.
    pub embedding_ok: bool,
    pub sketch_norm_sq: f64,
    pub max_scale_sq: f64,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub a_bar: DenseMatrix,
    pub c_tilde: DenseMatrix,
    pub x: DenseMatrix,
    pub plan: Option<SamplingPlan>,
    pub diagnostics: Diagnostics,
}

/// Collapses repeated samples of a source row into one weighted row.
/// `B^T B` and `B^T Y` are unchanged, so the ridge solution is too, but the
/// system has at most `m` rows whatever `s` is.
fn compact_system(
    c: &DMatrix<f64>,
    sketch: &SketchMatrix,
    y: &DMatrix<f64>,
    keep: Option<&[usize]>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = c.nrows();
    let mut weight = vec![0.0; m];
    let mut z = DMatrix::<f64>::zeros(m, y.ncols());
    let mut add = |j: usize| {
        let (i, w) = (sketch.indices()[j], sketch.scales()[j]);
        weight[i] += w * w;
        let mut zi = z.row_mut(i);
        zi += y.row(j) * w;
    };
    match keep {
        Some(rows) => rows.iter().for_each(|&j| add(j)),
        None => (0..sketch.sample_count()).for_each(&mut add),
    }
    let live: Vec<usize> = (0..m).filter(|&i| weight[i] > 0.0).collect();
    let mut bc = DMatrix::zeros(live.len(), c.ncols());
    let mut yc = DMatrix::zeros(live.len(), y.ncols());
    for (r, &i) in live.iter().enumerate() {
        let root = weight[i].sqrt();
        bc.set_row(r, &(c.row(i) * root));
        yc.set_row(r, &(z.row(i) / root));
    }
    (bc, yc)
}

fn smallest_singular(m: &DMatrix<f64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Ok(0.0);
    }
    let sv = linalg::singular_values(m)?;
    Ok(if sv.len() < k { 0.0 } else { sv[k - 1] })
}

/// Ridge fit and reconstruction from fixed observations.
pub fn fit(obs: &NoisyCurObservations, lambda: f64) -> Result<Reconstruction> {
    let c = obs.c_tilde.as_matrix();
    let (bc, yc) = compact_system(c, &obs.sketch, obs.y.as_matrix(), None);
    let sol = ridge(&bc, &yc, lambda)?;
    let d = c.ncols();
    let sigma_d_sketched = if obs.sketch.sample_count() < d {
        0.0
    } else {
        smallest_singular(&bc, d)?
    };
    let (embedding_distortion, embedding_ok) = if obs.basis.cols() == 0 {
        (0.0, true)
    } else {
        let (lo, hi) = sketch::embedding_extremes(&obs.sketch, obs.basis.as_matrix())?;
        (
            (1.0 - lo).max(hi - 1.0),
            1.0 - EMBEDDING_EPS <= lo && hi <= 1.0 + EMBEDDING_EPS,
        )
    };
    let diagnostics = Diagnostics {
        lambda,
        ridge_method: sol.method,
        rank_deficient: sol.rank_deficient,
        sigma_d_sketched,
        sigma_d_columns: smallest_singular(c, d)?,
        basis_rank: obs.basis.cols(),
        embedding_distortion,
        embedding_ok,
        sketch_norm_sq: obs.sketch.spectral_norm_sq(),
        max_scale_sq: obs.sketch.max_scale_sq(),
    };
    let a_bar = c * &sol.x;
    Ok(Reconstruction {
        a_bar: DenseMatrix::wrap(a_bar),
        c_tilde: obs.c_tilde.clone(),
        x: DenseMatrix::wrap(sol.x),
        plan: None,
        diagnostics,
    })
}

/// One full run with a fixed ridge parameter.
pub fn noisycur(a: &DenseMatrix, cfg: &NoisyCurConfig, streams: &SeedStreams) -> Result<Reconstruction> {
    let obs = observe(a, cfg, streams)?;
    fit(&obs, cfg.lambda)
}

/// One full run with the ridge parameter picked by cross-validation on the
/// same observations (`cfg.lambda` is ignored).
pub fn noisycur_cv(
    a: &DenseMatrix,
    cfg: &NoisyCurConfig,
    grid: &[f64],
    folds: usize,
    streams: &SeedStreams,
) -> Result<(Reconstruction, CvOutcome)> {
    let obs = observe(a, cfg, streams)?;
    let cv = cross_validate_lambda(&obs, grid, folds, &mut streams.rng(Stream::CrossValidation))?;
    Ok((fit(&obs, cv.best_lambda)?, cv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub best_lambda: f64,
    /// `(lambda, mean held-out squared error)` in ascending `lambda`.
    pub curve: Vec<(f64, f64)>,
}

/// Picks `lambda` by k-fold cross-validation over the sketched rows already
/// observed. Each fold is solved once through an eigendecomposition of its
/// training Gram matrix, so the whole grid costs `O(d^2)` per point.
pub fn cross_validate_lambda<R: Rng + ?Sized>(
    obs: &NoisyCurObservations,
    grid: &[f64],
    folds: usize,
    rng: &mut R,
) -> Result<CvOutcome> {
    if grid.is_empty() {
        return Err(Error::invalid("empty lambda grid"));
    }
    if grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::invalid("lambda grid values must be finite and >= 0"));
    }
    let s = obs.sketch.sample_count();
    if folds < 2 || s < folds {
        return Err(Error::invalid(format!("cannot split {s} sketched rows into {folds} folds")));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();

    let mut order: Vec<usize> = (0..s).collect();
    order.shuffle(rng);
    let c = obs.c_tilde.as_matrix();
    let y = obs.y.as_matrix();
    let b = obs.sketched_columns()?;
    let d = c.ncols();
    let mut total = vec![0.0; sorted.len()];

    for f in 0..folds {
        let held: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
        let train: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(pos, _)| pos % folds != f)
            .map(|(_, &j)| j)
            .collect();
        let (bc, yc) = compact_system(c, &obs.sketch, y, Some(&train));
        let eig = SymmetricEigen::new(bc.tr_mul(&bc));
        let v = eig.eigenvectors;
        let lam: Vec<f64> = eig.eigenvalues.iter().map(|&e| e.max(0.0)).collect();
        let top = lam.iter().copied().fold(0.0, f64::max);
        let root_tol = bc.nrows().max(d) as f64 * top.sqrt() * RANK_RTOL;
        let zero_tol = root_tol * root_tol;

        let h = v.tr_mul(&bc.tr_mul(&yc));
        let mut b_held = DMatrix::zeros(held.len(), d);
        let mut y_held = DMatrix::zeros(held.len(), y.ncols());
        for (r, &j) in held.iter().enumerate() {
            b_held.set_row(r, &b.row(j));
            y_held.set_row(r, &y.row(j));
        }
        let p = &b_held * &v;
        let mm = p.tr_mul(&p);
        let kk = &h * h.transpose();
        let rr = y_held.tr_mul(&p);
        let q: Vec<f64> = (0..d).map(|k| h.row(k).dot(&rr.column(k).transpose())).collect();
        let y_sq = y_held.norm_squared();
        let cells = (held.len() * y.ncols()).max(1) as f64;

        for (g, &l) in sorted.iter().enumerate() {
            let dk: Vec<f64> = lam
                .iter()
                .map(|&e| {
                    if l == 0.0 && e <= zero_tol {
                        0.0
                    } else {
                        1.0 / (e + l)
                    }
                })
                .collect();
            let mut quad = 0.0;
            for k in 0..d {
                for j in 0..d {
                    quad += dk[k] * dk[j] * mm[(k, j)] * kk[(k, j)];
                }
            }
            let lin: f64 = (0..d).map(|k| dk[k] * q[k]).sum();
            total[g] += (quad - 2.0 * lin + y_sq).max(0.0) / cells;
        }
    }

    let curve: Vec<(f64, f64)> = sorted
        .iter()
        .zip(&total)
        .map(|(&l, &t)| (l, t / folds as f64))
        .collect();
    let mut best = 0;
    for (g, &(_, err)) in curve.iter().enumerate() {
        // Ascending grid, so `<=` breaks ties toward the larger lambda.
        if err <= curve[best].1 * (1.0 + 1e-12) {
            best = g;
        }
    }
    Ok(CvOutcome {
        best_lambda: curve[best].0,
        curve,
    })
}

/// `n` points spaced evenly in log scale over `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// `n` points spaced evenly over `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSizes {
    pub d_min: usize,
    pub s_min: usize,
    /// The two lower bounds on `d` before the ceiling.
    pub incoherence_term: f64,
    pub noise_term: f64,
}

/// Sample sizes that make the column/row guarantee apply:
///
/// `d >= max{(6+2e)/(3e^2) beta r log(r/delta), 8(1+delta)^2/(c^2 (1-e) e) r kappa^2 sigma_c^2}`
/// and `s >= (6+2e)/(3e^2) 2 d log(d/delta)`.
pub fn theorem1_sample_sizes(
    r: usize,
    beta: f64,
    kappa: f64,
    c: f64,
    sigma_c: f64,
    eps: f64,
    delta: f64,
) -> Result<SampleSizes> {
    if !(eps > 0.0 && eps < 1.0) || !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("eps={eps} and delta={delta} must both lie in (0, 1)")));
    }
    if r == 0 || !(c > 0.0) {
        return Err(Error::invalid("need r >= 1 and c > 0"));
    }
    let lead = (6.0 + 2.0 * eps) / (3.0 * eps * eps);
    let rf = r as f64;
    let incoherence_term = lead * beta * rf * (rf / delta).ln();
    let noise_term = 8.0 * (1.0 + delta).powi(2) / (c * c * (1.0 - eps) * eps) * rf * kappa * kappa * sigma_c * sigma_c;
    let d_min = incoherence_term.max(noise_term).ceil().max(1.0) as usize;
    let df = d_min as f64;
    let s_min = (lead * 2.0 * df * (df / delta).ln()).ceil().max(1.0) as usize;
    Ok(SampleSizes {
        d_min,
        s_min,
        incoherence_term,
        noise_term,
    })
}
