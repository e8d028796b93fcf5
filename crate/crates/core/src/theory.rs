//! Monte-Carlo checks of the recovery guarantee and the structural results
//! behind it. Each trial yields a [`BoundReport`] with both sides of the
//! inequality evaluated explicitly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::synthetic_lowrank;
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::ncur::{self, NoisyCurConfig, SampleSizes};
use crate::rng::{SeedStreams, Stream};
use crate::sketch::{self, SketchMatrix};

/// Slack used when comparing the two sides of a bound.
pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Theorem1,
    Embedding,
    StructuralLemma,
    SketchedRidge,
    SketchedRidgeVector,
    AwkwardSketch,
    PerturbedSigma,
}

impl BoundKind {
    pub fn name(self) -> &'static str {
        match self {
            BoundKind::Theorem1 => "theorem1",
            BoundKind::Embedding => "embedding",
            BoundKind::StructuralLemma => "structural_lemma",
            BoundKind::SketchedRidge => "sketched_ridge",
            BoundKind::SketchedRidgeVector => "sketched_ridge_vector",
            BoundKind::AwkwardSketch => "awkward_sketch",
            BoundKind::PerturbedSigma => "perturbed_sigma",
        }
    }

    /// Deterministic given the hypotheses: a single violation is a defect.
    pub fn is_deterministic(self) -> bool {
        matches!(
            self,
            BoundKind::SketchedRidge | BoundKind::SketchedRidgeVector | BoundKind::AwkwardSketch
        )
    }
}

/// Parameters of one checked instance. Fields that do not enter a given
/// bound are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceDescriptor {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub d: usize,
    pub s: usize,
    pub sigma_c: Option<f64>,
    pub sigma_e: Option<f64>,
    pub lambda: Option<f64>,
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub c: Option<f64>,
    pub beta: Option<f64>,
    pub kappa: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound: BoundKind,
    pub trial: usize,
    pub instance: InstanceDescriptor,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub margin: f64,
    /// Sketches rejected before one passed the embedding check.
    pub redraws: usize,
}

impl BoundReport {
    pub fn new(bound: BoundKind, trial: usize, instance: InstanceDescriptor, lhs: f64, rhs: f64) -> Self {
        Self {
            bound,
            trial,
            instance,
            lhs,
            rhs,
            holds: holds(lhs, rhs),
            margin: rhs - lhs,
            redraws: 0,
        }
    }
}

/// `lhs <= rhs` up to [`BOUND_SLACK`], relative to the larger side.
pub fn holds(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + BOUND_SLACK * lhs.abs().max(rhs.abs()).max(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub trials: usize,
    pub holds: usize,
}

impl Tally {
    pub fn of(reports: &[BoundReport]) -> Self {
        Self {
            trials: reports.len(),
            holds: reports.iter().filter(|r| r.holds).count(),
        }
    }

    pub fn failures(&self) -> usize {
        self.trials - self.holds
    }

    pub fn success_rate(&self) -> f64 {
        if self.trials == 0 {
            return f64::NAN;
        }
        self.holds as f64 / self.trials as f64
    }

    pub fn failure_rate(&self) -> f64 {
        1.0 - self.success_rate()
    }

    /// Empirical failure rate at most `p` plus three binomial standard errors.
    pub fn failure_within(&self, p: f64) -> bool {
        let p = p.clamp(0.0, 1.0);
        let se = (p * (1.0 - p) / self.trials as f64).sqrt();
        self.failure_rate() <= p + 3.0 * se
    }
}

fn trial_streams(streams: &SeedStreams, trials: usize) -> Vec<(usize, SeedStreams)> {
    (0..trials).map(|t| (t, streams.child(&[t as u64]))).collect()
}

fn frob_sq(m: &DMatrix<f64>) -> f64 {
    m.norm_squared()
}

/// `sigma_k(m)` (1-based), zero if `m` has fewer than `k` singular values.
fn sigma_k(m: &DMatrix<f64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Ok(0.0);
    }
    let sv = linalg::singular_values(m)?;
    Ok(if sv.len() < k { 0.0 } else { sv[k - 1] })
}

/// `2 (1+e)/(1-e) (lambda / ((1+e) sigma^2 + lambda))^2`, zero at `lambda = 0`.
pub fn gamma(eps: f64, sigma_sq: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let frac = lambda / ((1.0 + eps) * sigma_sq + lambda);
    2.0 * (1.0 + eps) / (1.0 - eps) * frac * frac
}

/// The ridge-shrinkage constant of the recovery guarantee, with the bottom
/// singular value of `C~` replaced by its lower estimate
/// `(sqrt(m-r)/2 - sqrt(d)) sigma_c`, evaluated as written even when that
/// difference is negative.
pub fn theorem1_gamma(m: usize, r: usize, d: usize, sigma_c: f64, eps: f64, lambda: f64) -> f64 {
    let gap = 0.5 * ((m - r) as f64).sqrt() - (d as f64).sqrt();
    gamma(eps, gap * gap * sigma_c * sigma_c, lambda)
}

/// Right-hand side of the recovery guarantee.
#[allow(clippy::too_many_arguments)]
pub fn theorem1_rhs(
    a_frob_sq: f64,
    sigma_r: f64,
    m: usize,
    r: usize,
    d: usize,
    sigma_c: f64,
    sigma_e: f64,
    eps: f64,
    lambda: f64,
) -> f64 {
    let g = theorem1_gamma(m, r, d, sigma_c, eps, lambda);
    let noise = if sigma_e == 0.0 {
        0.0
    } else {
        12.0 * eps * (sigma_e * sigma_e / (sigma_c * sigma_c)) * d as f64 * sigma_r * sigma_r
    };
    (g + eps + 40.0 * eps / (1.0 - eps)) * a_frob_sq + noise
}

/// Success probability floor of the recovery guarantee (may be negative).
pub fn theorem1_probability_floor(m: usize, n: usize, r: usize, s: usize, delta: f64) -> f64 {
    0.9 - 2.0 * delta - 2.0 * (-((m - r) as f64) * delta * delta / 2.0).exp() - (-((s * n) as f64) / 32.0).exp()
}

/// Largest `c` with at least half the entries satisfying `|a_ij| >= c`.
pub fn denseness_constant(a: &DMatrix<f64>) -> f64 {
    let mut abs: Vec<f64> = a.iter().map(|x| x.abs()).collect();
    abs.sort_unstable_by(|x, y| y.total_cmp(x));
    let k = abs.len().div_ceil(2);
    if k == 0 {
        0.0
    } else {
        abs[k - 1]
    }
}

/// What the recovery guarantee needs to know about `A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixHypotheses {
    pub rank: usize,
    pub beta: f64,
    pub c: f64,
    pub kappa: f64,
    pub sigma_r: f64,
    pub frob_sq: f64,
}

impl MatrixHypotheses {
    pub fn measure(a: &DenseMatrix) -> Result<Self> {
        let svd = linalg::thin_svd(a.as_matrix())?;
        let rank = svd.rank();
        if rank == 0 {
            return Err(Error::HypothesisUnmet("A is the zero matrix".into()));
        }
        let coh = sketch::column_leverage_and_coherence(a)?;
        let sigma_r = svd.singular_values[rank - 1];
        Ok(Self {
            rank,
            beta: coh.beta,
            c: denseness_constant(a.as_matrix()),
            kappa: svd.singular_values[0] / sigma_r,
            sigma_r,
            frob_sq: a.frobenius_sq(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Config {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    /// Entry distribution of the Gaussian matrix whose best rank-`r`
    /// approximation is `A`.
    pub mean: f64,
    pub std: f64,
    pub eps: f64,
    pub delta: f64,
    pub sigma_c: f64,
    pub sigma_e: f64,
    pub lambda: f64,
    /// Sample sizes; `None` takes the smallest the guarantee allows.
    pub d: Option<usize>,
    pub s: Option<usize>,
}

impl Default for Theorem1Config {
    fn default() -> Self {
        Self {
            m: 80,
            n: 60,
            r: 4,
            mean: 5.0,
            std: 1.0,
            eps: 0.5,
            delta: 0.1,
            sigma_c: 0.05f64.sqrt(),
            sigma_e: 0.1,
            lambda: 1.0,
            d: None,
            s: None,
        }
    }
}

/// A matrix that satisfies the guarantee's hypotheses, with the sample
/// sizes it prescribes.
#[derive(Clone, Debug)]
pub struct Theorem1Instance {
    pub a: DenseMatrix,
    pub hypotheses: MatrixHypotheses,
    pub sizes: SampleSizes,
    pub d: usize,
    pub s: usize,
}

impl Theorem1Instance {
    pub fn descriptor(&self, cfg: &Theorem1Config) -> InstanceDescriptor {
        InstanceDescriptor {
            m: self.a.rows(),
            n: self.a.cols(),
            r: self.hypotheses.rank,
            d: self.d,
            s: self.s,
            sigma_c: Some(cfg.sigma_c),
            sigma_e: Some(cfg.sigma_e),
            lambda: Some(cfg.lambda),
            eps: Some(cfg.eps),
            delta: Some(cfg.delta),
            c: Some(self.hypotheses.c),
            beta: Some(self.hypotheses.beta),
            kappa: Some(self.hypotheses.kappa),
        }
    }
}

/// Checks the hypotheses of the guarantee on a given `A`.
pub fn theorem1_instance(a: DenseMatrix, cfg: &Theorem1Config) -> Result<Theorem1Instance> {
    let h = MatrixHypotheses::measure(&a)?;
    if h.rank != cfg.r {
        return Err(Error::HypothesisUnmet(format!("A has rank {}, expected {}", h.rank, cfg.r)));
    }
    if !(h.c > 0.0) {
        return Err(Error::HypothesisUnmet("A is not dense: half its entries are zero".into()));
    }
    let sizes = ncur::theorem1_sample_sizes(h.rank, h.beta, h.kappa, h.c, cfg.sigma_c, cfg.eps, cfg.delta)?;
    let d = cfg.d.unwrap_or(sizes.d_min);
    if d < sizes.d_min {
        return Err(Error::HypothesisUnmet(format!("d = {d} is below the required {}", sizes.d_min)));
    }
    let s_req = row_samples_for(d, cfg.eps, cfg.delta);
    let s = cfg.s.unwrap_or(s_req);
    if s < s_req {
        return Err(Error::HypothesisUnmet(format!("s = {s} is below the required {s_req}")));
    }
    Ok(Theorem1Instance {
        a,
        hypotheses: h,
        sizes,
        d,
        s,
    })
}

/// `ceil((6+2e)/(3e^2) 2 d log(d/delta))`.
pub fn row_samples_for(d: usize, eps: f64, delta: f64) -> usize {
    let lead = (6.0 + 2.0 * eps) / (3.0 * eps * eps);
    let df = d as f64;
    (lead * 2.0 * df * (df / delta).ln()).ceil().max(1.0) as usize
}

/// Draws the synthetic `A` for `cfg` from the dataset stream and checks it.
pub fn theorem1_synthetic(cfg: &Theorem1Config, streams: &SeedStreams) -> Result<Theorem1Instance> {
    let a = synthetic_lowrank(cfg.m, cfg.n, cfg.r, cfg.mean, cfg.std, &mut streams.rng(Stream::Dataset))?;
    theorem1_instance(a, cfg)
}

/// Runs the algorithm `trials` times on one hypothesis-checked instance and
/// compares `||A - A_bar||_F^2` with the guarantee.
pub fn check_theorem1(cfg: &Theorem1Config, trials: usize, streams: &SeedStreams) -> Result<Vec<BoundReport>> {
    let inst = theorem1_synthetic(cfg, streams)?;
    check_theorem1_on(&inst, cfg, trials, streams)
}

pub fn check_theorem1_on(
    inst: &Theorem1Instance,
    cfg: &Theorem1Config,
    trials: usize,
    streams: &SeedStreams,
) -> Result<Vec<BoundReport>> {
    let run = NoisyCurConfig {
        d: inst.d,
        s: inst.s,
        sigma_c: cfg.sigma_c,
        sigma_e: cfg.sigma_e,
        lambda: cfg.lambda,
    };
    let m = inst.a.rows();
    let h = &inst.hypotheses;
    let rhs = theorem1_rhs(h.frob_sq, h.sigma_r, m, h.rank, inst.d, cfg.sigma_c, cfg.sigma_e, cfg.eps, cfg.lambda);
    let desc = inst.descriptor(cfg);
    trial_streams(streams, trials)
        .into_par_iter()
        .map(|(t, st)| {
            let rec = ncur::noisycur(&inst.a, &run, &st)?;
            let lhs = (inst.a.as_matrix() - rec.a_bar.as_matrix()).norm_squared();
            Ok(BoundReport::new(BoundKind::Theorem1, t, desc.clone(), lhs, rhs))
        })
        .collect()
}

/// Whether the leverage sketch drawn at the guarantee's `s` is an
/// `eps`-embedding for `span(C~)`: `lhs` is the realised distortion and
/// `rhs` is `eps`.
pub fn check_embedding(cfg: &Theorem1Config, trials: usize, streams: &SeedStreams) -> Result<Vec<BoundReport>> {
    let inst = theorem1_synthetic(cfg, streams)?;
    let run = NoisyCurConfig {
        d: inst.d,
        s: inst.s,
        sigma_c: cfg.sigma_c,
        sigma_e: cfg.sigma_e,
        lambda: cfg.lambda,
    };
    let desc = inst.descriptor(cfg);
    trial_streams(streams, trials)
        .into_par_iter()
        .map(|(t, st)| {
            let obs = ncur::observe(&inst.a, &run, &st)?;
            let dist = sketch::embedding_distortion(&obs.sketch, obs.basis.as_matrix())?;
            Ok(BoundReport::new(BoundKind::Embedding, t, desc.clone(), dist, cfg.eps))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralConfig {
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub d: usize,
    pub sigma_c: f64,
    pub eps: f64,
    pub delta: f64,
    /// `sigma_min(C)` as a multiple of the required threshold.
    pub margin: f64,
}

impl StructuralConfig {
    /// `2 (1+delta) sigma_c sqrt(m / eps)`.
    pub fn threshold(&self) -> f64 {
        2.0 * (1.0 + self.delta) * self.sigma_c * (self.m as f64 / self.eps).sqrt()
    }

    pub fn failure_bound(&self) -> f64 {
        (-(self.m as f64) * self.delta * self.delta / 2.0).exp()
    }
}

/// `A = U M`, `C = U W` with `sigma_min(C)` at `margin` times the threshold,
/// `C~ = C + G`; checks `||(I - P_C~) A||_F^2 <= eps ||A||_F^2`.
pub fn check_structural_lemma(cfg: &StructuralConfig, trials: usize, streams: &SeedStreams) -> Result<Vec<BoundReport>> {
    if !(cfg.eps > 0.0 && cfg.eps < 1.0) || !(cfg.delta > 0.0) || cfg.sigma_c < 0.0 {
        return Err(Error::invalid("need eps in (0, 1), delta > 0, sigma_c >= 0"));
    }
    if cfg.r == 0 || cfg.r > cfg.d || cfg.r > cfg.n || cfg.r > cfg.m {
        return Err(Error::invalid(format!("rank {} must be in 1..=min(m, n, d)", cfg.r)));
    }
    let threshold = cfg.threshold();
    trial_streams(streams, trials)
        .into_par_iter()
        .map(|(t, st)| {
            let mut rng = st.rng(Stream::Dataset);
            let u = linalg::random_orthonormal(cfg.m, cfg.r, &mut rng);
            let mm = linalg::gaussian_matrix(cfg.r, cfg.n, 0.0, 1.0, &mut rng);
            let w0 = linalg::gaussian_matrix(cfg.r, cfg.d, 0.0, 1.0, &mut rng);
            let w = if threshold > 0.0 {
                let smin = sigma_k(&w0, cfg.r)?;
                w0 * (cfg.margin * threshold / smin)
            } else {
                w0
            };
            let a = &u * &mm;
            let c = &u * &w;
            let smin_c = sigma_k(&c, cfg.r)?;
            if smin_c < threshold * (1.0 - 1e-12) {
                return Err(Error::HypothesisUnmet(format!(
                    "sigma_min(C) = {smin_c} is below 2(1+delta) sigma_c sqrt(m/eps) = {threshold}"
                )));
            }
            let g = linalg::gaussian_matrix(cfg.m, cfg.d, 0.0, cfg.sigma_c, &mut st.rng(Stream::ColumnNoise));
            let c_tilde = c + g;
            let q = linalg::basis_of(&c_tilde)?;
            let lhs = frob_sq(&linalg::residual_off_span(&q, &a));
            let desc = InstanceDescriptor {
                m: cfg.m,
                n: cfg.n,
                r: cfg.r,
                d: cfg.d,
                sigma_c: Some(cfg.sigma_c),
                eps: Some(cfg.eps),
                delta: Some(cfg.delta),
                ..Default::default()
            };
            Ok(BoundReport::new(BoundKind::StructuralLemma, t, desc, lhs, cfg.eps * frob_sq(&a)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SketchChoice {
    Identity,
    /// `s` rows sampled by shrinked leverage scores of the design.
    Leverage { s: usize },
}

/// Largest distortion an accepted sketch may have.
pub const ACCEPT_EPS: f64 = 0.9;
const MAX_REDRAWS: usize = 10_000;

/// A sketch for `span(design)` that is an [`ACCEPT_EPS`]-embedding, with its
/// measured distortion and the number of rejected draws.
fn embedding_sketch<R: Rng + ?Sized>(
    design: &DMatrix<f64>,
    choice: SketchChoice,
    rng: &mut R,
) -> Result<(SketchMatrix, f64, usize)> {
    let m = design.nrows();
    match choice {
        SketchChoice::Identity => Ok((SketchMatrix::identity(m), 0.0, 0)),
        SketchChoice::Leverage { s } => {
            let u = linalg::basis_of(design)?;
            let profile = sketch::shrinked_scores_of(&u)?;
            for redraws in 0..MAX_REDRAWS {
                let sk = sketch::build_sketch(&profile, s, rng)?;
                let (lo, hi) = sketch::embedding_extremes(&sk, &u)?;
                let eps = (1.0 - lo).max(hi - 1.0);
                if eps < ACCEPT_EPS {
                    return Ok((sk, eps, redraws));
                }
            }
            Err(Error::Numerical(format!(
                "no {ACCEPT_EPS}-embedding with s = {s} in {MAX_REDRAWS} draws"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchedRidgeConfig {
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub lambda: f64,
    pub sigma_e: f64,
    pub sketch: SketchChoice,
}

/// The terms of the sketched ridge bound for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SketchedRidgeTerms {
    pub error: f64,
    pub off_span: f64,
    pub gamma: f64,
    pub in_span: f64,
    pub sketched_noise: f64,
    pub sketched_off_span: f64,
    pub eps: f64,
}

impl SketchedRidgeTerms {
    pub fn rhs(&self) -> f64 {
        let k = 4.0 / (1.0 - self.eps);
        self.off_span + self.gamma * self.in_span + k * self.sketched_noise + k * self.sketched_off_span
    }
}

/// Evaluates both sides of the sketched ridge bound for
/// `X = argmin ||S^T (A + E - C~ Z)||^2 + lambda ||Z||^2`, with `eps` the
/// measured distortion of `S` on `span(C~)`.
pub fn sketched_ridge_terms(
    c_tilde: &DMatrix<f64>,
    a: &DMatrix<f64>,
    e: &DMatrix<f64>,
    s: &SketchMatrix,
    lambda: f64,
) -> Result<SketchedRidgeTerms> {
    let eps = sketch::embedding_distortion(s, c_tilde)?;
    let design = sketch::sketch_rows(s, c_tilde)?;
    let target = sketch::sketch_rows(s, &(a + e))?;
    let x = ncur::ridge(&design, &target, lambda)?.x;
    let q = linalg::basis_of(c_tilde)?;
    let off = linalg::residual_off_span(&q, a);
    let d = c_tilde.ncols();
    Ok(SketchedRidgeTerms {
        error: frob_sq(&(a - c_tilde * x)),
        off_span: frob_sq(&off),
        gamma: gamma(eps, sigma_k(c_tilde, d)?.powi(2), lambda),
        in_span: frob_sq(&(&q * (q.transpose() * a))),
        sketched_noise: frob_sq(&sketch::sketch_rows(s, e)?),
        sketched_off_span: frob_sq(&sketch::sketch_rows(s, &off)?),
        eps,
    })
}

pub fn check_sketched_ridge_bound(
    cfg: &SketchedRidgeConfig,
    trials: usize,
    streams: &SeedStreams,
) -> Result<Vec<BoundReport>> {
    if cfg.d == 0 || cfg.d > cfg.m || cfg.n == 0 || cfg.lambda < 0.0 || cfg.sigma_e < 0.0 {
        return Err(Error::invalid("need 1 <= d <= m, n >= 1, lambda >= 0, sigma_e >= 0"));
    }
    trial_streams(streams, trials)
        .into_par_iter()
        .map(|(t, st)| {
            let mut rng = st.rng(Stream::Dataset);
            let c = linalg::gaussian_matrix(cfg.m, cfg.d, 0.0, 1.0, &mut rng);
            let a = linalg::gaussian_matrix(cfg.m, cfg.n, 0.0, 1.0, &mut rng);
            let e = linalg::gaussian_matrix(cfg.m, cfg.n, 0.0, cfg.sigma_e, &mut st.rng(Stream::EntryNoise));
            let (s, _, redraws) = embedding_sketch(&c, cfg.sketch, &mut st.rng(Stream::RowSampling))?;
            let terms = sketched_ridge_terms(&c, &a, &e, &s, cfg.lambda)?;
            let desc = InstanceDescriptor {
                m: cfg.m,
                n: cfg.n,
                d: cfg.d,
                s: s.sample_count(),
                sigma_e: Some(cfg.sigma_e),
                lambda: Some(cfg.lambda),
                eps: Some(terms.eps),
                ..Default::default()
            };
            let mut rep = BoundReport::new(BoundKind::SketchedRidge, t, desc, terms.error, terms.rhs());
            rep.redraws = redraws;
            Ok(rep)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximalPoint {
    Random,
    /// `A^+ b`, which removes the middle term.
    LeastSquares,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchedRidgeVectorConfig {
    pub m: usize,
    pub d: usize,
    pub lambda: f64,
    pub sigma_e: f64,
    pub sketch: SketchChoice,
    pub proximal: ProximalPoint,
}

/// Both sides of the vector bound
/// `f(x_S) <= f(A^+ b) + gamma (f(x) - f(A^+ b)) + 4/(1-e) (||S^T e||^2 + ||S^T (I-P_A) b||^2)`
/// for `x_S = argmin ||S^T (A z - b - e)||^2 + lambda ||z - x||^2`.
pub fn sketched_ridge_vector_sides(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    e: &DVector<f64>,
    x: &DVector<f64>,
    s: &SketchMatrix,
    lambda: f64,
) -> Result<(f64, f64, f64)> {
    let eps = sketch::embedding_distortion(s, a)?;
    let sa = sketch::sketch_rows(s, a)?;
    let sbe = sketch::sketch_rows(s, &DMatrix::from_column_slice(b.len(), 1, (b + e).as_slice()))?;
    let lhs_mat = sa.transpose() * &sa + DMatrix::identity(a.ncols(), a.ncols()) * lambda;
    let rhs_vec = sa.transpose() * sbe + DMatrix::from_column_slice(x.len(), 1, x.as_slice()) * lambda;
    let xs = lhs_mat
        .cholesky()
        .ok_or_else(|| Error::Numerical("sketched normal matrix not positive definite".into()))?
        .solve(&rhs_vec);
    let f = |z: &DMatrix<f64>| (a * z - DMatrix::from_column_slice(b.len(), 1, b.as_slice())).norm_squared();
    let bm = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let ls = linalg::pseudo_inverse(a)? * &bm;
    let f_opt = f(&ls);
    let f_x = f(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()));
    let q = linalg::basis_of(a)?;
    let off = linalg::residual_off_span(&q, &bm);
    let noise = frob_sq(&sketch::sketch_rows(s, &DMatrix::from_column_slice(e.len(), 1, e.as_slice()))?);
    let g = gamma(eps, sigma_k(a, a.ncols())?.powi(2), lambda);
    let k = 4.0 / (1.0 - eps);
    let rhs = f_opt + g * (f_x - f_opt) + k * noise + k * frob_sq(&sketch::sketch_rows(s, &off)?);
    Ok((f(&xs), rhs, eps))
}

pub fn check_sketched_ridge_vector(
    cfg: &SketchedRidgeVectorConfig,
    trials: usize,
    streams: &SeedStreams,
) -> Result<Vec<BoundReport>> {
    if cfg.d == 0 || cfg.d > cfg.m || !(cfg.lambda > 0.0) || cfg.sigma_e < 0.0 {
        return Err(Error::invalid("need 1 <= d <= m, lambda > 0, sigma_e >= 0"));
    }
    trial_streams(streams, trials)
        .into_par_iter()
        .map(|(t, st)| {
            let mut rng = st.rng(Stream::Dataset);
            let a = linalg::gaussian_matrix(cfg.m, cfg.d, 0.0, 1.0, &mut rng);
            let b = DVector::from_column_slice(linalg::gaussian_matrix(cfg.m, 1, 0.0, 1.0, &mut rng).as_slice());
            let e = DVector::from_column_slice(
                linalg::gaussian_matrix(cfg.m, 1, 0.0, cfg.sigma_e, &mut st.rng(Stream::EntryNoise)).as_slice(),
            );
            let x = match cfg.proximal {
                ProximalPoint::Random => {
                    DVector::from_column_slice(linalg::gaussian_matrix(cfg.d, 1, 0.0, 1.0, &mut rng).as_slice())
                }
                ProximalPoint::LeastSquares => {
                    let bm = DMatrix::from_column_slice(cfg.m, 1, b.as_slice());
                    DVector::from_column_slice((linalg::pseudo_inverse(&a)? * bm).as_slice())
                }
            };
            let (s, _, redraws) = embedding_sketch(&a, cfg.sketch, &mut st.rng(Stream::RowSampling))?;
            let (lhs, rhs, eps) = sketched_ridge_vector_sides(&a, &b, &e, &x, &s, cfg.lambda)?;
            let desc = InstanceDescriptor {
                m: cfg.m,
                n: 1,
                d: cfg.d,
                s: s.sample_count(),
                sigma_e: Some(cfg.sigma_e),
                lambda: Some(cfg.lambda),
                eps: Some(eps),
                ..Default::default()
            };
            let mut rep = BoundReport::new(BoundKind::SketchedRidgeVector, t, desc, lhs, rhs);
            rep.redraws = redraws;
            Ok(rep)
        })
        .collect()
}

/// Both sides of
/// `||A (A^T S S^T A + lambda I)^{-1} v||^2 <= (1+e)/(1-e) (1/((1+e) sigma_d(A)^2 + lambda))^2 ||A v||^2`
/// with `e` the measured distortion of `S` on `span(A)`.
pub fn awkward_sketch_sides(
    a: &DMatrix<f64>,
    s: &SketchMatrix,
    lambda: f64,
    v: &DVector<f64>,
) -> Result<(f64, f64, f64)> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    let eps = sketch::embedding_distortion(s, a)?;
    let sa = sketch::sketch_rows(s, a)?;
    let d = a.ncols();
    let gram = sa.transpose() * &sa + DMatrix::identity(d, d) * lambda;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("regularised sketched Gram not positive definite".into()))?
        .solve(v);
    let lhs = (a * w).norm_squared();
    let sd = sigma_k(a, d)?;
    let k = 1.0 / ((1.0 + eps) * sd * sd + lambda);
    let rhs = (1.0 + eps) / (1.0 - eps) * k * k * (a * v).norm_squared();
    Ok((lhs, rhs, eps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeVector {
    Random,
    /// `A` is drawn with rank `d - 1` and `v` spans its null space.
    NullSpace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AwkwardConfig {
    pub m: usize,
    pub d: usize,
    pub sketch: SketchChoice,
    /// `lambda` is drawn log-uniformly from this range, in units of
    /// `sigma_d(A)^2` (of `sigma_1(A)^2` when `A` is rank deficient).
    pub lambda_range: (f64, f64),
    pub probe: ProbeVector,
}

pub fn check_awkward_sketch(cfg: &AwkwardConfig, trials: usize, streams: &SeedStreams) -> Result<Vec<BoundReport>> {
    let (lo, hi) = cfg.lambda_range;
    if cfg.d == 0 || cfg.d > cfg.m || !(lo > 0.0 && hi >= lo) {
        return Err(Error::invalid("need 1 <= d <= m and 0 < lambda_lo <= lambda_hi"));
    }
    if cfg.probe == ProbeVector::NullSpace && cfg.d < 2 {
        return Err(Error::invalid("a null-space probe needs d >= 2"));
    }
    trial_streams(streams, trials)
        .into_par_iter()
        .map(|(t, st)| {
            let mut rng = st.rng(Stream::Dataset);
            let (a, v) = match cfg.probe {
                ProbeVector::Random => {
                    let a = linalg::gaussian_matrix(cfg.m, cfg.d, 0.0, 1.0, &mut rng);
                    let v = DVector::from_column_slice(linalg::gaussian_matrix(cfg.d, 1, 0.0, 1.0, &mut rng).as_slice());
                    (a, v)
                }
                ProbeVector::NullSpace => {
                    let a = linalg::gaussian_matrix(cfg.m, cfg.d - 1, 0.0, 1.0, &mut rng)
                        * linalg::gaussian_matrix(cfg.d - 1, cfg.d, 0.0, 1.0, &mut rng);
                    let svd = linalg::thin_svd(&a.transpose())?;
                    // Row space of A is spanned by the first d-1 columns of u.
                    let q = svd.u.columns(0, cfg.d - 1).into_owned();
                    let g = DVector::from_column_slice(linalg::gaussian_matrix(cfg.d, 1, 0.0, 1.0, &mut rng).as_slice());
                    let v = &g - &q * (q.transpose() * &g);
                    (a, v)
                }
            };
            let scale = match sigma_k(&a, cfg.d)? {
                x if x > 1e-8 * sigma_k(&a, 1)? => x * x,
                _ => sigma_k(&a, 1)?.powi(2),
            };
            let lambda = scale * (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp();
            let (s, _, redraws) = embedding_sketch(&a, cfg.sketch, &mut st.rng(Stream::RowSampling))?;
            let (lhs, rhs, eps) = awkward_sketch_sides(&a, &s, lambda, &v)?;
            let desc = InstanceDescriptor {
                m: cfg.m,
                d: cfg.d,
                s: s.sample_count(),
                lambda: Some(lambda),
                eps: Some(eps),
                ..Default::default()
            };
            let mut rep = BoundReport::new(BoundKind::AwkwardSketch, t, desc, lhs, rhs);
            rep.redraws = redraws;
            Ok(rep)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbedSigmaConfig {
    pub m: usize,
    pub d: usize,
    pub r: usize,
    pub sigma: f64,
    pub delta: f64,
}

impl PerturbedSigmaConfig {
    pub fn failure_bound(&self) -> f64 {
        (-((self.m - self.r) as f64) * self.delta * self.delta / 2.0).exp()
    }

    /// `(sqrt(m-r)/2 - sqrt(d))^2 sigma^2`, or an error when the difference
    /// is not positive and the bound says nothing.
    pub fn lower_bound(&self) -> Result<f64> {
        let gap = 0.5 * ((self.m - self.r) as f64).sqrt() - (self.d as f64).sqrt();
        if gap <= 0.0 {
            return Err(Error::HypothesisUnmet(format!(
                "sqrt(m-r)/2 = {} does not exceed sqrt(d) = {}: the bound is vacuous",
                0.5 * ((self.m - self.r) as f64).sqrt(),
                (self.d as f64).sqrt()
            )));
        }
        Ok(gap * gap * self.sigma * self.sigma)
    }
}

/// `lhs` is the lower estimate and `rhs` the measured `sigma_d(C + E)^2`,
/// so `holds` means the estimate was valid.
pub fn check_perturbed_sigma(cfg: &PerturbedSigmaConfig, trials: usize, streams: &SeedStreams) -> Result<Vec<BoundReport>> {
    if cfg.d == 0 || cfg.d > cfg.m || cfg.r > cfg.d || cfg.sigma < 0.0 {
        return Err(Error::invalid("need 1 <= d <= m, r <= d, sigma >= 0"));
    }
    let lower = cfg.lower_bound()?;
    trial_streams(streams, trials)
        .into_par_iter()
        .map(|(t, st)| {
            let mut rng = st.rng(Stream::Dataset);
            let c = linalg::gaussian_matrix(cfg.m, cfg.r, 0.0, 1.0, &mut rng) * linalg::gaussian_matrix(cfg.r, cfg.d, 0.0, 1.0, &mut rng);
            let e = linalg::gaussian_matrix(cfg.m, cfg.d, 0.0, cfg.sigma, &mut st.rng(Stream::ColumnNoise));
            let sd = sigma_k(&(c + e), cfg.d)?;
            let desc = InstanceDescriptor {
                m: cfg.m,
                r: cfg.r,
                d: cfg.d,
                sigma_c: Some(cfg.sigma),
                delta: Some(cfg.delta),
                ..Default::default()
            };
            Ok(BoundReport::new(BoundKind::PerturbedSigma, t, desc, lower, sd * sd))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn holds_uses_relative_slack() {
        assert!(holds(1.0, 1.0));
        assert!(holds(1.0 + 1e-13, 1.0));
        assert!(!holds(1.0 + 1e-9, 1.0));
        assert!(holds(1e20 * (1.0 + 1e-13), 1e20));
        let r = BoundReport::new(BoundKind::AwkwardSketch, 0, InstanceDescriptor::default(), 2.0, 3.0);
        assert!(r.holds && r.margin == 1.0);
    }

    #[test]
    fn denseness_constant_is_the_median_magnitude() {
        let a = DMatrix::from_row_slice(2, 3, &[0.0, -3.0, 1.0, 2.0, 0.0, 5.0]);
        // Sorted magnitudes 5 3 2 1 0 0; three of six are >= 2.
        assert_eq!(denseness_constant(&a), 2.0);
        let b = DMatrix::from_row_slice(1, 3, &[4.0, 0.0, 1.0]);
        assert_eq!(denseness_constant(&b), 1.0);
    }

    #[test]
    fn gamma_limits() {
        assert_eq!(gamma(0.5, 1.0, 0.0), 0.0);
        assert!((gamma(0.5, 0.0, 2.0) - 6.0).abs() < 1e-15);
        assert!(gamma(0.2, 10.0, 1.0) < gamma(0.2, 10.0, 2.0));
    }

    #[test]
    fn theorem1_rhs_noiseless_limit() {
        let rhs = theorem1_rhs(100.0, 1.0, 80, 4, 10, 0.0, 0.0, 0.5, 0.0);
        assert!((rhs - 40.5 * 100.0).abs() < 1e-9);
    }

    #[test]
    fn noiseless_theorem1_holds_trivially() {
        let cfg = Theorem1Config {
            m: 30,
            n: 20,
            r: 2,
            sigma_c: 0.0,
            sigma_e: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let reps = check_theorem1(&cfg, 4, &SeedStreams::new(1)).unwrap();
        for r in &reps {
            assert!(r.lhs < 1e-12 * r.rhs, "{r:?}");
            assert!(r.holds);
        }
        let a = reps[0].instance.clone();
        assert!((reps[0].rhs - 40.5 * theorem1_synthetic(&cfg, &SeedStreams::new(1)).unwrap().hypotheses.frob_sq).abs() < 1e-6 * reps[0].rhs);
        assert_eq!(a.eps, Some(0.5));
    }

    #[test]
    fn theorem1_rejects_small_d() {
        let cfg = Theorem1Config {
            m: 30,
            n: 20,
            r: 2,
            d: Some(2),
            ..Default::default()
        };
        match check_theorem1(&cfg, 1, &SeedStreams::new(2)) {
            Err(Error::HypothesisUnmet(msg)) => assert!(msg.contains("d = 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let cfg = Theorem1Config {
            m: 30,
            n: 20,
            r: 2,
            s: Some(3),
            ..Default::default()
        };
        assert!(matches!(check_theorem1(&cfg, 1, &SeedStreams::new(2)), Err(Error::HypothesisUnmet(_))));
    }

    #[test]
    fn theorem1_instance_rejects_wrong_rank() {
        let a = DenseMatrix::new(linalg::gaussian_matrix(10, 8, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3))).unwrap();
        let cfg = Theorem1Config { r: 2, ..Default::default() };
        assert!(matches!(theorem1_instance(a, &cfg), Err(Error::HypothesisUnmet(_))));
    }

    #[test]
    fn structural_noiseless_is_exact() {
        let cfg = StructuralConfig {
            m: 40,
            n: 10,
            r: 3,
            d: 5,
            sigma_c: 0.0,
            eps: 0.5,
            delta: 0.3,
            margin: 1.0,
        };
        for r in check_structural_lemma(&cfg, 5, &SeedStreams::new(4)).unwrap() {
            assert!(r.lhs < 1e-20 * r.rhs.max(1.0), "{r:?}");
        }
    }

    #[test]
    fn structural_far_above_threshold_is_slack() {
        let cfg = StructuralConfig {
            m: 200,
            n: 20,
            r: 3,
            d: 6,
            sigma_c: 0.1,
            eps: 0.5,
            delta: 0.3,
            margin: 10.0,
        };
        let reps = check_structural_lemma(&cfg, 50, &SeedStreams::new(5)).unwrap();
        let mut ratios: Vec<f64> = reps.iter().map(|r| r.lhs / r.rhs * cfg.eps).collect();
        ratios.sort_by(f64::total_cmp);
        assert!(ratios[25] < cfg.eps / 10.0, "median {}", ratios[25]);
    }

    #[test]
    fn sketched_ridge_exact_least_squares() {
        let cfg = SketchedRidgeConfig {
            m: 15,
            d: 4,
            n: 6,
            lambda: 0.0,
            sigma_e: 0.0,
            sketch: SketchChoice::Identity,
        };
        let st = SeedStreams::new(6);
        let reps = check_sketched_ridge_bound(&cfg, 3, &st).unwrap();
        for (t, r) in reps.iter().enumerate() {
            let mut rng = st.child(&[t as u64]).rng(Stream::Dataset);
            let c = linalg::gaussian_matrix(15, 4, 0.0, 1.0, &mut rng);
            let a = linalg::gaussian_matrix(15, 6, 0.0, 1.0, &mut rng);
            let off = linalg::residual_off_span(&linalg::basis_of(&c).unwrap(), &a).norm_squared();
            assert!((r.lhs - off).abs() < 1e-10 * off, "{} vs {off}", r.lhs);
            assert!(r.holds);
            assert!(r.instance.eps.unwrap() < 1e-12);
        }
    }

    #[test]
    fn sketched_ridge_terms_by_hand() {
        // One column, identity sketch: everything is scalar algebra.
        let c = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let a = DMatrix::from_column_slice(2, 1, &[2.0, 1.0]);
        let e = DMatrix::from_column_slice(2, 1, &[0.5, 0.0]);
        let t = sketched_ridge_terms(&c, &a, &e, &SketchMatrix::identity(2), 1.0).unwrap();
        // x = 2.5 / 2; error = (2 - 1.25)^2 + 1.
        assert!((t.error - (0.75f64.powi(2) + 1.0)).abs() < 1e-14);
        assert!((t.off_span - 1.0).abs() < 1e-14);
        assert!((t.in_span - 4.0).abs() < 1e-14);
        assert!((t.sketched_noise - 0.25).abs() < 1e-14);
        assert!((t.gamma - 2.0 * 0.25).abs() < 1e-14);
        assert!((t.rhs() - (1.0 + 0.5 * 4.0 + 4.0 * 0.25 + 4.0 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn vector_form_at_the_least_squares_point() {
        let cfg = SketchedRidgeVectorConfig {
            m: 30,
            d: 5,
            lambda: 1.0,
            sigma_e: 0.0,
            sketch: SketchChoice::Identity,
            proximal: ProximalPoint::LeastSquares,
        };
        for r in check_sketched_ridge_vector(&cfg, 5, &SeedStreams::new(7)).unwrap() {
            // x = A^+ b and no noise: x_S = x, and both sides reduce to f(A^+ b)
            // plus the off-span term.
            assert!(r.holds, "{r:?}");
        }
    }

    #[test]
    fn awkward_identity_sketch() {
        let cfg = AwkwardConfig {
            m: 25,
            d: 4,
            sketch: SketchChoice::Identity,
            lambda_range: (1e-2, 1e2),
            probe: ProbeVector::Random,
        };
        for r in check_awkward_sketch(&cfg, 10, &SeedStreams::new(8)).unwrap() {
            assert!(r.instance.eps.unwrap() < 1e-12);
            assert!(r.holds, "{r:?}");
        }
    }

    #[test]
    fn awkward_null_space_probe_vanishes() {
        let cfg = AwkwardConfig {
            m: 25,
            d: 4,
            sketch: SketchChoice::Leverage { s: 60 },
            lambda_range: (1e-1, 1e1),
            probe: ProbeVector::NullSpace,
        };
        for r in check_awkward_sketch(&cfg, 5, &SeedStreams::new(9)).unwrap() {
            assert!(r.lhs < 1e-20 && r.rhs < 1e-20, "{r:?}");
        }
    }

    // With lambda small against sigma_d^2 and v along the direction the
    // sketch shrinks most, the left side approaches (1/((1-e) s^2))^2 ||Av||^2
    // while the right side is (1+e)/(1-e) (1/((1+e) s^2))^2 ||Av||^2: the
    // inequality fails by a factor (1+e)/(1-e).
    #[test]
    fn awkward_counterexample_at_small_lambda() {
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        // One sample of row 0 with scale^2 = 0.5: S^T S restricted to span(A) is 0.5.
        let s = SketchMatrix::from_parts(2, vec![0], vec![0.5f64.sqrt()]).unwrap();
        let v = DVector::from_element(1, 1.0);
        let (lhs, rhs, eps) = awkward_sketch_sides(&a, &s, 0.01, &v).unwrap();
        assert!((eps - 0.5).abs() < 1e-15);
        assert!((lhs - 1.0 / 0.51f64.powi(2)).abs() < 1e-9);
        assert!((rhs - 3.0 / 1.51f64.powi(2)).abs() < 1e-9);
        assert!(!holds(lhs, rhs));
    }

    #[test]
    fn perturbed_sigma_guard_and_trivial_case() {
        let bad = PerturbedSigmaConfig {
            m: 9,
            d: 4,
            r: 2,
            sigma: 1.0,
            delta: 0.1,
        };
        assert!(matches!(check_perturbed_sigma(&bad, 1, &SeedStreams::new(1)), Err(Error::HypothesisUnmet(_))));
        let zero = PerturbedSigmaConfig {
            m: 100,
            d: 5,
            r: 2,
            sigma: 0.0,
            delta: 0.1,
        };
        for r in check_perturbed_sigma(&zero, 5, &SeedStreams::new(2)).unwrap() {
            assert_eq!(r.lhs, 0.0);
            assert!(r.holds);
        }
    }

    #[test]
    fn perturbed_sigma_holds_at_scale() {
        let cfg = PerturbedSigmaConfig {
            m: 400,
            d: 5,
            r: 2,
            sigma: 1.0,
            delta: 0.1,
        };
        let t = Tally::of(&check_perturbed_sigma(&cfg, 100, &SeedStreams::new(3)).unwrap());
        assert!(t.success_rate() >= 0.99);
        assert!(t.failure_within(cfg.failure_bound()));
    }

    #[test]
    fn reports_are_reproducible() {
        let cfg = AwkwardConfig {
            m: 12,
            d: 3,
            sketch: SketchChoice::Leverage { s: 30 },
            lambda_range: (1e-1, 1e1),
            probe: ProbeVector::Random,
        };
        let a = check_awkward_sketch(&cfg, 6, &SeedStreams::new(10)).unwrap();
        let b = check_awkward_sketch(&cfg, 6, &SeedStreams::new(10)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tally_rates() {
        let mk = |h: bool| BoundReport::new(BoundKind::Embedding, 0, InstanceDescriptor::default(), if h { 0.0 } else { 2.0 }, 1.0);
        let reps: Vec<_> = (0..100).map(|i| mk(i % 10 != 0)).collect();
        let t = Tally::of(&reps);
        assert_eq!((t.trials, t.holds, t.failures()), (100, 90, 10));
        assert!(t.failure_within(0.05));
        assert!(!t.failure_within(0.01));
    }
}
