//! Nuclear-norm minimisation under Frobenius-ball constraints on observed
//! cells, by scaled-form ADMM:
//!
//! ```text
//! Z <- svt(W - U, 1/rho)
//! W <- proj(Z + U)       (balls on their cells, free elsewhere)
//! U <- U + Z - W
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::partial::PartialMatrix;
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::observation::ObservationMode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmSettings {
    pub max_iters: usize,
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub rho: f64,
    /// Relaxation factor in `(0, 2)`; `None` is plain ADMM.
    pub over_relaxation: Option<f64>,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            primal_tol: 1e-5,
            dual_tol: 1e-5,
            rho: 1.0,
            over_relaxation: None,
        }
    }
}

impl AdmmSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("ADMM needs max_iters >= 1"));
        }
        if !(self.primal_tol > 0.0 && self.dual_tol > 0.0) {
            return Err(Error::invalid("ADMM tolerances must be positive"));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::invalid("ADMM penalty must be positive"));
        }
        if let Some(a) = self.over_relaxation {
            if !(a > 0.0 && a < 2.0) {
                return Err(Error::invalid(format!("relaxation factor {a} outside (0, 2)")));
            }
        }
        Ok(())
    }
}

/// Singular value soft-thresholding, the prox of `tau ||.||_*`.
pub fn svt(z: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    if !(tau >= 0.0) {
        return Err(Error::invalid(format!("threshold {tau} must be >= 0")));
    }
    Ok(DenseMatrix::wrap(shrink(z.as_matrix(), tau)?.0))
}

/// Thresholded matrix and its nuclear norm.
fn shrink(z: &DMatrix<f64>, tau: f64) -> Result<(DMatrix<f64>, f64)> {
    let svd = linalg::thin_svd(z)?;
    let mut out = DMatrix::zeros(z.nrows(), z.ncols());
    let mut nuclear = 0.0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        let t = s - tau;
        if t <= 0.0 {
            break;
        }
        nuclear += t;
        out += (svd.u.column(k) * t) * svd.v_t.row(k);
    }
    Ok((out, nuclear))
}

/// `{X : ||X[cells] - center|| <= radius}`, cells as column-major offsets.
#[derive(Clone, Debug)]
struct Ball {
    cells: Vec<usize>,
    center: Vec<f64>,
    radius: f64,
}

impl Ball {
    fn from_partial(p: &PartialMatrix, mode: Option<ObservationMode>, radius: f64) -> Self {
        let m = p.rows();
        let (cells, center) = p
            .cells()
            .filter(|c| mode.map_or(true, |md| c.mode == md))
            .map(|c| (c.row + c.col * m, c.value))
            .unzip();
        Self { cells, center, radius }
    }

    fn distance(&self, x: &DMatrix<f64>) -> f64 {
        let s = x.as_slice();
        self.cells
            .iter()
            .zip(&self.center)
            .map(|(&k, &c)| (s[k] - c).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn project(&self, x: &mut DMatrix<f64>) {
        let dist = self.distance(x);
        if dist <= self.radius {
            return;
        }
        let f = self.radius / dist;
        let s = x.as_mut_slice();
        for (&k, &c) in self.cells.iter().zip(&self.center) {
            s[k] = c + f * (s[k] - c);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmIterate {
    pub nuclear_norm: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Largest amount by which `Z` sits outside a constraint ball.
    pub constraint_gap: f64,
    /// `||Z||_* + rho/2 ||Z - W||_F^2`.
    pub objective_plus_penalty: f64,
    /// `||W_k - W_{k-1}||_F^2 + ||U_k - U_{k-1}||_F^2`.
    pub fixed_point_residual: f64,
}

/// Split variables, reusable as a warm start.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmState {
    pub w: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct AdmmOutcome {
    /// The iterate with the smallest scaled KKT residual (the last one when
    /// converged).
    pub z: DenseMatrix,
    pub converged: bool,
    pub iterations: usize,
    pub nuclear_norm: f64,
    pub constraint_gap: f64,
    pub trace: Vec<AdmmIterate>,
    pub state: AdmmState,
}

fn solve(
    rows: usize,
    cols: usize,
    balls: &[Ball],
    settings: &AdmmSettings,
    warm: Option<&AdmmState>,
) -> Result<AdmmOutcome> {
    settings.validate()?;
    let rho = settings.rho;
    let (mut w, mut u) = match warm {
        Some(st) if st.w.shape() == (rows, cols) && st.u.shape() == (rows, cols) => (st.w.clone(), st.u.clone()),
        Some(_) => return Err(Error::dims("warm start has the wrong shape")),
        None => (DMatrix::zeros(rows, cols), DMatrix::zeros(rows, cols)),
    };
    let gap = |z: &DMatrix<f64>| balls.iter().map(|b| (b.distance(z) - b.radius).max(0.0)).fold(0.0, f64::max);

    let mut trace = Vec::new();
    let mut best: Option<(f64, DMatrix<f64>, f64, f64)> = None;
    let mut converged = false;
    for _ in 0..settings.max_iters {
        let (z, nuclear) = shrink(&(&w - &u), 1.0 / rho)?;
        let z_hat = match settings.over_relaxation {
            Some(a) => &z * a + &w * (1.0 - a),
            None => z.clone(),
        };
        let w_prev = std::mem::replace(&mut w, &z_hat + &u);
        for b in balls {
            b.project(&mut w);
        }
        let u_prev = u.clone();
        u += &z_hat - &w;

        let primal = (&z - &w).norm();
        let dual = rho * (&w - &w_prev).norm();
        let eps_pri = settings.primal_tol * 1f64.max(z.norm()).max(w.norm());
        let eps_dual = settings.dual_tol * 1f64.max(rho * u.norm());
        let constraint_gap = gap(&z);
        trace.push(AdmmIterate {
            nuclear_norm: nuclear,
            primal_residual: primal,
            dual_residual: dual,
            constraint_gap,
            objective_plus_penalty: nuclear + 0.5 * rho * primal * primal,
            fixed_point_residual: (&w - &w_prev).norm_squared() + (&u - &u_prev).norm_squared(),
        });
        let score = (primal / eps_pri).max(dual / eps_dual);
        if best.as_ref().map_or(true, |b| score <= b.0) {
            best = Some((score, z, nuclear, constraint_gap));
        }
        if primal <= eps_pri && dual <= eps_dual {
            converged = true;
            break;
        }
    }
    let (_, z, nuclear_norm, constraint_gap) = best.expect("max_iters >= 1");
    Ok(AdmmOutcome {
        z: DenseMatrix::wrap(z),
        converged,
        iterations: trace.len(),
        nuclear_norm,
        constraint_gap,
        trace,
        state: AdmmState { w, u },
    })
}

/// `argmin ||Z||_* s.t. ||P_Omega_e(Z - A_obs)||_F <= delta`.
pub fn nna(obs: &PartialMatrix, delta: f64, settings: &AdmmSettings) -> Result<AdmmOutcome> {
    nna_warm(obs, delta, settings, None)
}

pub fn nna_warm(
    obs: &PartialMatrix,
    delta: f64,
    settings: &AdmmSettings,
    warm: Option<&AdmmState>,
) -> Result<AdmmOutcome> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("delta {delta} must be finite and >= 0")));
    }
    let ball = Ball::from_partial(obs, Some(ObservationMode::Entry), delta);
    solve(obs.rows(), obs.cols(), &[ball], settings, warm)
}

/// Constants of the split formulation: `||P_Omega_c(Z - A_obs)||^2 <= c1 d m sigma_c^2`
/// and `||P_Omega_e(Z - A_obs)||^2 <= c2 f sigma_e^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnsParams {
    pub c1: f64,
    pub c2: f64,
    pub d: usize,
    pub m: usize,
    /// Number of entry-mode cells.
    pub f: usize,
    pub sigma_c: f64,
    pub sigma_e: f64,
}

impl NnsParams {
    pub fn column_radius(&self) -> f64 {
        (self.c1 * self.d as f64 * self.m as f64 * self.sigma_c * self.sigma_c).sqrt()
    }

    pub fn entry_radius(&self) -> f64 {
        (self.c2 * self.f as f64 * self.sigma_e * self.sigma_e).sqrt()
    }
}

pub fn nns(obs: &PartialMatrix, params: &NnsParams, settings: &AdmmSettings) -> Result<AdmmOutcome> {
    nns_warm(obs, params, settings, None)
}

pub fn nns_warm(
    obs: &PartialMatrix,
    params: &NnsParams,
    settings: &AdmmSettings,
    warm: Option<&AdmmState>,
) -> Result<AdmmOutcome> {
    if !(params.c1 > 0.0 && params.c2 > 0.0) {
        return Err(Error::invalid("NNs constants must be positive"));
    }
    let balls = [
        Ball::from_partial(obs, Some(ObservationMode::Column), params.column_radius()),
        Ball::from_partial(obs, Some(ObservationMode::Entry), params.entry_radius()),
    ];
    solve(obs.rows(), obs.cols(), &balls, settings, warm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian_matrix, nuclear_norm};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dm(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        gaussian_matrix(r, c, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn observe(a: &DMatrix<f64>, frac: f64, seed: u64) -> PartialMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PartialMatrix::new(a.nrows(), a.ncols());
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if rng.random_bool(frac) {
                    p.insert(i, j, a[(i, j)], ObservationMode::Entry).unwrap();
                }
            }
        }
        p
    }

    #[test]
    fn svt_edges() {
        let z = DenseMatrix::new(rand_dm(6, 4, 1)).unwrap();
        let same = svt(&z, 0.0).unwrap();
        assert!(linalg::max_abs_diff(&same, &z) < 1e-12);
        let s1 = linalg::spectral_norm(&z).unwrap();
        assert_eq!(svt(&z, s1).unwrap().frobenius(), 0.0);
        assert!(svt(&z, -1.0).is_err());
    }

    #[test]
    fn svt_is_the_prox() {
        let z = rand_dm(6, 4, 2);
        let tau = 0.5;
        let w = svt(&DenseMatrix::new(z.clone()).unwrap(), tau).unwrap().into_matrix();
        let obj = |x: &DMatrix<f64>| 0.5 * (x - &z).norm_squared() + tau * nuclear_norm(x).unwrap();
        let base = obj(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..1000 {
            let scale = 10f64.powi(-(k % 6));
            let dir = gaussian_matrix(6, 4, 0.0, 1.0, &mut rng);
            assert!(obj(&(&w + dir * scale)) >= base - 1e-12);
        }
    }

    proptest! {
        #[test]
        fn svt_nonexpansive(seed in 0u64..100_000, tau in 0.0f64..3.0) {
            let x = rand_dm(5, 4, seed);
            let y = rand_dm(5, 4, seed + 7);
            let sx = svt(&DenseMatrix::new(x.clone()).unwrap(), tau).unwrap();
            let sy = svt(&DenseMatrix::new(y.clone()).unwrap(), tau).unwrap();
            prop_assert!((sx.as_matrix() - sy.as_matrix()).norm() <= (x - y).norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn nna_huge_delta_gives_zero() {
        let a = rand_dm(6, 5, 4);
        let p = observe(&a, 0.5, 5);
        let out = nna(&p, p.to_dense().frobenius() * 2.0, &AdmmSettings::default()).unwrap();
        assert!(out.converged);
        assert!(out.z.frobenius() < 1e-6);
    }

    #[test]
    fn nna_equality_on_full_observation() {
        let a = rand_dm(6, 5, 6);
        let p = observe(&a, 1.0, 7);
        let out = nna(&p, 0.0, &AdmmSettings::default()).unwrap();
        assert!(out.converged, "{} iterations", out.iterations);
        assert!((out.z.as_matrix() - &a).norm() < 1e-4 * a.norm());
    }

    /// Exact recovery is instance-dependent at this size: the certificate is
    /// that no feasible point beats `||A||_*`, and recovery must follow
    /// whenever the optimum is attained at `A`'s nuclear norm.
    #[test]
    fn nna_low_rank_recovery_certificate() {
        let settings = AdmmSettings {
            max_iters: 20_000,
            primal_tol: 1e-6,
            dual_tol: 1e-6,
            ..Default::default()
        };
        let mut recovered = 0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = gaussian_matrix(10, 2, 0.0, 1.0, &mut rng) * gaussian_matrix(2, 10, 0.0, 1.0, &mut rng);
            let mut p = PartialMatrix::new(10, 10);
            for i in 0..10 {
                for j in 0..10 {
                    if rng.random_bool(0.6) {
                        p.insert(i, j, a[(i, j)], ObservationMode::Entry).unwrap();
                    }
                }
            }
            let out = nna(&p, 1e-6, &settings).unwrap();
            if !out.converged {
                continue;
            }
            let truth = nuclear_norm(&a).unwrap();
            assert!(out.nuclear_norm <= truth * (1.0 + 1e-5));
            assert!(out.constraint_gap < 1e-4);
            if out.nuclear_norm >= truth * (1.0 - 1e-6) {
                let err = (out.z.as_matrix() - &a).norm() / a.norm();
                assert!(err < 1e-3, "seed {seed}: optimum at ||A||_* but relative error {err}");
                recovered += 1;
            }
        }
        assert!(recovered >= 3, "only {recovered} recoveries");
    }

    #[test]
    fn admm_fixed_point_residual_is_monotone() {
        let a = rand_dm(12, 3, 11) * rand_dm(3, 9, 12);
        let p = observe(&a, 0.5, 13);
        let out = nna(&p, 0.5, &AdmmSettings::default()).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1].fixed_point_residual <= w[0].fixed_point_residual * (1.0 + 1e-9) + 1e-24);
        }
    }

    // Nuclear norm plus penalty is not a Lyapunov function for ADMM; it
    // rises occasionally after burn-in while the fixed-point residual above
    // keeps falling. Pin the observed behaviour on one instance.
    #[test]
    fn objective_plus_penalty_can_rise_after_burn_in() {
        let a = rand_dm(12, 3, 40) * rand_dm(3, 9, 50);
        let p = observe(&a, 0.5, 60);
        let out = nna(&p, 0.5, &AdmmSettings::default()).unwrap();
        let rises: Vec<f64> = out
            .trace
            .windows(2)
            .skip(5)
            .map(|w| w[1].objective_plus_penalty / w[0].objective_plus_penalty - 1.0)
            .filter(|&r| r > 1e-9)
            .collect();
        assert!(!rises.is_empty());
        assert!(rises.iter().all(|&r| r < 1e-3), "{rises:?}");
        for w in out.trace.windows(2).skip(5) {
            assert!(w[1].fixed_point_residual <= w[0].fixed_point_residual * (1.0 + 1e-9) + 1e-24);
        }
    }

    #[test]
    fn nns_reduces_to_nna_without_columns() {
        let a = rand_dm(8, 2, 14) * rand_dm(2, 7, 15);
        let mut noisy = a.clone();
        noisy += rand_dm(8, 7, 16) * 0.1;
        let p = observe(&noisy, 0.5, 17);
        let f = p.len();
        let params = NnsParams {
            c1: 1.0,
            c2: 1.3,
            d: 0,
            m: 8,
            f,
            sigma_c: 0.5,
            sigma_e: 0.1,
        };
        let settings = AdmmSettings::default();
        let split = nns(&p, &params, &settings).unwrap();
        let single = nna(&p, params.entry_radius(), &settings).unwrap();
        assert!(linalg::max_abs_diff(split.z.as_matrix(), single.z.as_matrix()) < 1e-9);
        assert!((split.nuclear_norm - single.nuclear_norm).abs() <= 1e-4 * single.nuclear_norm);
    }

    #[test]
    fn nns_huge_bounds_give_zero() {
        let a = rand_dm(6, 5, 18);
        let mut p = observe(&a, 0.4, 19);
        for i in 0..6 {
            p.insert(i, 0, a[(i, 0)], ObservationMode::Column).unwrap();
        }
        let params = NnsParams {
            c1: 1e6,
            c2: 1e6,
            d: 1,
            m: 6,
            f: p.count(ObservationMode::Entry),
            sigma_c: 1.0,
            sigma_e: 1.0,
        };
        let out = nns(&p, &params, &AdmmSettings::default()).unwrap();
        assert!(out.z.frobenius() < 1e-6);
    }

    #[test]
    fn settings_validation() {
        let s = AdmmSettings::default();
        assert!(s.validate().is_ok());
        assert!(AdmmSettings { max_iters: 0, ..s }.validate().is_err());
        assert!(AdmmSettings { rho: 0.0, ..s }.validate().is_err());
        assert!(AdmmSettings { over_relaxation: Some(2.5), ..s }.validate().is_err());
    }
}
