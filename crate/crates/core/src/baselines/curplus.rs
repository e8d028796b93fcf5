use nalgebra::DMatrix;

use super::partial::PartialMatrix;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::ncur;
use crate::observation::ObservationMode;

#[derive(Clone, Debug)]
pub struct CurPlusFit {
    pub u: DenseMatrix,
    pub a_bar: DenseMatrix,
}

/// Fits the core `U` of `C U R` to the entry-mode cells by least squares
/// over the `d1 d2` entries of `U`; the minimum-norm solution is taken when
/// the system is underdetermined.
pub fn curplus(c: &DenseMatrix, r: &DenseMatrix, obs: &PartialMatrix) -> Result<CurPlusFit> {
    if c.rows() != obs.rows() || r.cols() != obs.cols() {
        return Err(Error::dims(format!(
            "C is {}x{}, R is {}x{}, observations are {}x{}",
            c.rows(),
            c.cols(),
            r.rows(),
            r.cols(),
            obs.rows(),
            obs.cols()
        )));
    }
    let cells: Vec<_> = obs.cells().filter(|x| x.mode == ObservationMode::Entry).collect();
    if cells.is_empty() {
        return Err(Error::invalid("CUR+ needs at least one observed entry"));
    }
    let (d1, d2) = (c.cols(), r.rows());
    let u = if d1 == 0 || d2 == 0 {
        DMatrix::zeros(d1, d2)
    } else {
        let design = design_matrix(c.as_matrix(), r.as_matrix(), cells.iter().map(|x| (x.row, x.col)));
        let rhs = DMatrix::from_iterator(cells.len(), 1, cells.iter().map(|x| x.value));
        let vec_u = ncur::ridge(&design, &rhs, 0.0)?.x;
        DMatrix::from_fn(d1, d2, |a, b| vec_u[(a * d2 + b, 0)])
    };
    let a_bar = c.as_matrix() * &u * r.as_matrix();
    Ok(CurPlusFit {
        u: DenseMatrix::wrap(u),
        a_bar: DenseMatrix::wrap(a_bar),
    })
}

/// Row `k` holds the coefficients of `vec(U)` (row-major) in cell `k`:
/// `C[i, a] R[b, j]` at column `a d2 + b`.
pub(crate) fn design_matrix(
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    cells: impl ExactSizeIterator<Item = (usize, usize)>,
) -> DMatrix<f64> {
    let (d1, d2) = (c.ncols(), r.nrows());
    let mut design = DMatrix::zeros(cells.len(), d1 * d2);
    for (k, (i, j)) in cells.enumerate() {
        for a in 0..d1 {
            let cia = c[(i, a)];
            for b in 0..d2 {
                design[(k, a * d2 + b)] = cia * r[(b, j)];
            }
        }
    }
    design
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{self, gaussian_matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_dm(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        gaussian_matrix(r, c, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn objective(c: &DMatrix<f64>, u: &DMatrix<f64>, r: &DMatrix<f64>, p: &PartialMatrix) -> f64 {
        let fit = c * u * r;
        p.cells().map(|x| (fit[(x.row, x.col)] - x.value).powi(2)).sum()
    }

    #[test]
    fn exact_on_full_noiseless_observation() {
        let l = rand_dm(9, 3, 1);
        let rt = rand_dm(3, 7, 2);
        let a = &l * &rt;
        let c = DenseMatrix::new(a.columns(0, 3).into_owned()).unwrap();
        let r = DenseMatrix::new(a.rows(2, 3).into_owned()).unwrap();
        let mut p = PartialMatrix::new(9, 7);
        for i in 0..9 {
            for j in 0..7 {
                p.insert(i, j, a[(i, j)], ObservationMode::Entry).unwrap();
            }
        }
        let fit = curplus(&c, &r, &p).unwrap();
        assert!(linalg::max_abs_diff(fit.a_bar.as_matrix(), &a) < 1e-8 * a.amax());
    }

    #[test]
    fn single_cell_is_min_norm() {
        let c = DenseMatrix::new(rand_dm(5, 2, 3)).unwrap();
        let r = DenseMatrix::new(rand_dm(3, 4, 4)).unwrap();
        let mut p = PartialMatrix::new(5, 4);
        p.insert(1, 2, 0.7, ObservationMode::Entry).unwrap();
        let fit = curplus(&c, &r, &p).unwrap();
        assert!((fit.a_bar[(1, 2)] - 0.7).abs() < 1e-12);
        let row = design_matrix(&c, &r, std::iter::once((1, 2)));
        let oracle = linalg::pseudo_inverse(&row).unwrap() * 0.7;
        let got = DMatrix::from_iterator(6, 1, (0..2).flat_map(|a| (0..3).map(move |b| (a, b))).map(|(a, b)| fit.u[(a, b)]));
        assert!(linalg::max_abs_diff(&got, &oracle) < 1e-12);
    }

    #[test]
    fn matches_normal_equations_and_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = DenseMatrix::new(rand_dm(8, 3, 6)).unwrap();
        let r = DenseMatrix::new(rand_dm(3, 8, 7)).unwrap();
        let truth = rand_dm(8, 8, 8);
        let mut p = PartialMatrix::new(8, 8);
        while p.len() < 20 {
            let (i, j) = (rng.random_range(0..8), rng.random_range(0..8));
            p.set(i, j, truth[(i, j)], ObservationMode::Entry).unwrap();
        }
        let fit = curplus(&c, &r, &p).unwrap();

        let design = design_matrix(&c, &r, p.cells().map(|x| (x.row, x.col)).collect::<Vec<_>>().into_iter());
        let rhs = DMatrix::from_iterator(20, 1, p.cells().map(|x| x.value));
        let normal = (design.transpose() * &design).lu().solve(&(design.transpose() * &rhs)).unwrap();
        let u_ne = DMatrix::from_fn(3, 3, |a, b| normal[(a * 3 + b, 0)]);
        let base = objective(&c, fit.u.as_matrix(), &r, &p);
        assert!((base - objective(&c, &u_ne, &r, &p)).abs() < 1e-9 * (1.0 + base));

        for _ in 0..100 {
            let dir = gaussian_matrix(3, 3, 0.0, 1.0, &mut rng) * 1e-6;
            assert!(objective(&c, &(fit.u.as_matrix() + dir), &r, &p) >= base - 1e-12 * (1.0 + base));
        }
    }

    #[test]
    fn needs_an_observation() {
        let c = DenseMatrix::new(rand_dm(4, 2, 9)).unwrap();
        let r = DenseMatrix::new(rand_dm(2, 3, 10)).unwrap();
        assert!(curplus(&c, &r, &PartialMatrix::new(4, 3)).is_err());
        assert!(curplus(&c, &r, &PartialMatrix::new(5, 3)).is_err());
    }
}
