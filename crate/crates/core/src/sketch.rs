//! Leverage scores and row-sampling sketches.
//!
//! A [`SketchMatrix`] represents an `m x s` matrix `S` with exactly one
//! nonzero per column: column `j` holds `1/sqrt(s p_{i_j})` in row `i_j`.
//! It is stored as the index/scale pairs and only ever applied as `S^T A`.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeverageKind {
    /// `l_i = 1/2 ||e_i^T U||^2 / ||U||_F^2 + 1/(2m)`; a probability vector.
    ShrinkedRow,
    /// `l_i = ||e_i^T V||^2` for an orthonormal basis `V` of the row space.
    Column,
    /// Any user-supplied sampling distribution.
    Distribution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeverageProfile {
    scores: Vec<f64>,
    kind: LeverageKind,
}

impl LeverageProfile {
    /// A sampling distribution over rows; must be non-negative and sum to one.
    pub fn distribution(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::invalid("empty sampling distribution"));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("sampling probabilities must be finite and non-negative"));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("sampling probabilities sum to {total}, not 1")));
        }
        Ok(Self {
            scores: probabilities,
            kind: LeverageKind::Distribution,
        })
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::distribution(vec![1.0 / m as f64; m])
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn kind(&self) -> LeverageKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn shrinked_row_scores(u: &DenseMatrix) -> Result<LeverageProfile> {
    shrinked_scores_of(u.as_matrix())
}

pub(crate) fn shrinked_scores_of(u: &DMatrix<f64>) -> Result<LeverageProfile> {
    let m = u.nrows();
    let total = u.norm_squared();
    if m == 0 || total == 0.0 {
        return Err(Error::ZeroMatrix("basis for shrinked leverage scores"));
    }
    let uniform = 0.5 / m as f64;
    let scores = u
        .row_iter()
        .map(|row| 0.5 * row.norm_squared() / total + uniform)
        .collect();
    Ok(LeverageProfile {
        scores,
        kind: LeverageKind::ShrinkedRow,
    })
}

#[derive(Clone, Debug)]
pub struct Coherence {
    pub profile: LeverageProfile,
    /// Column coherence: the largest column leverage score.
    pub max_leverage: f64,
    /// `max_leverage * n / r`, the smallest `beta` for which the column space
    /// is `beta`-incoherent.
    pub beta: f64,
    pub rank: usize,
}

pub fn column_leverage_and_coherence(a: &DenseMatrix) -> Result<Coherence> {
    let svd = linalg::thin_svd(a.as_matrix())?;
    let r = svd.rank();
    if r == 0 {
        return Err(Error::ZeroMatrix("coherence input"));
    }
    let n = a.cols();
    // Rows of v_t span the row space; column j's leverage is ||V^T e_j||^2.
    let top = svd.v_t.rows(0, r);
    let scores: Vec<f64> = (0..n).map(|j| top.column(j).norm_squared()).collect();
    let max_leverage = scores.iter().copied().fold(0.0, f64::max);
    Ok(Coherence {
        profile: LeverageProfile {
            scores,
            kind: LeverageKind::Column,
        },
        max_leverage,
        beta: max_leverage * n as f64 / r as f64,
        rank: r,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SketchMatrix {
    source_rows: usize,
    indices: Vec<usize>,
    scales: Vec<f64>,
}

impl SketchMatrix {
    /// Builds a sketch from explicit index/scale pairs.
    pub fn from_parts(source_rows: usize, indices: Vec<usize>, scales: Vec<f64>) -> Result<Self> {
        if indices.len() != scales.len() {
            return Err(Error::dims("sketch indices and scales differ in length"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= source_rows) {
            return Err(Error::invalid(format!("sketch index {bad} out of range for {source_rows} rows")));
        }
        if scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("non-finite sketch scale"));
        }
        Ok(Self {
            source_rows,
            indices,
            scales,
        })
    }

    /// Selects every row once with unit scale, i.e. `S = I_m`.
    pub fn identity(m: usize) -> Self {
        Self {
            source_rows: m,
            indices: (0..m).collect(),
            scales: vec![1.0; m],
        }
    }

    pub fn source_rows(&self) -> usize {
        self.source_rows
    }

    pub fn sample_count(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Diagonal of `S S^T`: per source row, the sum of squared scales of the
    /// samples that picked it.
    pub fn gram_diagonal(&self) -> Vec<f64> {
        let mut diag = vec![0.0; self.source_rows];
        for (&i, &w) in self.indices.iter().zip(&self.scales) {
            diag[i] += w * w;
        }
        diag
    }

    /// `||S||_2^2`, exact: `S S^T` is diagonal.
    pub fn spectral_norm_sq(&self) -> f64 {
        self.gram_diagonal().into_iter().fold(0.0, f64::max)
    }

    /// Largest single squared scale, `max_j 1/(s p_{i_j})`.
    pub fn max_scale_sq(&self) -> f64 {
        self.scales.iter().map(|w| w * w).fold(0.0, f64::max)
    }

    /// Dense `m x s` materialisation. Test and diagnostics use only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.source_rows, self.indices.len());
        for (j, (&i, &w)) in self.indices.iter().zip(&self.scales).enumerate() {
            s[(i, j)] = w;
        }
        s
    }

    /// One sample per distinct source row, scaled by the root of the summed
    /// squared scales. `S S^T` is unchanged, so every quantity that depends
    /// on the sketch only through `S S^T` is too.
    pub fn compacted(&self) -> SketchMatrix {
        let diag = self.gram_diagonal();
        let indices: Vec<usize> = (0..self.source_rows).filter(|&i| diag[i] > 0.0).collect();
        let scales = indices.iter().map(|&i| diag[i].sqrt()).collect();
        SketchMatrix {
            source_rows: self.source_rows,
            indices,
            scales,
        }
    }
}

/// Draws `s` rows i.i.d. with replacement from `p`; sample `j` is scaled by
/// `1/sqrt(s p_{i_j})`. Duplicates stay as separate samples.
pub fn build_sketch<R: Rng + ?Sized>(p: &LeverageProfile, s: usize, rng: &mut R) -> Result<SketchMatrix> {
    if s == 0 {
        return Err(Error::invalid("sketch needs at least one sample"));
    }
    if p.kind == LeverageKind::Column {
        return Err(Error::invalid("column leverage scores are not a sampling distribution"));
    }
    let weights = WeightedIndex::new(&p.scores)
        .map_err(|e| Error::invalid(format!("bad sampling distribution: {e}")))?;
    let mut indices = Vec::with_capacity(s);
    let mut scales = Vec::with_capacity(s);
    for _ in 0..s {
        let i = weights.sample(rng);
        indices.push(i);
        scales.push(1.0 / (s as f64 * p.scores[i]).sqrt());
    }
    let sketch = SketchMatrix {
        source_rows: p.len(),
        indices,
        scales,
    };
    if p.kind == LeverageKind::ShrinkedRow {
        // Shrinked probabilities are at least 1/(2m), so no single sample can
        // carry more than 2m/s of squared mass.
        debug_assert!(
            sketch.max_scale_sq() <= 2.0 * p.len() as f64 / s as f64 * (1.0 + 1e-12),
            "per-sample scale bound violated"
        );
    }
    Ok(sketch)
}

pub fn apply_sketch_transpose(s: &SketchMatrix, a: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(DenseMatrix::wrap(sketch_rows(s, a.as_matrix())?))
}

pub(crate) fn sketch_rows(s: &SketchMatrix, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != s.source_rows {
        return Err(Error::dims(format!(
            "sketch expects {} rows, matrix has {}",
            s.source_rows,
            a.nrows()
        )));
    }
    let mut out = DMatrix::zeros(s.sample_count(), a.ncols());
    for (j, (&i, &w)) in s.indices.iter().zip(&s.scales).enumerate() {
        out.set_row(j, &(a.row(i) * w));
    }
    Ok(out)
}

/// Realised distortion of `S` on the span of `a`: the smallest `eps` with
/// `(1-eps)||x||^2 <= ||S^T x||^2 <= (1+eps)||x||^2` on that span.
pub fn embedding_distortion(s: &SketchMatrix, a: &DMatrix<f64>) -> Result<f64> {
    let (lo, hi) = embedding_extremes(s, a)?;
    Ok((1.0 - lo).max(hi - 1.0))
}

/// `(sigma_min^2, sigma_max^2)` of `S^T U`, `U` an orthonormal basis of the
/// span of `a`. A sketch with fewer samples than the span dimension has
/// `sigma_min = 0`.
pub(crate) fn embedding_extremes(s: &SketchMatrix, a: &DMatrix<f64>) -> Result<(f64, f64)> {
    let u = linalg::basis_of(a)?;
    let stu = sketch_rows(&s.compacted(), &u)?;
    let sv = linalg::singular_values(&stu)?;
    let k = u.ncols();
    let hi = sv.iter().copied().fold(0.0, f64::max);
    let lo = if sv.len() < k { 0.0 } else { sv[k - 1] };
    Ok((lo * lo, hi * hi))
}

pub fn check_subspace_embedding(s: &SketchMatrix, a: &DenseMatrix, eps: f64) -> Result<bool> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!("embedding tolerance {eps} outside (0, 1)")));
    }
    if a.rows() != s.source_rows {
        return Err(Error::dims("sketch and matrix row counts differ"));
    }
    let (lo, hi) = embedding_extremes(s, a.as_matrix())?;
    Ok(1.0 - eps <= lo && hi <= 1.0 + eps)
}
