//! Ground-truth matrices: the synthetic generator, the Jester and
//! MovieLens-100K loaders and iterative-SVD pre-completion.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::PartialMatrix;
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::observation::ObservationMode;
use crate::rng::{SeedStreams, Stream};

pub const JESTER_JOKES: usize = 100;
pub const JESTER_MISSING: f64 = 99.0;
pub const JESTER_COMPLETE_USERS: usize = 7200;
pub const MOVIELENS_ITEMS: usize = 1682;
pub const MOVIELENS_USERS: usize = 943;

/// Best rank-`r` approximation of an i.i.d. `N(mean, std^2)` matrix.
pub fn synthetic_lowrank<R: Rng + ?Sized>(
    m: usize,
    n: usize,
    r: usize,
    mean: f64,
    std: f64,
    rng: &mut R,
) -> Result<DenseMatrix> {
    if m == 0 || n == 0 {
        return Err(Error::invalid(format!("shape {m}x{n} must be positive")));
    }
    if r == 0 || r > m.min(n) {
        return Err(Error::invalid(format!("rank {r} outside 1..={}", m.min(n))));
    }
    if !(std >= 0.0 && std.is_finite() && mean.is_finite()) {
        return Err(Error::invalid("mean and std must be finite, std >= 0"));
    }
    let g = linalg::gaussian_matrix(m, n, mean, std, rng);
    if r == m.min(n) {
        return DenseMatrix::new(g);
    }
    DenseMatrix::new(linalg::best_rank_approximation(&g, r)?)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Every user of a Jester text file who rated all 100 jokes, in file order.
///
/// One user per line: the rating count, then 100 ratings in `[-10, 10]`
/// with 99 for "not rated". Fields may be separated by commas, tabs or
/// spaces. Blank lines are skipped.
pub fn load_jester(path: &Path) -> Result<DenseMatrix> {
    let mut data = Vec::new();
    let mut users = 0usize;
    for (k, line) in open(path)?.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != JESTER_JOKES + 1 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, found {}", JESTER_JOKES + 1, fields.len()),
            ));
        }
        let count: f64 = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad rating count {:?}", fields[0])))?;
        if !(count >= 0.0 && count <= JESTER_JOKES as f64 && count.fract() == 0.0) {
            return Err(parse_err(path, lineno, format!("rating count {count} outside 0..=100")));
        }
        let mut row = Vec::with_capacity(JESTER_JOKES);
        for (j, f) in fields[1..].iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(path, lineno, format!("joke {}: bad rating {f:?}", j + 1)))?;
            if v != JESTER_MISSING && !(-10.0..=10.0).contains(&v) {
                return Err(parse_err(path, lineno, format!("joke {}: rating {v} outside [-10, 10]", j + 1)));
            }
            row.push(v);
        }
        let rated = row.iter().filter(|&&v| v != JESTER_MISSING).count();
        if rated != count as usize {
            warn!("{}:{lineno}: rating count {count} but {rated} ratings present", path.display());
        }
        if rated == JESTER_JOKES {
            data.extend(row);
            users += 1;
        }
    }
    DenseMatrix::from_row_major(users, JESTER_JOKES, data)
}

/// The first `users` complete users; an error if the file has fewer.
pub fn load_jester_complete(path: &Path, users: usize) -> Result<DenseMatrix> {
    let all = load_jester(path)?;
    if all.rows() < users {
        return Err(Error::invalid(format!(
            "{} has {} users who rated every joke, {users} expected",
            path.display(),
            all.rows()
        )));
    }
    DenseMatrix::new(all.as_matrix().rows(0, users).into_owned())
}

/// A Jester-format file with `complete` fully rated users followed by
/// `incomplete` users missing some ratings. Ratings are a clipped low-rank
/// pattern rounded to two decimals, like the public data.
pub fn write_jester_fixture<R: Rng + ?Sized>(
    path: &Path,
    complete: usize,
    incomplete: usize,
    rng: &mut R,
) -> Result<()> {
    let users = complete + incomplete;
    let taste = linalg::gaussian_matrix(users, 5, 0.0, 1.0, rng);
    let jokes = linalg::gaussian_matrix(5, JESTER_JOKES, 0.0, 1.5, rng);
    let base = taste * jokes;
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for u in 0..users {
        let mut row: Vec<f64> = (0..JESTER_JOKES)
            .map(|j| {
                let noise: f64 = rng.random_range(-1.0..1.0);
                ((base[(u, j)] + noise).clamp(-10.0, 10.0) * 100.0).round() / 100.0
            })
            .collect();
        if u >= complete {
            let gaps = rng.random_range(1..JESTER_JOKES);
            for j in index::sample(rng, JESTER_JOKES, gaps) {
                row[j] = JESTER_MISSING;
            }
        }
        let rated = row.iter().filter(|&&v| v != JESTER_MISSING).count();
        let fields: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
        writeln!(file, "{rated},{}", fields.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// MovieLens-100K `u.data` as a 1682 x 943 items-by-users matrix.
///
/// Lines are `user<TAB>item<TAB>rating<TAB>timestamp` with ratings in
/// `1..=5`. A repeated (user, item) pair keeps the last rating.
pub fn load_movielens_100k(path: &Path) -> Result<PartialMatrix> {
    let mut out = PartialMatrix::new(MOVIELENS_ITEMS, MOVIELENS_USERS);
    for (k, text) in open(path)?.lines().enumerate() {
        let line = k + 1;
        let text = text.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let record: Vec<&str> = text.split('\t').collect();
        if record.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 tab-separated fields, found {}", record.len())));
        }
        let id = |k: usize, what: &str, max: usize| -> Result<usize> {
            let v: usize = record[k]
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad {what} id {:?}", record[k])))?;
            if v == 0 || v > max {
                return Err(parse_err(path, line, format!("{what} id {v} outside 1..={max}")));
            }
            Ok(v - 1)
        };
        let user = id(0, "user", MOVIELENS_USERS)?;
        let item = id(1, "item", MOVIELENS_ITEMS)?;
        let rating: u8 = record[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad rating {:?}", record[2])))?;
        if !(1..=5).contains(&rating) {
            return Err(parse_err(path, line, format!("rating {rating} outside 1..=5")));
        }
        record[3]
            .trim()
            .parse::<u64>()
            .map_err(|_| parse_err(path, line, format!("bad timestamp {:?}", record[3])))?;
        if out.set(item, user, rating as f64, ObservationMode::Entry)? {
            warn!("{}:{line}: user {} rated item {} again, keeping the last rating", path.display(), user + 1, item + 1);
        }
    }
    if out.is_empty() {
        warn!("{}: no ratings", path.display());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionSettings {
    pub rank: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CompletionSettings {
    fn default() -> Self {
        Self {
            rank: 10,
            max_iters: 200,
            tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Completion {
    pub matrix: DenseMatrix,
    pub iterations: usize,
    pub converged: bool,
    /// `||P_Omega(A_obs - Z_k)||_F` after each iteration.
    pub objective: Vec<f64>,
}

/// Hard-impute: fill missing cells, take the rank-`r` SVD, refill the
/// missing cells from it and repeat. Returns the last rank-`r` iterate.
pub fn iterative_svd_complete(p: &PartialMatrix, rank: usize, max_iters: usize, tol: f64) -> Result<DenseMatrix> {
    iterative_svd_trace(p, &CompletionSettings { rank, max_iters, tol }).map(|c| c.matrix)
}

pub fn iterative_svd_trace(p: &PartialMatrix, settings: &CompletionSettings) -> Result<Completion> {
    let &CompletionSettings { rank, max_iters, tol } = settings;
    if rank == 0 || rank > p.rows().min(p.cols()) {
        return Err(Error::invalid(format!("rank {rank} outside 1..={}", p.rows().min(p.cols()))));
    }
    if max_iters == 0 || !(tol >= 0.0) {
        return Err(Error::invalid("need max_iters >= 1 and tol >= 0"));
    }
    if p.is_empty() {
        return Err(Error::invalid("nothing observed"));
    }
    let (m, n) = (p.rows(), p.cols());
    let observed = p.zero_filled();
    let mut mask = DMatrix::from_element(m, n, false);
    let mut total = 0.0;
    for c in p.cells() {
        mask[(c.row, c.col)] = true;
        total += c.value;
    }
    let global = total / p.len() as f64;
    let means = p.column_means();
    let empty = means.iter().filter(|x| x.is_none()).count();
    if empty > 0 {
        warn!("{empty} columns have no observations, filled with the global mean {global}");
    }
    let mut x = DMatrix::from_fn(m, n, |i, j| {
        if mask[(i, j)] {
            observed[(i, j)]
        } else {
            means[j].unwrap_or(global)
        }
    });
    let full = p.len() == m * n;
    let residual = |z: &DMatrix<f64>| -> f64 {
        p.cells()
            .map(|c| (c.value - z[(c.row, c.col)]).powi(2))
            .sum::<f64>()
            .sqrt()
    };

    let mut z = linalg::best_rank_approximation(&x, rank)?;
    let mut objective = vec![residual(&z)];
    let mut converged = full;
    let mut iterations = 1;
    while !converged && iterations < max_iters {
        for j in 0..n {
            for i in 0..m {
                if !mask[(i, j)] {
                    x[(i, j)] = z[(i, j)];
                }
            }
        }
        let next = linalg::best_rank_approximation(&x, rank)?;
        let scale = z.norm();
        let change = (&next - &z).norm();
        z = next;
        objective.push(residual(&z));
        iterations += 1;
        converged = if scale > 0.0 { change / scale < tol } else { change == 0.0 };
    }
    Ok(Completion {
        matrix: DenseMatrix::new(z)?,
        iterations,
        converged,
        objective,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic { mean: f64, std: f64 },
    Jester { path: PathBuf },
    Movielens { path: PathBuf, completion: CompletionSettings },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Preprocess {
    /// Random subset of rows and columns, in ascending index order.
    Subsample { rows: usize, cols: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub shape: (usize, usize),
    /// Working rank of the experiment.
    pub rank: usize,
    pub source: DatasetSource,
    #[serde(default)]
    pub preprocessing: Vec<Preprocess>,
}

impl DatasetSpec {
    /// The 80 x 60 rank-4 synthetic matrix with `N(5, 1)` entries.
    pub fn synthetic_default() -> Self {
        Self {
            name: "synthetic".into(),
            shape: (80, 60),
            rank: 4,
            source: DatasetSource::Synthetic { mean: 5.0, std: 1.0 },
            preprocessing: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.shape;
        if m == 0 || n == 0 {
            return Err(Error::Config(format!("dataset {}: shape {m}x{n} must be positive", self.name)));
        }
        if self.rank == 0 || self.rank > m.min(n) {
            return Err(Error::Config(format!("dataset {}: rank {} outside 1..={}", self.name, self.rank, m.min(n))));
        }
        Ok(())
    }

    /// Builds the ground-truth matrix. Randomness comes from the dataset
    /// stream of `streams`; file sources ignore it unless subsampled.
    pub fn load(&self, streams: &SeedStreams) -> Result<DenseMatrix> {
        self.validate()?;
        let mut rng = streams.rng(Stream::Dataset);
        let mut a = match &self.source {
            DatasetSource::Synthetic { mean, std } => {
                synthetic_lowrank(self.shape.0, self.shape.1, self.rank, *mean, *std, &mut rng)?
            }
            DatasetSource::Jester { path } => load_jester(path)?,
            DatasetSource::Movielens { path, completion } => iterative_svd_trace(&load_movielens_100k(path)?, completion)?.matrix,
        };
        for step in &self.preprocessing {
            match *step {
                Preprocess::Subsample { rows, cols } => {
                    if rows > a.rows() || cols > a.cols() {
                        return Err(Error::Config(format!(
                            "dataset {}: cannot take {rows}x{cols} from {}x{}",
                            self.name,
                            a.rows(),
                            a.cols()
                        )));
                    }
                    let mut ri = index::sample(&mut rng, a.rows(), rows).into_vec();
                    let mut ci = index::sample(&mut rng, a.cols(), cols).into_vec();
                    ri.sort_unstable();
                    ci.sort_unstable();
                    a = DenseMatrix::from_fn(rows, cols, |i, j| a[(ri[i], ci[j])])?;
                }
            }
        }
        if (a.rows(), a.cols()) != self.shape {
            return Err(Error::Config(format!(
                "dataset {}: declared shape {:?}, loaded {}x{}",
                self.name,
                self.shape,
                a.rows(),
                a.cols()
            )));
        }
        Ok(a)
    }
}
