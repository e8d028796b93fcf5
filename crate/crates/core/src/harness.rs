//! Experiment configuration, budget sweeps over `d` and CSV output.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::baselines::{
    buy_columns_and_rows, buy_entries, buy_for_curplus, chen_two_phase, curplus, nna, nns, select_delta, select_nns,
    AdmmSettings, ChenSettings, NnSearch, NnsParams,
};
use crate::datasets::{DatasetSource, DatasetSpec};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::ncur::{self, log_grid, NoisyCurConfig};
use crate::observation::{plan_split, BudgetLedger, ObservationMode, TwoCostModel};
use crate::rng::{SeedStreams, Stream};
use crate::theory::{self, BoundReport};

/// Prices and noise of the two observation kinds. `p_c = alpha m p_e`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub p_e: f64,
    pub alpha: f64,
    pub sigma_e: f64,
    pub sigma_c: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            p_e: 1.0,
            alpha: 0.2,
            sigma_e: 0.1,
            sigma_c: 0.05f64.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlgorithmConfig {
    /// Ridge parameter chosen by k-fold CV on a log grid.
    Ncur {
        #[serde(default = "default_lambda_lo")]
        lambda_lo: f64,
        #[serde(default = "default_lambda_hi")]
        lambda_hi: f64,
        #[serde(default = "default_lambda_points")]
        lambda_points: usize,
        #[serde(default = "default_folds")]
        folds: usize,
    },
    #[serde(rename = "curplus")]
    CurPlus,
    Nna {
        #[serde(default)]
        search: NnSearch,
        #[serde(default)]
        admm: AdmmSettings,
    },
    Nns {
        #[serde(default)]
        search: NnSearch,
        #[serde(default)]
        admm: AdmmSettings,
    },
    Chen {
        /// Rank of the leverage estimate; the dataset rank when absent.
        #[serde(default)]
        rank: Option<usize>,
        #[serde(default = "default_phase1")]
        phase1_fraction: f64,
        #[serde(default)]
        search: NnSearch,
        #[serde(default)]
        admm: AdmmSettings,
    },
}

fn default_lambda_lo() -> f64 {
    1e-4
}
fn default_lambda_hi() -> f64 {
    1e4
}
fn default_lambda_points() -> usize {
    17
}
fn default_folds() -> usize {
    5
}
fn default_phase1() -> f64 {
    0.5
}

impl AlgorithmConfig {
    pub fn ncur_default() -> Self {
        AlgorithmConfig::Ncur {
            lambda_lo: default_lambda_lo(),
            lambda_hi: default_lambda_hi(),
            lambda_points: default_lambda_points(),
            folds: default_folds(),
        }
    }

    pub fn nna_default() -> Self {
        AlgorithmConfig::Nna {
            search: NnSearch::default(),
            admm: AdmmSettings::default(),
        }
    }

    pub fn nns_default() -> Self {
        AlgorithmConfig::Nns {
            search: NnSearch::default(),
            admm: AdmmSettings::default(),
        }
    }

    pub fn chen_default() -> Self {
        AlgorithmConfig::Chen {
            rank: None,
            phase1_fraction: default_phase1(),
            search: NnSearch::default(),
            admm: AdmmSettings::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmConfig::Ncur { .. } => "ncur",
            AlgorithmConfig::CurPlus => "curplus",
            AlgorithmConfig::Nna { .. } => "nna",
            AlgorithmConfig::Nns { .. } => "nns",
            AlgorithmConfig::Chen { .. } => "chen",
        }
    }

    /// Stable id mixed into every cell seed.
    pub fn id(&self) -> u64 {
        match self {
            AlgorithmConfig::Ncur { .. } => 1,
            AlgorithmConfig::CurPlus => 2,
            AlgorithmConfig::Nna { .. } => 3,
            AlgorithmConfig::Nns { .. } => 4,
            AlgorithmConfig::Chen { .. } => 5,
        }
    }

    /// Entry-only methods spend nothing on columns, so `d` does not enter.
    pub fn uses_d(&self) -> bool {
        !matches!(self, AlgorithmConfig::Nna { .. } | AlgorithmConfig::Chen { .. })
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name())));
        match self {
            AlgorithmConfig::Ncur {
                lambda_lo,
                lambda_hi,
                lambda_points,
                folds,
            } => {
                if !(*lambda_lo > 0.0 && lambda_hi >= lambda_lo) || *lambda_points == 0 {
                    return bad(format!("lambda grid {lambda_lo}..{lambda_hi} x {lambda_points} is empty"));
                }
                if *folds < 2 {
                    return bad(format!("{folds} folds, need at least 2"));
                }
            }
            AlgorithmConfig::CurPlus => {}
            AlgorithmConfig::Nna { search, admm } | AlgorithmConfig::Nns { search, admm } => {
                search.validate().map_err(|e| Error::Config(e.to_string()))?;
                admm.validate().map_err(|e| Error::Config(e.to_string()))?;
            }
            AlgorithmConfig::Chen {
                rank,
                phase1_fraction,
                search,
                admm,
            } => {
                if *rank == Some(0) {
                    return bad("rank must be at least 1".into());
                }
                if !(*phase1_fraction > 0.0 && *phase1_fraction < 1.0) {
                    return bad(format!("phase-one fraction {phase1_fraction} outside (0, 1)"));
                }
                search.validate().map_err(|e| Error::Config(e.to_string()))?;
                admm.validate().map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    /// `c0` in `B = c0 m r p_e`.
    #[serde(default = "default_budget_factor")]
    pub budget_factor: f64,
    pub d_grid: Vec<usize>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub algorithms: Vec<AlgorithmConfig>,
}

fn default_budget_factor() -> f64 {
    2.0
}

impl ExperimentConfig {
    /// The synthetic low-noise setting: 80 x 60 rank 4, `alpha = 0.2`,
    /// `sigma_e^2 = 0.01`, `sigma_c^2 = 0.05`, `c0 = 2`.
    pub fn synthetic_low_noise() -> Self {
        Self {
            seed: 2024,
            trials: 10,
            budget_factor: 2.0,
            d_grid: vec![1, 2, 4, 6, 8, 12, 16, 20, 24, 28, 32],
            dataset: DatasetSpec::synthetic_default(),
            model: ModelConfig::default(),
            algorithms: vec![
                AlgorithmConfig::ncur_default(),
                AlgorithmConfig::CurPlus,
                AlgorithmConfig::nna_default(),
                AlgorithmConfig::chen_default(),
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn budget(&self) -> f64 {
        self.budget_factor * self.dataset.shape.0 as f64 * self.dataset.rank as f64 * self.model.p_e
    }

    pub fn two_cost_model(&self) -> Result<TwoCostModel> {
        let ModelConfig {
            p_e,
            alpha,
            sigma_e,
            sigma_c,
        } = self.model;
        TwoCostModel::from_alpha(self.dataset.shape.0, p_e, alpha, sigma_e, sigma_c, self.budget())
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if !(self.budget_factor > 0.0) {
            return Err(Error::Config(format!("budget factor {} must be positive", self.budget_factor)));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms listed".into()));
        }
        self.dataset.validate()?;
        let model = self.two_cost_model()?;
        let n = self.dataset.shape.1;
        if self.algorithms.iter().any(AlgorithmConfig::uses_d) {
            if self.d_grid.is_empty() {
                return Err(Error::Config("d_grid is empty".into()));
            }
            for &d in &self.d_grid {
                if d == 0 {
                    return Err(Error::Config("d_grid entries must be positive".into()));
                }
                plan_split(&model, n, d).map_err(|e| Error::Config(format!("d = {d}: {e}")))?;
            }
        }
        let mut seen = Vec::new();
        for a in &self.algorithms {
            a.validate()?;
            if seen.contains(&a.id()) {
                return Err(Error::Config(format!("{} listed twice", a.name())));
            }
            seen.push(a.id());
        }
        Ok(())
    }

    /// The `d` values used on the axis: the grid, or `[0]` when no listed
    /// algorithm depends on `d`.
    pub fn d_axis(&self) -> Vec<usize> {
        if self.d_grid.is_empty() {
            vec![0]
        } else {
            self.d_grid.clone()
        }
    }
}

/// `||A - A_bar||_F / ||A||_F`, plus the squared absolute error. When `A`
/// is zero the absolute error is returned and `relative` is false.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorMeasure {
    pub value: f64,
    pub abs_sq: f64,
    pub relative: bool,
}

pub fn relative_error(a: &DenseMatrix, a_bar: &DenseMatrix) -> Result<ErrorMeasure> {
    if (a.rows(), a.cols()) != (a_bar.rows(), a_bar.cols()) {
        return Err(Error::dims(format!(
            "{}x{} against {}x{}",
            a.rows(),
            a.cols(),
            a_bar.rows(),
            a_bar.cols()
        )));
    }
    let abs_sq = (a.as_matrix() - a_bar.as_matrix()).norm_squared();
    let norm = a.frobenius();
    Ok(if norm == 0.0 {
        ErrorMeasure {
            value: abs_sq.sqrt(),
            abs_sq,
            relative: false,
        }
    } else {
        ErrorMeasure {
            value: abs_sq.sqrt() / norm,
            abs_sq,
            relative: true,
        }
    })
}

/// One row of a sweep. Error and spend fields are `None` for infeasible
/// cells.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub dataset: String,
    pub algorithm: String,
    pub d: usize,
    pub s: Option<usize>,
    pub trial: usize,
    pub seed: u64,
    pub rel_error: Option<f64>,
    pub abs_error_sq: Option<f64>,
    pub spent: Option<f64>,
    pub leftover: Option<f64>,
    /// JSON object with the chosen hyperparameters, or the reason a cell
    /// was infeasible.
    pub hyperparams: String,
    pub wall_ms: Option<f64>,
    pub feasible: bool,
}

pub const CSV_HEADER: [&str; 13] = [
    "dataset",
    "algorithm",
    "d",
    "s",
    "trial",
    "seed",
    "rel_error",
    "abs_error_sq",
    "spent",
    "leftover",
    "hyperparams",
    "wall_ms",
    "feasible",
];

struct CellOutput {
    a_bar: DenseMatrix,
    s: Option<usize>,
    ledger: BudgetLedger,
    hyper: serde_json::Value,
}

/// Seed family of one `(algorithm, d, trial)` cell.
pub fn cell_streams(cfg: &ExperimentConfig, algorithm: &AlgorithmConfig, d: usize, trial: usize) -> SeedStreams {
    let d_key = if algorithm.uses_d() { d as u64 } else { 0 };
    SeedStreams::new(cfg.seed).child(&[algorithm.id(), d_key, trial as u64])
}

/// The ground truth of `cfg`, drawn from the master seed.
pub fn ground_truth(cfg: &ExperimentConfig) -> Result<DenseMatrix> {
    cfg.dataset.load(&SeedStreams::new(cfg.seed))
}

fn run_algorithm(
    cfg: &ExperimentConfig,
    a: &DenseMatrix,
    model: &TwoCostModel,
    algorithm: &AlgorithmConfig,
    d: usize,
    streams: &SeedStreams,
) -> Result<CellOutput> {
    let n = a.cols();
    match algorithm {
        AlgorithmConfig::Ncur {
            lambda_lo,
            lambda_hi,
            lambda_points,
            folds,
        } => {
            let plan = plan_split(model, n, d)?;
            // Short sketches fall back to leave-one-out.
            let folds = (*folds).min(plan.s);
            if folds < 2 {
                return Err(Error::InfeasiblePlan(format!(
                    "{} sketched row cannot be cross-validated",
                    plan.s
                )));
            }
            let mut ledger = BudgetLedger::new(model.budget);
            ledger.charge_columns(model, d)?;
            ledger.charge_entries(model, plan.s * n)?;
            let run = NoisyCurConfig {
                d,
                s: plan.s,
                sigma_c: model.sigma_c,
                sigma_e: model.sigma_e,
                lambda: 0.0,
            };
            let grid = log_grid(*lambda_lo, *lambda_hi, *lambda_points);
            let (mut rec, cv) = ncur::noisycur_cv(a, &run, &grid, folds, streams)?;
            rec.plan = Some(plan);
            Ok(CellOutput {
                a_bar: rec.a_bar,
                s: Some(plan.s),
                ledger,
                hyper: json!({ "lambda": cv.best_lambda, "folds": folds }),
            })
        }
        AlgorithmConfig::CurPlus => {
            let p = buy_for_curplus(a, model, d, streams)?;
            let fit = curplus(&p.c, &p.r, &p.entries)?;
            Ok(CellOutput {
                a_bar: fit.a_bar,
                s: None,
                hyper: json!({ "columns": p.c.cols(), "rows": p.r.rows(), "entries": p.ledger.entries }),
                ledger: p.ledger,
            })
        }
        AlgorithmConfig::Nna { search, admm } => {
            let p = buy_entries(a, model, streams)?;
            let sel = select_delta(&p.partial, model.sigma_e, search, admm, &mut streams.rng(Stream::CrossValidation))?;
            let out = nna(&p.partial, sel.value, admm)?;
            Ok(CellOutput {
                a_bar: out.z,
                s: None,
                hyper: json!({
                    "delta": sel.value,
                    "entries": p.ledger.entries,
                    "distinct_cells": p.partial.len(),
                    "converged": out.converged,
                }),
                ledger: p.ledger,
            })
        }
        AlgorithmConfig::Nns { search, admm } => {
            let (p, plan) = buy_columns_and_rows(a, model, d, streams)?;
            let sel = select_nns(
                &p.partial,
                d,
                model.sigma_c,
                model.sigma_e,
                search,
                admm,
                &mut streams.rng(Stream::CrossValidation),
            )?;
            let params = NnsParams {
                c1: sel.c1,
                c2: sel.c2,
                d,
                m: a.rows(),
                f: p.partial.count(ObservationMode::Entry),
                sigma_c: model.sigma_c,
                sigma_e: model.sigma_e,
            };
            let out = nns(&p.partial, &params, admm)?;
            Ok(CellOutput {
                a_bar: out.z,
                s: Some(plan.s),
                hyper: json!({ "c1": sel.c1, "c2": sel.c2, "converged": out.converged }),
                ledger: p.ledger,
            })
        }
        AlgorithmConfig::Chen {
            rank,
            phase1_fraction,
            search,
            admm,
        } => {
            let settings = ChenSettings {
                phase1_fraction: *phase1_fraction,
                rank: rank.unwrap_or(cfg.dataset.rank),
                admm: *admm,
                search: *search,
            };
            let out = chen_two_phase(a, model, &settings, streams)?;
            Ok(CellOutput {
                a_bar: out.a_bar,
                s: None,
                hyper: json!({
                    "delta": out.delta,
                    "rank": settings.rank,
                    "phase1": out.phase1_samples.len(),
                    "phase2": out.phase2_samples.len(),
                    "converged": out.converged,
                }),
                ledger: out.ledger,
            })
        }
    }
}

fn dataset_params(cfg: &ExperimentConfig) -> Option<serde_json::Value> {
    match &cfg.dataset.source {
        DatasetSource::Movielens { completion, .. } => Some(json!({
            "completion_rank": completion.rank,
            "completion_tol": completion.tol,
            "completion_max_iters": completion.max_iters,
        })),
        _ => None,
    }
}

/// Runs one `(algorithm, d, trial)` cell. Budget infeasibility yields an
/// infeasible row; any other failure is an error.
pub fn run_cell(
    cfg: &ExperimentConfig,
    a: &DenseMatrix,
    algorithm: &AlgorithmConfig,
    d: usize,
    trial: usize,
) -> Result<SweepResult> {
    let model = cfg.two_cost_model()?;
    let streams = cell_streams(cfg, algorithm, d, trial);
    let start = Instant::now();
    let outcome = run_algorithm(cfg, a, &model, algorithm, d, &streams);
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let mut row = SweepResult {
        dataset: cfg.dataset.name.clone(),
        algorithm: algorithm.name().into(),
        d,
        s: None,
        trial,
        seed: streams.seed(),
        rel_error: None,
        abs_error_sq: None,
        spent: None,
        leftover: None,
        hyperparams: String::new(),
        wall_ms: Some(wall_ms),
        feasible: false,
    };
    match outcome {
        Ok(out) => {
            if !out.ledger.within_budget() {
                return Err(Error::BudgetExceeded {
                    charge: 0.0,
                    spent: out.ledger.spent(),
                    budget: out.ledger.budget(),
                });
            }
            let err = relative_error(a, &out.a_bar)?;
            let mut hyper = out.hyper;
            if let Some(extra) = dataset_params(cfg) {
                hyper["dataset"] = extra;
            }
            row.s = out.s;
            row.rel_error = Some(err.value);
            row.abs_error_sq = Some(err.abs_sq);
            row.spent = Some(out.ledger.spent());
            row.leftover = Some(out.ledger.leftover());
            row.hyperparams = hyper.to_string();
            row.feasible = true;
        }
        Err(Error::InfeasiblePlan(reason)) => {
            row.hyperparams = json!({ "infeasible": reason }).to_string();
        }
        Err(e) => return Err(e),
    }
    Ok(row)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepResult>,
}

impl SweepTable {
    /// The same rows without wall times, which are the only
    /// non-reproducible field.
    pub fn without_wall_time(&self) -> SweepTable {
        SweepTable {
            rows: self
                .rows
                .iter()
                .map(|r| SweepResult {
                    wall_ms: None,
                    ..r.clone()
                })
                .collect(),
        }
    }

    /// Trial-mean relative error per `d` for one algorithm, feasible rows only.
    pub fn mean_curve(&self, algorithm: &str) -> Vec<(usize, f64)> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.algorithm == algorithm && r.feasible) {
            if let Some(e) = r.rel_error {
                let slot = acc.entry(r.d).or_default();
                slot.0 += e;
                slot.1 += 1;
            }
        }
        acc.into_iter().map(|(d, (s, k))| (d, s / k as f64)).collect()
    }

    pub fn wall_times(&self, algorithm: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.algorithm == algorithm)
            .filter_map(|r| r.wall_ms)
            .collect()
    }
}

/// Every `(algorithm, d, trial)` cell of `cfg`. Algorithms that ignore `d`
/// run once per trial and their row is repeated along the `d` axis. Rows
/// are ordered by algorithm (config order), `d`, trial.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepTable> {
    cfg.validate()?;
    let a = ground_truth(cfg)?;
    run_sweep_on(cfg, &a)
}

pub fn run_sweep_on(cfg: &ExperimentConfig, a: &DenseMatrix) -> Result<SweepTable> {
    cfg.validate()?;
    let axis = cfg.d_axis();
    let mut jobs = Vec::new();
    for (k, alg) in cfg.algorithms.iter().enumerate() {
        let ds: Vec<usize> = if alg.uses_d() { axis.clone() } else { vec![0] };
        for &d in &ds {
            for t in 0..cfg.trials {
                jobs.push((k, d, t));
            }
        }
    }
    let done: Vec<((usize, usize, usize), SweepResult)> = jobs
        .into_par_iter()
        .map(|(k, d, t)| Ok(((k, d, t), run_cell(cfg, a, &cfg.algorithms[k], d, t)?)))
        .collect::<Result<_>>()?;
    let done: BTreeMap<_, _> = done.into_iter().collect();
    let mut rows = Vec::new();
    for (k, alg) in cfg.algorithms.iter().enumerate() {
        for &d in &axis {
            for t in 0..cfg.trials {
                let key = (k, if alg.uses_d() { d } else { 0 }, t);
                let mut row = done[&key].clone();
                row.d = d;
                rows.push(row);
            }
        }
    }
    Ok(SweepTable { rows })
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn opt_f64(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn write_csv<W: std::io::Write>(table: &SweepTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Numerical(format!("csv: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &table.rows {
        w.write_record([
            r.dataset.clone(),
            r.algorithm.clone(),
            r.d.to_string(),
            opt(r.s),
            r.trial.to_string(),
            r.seed.to_string(),
            opt_f64(r.rel_error),
            opt_f64(r.abs_error_sq),
            opt_f64(r.spent),
            opt_f64(r.leftover),
            r.hyperparams.clone(),
            opt_f64(r.wall_ms),
            r.feasible.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Numerical(format!("csv: {e}")))?;
    Ok(())
}

/// Header plus one row per result. Floats carry 17 significant digits, so
/// [`parse_csv`] reads back the identical table.
pub fn emit_csv(table: &SweepTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(table, file).map_err(|e| match e {
        Error::Numerical(msg) => Error::io(path, std::io::Error::other(msg)),
        other => other,
    })
}

pub fn parse_csv(path: &Path) -> Result<SweepTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::Reader::from_reader(file);
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = rd.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(perr(1, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| perr(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |k: usize| &rec[k];
        let num = |k: usize| -> Result<f64> { field(k).parse().map_err(|_| perr(line, format!("{}: bad number {:?}", CSV_HEADER[k], field(k)))) };
        let int = |k: usize| -> Result<u64> { field(k).parse().map_err(|_| perr(line, format!("{}: bad integer {:?}", CSV_HEADER[k], field(k)))) };
        let maybe = |k: usize| -> Result<Option<f64>> { if field(k).is_empty() { Ok(None) } else { num(k).map(Some) } };
        rows.push(SweepResult {
            dataset: field(0).to_string(),
            algorithm: field(1).to_string(),
            d: int(2)? as usize,
            s: if field(3).is_empty() { None } else { Some(int(3)? as usize) },
            trial: int(4)? as usize,
            seed: int(5)?,
            rel_error: maybe(6)?,
            abs_error_sq: maybe(7)?,
            spent: maybe(8)?,
            leftover: maybe(9)?,
            hyperparams: field(10).to_string(),
            wall_ms: maybe(11)?,
            feasible: match field(12) {
                "true" => true,
                "false" => false,
                other => return Err(perr(line, format!("feasible: bad flag {other:?}"))),
            },
        });
    }
    Ok(SweepTable { rows })
}

/// Wall times keyed like the main table, for runs whose main CSV must stay
/// byte-reproducible.
pub fn emit_timing_csv(table: &SweepTable, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(["algorithm", "d", "trial", "wall_ms"]).map_err(wrap)?;
    for r in &table.rows {
        w.write_record([r.algorithm.clone(), r.d.to_string(), r.trial.to_string(), opt_f64(r.wall_ms)])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Whether the trial-mean curve has its minimum strictly inside the grid.
pub fn interior_minimum(curve: &[(usize, f64)]) -> Option<usize> {
    let (k, _) = curve
        .iter()
        .enumerate()
        .min_by(|x, y| x.1 .1.total_cmp(&y.1 .1))?;
    (k > 0 && k + 1 < curve.len()).then_some(curve[k].0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSettings {
    pub seed: u64,
    pub theorem1: theory::Theorem1Config,
    pub theorem1_trials: usize,
    pub embedding_trials: usize,
    pub structural: theory::StructuralConfig,
    pub structural_trials: usize,
    pub sketched_ridge: theory::SketchedRidgeConfig,
    pub sketched_ridge_vector: theory::SketchedRidgeVectorConfig,
    pub ridge_trials: usize,
    pub awkward: theory::AwkwardConfig,
    pub awkward_trials: usize,
    pub perturbed: theory::PerturbedSigmaConfig,
    pub perturbed_trials: usize,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            seed: 2024,
            theorem1: theory::Theorem1Config::default(),
            theorem1_trials: 200,
            embedding_trials: 100,
            structural: theory::StructuralConfig {
                m: 200,
                n: 20,
                r: 3,
                d: 6,
                sigma_c: 0.1,
                eps: 0.5,
                delta: 0.3,
                margin: 1.0,
            },
            structural_trials: 500,
            sketched_ridge: theory::SketchedRidgeConfig {
                m: 30,
                d: 5,
                n: 8,
                lambda: 1.0,
                sigma_e: 0.1,
                sketch: theory::SketchChoice::Leverage { s: 25 },
            },
            sketched_ridge_vector: theory::SketchedRidgeVectorConfig {
                m: 30,
                d: 5,
                lambda: 1.0,
                sigma_e: 0.1,
                sketch: theory::SketchChoice::Leverage { s: 25 },
                proximal: theory::ProximalPoint::Random,
            },
            ridge_trials: 100,
            awkward: theory::AwkwardConfig {
                m: 25,
                d: 4,
                sketch: theory::SketchChoice::Leverage { s: 40 },
                lambda_range: (1e-2, 1e2),
                probe: theory::ProbeVector::Random,
            },
            awkward_trials: 100,
            perturbed: theory::PerturbedSigmaConfig {
                m: 400,
                d: 5,
                r: 2,
                sigma: 1.0,
                delta: 0.1,
            },
            perturbed_trials: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Theorem1,
    Embedding,
    Structural,
    SketchedRidge,
    SketchedRidgeVector,
    Awkward,
    Perturbed,
}

impl CheckKind {
    pub const ALL: [CheckKind; 7] = [
        CheckKind::Theorem1,
        CheckKind::Embedding,
        CheckKind::Structural,
        CheckKind::SketchedRidge,
        CheckKind::SketchedRidgeVector,
        CheckKind::Awkward,
        CheckKind::Perturbed,
    ];
}

/// Runs one batch of theory checks; each kind gets its own seed family.
pub fn run_check(settings: &CheckSettings, kind: CheckKind) -> Result<Vec<BoundReport>> {
    let st = SeedStreams::new(settings.seed).child(&[100 + kind as u64]);
    match kind {
        CheckKind::Theorem1 => theory::check_theorem1(&settings.theorem1, settings.theorem1_trials, &st),
        CheckKind::Embedding => theory::check_embedding(&settings.theorem1, settings.embedding_trials, &st),
        CheckKind::Structural => theory::check_structural_lemma(&settings.structural, settings.structural_trials, &st),
        CheckKind::SketchedRidge => theory::check_sketched_ridge_bound(&settings.sketched_ridge, settings.ridge_trials, &st),
        CheckKind::SketchedRidgeVector => {
            theory::check_sketched_ridge_vector(&settings.sketched_ridge_vector, settings.ridge_trials, &st)
        }
        CheckKind::Awkward => theory::check_awkward_sketch(&settings.awkward, settings.awkward_trials, &st),
        CheckKind::Perturbed => theory::check_perturbed_sigma(&settings.perturbed, settings.perturbed_trials, &st),
    }
}

pub fn write_reports_csv<W: std::io::Write>(reports: &[BoundReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let e = |e: csv::Error| Error::Numerical(format!("csv: {e}"));
    w.write_record([
        "bound", "trial", "m", "n", "r", "d", "s", "sigma_c", "sigma_e", "lambda", "eps", "delta", "c", "beta", "kappa",
        "lhs", "rhs", "holds", "margin", "redraws",
    ])
    .map_err(e)?;
    for r in reports {
        let i = &r.instance;
        w.write_record([
            r.bound.name().to_string(),
            r.trial.to_string(),
            i.m.to_string(),
            i.n.to_string(),
            i.r.to_string(),
            i.d.to_string(),
            i.s.to_string(),
            opt_f64(i.sigma_c),
            opt_f64(i.sigma_e),
            opt_f64(i.lambda),
            opt_f64(i.eps),
            opt_f64(i.delta),
            opt_f64(i.c),
            opt_f64(i.beta),
            opt_f64(i.kappa),
            fmt_f64(r.lhs),
            fmt_f64(r.rhs),
            r.holds.to_string(),
            fmt_f64(r.margin),
            r.redraws.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|x| Error::Numerical(format!("csv: {x}")))
}

/// Dense matrix as headerless CSV, one matrix row per line.
pub fn write_matrix_csv(a: &DenseMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for i in 0..a.rows() {
        w.write_record((0..a.cols()).map(|j| fmt_f64(a[(i, j)])))
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<DenseMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in rd.records() {
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| perr(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(perr(line, format!("{} fields, earlier rows have {}", rec.len(), cols.unwrap_or(0))));
        }
        for f in rec.iter() {
            data.push(f.trim().parse::<f64>().map_err(|_| perr(line, format!("bad number {f:?}")))?);
        }
        rows += 1;
    }
    DenseMatrix::from_row_major(rows, cols.unwrap_or(0), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(algorithms: Vec<AlgorithmConfig>) -> ExperimentConfig {
        ExperimentConfig {
            seed: 7,
            trials: 1,
            budget_factor: 6.0,
            d_grid: vec![4],
            dataset: DatasetSpec {
                name: "tiny".into(),
                shape: (20, 15),
                rank: 2,
                source: DatasetSource::Synthetic { mean: 5.0, std: 1.0 },
                preprocessing: Vec::new(),
            },
            model: ModelConfig {
                p_e: 1.0,
                alpha: 0.1,
                sigma_e: 0.1,
                sigma_c: 0.2,
            },
            algorithms,
        }
    }

    fn quick_nn() -> (NnSearch, AdmmSettings) {
        (
            NnSearch {
                points: 3,
                ..Default::default()
            },
            AdmmSettings {
                max_iters: 300,
                ..Default::default()
            },
        )
    }

    #[test]
    fn relative_error_examples() {
        let a = DenseMatrix::from_fn(3, 2, |i, j| (i + 2 * j) as f64 + 1.0).unwrap();
        assert_eq!(relative_error(&a, &a).unwrap().value, 0.0);
        assert_eq!(relative_error(&a, &DenseMatrix::zeros(3, 2)).unwrap().value, 1.0);
        let twice = DenseMatrix::new(a.as_matrix() * 2.0).unwrap();
        assert!((relative_error(&a, &twice).unwrap().value - 1.0).abs() < 1e-15);
        let z = relative_error(&DenseMatrix::zeros(3, 2), &a).unwrap();
        assert!(!z.relative);
        assert_eq!(z.value, a.frobenius());
        assert!(relative_error(&a, &DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn one_cell_one_row() {
        let cfg = small_config(vec![AlgorithmConfig::ncur_default()]);
        let t = run_sweep(&cfg).unwrap();
        assert_eq!(t.rows.len(), 1);
        let r = &t.rows[0];
        assert!(r.feasible);
        assert!(r.spent.unwrap() <= cfg.budget());
        assert_eq!(r.s, Some(plan_split(&cfg.two_cost_model().unwrap(), 15, 4).unwrap().s));
        assert!(r.rel_error.unwrap() >= 0.0);
    }

    #[test]
    fn d_independent_rows_repeat() {
        let (search, admm) = quick_nn();
        let mut cfg = small_config(vec![AlgorithmConfig::Nna { search, admm }, AlgorithmConfig::CurPlus]);
        cfg.d_grid = vec![2, 4];
        cfg.trials = 2;
        let t = run_sweep(&cfg).unwrap();
        assert_eq!(t.rows.len(), 8);
        let nna: Vec<_> = t.rows.iter().filter(|r| r.algorithm == "nna").collect();
        assert_eq!(nna[0].rel_error, nna[2].rel_error);
        assert_eq!(nna[0].d, 2);
        assert_eq!(nna[2].d, 4);
        assert_eq!(nna[0].seed, nna[2].seed);
        assert_ne!(nna[0].seed, nna[1].seed);
    }

    #[test]
    fn infeasible_cells_are_marked() {
        let mut cfg = small_config(vec![AlgorithmConfig::ncur_default()]);
        // p_c = 2, B = 240: d = 110 leaves one row of 15 entries.
        cfg.d_grid = vec![110];
        let t = run_sweep(&cfg).unwrap();
        assert!(!t.rows[0].feasible);
        assert!(t.rows[0].rel_error.is_none());
        assert!(t.rows[0].hyperparams.contains("infeasible"));
        cfg.d_grid = vec![121];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn cells_reproduce_bit_for_bit() {
        let (search, admm) = quick_nn();
        let cfg = small_config(vec![
            AlgorithmConfig::ncur_default(),
            AlgorithmConfig::CurPlus,
            AlgorithmConfig::Nns { search, admm },
            AlgorithmConfig::Chen {
                rank: None,
                phase1_fraction: 0.5,
                search,
                admm,
            },
        ]);
        let a = ground_truth(&cfg).unwrap();
        let t = run_sweep_on(&cfg, &a).unwrap();
        for r in &t.rows {
            let alg = cfg.algorithms.iter().find(|x| x.name() == r.algorithm).unwrap();
            let again = run_cell(&cfg, &a, alg, r.d, r.trial).unwrap();
            assert_eq!(again.rel_error.map(f64::to_bits), r.rel_error.map(f64::to_bits), "{}", r.algorithm);
            assert!(r.spent.unwrap() <= cfg.budget());
        }
    }

    #[test]
    fn csv_round_trip_and_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        emit_csv(&SweepTable::default(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().trim_end(), CSV_HEADER.join(","));
        assert_eq!(parse_csv(&path).unwrap(), SweepTable::default());

        let row = SweepResult {
            dataset: "a,\"b\"".into(),
            algorithm: "ncur".into(),
            d: 3,
            s: Some(9),
            trial: 1,
            seed: u64::MAX,
            rel_error: Some(0.1 + 0.2),
            abs_error_sq: Some(1e-300),
            spent: Some(639.9999999999999),
            leftover: Some(f64::MIN_POSITIVE),
            hyperparams: json!({"lambda": 0.125, "note": "x,y"}).to_string(),
            wall_ms: Some(std::f64::consts::PI),
            feasible: true,
        };
        let blank = SweepResult {
            s: None,
            rel_error: None,
            abs_error_sq: None,
            spent: None,
            leftover: None,
            wall_ms: None,
            feasible: false,
            ..row.clone()
        };
        let t = SweepTable { rows: vec![row, blank] };
        emit_csv(&t, &path).unwrap();
        assert_eq!(parse_csv(&path).unwrap(), t);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ExperimentConfig::synthetic_low_noise();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(cfg.budget(), 640.0);
        assert_eq!(cfg.two_cost_model().unwrap().p_c, 16.0);

        let mut bad = cfg.clone();
        bad.trials = 0;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = cfg.clone();
        bad.algorithms.push(AlgorithmConfig::CurPlus);
        assert!(bad.validate().is_err());
        assert!(matches!(ExperimentConfig::from_toml("seed = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let text = r#"
            seed = 3
            trials = 2
            d_grid = [2, 4]

            [dataset]
            name = "synthetic"
            shape = [80, 60]
            rank = 4
            source = { kind = "synthetic", mean = 5.0, std = 1.0 }

            [[algorithms]]
            kind = "ncur"

            [[algorithms]]
            kind = "nna"
            search = { points = 5 }

            [[algorithms]]
            kind = "curplus"
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.budget_factor, 2.0);
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.algorithms[0], AlgorithmConfig::ncur_default());
        match &cfg.algorithms[1] {
            AlgorithmConfig::Nna { search, admm } => {
                assert_eq!(search.points, 5);
                assert_eq!(search.holdout, 0.2);
                assert_eq!(*admm, AdmmSettings::default());
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.algorithms[2], AlgorithmConfig::CurPlus);
    }

    #[test]
    fn interior_minimum_detector() {
        assert_eq!(interior_minimum(&[(1, 3.0), (2, 1.0), (3, 2.0)]), Some(2));
        assert_eq!(interior_minimum(&[(1, 1.0), (2, 2.0), (3, 3.0)]), None);
        assert_eq!(interior_minimum(&[(1, 3.0), (2, 2.0), (3, 1.0)]), None);
        assert_eq!(interior_minimum(&[]), None);
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let a = DenseMatrix::from_fn(3, 4, |i, j| (i as f64 - j as f64) / 3.0).unwrap();
        write_matrix_csv(&a, &path).unwrap();
        assert_eq!(read_matrix_csv(&path).unwrap(), a);
        std::fs::write(&path, "1,2\n3\n").unwrap();
        assert!(matches!(read_matrix_csv(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn report_csv_has_one_row_per_report() {
        let reps = theory::check_perturbed_sigma(
            &theory::PerturbedSigmaConfig {
                m: 50,
                d: 2,
                r: 1,
                sigma: 1.0,
                delta: 0.1,
            },
            3,
            &SeedStreams::new(1),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_reports_csv(&reps, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().starts_with("perturbed_sigma,0,50,"));
    }

    fn finite_opt() -> impl proptest::strategy::Strategy<Value = Option<f64>> {
        proptest::option::of(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO)
    }

    proptest::proptest! {
        #[test]
        fn csv_round_trip_any_row(
            name in "[a-z,\" ]{0,8}",
            d in 0usize..100,
            s in proptest::option::of(0usize..1000),
            seed in proptest::num::u64::ANY,
            rel in finite_opt(),
            abs in finite_opt(),
            spent in finite_opt(),
            wall in finite_opt(),
            hyper in "[ -~]{0,20}",
            feasible in proptest::bool::ANY,
        ) {
            let row = SweepResult {
                dataset: name,
                algorithm: "nna".into(),
                d,
                s,
                trial: d / 3,
                seed,
                rel_error: rel,
                abs_error_sq: abs,
                spent,
                leftover: spent.map(|x| -x),
                hyperparams: hyper,
                wall_ms: wall,
                feasible,
            };
            let table = SweepTable { rows: vec![row] };
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("t.csv");
            emit_csv(&table, &path).unwrap();
            proptest::prop_assert_eq!(parse_csv(&path).unwrap(), table);
        }

        #[test]
        fn relative_error_is_nonnegative_and_zero_on_self(m in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
            let mut rng = SeedStreams::new(seed).rng(Stream::Dataset);
            let a = DenseMatrix::new(crate::linalg::gaussian_matrix(m, n, 0.0, 1.0, &mut rng)).unwrap();
            let b = DenseMatrix::new(crate::linalg::gaussian_matrix(m, n, 0.0, 1.0, &mut rng)).unwrap();
            proptest::prop_assert_eq!(relative_error(&a, &a).unwrap().value, 0.0);
            let e = relative_error(&a, &b).unwrap();
            proptest::prop_assert!(e.value >= 0.0 && e.abs_sq >= 0.0);
            proptest::prop_assert!((e.value * a.frobenius() - e.abs_sq.sqrt()).abs() <= 1e-12 * e.abs_sq.sqrt().max(1.0));
        }
    }
}
