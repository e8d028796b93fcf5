//! End-to-end acceptance run. One PASS/FAIL line per criterion; the process
//! exits non-zero when any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use noisycur::baselines::{AdmmSettings, NnSearch};
use noisycur::datasets::{
    iterative_svd_trace, load_jester, load_movielens_100k, synthetic_lowrank, write_jester_fixture, CompletionSettings,
    DatasetSource, DatasetSpec, Preprocess, JESTER_JOKES,
};
use noisycur::harness::{self, interior_minimum, run_check, AlgorithmConfig, CheckKind, CheckSettings, ExperimentConfig, SweepTable};
use noisycur::linalg::gaussian_matrix;
use noisycur::ncur::{noisycur, observe, ridge_solve, NoisyCurConfig};
use noisycur::observation::plan_split;
use noisycur::rng::{SeedStreams, Stream};
use noisycur::theory::{self, BoundReport, Tally};
use noisycur::DenseMatrix;

const SEED: u64 = 2024;

const NOISELESS_TOL: f64 = 1e-6;
const NOISELESS_BUDGET: Duration = Duration::from_secs(1);

const RIDGE_INSTANCES: usize = 50;
const RIDGE_LAMBDAS: [f64; 3] = [0.01, 0.3, 10.0];
const GD_GRAD_TOL: f64 = 1e-10;
const RIDGE_REL_TOL: f64 = 1e-8;
const RIDGE_BUDGET: Duration = Duration::from_secs(5);

const DETERMINISTIC_TRIALS: usize = 100;
const DETERMINISTIC_BUDGET: Duration = Duration::from_secs(30);

const EMBEDDING_TRIALS: usize = 100;
const EMBEDDING_MIN_SUCCESS: usize = 90;
const PROBABILISTIC_TRIALS: usize = 500;
const PROBABILISTIC_BUDGET: Duration = Duration::from_secs(120);

const THEOREM1_TRIALS: usize = 200;
const THEOREM1_MIN_RATE: f64 = 0.85;
const THEOREM1_BUDGET: Duration = Duration::from_secs(300);

const ENTRY_SHARE_MAX: f64 = 0.20;
const SWEEP_BUDGET: Duration = Duration::from_secs(600);

const JESTER_TRIALS: usize = 3;
const JESTER_BUDGET: Duration = Duration::from_secs(900);

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    println!("{:<12} {}  {detail}", name, if pass { "PASS" } else { "FAIL" });
    Verdict { name, pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn noiseless_recovery() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut ok = 0;
    for t in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + t);
        let a = synthetic_lowrank(40, 30, 3, 5.0, 1.0, &mut rng).unwrap();
        let cfg = NoisyCurConfig {
            d: 10,
            s: 20,
            sigma_c: 0.0,
            sigma_e: 0.0,
            lambda: 1e-12,
        };
        let rec = noisycur(&a, &cfg, &SeedStreams::new(SEED).child(&[1, t])).unwrap();
        let err = harness::relative_error(&a, &rec.a_bar).unwrap().value;
        worst = worst.max(err);
        ok += usize::from(err < NOISELESS_TOL);
    }
    let took = start.elapsed();
    verdict(
        "criterion 1",
        ok == 10 && took < NOISELESS_BUDGET,
        format!("{ok}/10 below {NOISELESS_TOL:e}, worst {worst:.2e}, {}", secs(took)),
    )
}

/// Gradient descent on `||BX - Y||^2 + lambda ||X||^2` with step `1/L`.
fn gd_ridge(b: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let gram = b.transpose() * b;
    let rhs = b.transpose() * y;
    let top = gram.symmetric_eigenvalues().max();
    let step = 1.0 / (top + lambda);
    let mut x = DMatrix::zeros(b.ncols(), y.ncols());
    for _ in 0..10_000_000 {
        let grad = &gram * &x + &x * lambda - &rhs;
        if grad.norm() < GD_GRAD_TOL {
            break;
        }
        x -= grad * step;
    }
    x
}

fn ridge_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut ok = 0;
    for k in 0..RIDGE_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 100 + k as u64);
        let b = gaussian_matrix(12, 5, 0.0, 1.0, &mut rng);
        let y = gaussian_matrix(12, 3, 0.0, 1.0, &mut rng);
        let lambda = RIDGE_LAMBDAS[k % RIDGE_LAMBDAS.len()];
        let got = ridge_solve(&DenseMatrix::new(b.clone()).unwrap(), &DenseMatrix::new(y.clone()).unwrap(), lambda)
            .unwrap()
            .x;
        let want = gd_ridge(&b, &y, lambda);
        let rel = (&got - &want).norm() / want.norm();
        worst = worst.max(rel);
        ok += usize::from(rel <= RIDGE_REL_TOL);
    }
    let took = start.elapsed();
    verdict(
        "criterion 2",
        ok == RIDGE_INSTANCES && took < RIDGE_BUDGET,
        format!("{ok}/{RIDGE_INSTANCES} within {RIDGE_REL_TOL:e}, worst {worst:.2e}, {}", secs(took)),
    )
}

fn deterministic_bounds(settings: &CheckSettings) -> Verdict {
    let start = Instant::now();
    let ridge = Tally::of(&run_check(settings, CheckKind::SketchedRidge).unwrap());
    let awkward = Tally::of(&run_check(settings, CheckKind::Awkward).unwrap());
    let took = start.elapsed();
    verdict(
        "criterion 3",
        ridge.holds == DETERMINISTIC_TRIALS && awkward.holds == DETERMINISTIC_TRIALS && took < DETERMINISTIC_BUDGET,
        format!(
            "sketched ridge {}/{}, awkward sketch {}/{}, {}",
            ridge.holds,
            ridge.trials,
            awkward.holds,
            awkward.trials,
            secs(took)
        ),
    )
}

fn probabilistic_bounds(settings: &CheckSettings) -> Verdict {
    let start = Instant::now();
    let emb = Tally::of(&run_check(settings, CheckKind::Embedding).unwrap());
    let st = Tally::of(&run_check(settings, CheckKind::Structural).unwrap());
    let pe = Tally::of(&run_check(settings, CheckKind::Perturbed).unwrap());
    let st_bound = settings.structural.failure_bound();
    let pe_bound = settings.perturbed.failure_bound();
    let took = start.elapsed();
    let pass = emb.holds >= EMBEDDING_MIN_SUCCESS
        && emb.trials == EMBEDDING_TRIALS
        && st.trials == PROBABILISTIC_TRIALS
        && pe.trials == PROBABILISTIC_TRIALS
        && st.failure_within(st_bound)
        && pe.failure_within(pe_bound)
        && took < PROBABILISTIC_BUDGET;
    verdict(
        "criterion 4",
        pass,
        format!(
            "embedding {}/{}, structural failures {:.4} (bound {:.2e}), perturbed failures {:.4} (bound {:.4}), {}",
            emb.holds,
            emb.trials,
            st.failure_rate(),
            st_bound,
            pe.failure_rate(),
            pe_bound,
            secs(took)
        ),
    )
}

fn theorem1(settings: &CheckSettings) -> Verdict {
    let start = Instant::now();
    let reports: Vec<BoundReport> = run_check(settings, CheckKind::Theorem1).unwrap();
    let t = Tally::of(&reports);
    let took = start.elapsed();
    let i = &reports[0].instance;
    verdict(
        "criterion 5",
        t.trials == THEOREM1_TRIALS && t.success_rate() >= THEOREM1_MIN_RATE && took < THEOREM1_BUDGET,
        format!(
            "{}/{} hold ({:.1}%) at d = {}, s = {}, {}",
            t.holds,
            t.trials,
            100.0 * t.success_rate(),
            i.d,
            i.s,
            secs(took)
        ),
    )
}

fn sweep_config() -> ExperimentConfig {
    ExperimentConfig {
        algorithms: vec![AlgorithmConfig::ncur_default(), AlgorithmConfig::nna_default()],
        ..ExperimentConfig::synthetic_low_noise()
    }
}

fn csv_bytes(table: &SweepTable) -> Vec<u8> {
    let mut buf = Vec::new();
    harness::write_csv(&table.without_wall_time(), &mut buf).unwrap();
    buf
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn violations(table: &SweepTable, budget: f64) -> usize {
    table
        .rows
        .iter()
        .filter(|r| r.feasible && r.spent.map_or(true, |s| s > budget))
        .count()
}

fn main() {
    let settings = CheckSettings {
        theorem1_trials: THEOREM1_TRIALS,
        embedding_trials: EMBEDDING_TRIALS,
        structural_trials: PROBABILISTIC_TRIALS,
        perturbed_trials: PROBABILISTIC_TRIALS,
        ridge_trials: DETERMINISTIC_TRIALS,
        awkward_trials: DETERMINISTIC_TRIALS,
        ..CheckSettings::default()
    };
    let mut verdicts = vec![
        noiseless_recovery(),
        ridge_oracle(),
        deterministic_bounds(&settings),
        probabilistic_bounds(&settings),
        theorem1(&settings),
    ];

    let cfg = sweep_config();
    let budget = cfg.budget();
    let (m, n) = cfg.dataset.shape;
    let entry_share = (budget / cfg.model.p_e).floor() / (m * n) as f64;
    let start = Instant::now();
    let table = harness::run_sweep(&cfg).unwrap();
    let took = start.elapsed();
    let ncur = table.mean_curve("ncur");
    let nna = table.mean_curve("nna");
    let best = ncur.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let nna_mean = nna.first().map_or(f64::NAN, |p| p.1);
    let vee = interior_minimum(&ncur);
    let all_feasible = ncur.len() == cfg.d_grid.len();
    verdicts.push(verdict(
        "criterion 6",
        entry_share < ENTRY_SHARE_MAX && best < nna_mean && vee.is_some() && all_feasible && took < SWEEP_BUDGET,
        format!(
            "B = {budget}, entry share {:.1}%, nCUR best {best:.4} at d = {:?}, NNa {nna_mean:.4}, interior minimum {vee:?}, {}",
            100.0 * entry_share,
            ncur.iter().min_by(|x, y| x.1.total_cmp(&y.1)).map(|p| p.0),
            secs(took)
        ),
    ));
    let curve: Vec<String> = ncur.iter().map(|(d, e)| format!("{d}:{e:.4}")).collect();
    println!("             nCUR curve {}", curve.join(" "));

    // NNa cells are shared along the d axis; count each run once.
    let ncur_ms = median(table.wall_times("ncur"));
    let nna_ms = median(
        table
            .rows
            .iter()
            .filter(|r| r.algorithm == "nna" && r.d == cfg.d_grid[0])
            .filter_map(|r| r.wall_ms)
            .collect(),
    );
    verdicts.push(verdict(
        "criterion 7",
        ncur_ms < nna_ms,
        format!("median wall time nCUR {ncur_ms:.2} ms, NNa {nna_ms:.1} ms, ratio {:.0}", nna_ms / ncur_ms),
    ));

    let first = csv_bytes(&table);
    let rerun = harness::run_sweep(&cfg).unwrap();
    let identical = first == csv_bytes(&rerun);

    let jester = jester_and_movielens();
    let bad = violations(&table, budget) + violations(&rerun, budget) + jester.ledger_violations;
    let cells = table.rows.len() + rerun.rows.len() + jester.cells;
    verdicts.push(verdict(
        "criterion 8",
        bad == 0,
        format!("{bad} ledger violations over {cells} budgeted cells"),
    ));
    verdicts.push(verdict(
        "criterion 9",
        identical,
        format!("rerun CSV {} ({} bytes)", if identical { "byte-identical" } else { "differs" }, first.len()),
    ));
    verdicts.push(jester.verdict);

    let failed: Vec<&str> = verdicts.iter().filter(|v| !v.pass).map(|v| v.name).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", verdicts.len());
    } else {
        for v in verdicts.iter().filter(|v| !v.pass) {
            eprintln!("{} failed: {}", v.name, v.detail);
        }
        std::process::exit(1);
    }
}

struct DatasetRun {
    verdict: Verdict,
    ledger_violations: usize,
    cells: usize,
}

fn write_movielens_fixture(path: &std::path::Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);
    let items = gaussian_matrix(1682, 3, 0.0, 1.0, &mut rng);
    let users = gaussian_matrix(3, 943, 0.0, 0.6, &mut rng);
    let mut text = String::new();
    let mut mask = SeedStreams::new(SEED).rng(Stream::EntrySampling);
    for u in 0..943 {
        for i in rand::seq::index::sample(&mut mask, 1682, 100) {
            let raw = 3.5 + (items.row(i) * users.column(u))[(0, 0)];
            let rating = raw.round().clamp(1.0, 5.0) as u8;
            text.push_str(&format!("{}\t{}\t{rating}\t{}\n", u + 1, i + 1, 881250949 + u * 1682 + i));
        }
    }
    std::fs::write(path, text).unwrap();
}

fn jester_and_movielens() -> DatasetRun {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let path = match std::env::var_os("JESTER_PATH") {
        Some(p) => PathBuf::from(p),
        None => {
            let p = dir.path().join("jester.txt");
            let mut rng = SeedStreams::new(SEED).rng(Stream::Dataset);
            write_jester_fixture(&p, 600, 60, &mut rng).unwrap();
            p
        }
    };
    let loaded = load_jester(&path).unwrap();
    let loader_ok = loaded.cols() == JESTER_JOKES && loaded.rows() >= 500;

    let ml_path = dir.path().join("u.data");
    write_movielens_fixture(&ml_path);
    let ratings = load_movielens_100k(&ml_path).unwrap();
    let completion = iterative_svd_trace(
        &ratings,
        &CompletionSettings {
            rank: 5,
            max_iters: 15,
            tol: 1e-4,
        },
    )
    .unwrap();
    let monotone = completion
        .objective
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    let ml_ok = ratings.len() == 943 * 100 && (completion.matrix.rows(), completion.matrix.cols()) == (1682, 943);

    let nn = NnSearch {
        points: 5,
        ..NnSearch::default()
    };
    let cfg = ExperimentConfig {
        seed: SEED,
        trials: JESTER_TRIALS,
        budget_factor: 2.0,
        d_grid: vec![2, 5, 10, 20, 30, 40],
        dataset: DatasetSpec {
            name: "jester".into(),
            shape: (500, 100),
            rank: 5,
            source: DatasetSource::Jester { path },
            preprocessing: vec![Preprocess::Subsample { rows: 500, cols: 100 }],
        },
        model: Default::default(),
        algorithms: vec![
            AlgorithmConfig::ncur_default(),
            AlgorithmConfig::CurPlus,
            AlgorithmConfig::Nna {
                search: nn,
                admm: AdmmSettings::default(),
            },
        ],
    };
    let table = harness::run_sweep(&cfg).unwrap();
    let ledger_violations = violations(&table, cfg.budget());
    let feasible = table.rows.iter().filter(|r| r.feasible).count();
    let (accepted, ridge) = slice_bounds(&cfg);
    let took = start.elapsed();
    let best = |alg: &str| table.mean_curve(alg).iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    DatasetRun {
        verdict: verdict(
            "jester/ml",
            loader_ok
                && ml_ok
                && monotone
                && ledger_violations == 0
                && ridge == 0
                && accepted > 0
                && feasible == table.rows.len()
                && took < JESTER_BUDGET,
            format!(
                "jester {}x{} complete users, movielens {} ratings, completion {} iterations monotone {monotone}, \
                 sweep {} cells (nCUR {:.3}, CUR+ {:.3}, NNa {:.3}), ledger violations {ledger_violations}, \
                 sketched ridge bound violated on {ridge} of {accepted} accepted slice sketches, {}",
                loaded.rows(),
                loaded.cols(),
                ratings.len(),
                completion.iterations,
                table.rows.len(),
                best("ncur"),
                best("curplus"),
                best("nna"),
                secs(took)
            ),
        ),
        ledger_violations,
        cells: table.rows.len(),
    }
}

/// The sketched ridge bound on the slice itself: for every `(d, trial)`
/// the columns and leverage sketch nCUR would draw, exact sketched rows
/// (`E = 0`), `lambda = 1`. Instances with distortion `>= 1` are skipped.
fn slice_bounds(cfg: &ExperimentConfig) -> (usize, usize) {
    let a = harness::ground_truth(cfg).unwrap();
    let model = cfg.two_cost_model().unwrap();
    let zero = DMatrix::zeros(a.rows(), a.cols());
    let (mut accepted, mut violated) = (0, 0);
    for &d in &cfg.d_grid {
        let plan = plan_split(&model, a.cols(), d).unwrap();
        for t in 0..cfg.trials {
            let run = NoisyCurConfig {
                d,
                s: plan.s,
                sigma_c: model.sigma_c,
                sigma_e: 0.0,
                lambda: 1.0,
            };
            let streams = harness::cell_streams(cfg, &cfg.algorithms[0], d, t);
            let obs = observe(&a, &run, &streams).unwrap();
            let terms = theory::sketched_ridge_terms(obs.c_tilde.as_matrix(), a.as_matrix(), &zero, &obs.sketch, 1.0).unwrap();
            if terms.eps < 1.0 {
                accepted += 1;
                let report = BoundReport::new(theory::BoundKind::SketchedRidge, t, Default::default(), terms.error, terms.rhs());
                violated += usize::from(!report.holds);
            }
        }
    }
    (accepted, violated)
}
