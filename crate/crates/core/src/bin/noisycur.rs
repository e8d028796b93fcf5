use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use noisycur::harness::{
    self, emit_csv, emit_timing_csv, read_matrix_csv, write_matrix_csv, write_reports_csv, CheckKind, CheckSettings,
    ExperimentConfig,
};
use noisycur::linalg;
use noisycur::ncur::{log_grid, noisycur_cv, NoisyCurConfig};
use noisycur::observation::{plan_split, snr};
use noisycur::rng::SeedStreams;
use noisycur::sketch::column_leverage_and_coherence;
use noisycur::theory::Tally;
use noisycur::{DenseMatrix, Error};

#[derive(Parser)]
#[command(name = "noisycur", version, about = "Budgeted matrix completion with noisy columns and noisy entries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the ground-truth matrix of a config (or the synthetic default) as CSV.
    Generate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run every (algorithm, d, trial) cell and write the result table.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(short, long)]
        out: PathBuf,
        /// Keep wall times in the main table instead of `<out>.timing.csv`.
        /// The table is then no longer byte-reproducible.
        #[arg(long)]
        inline_timing: bool,
    },
    /// Run theory-check batches and write one row per instance.
    Check {
        /// TOML check settings; defaults when absent.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        kind: CheckArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the trial count of every selected batch.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Cross-validate the ridge parameter for one column count.
    Cv {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Matrix CSV to use instead of the config's dataset.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(short)]
        d: usize,
        #[arg(long, default_value_t = 1e-4)]
        lambda_lo: f64,
        #[arg(long, default_value_t = 1e4)]
        lambda_hi: f64,
        #[arg(long, default_value_t = 17)]
        points: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Print shape, numerical rank, incoherence and SNR of a dataset.
    Info {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config; the synthetic low-noise setting when absent.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated column counts.
    #[arg(long, value_delimiter = ',')]
    d_grid: Option<Vec<usize>>,
    #[arg(long)]
    budget_factor: Option<f64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    All,
    Theorem1,
    Embedding,
    Structural,
    SketchedRidge,
    SketchedRidgeVector,
    Awkward,
    Perturbed,
}

impl CheckArg {
    fn kinds(self) -> Vec<CheckKind> {
        match self {
            CheckArg::All => CheckKind::ALL.to_vec(),
            CheckArg::Theorem1 => vec![CheckKind::Theorem1],
            CheckArg::Embedding => vec![CheckKind::Embedding],
            CheckArg::Structural => vec![CheckKind::Structural],
            CheckArg::SketchedRidge => vec![CheckKind::SketchedRidge],
            CheckArg::SketchedRidgeVector => vec![CheckKind::SketchedRidgeVector],
            CheckArg::Awkward => vec![CheckKind::Awkward],
            CheckArg::Perturbed => vec![CheckKind::Perturbed],
        }
    }
}

enum Failure {
    Config(String),
    Runtime(String),
    Violation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::synthetic_low_noise(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(g) = &self.d_grid {
            cfg.d_grid = g.clone();
        }
        if let Some(b) = self.budget_factor {
            cfg.budget_factor = b;
        }
        cfg.validate()?;
        if let Some(n) = self.threads {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                warn!("thread pool already set: {e}");
            }
        }
        Ok(cfg)
    }
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_matrix(exp: &ExperimentConfig, matrix: Option<&Path>) -> Result<DenseMatrix, Failure> {
    Ok(match matrix {
        Some(p) => read_matrix_csv(p)?,
        None => harness::ground_truth(exp)?,
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { exp, out } => {
            let cfg = exp.resolve()?;
            let a = harness::ground_truth(&cfg)?;
            write_matrix_csv(&a, &out)?;
            write_text(&sidecar(&out, ".config.toml"), &cfg.to_toml()?)?;
            info!("wrote {}x{} matrix to {}", a.rows(), a.cols(), out.display());
        }
        Command::Sweep {
            exp,
            out,
            inline_timing,
        } => {
            let cfg = exp.resolve()?;
            write_text(&sidecar(&out, ".config.toml"), &cfg.to_toml()?)?;
            let table = harness::run_sweep(&cfg)?;
            if inline_timing {
                emit_csv(&table, &out)?;
            } else {
                emit_csv(&table.without_wall_time(), &out)?;
                emit_timing_csv(&table, &sidecar(&out, ".timing.csv"))?;
            }
            for alg in &cfg.algorithms {
                let curve = table.mean_curve(alg.name());
                let best = curve.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                println!("{:8} best mean relative error {best:.4}", alg.name());
            }
        }
        Command::Check {
            config,
            kind,
            seed,
            trials,
            out,
        } => {
            let mut settings = match &config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
                    toml::from_str::<CheckSettings>(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
                }
                None => CheckSettings::default(),
            };
            if let Some(s) = seed {
                settings.seed = s;
            }
            if let Some(t) = trials {
                settings.theorem1_trials = t;
                settings.embedding_trials = t;
                settings.structural_trials = t;
                settings.ridge_trials = t;
                settings.awkward_trials = t;
                settings.perturbed_trials = t;
            }
            let mut all = Vec::new();
            let mut violated = Vec::new();
            for k in kind.kinds() {
                let reports = harness::run_check(&settings, k)?;
                let tally = Tally::of(&reports);
                let Some(first) = reports.first() else { continue };
                println!(
                    "{:24} {}/{} hold ({:.1}%)",
                    first.bound.name(),
                    tally.holds,
                    tally.trials,
                    100.0 * tally.success_rate()
                );
                if first.bound.is_deterministic() && tally.failures() > 0 {
                    violated.push(first.bound.name());
                }
                all.extend(reports);
            }
            if let Some(out) = &out {
                let file = std::fs::File::create(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
                write_reports_csv(&all, file)?;
                let text = toml::to_string(&settings).map_err(|e| Failure::Runtime(e.to_string()))?;
                write_text(&sidecar(out, ".config.toml"), &text)?;
            }
            if !violated.is_empty() {
                return Err(Failure::Violation(format!("deterministic bound violated: {}", violated.join(", "))));
            }
        }
        Command::Cv {
            exp,
            matrix,
            d,
            lambda_lo,
            lambda_hi,
            points,
            folds,
        } => {
            let cfg = exp.resolve()?;
            let a = load_matrix(&cfg, matrix.as_deref())?;
            let mut budget = cfg.clone();
            budget.dataset.shape = (a.rows(), a.cols());
            let model = budget.two_cost_model()?;
            let plan = plan_split(&model, a.cols(), d)?;
            let run = NoisyCurConfig {
                d,
                s: plan.s,
                sigma_c: model.sigma_c,
                sigma_e: model.sigma_e,
                lambda: 0.0,
            };
            if !(lambda_lo > 0.0 && lambda_hi >= lambda_lo && points > 0) {
                return Err(Failure::Config(format!("empty lambda grid {lambda_lo}..{lambda_hi} x {points}")));
            }
            let grid = log_grid(lambda_lo, lambda_hi, points);
            let (rec, cv) = noisycur_cv(&a, &run, &grid, folds, &SeedStreams::new(cfg.seed))?;
            println!("d = {d}, s = {}, spent {} of {}", plan.s, plan.spent, model.budget);
            println!("lambda,cv_error");
            for (l, e) in &cv.curve {
                println!("{l:.6e},{e:.6e}");
            }
            let err = harness::relative_error(&a, &rec.a_bar)?;
            println!("chosen lambda {:.6e}, relative error {:.6}", cv.best_lambda, err.value);
        }
        Command::Info { exp, matrix } => {
            let cfg = exp.resolve()?;
            let a = load_matrix(&cfg, matrix.as_deref())?;
            let coh = column_leverage_and_coherence(&a)?;
            println!("shape          {} x {}", a.rows(), a.cols());
            println!("numerical rank {}", linalg::numerical_rank(a.as_matrix())?);
            println!("max leverage   {:.6}", coh.max_leverage);
            println!("beta           {:.6}", coh.beta);
            match snr(&a, cfg.model.sigma_c) {
                Ok(v) => println!("snr            {v:.6} (sigma_c = {})", cfg.model.sigma_c),
                Err(e) => println!("snr            undefined: {e}"),
            }
            println!("frobenius      {:.6}", a.frobenius());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Violation(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
    }
}
