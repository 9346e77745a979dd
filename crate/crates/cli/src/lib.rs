//! The `pdelearn` command line: dataset generation and corruption, training
//! runs and reports.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};

use pdelearn_core::data::{default_test_size, split_points, split_train_test};
use pdelearn_core::solvers::{self, SolverConfig};
use pdelearn_core::{Error, GridDataset, IdentifiedPde, PointDataset};

mod run;

#[derive(Parser)]
#[command(
    name = "pdelearn",
    version,
    about = "Learn governing PDEs from noisy scattered data"
)]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a noise-free dataset: a solver grid, or analytic wave points.
    Generate {
        /// burgers, kdv-sine, kdv-exp-cos, ks, allen-cahn or wave
        equation: String,
        #[arg(long)]
        out: PathBuf,
        /// Number of analytic samples (wave only).
        #[arg(long, default_value_t = 4000)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the spectral mode count.
        #[arg(long)]
        modes: Option<usize>,
        /// Override the solver steps between output samples.
        #[arg(long)]
        steps_per_sample: Option<usize>,
    },
    /// Subsample a grid or point file, add noise, and write train/test sets.
    Corrupt {
        input: PathBuf,
        /// Training points.
        #[arg(short, long)]
        n: usize,
        /// Noise level: noise std over the std of the full noise-free data.
        #[arg(long, default_value_t = 0.0)]
        q: f64,
        /// Test points; defaults to a fifth of the training count.
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long, default_value_t = 1)]
        noise_seed: u64,
        /// Directory receiving train.csv and test.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the three-phase training described by a config file.
    Train {
        config: PathBuf,
        /// Override a config key, e.g. `--set sparsification.w_lp=3e-4`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write surrogate and residual values on a regular grid as CSV.
        #[arg(long)]
        emit_plot_data: bool,
    },
    /// Print a saved identified PDE (a run directory or its pde.json).
    Report { path: PathBuf },
}

/// Exit statuses: 2 bad input, 3 numerical failure, 4 everything pruned.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::EmptyPde(_)) => 4,
        Some(Error::Numerical(_) | Error::Domain { .. }) => 3,
        Some(_) => 2,
        None => 2,
    }
}

/// Run a parsed command line, reporting any error on stderr, and return the
/// process exit status.
pub fn execute(cli: Cli) -> u8 {
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Generate {
            equation,
            out,
            points,
            seed,
            modes,
            steps_per_sample,
        } => generate(&equation, &out, points, seed, modes, steps_per_sample),
        Command::Corrupt {
            input,
            n,
            q,
            n_test,
            sample_seed,
            noise_seed,
            out_dir,
        } => corrupt(
            &input,
            n,
            q,
            n_test.unwrap_or(default_test_size(n)),
            sample_seed,
            noise_seed,
            &out_dir,
        ),
        Command::Train {
            config,
            overrides,
            emit_plot_data,
        } => run::train(&config, &overrides, emit_plot_data),
        Command::Report { path } => report(&path),
    }
}

fn generate(
    equation: &str,
    out: &Path,
    points: usize,
    seed: u64,
    modes: Option<usize>,
    steps: Option<usize>,
) -> anyhow::Result<()> {
    if equation == "wave" {
        let data = solvers::wave_points(points, seed)?;
        data.save(out)?;
        println!("wrote {} wave points to {}", data.len(), out.display());
        return Ok(());
    }
    let mut cfg = SolverConfig::preset(equation).ok_or_else(|| {
        Error::Config(format!(
            "unknown equation {equation:?}; valid names: {}, wave",
            SolverConfig::PRESETS.join(", ")
        ))
    })?;
    if let Some(m) = modes {
        cfg.modes = m;
    }
    if let Some(s) = steps {
        cfg.steps_per_sample = s;
    }
    let grid = solvers::solve(&cfg)?;
    grid.save(out)?;
    let shape: Vec<String> = grid.shape().iter().map(ToString::to_string).collect();
    println!(
        "wrote {} grid ({}) to {}",
        equation,
        shape.join(" x "),
        out.display()
    );
    Ok(())
}

fn corrupt(
    input: &Path,
    n: usize,
    q: f64,
    n_test: usize,
    sample_seed: u64,
    noise_seed: u64,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let (train, test) = if GridDataset::has_magic(&bytes) {
        let grid = GridDataset::from_bytes(&bytes)?;
        split_train_test(&grid, n, n_test, q, sample_seed, noise_seed)?
    } else {
        let text = String::from_utf8(bytes).map_err(|_| {
            Error::Config(format!(
                "{} is neither a grid nor a point file",
                input.display()
            ))
        })?;
        let points = PointDataset::from_csv(&text)?;
        split_points(&points, n, n_test, q, sample_seed, noise_seed)?
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.into(),
        source: e,
    })?;
    train.save(&out_dir.join("train.csv"))?;
    test.save(&out_dir.join("test.csv"))?;
    println!(
        "wrote {} training and {} test points (q = {q}) to {}",
        train.len(),
        test.len(),
        out_dir.display()
    );
    Ok(())
}

fn report(path: &Path) -> anyhow::Result<()> {
    let file = if path.is_dir() {
        path.join("pde.json")
    } else {
        path.to_path_buf()
    };
    let pde = IdentifiedPde::load(&file)?;
    println!("{}", pde.report());
    for (k, v) in &pde.metadata {
        println!("  {k}: {v}");
    }
    Ok(())
}
