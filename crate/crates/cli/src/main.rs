use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mvfbsde::error::{Error, Result};
use mvfbsde::io::{
    config_to_toml, load_checkpoint, parse_config, save_checkpoint, write_bands_csv, write_losses_csv,
    write_metrics_csv, write_mpc_csv, write_paths_csv, write_timings_csv, Checkpoint, ExperimentConfig,
};
use mvfbsde::models::{analytic_solution, mpc_surface, GrowthModel, ModelConfig, SystemicRiskAnalytic};
use mvfbsde::orchestrator::{sample_after_training, ConvergenceReport, RunConfig, Solver, TrainedNetworks};
use mvfbsde::stochastics::sample_noise;
use mvfbsde::validation::{
    compare_to_reference, nested_conditional_oracle, z_discrepancy, ErrorReport, Feedback, ZDiscrepancy,
};

/// Overrides the output directory of every subcommand unless `--out` is given.
const OUT_ENV: &str = "MVFBSDE_OUT";

#[derive(Parser)]
#[command(name = "mvfbsde", version, about = "Picard/elicitability solver for McKean-Vlasov FBSDEs with common noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the networks and write metrics, paths and a checkpoint.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate fresh paths with the networks of a checkpoint.
    Sample {
        /// Checkpoint file, or a run directory containing checkpoint.json.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Defaults to the training path count.
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a checkpoint with the closed form (systemic risk) and the
    /// nested Monte Carlo oracle, on the training noise.
    Validate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Refuse checkpoints trained for another model.
        #[arg(long)]
        model: Option<String>,
        /// Common paths checked against the nested oracle (0 skips it).
        #[arg(long, default_value_t = 5)]
        oracle_paths: usize,
        #[arg(long, default_value_t = 10_000)]
        m_idio: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate the CSV tables of a run directory from its saved reports.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Nested-oracle check along one common path.
#[derive(Debug, Serialize, Deserialize)]
struct OracleCheck {
    path: usize,
    max_abs_deviation: f64,
    trained: Vec<f64>,
    oracle: Vec<f64>,
    std_error: Option<Vec<f64>>,
}

/// Contents of `error_report.json`.
#[derive(Debug, Serialize, Deserialize)]
struct ValidationFile {
    model: String,
    iteration: usize,
    seed: u64,
    analytic: Option<ErrorReport>,
    z_discrepancy: Option<ZDiscrepancy>,
    m_idio: usize,
    oracle: Vec<OracleCheck>,
}

fn out_dir(flag: Option<PathBuf>, fallback: impl FnOnce() -> PathBuf) -> Result<PathBuf> {
    let dir = flag
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(fallback);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Usage(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("checkpoint.json")
    } else {
        path.to_path_buf()
    }
}

/// Tables derived from the convergence report alone.
fn write_report_tables(dir: &Path, report: &ConvergenceReport) -> Result<()> {
    write_metrics_csv(create(&dir.join("metrics.csv"))?, report)?;
    write_losses_csv(create(&dir.join("losses.csv"))?, report)
}

fn write_band_tables(dir: &Path, report: &ErrorReport) -> Result<()> {
    for p in &report.processes {
        write_bands_csv(create(&dir.join(format!("bands_{}.csv", p.name)))?, p)?;
    }
    Ok(())
}

/// MPC surfaces at t = 0.5 and 0.9 over `K` in `k_mean +- 2 k_sd` and
/// `r = C s`, `s` in `k_mean +- k_sd`, 20 points each.
fn write_mpc_tables(dir: &Path, config: &RunConfig, nets: &TrainedNetworks) -> Result<()> {
    let ModelConfig::Growth(p) = config.model else {
        return Ok(());
    };
    let model = GrowthModel::new(p)?;
    let lin = |lo: f64, hi: f64| (0..20).map(|i| lo + (hi - lo) * i as f64 / 19.0).collect::<Vec<_>>();
    let ks = lin(p.k_mean - 2.0 * p.k_sd, p.k_mean + 2.0 * p.k_sd);
    let rs = lin(model.interest_rate(p.k_mean - p.k_sd), model.interest_rate(p.k_mean + p.k_sd));
    for t in [0.5, 0.9] {
        let t = t * config.horizon;
        let points = mpc_surface(&nets.u, &model, &ks, &rs, t)?;
        write_mpc_csv(create(&dir.join(format!("mpc_t{t}.csv")))?, &points)?;
    }
    Ok(())
}

fn solve(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(config).map_err(|e| Error::Usage(format!("cannot read {}: {e}", config.display())))?;
    let mut exp: ExperimentConfig = parse_config(&text)?;
    if let Some(seed) = seed {
        exp.run.seed = seed;
    }
    let dir = out_dir(out, || exp.output.dir.clone().unwrap_or_else(|| PathBuf::from("out")))?;
    fs::write(dir.join("config.toml"), config_to_toml(&exp)?)?;

    let every = exp.output.checkpoint_every;
    let mut solver = Solver::new(exp.run.clone())?;
    let result = solver.run_with(|s| {
        let r = s.report().records.last().expect("observer runs after an iteration");
        eprintln!(
            "iteration {:>3}: dist X {:.3e} Y {:.3e} Z {:.3e} Z0 {:.3e}",
            r.iteration, r.dist_x, r.dist_y, r.dist_z, r.dist_z0
        );
        if every.is_some_and(|k| r.iteration % k == 0) {
            let ck = Checkpoint::new(s.config(), r.iteration, s.networks());
            save_checkpoint(&dir.join(format!("checkpoint_{:04}.json", r.iteration)), &ck)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        // Keep what was learned about the failed run.
        write_json(&dir.join("convergence.json"), solver.report())?;
        write_report_tables(&dir, solver.report())?;
        return Err(e);
    }
    let output = solver.into_output();
    let grid = output.config.grid()?;
    write_json(&dir.join("convergence.json"), &output.report)?;
    write_report_tables(&dir, &output.report)?;
    write_timings_csv(create(&dir.join("timings.csv"))?, &output.report)?;
    write_paths_csv(create(&dir.join("paths.csv"))?, &grid, &output.noise, &output.state)?;
    let iteration = output.report.records.len();
    save_checkpoint(&dir.join("checkpoint.json"), &Checkpoint::new(&output.config, iteration, &output.networks))?;
    write_mpc_tables(&dir, &output.config, &output.networks)?;
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn sample(checkpoint: &Path, seed: u64, paths: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let (ck, nets) = load_checkpoint(&checkpoint_file(checkpoint), None)?;
    let config = ck.config;
    let paths = paths.unwrap_or(config.paths);
    if paths == 0 {
        return Err(Error::Usage("--paths must be positive".into()));
    }
    let grid = config.grid()?;
    let model = config.model.build(config.horizon)?;
    let noise = sample_noise(&grid, paths, 1, seed)?;
    let xi = model.initial_law().sample(paths, seed);
    let state = sample_after_training(model.as_ref(), &nets, &grid, &noise, &xi)?;
    let dir = out_dir(out, || PathBuf::from("."))?;
    let file = dir.join(format!("sample_seed{seed}.csv"));
    write_paths_csv(create(&file)?, &grid, &noise, &state)?;
    eprintln!("wrote {}", file.display());
    Ok(())
}

fn validate(checkpoint: &Path, model: Option<&str>, oracle_paths: usize, m_idio: usize, out: Option<PathBuf>) -> Result<()> {
    let file = checkpoint_file(checkpoint);
    let (ck, nets) = load_checkpoint(&file, model)?;
    let config = &ck.config;
    let grid = config.grid()?;
    let model = config.model.build(config.horizon)?;
    // Same draws as the training run.
    let noise = config.training_noise()?;
    let xi = config.initial_states(&model.initial_law());
    let state = sample_after_training(model.as_ref(), &nets, &grid, &noise, &xi)?;

    let (analytic, z_report) = match config.model {
        ModelConfig::SystemicRisk(p) => {
            let reference = analytic_solution(&p, config.horizon, &xi, &noise, &grid)?;
            let report = compare_to_reference(&state, &reference.state, &grid)?;
            let closed = SystemicRiskAnalytic::new(p, config.horizon)?;
            let z = z_discrepancy(&state.z, &closed, &grid)?;
            eprintln!("{}", z.statement);
            (Some(report), Some(z))
        }
        _ => (None, None),
    };

    // Mirrored pairs share their common path, so take one path per pair.
    let stride = if config.antithetic { 2 } else { 1 };
    if oracle_paths > config.paths.div_ceil(stride) {
        return Err(Error::Usage(format!(
            "--oracle-paths {oracle_paths} exceeds the {} distinct common paths",
            config.paths.div_ceil(stride)
        )));
    }
    let dw0 = noise.dw0();
    let s = state.s.scalar();
    let mut oracle = Vec::with_capacity(oracle_paths);
    for i in (0..oracle_paths).map(|k| k * stride) {
        let common: Vec<f64> = (0..grid.steps()).map(|j| dw0[[i, j, 0]]).collect();
        let seed = config.seed.wrapping_add(i as u64);
        let o = nested_conditional_oracle(model.as_ref(), Feedback::Trained(&nets), &grid, &common, m_idio, model.score(), seed)?;
        let trained = s.row(i).to_vec();
        let max_abs_deviation = trained.iter().zip(&o.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        eprintln!("oracle path {i}: max |S - oracle| = {max_abs_deviation:.4}");
        oracle.push(OracleCheck {
            path: i,
            max_abs_deviation,
            trained,
            oracle: o.values,
            std_error: o.std_error,
        });
    }

    let report = ValidationFile {
        model: ck.model.clone(),
        iteration: ck.iteration,
        seed: ck.seed,
        analytic,
        z_discrepancy: z_report,
        m_idio,
        oracle,
    };
    let dir = out_dir(out, || file.parent().map(Path::to_path_buf).unwrap_or_default())?;
    write_json(&dir.join("error_report.json"), &report)?;
    if let Some(a) = &report.analytic {
        write_band_tables(&dir, a)?;
        for p in &a.processes {
            let g = &p.global;
            let r2 = g.r2.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"));
            eprintln!("{:>2}: bias {:+.4} rmse {:.4} R2 {r2}", p.name, g.bias, g.rmse);
        }
    }
    eprintln!("wrote {}", dir.join("error_report.json").display());
    Ok(())
}

fn report(run: &Path, out: Option<PathBuf>) -> Result<()> {
    let convergence = run.join("convergence.json");
    let validation = run.join("error_report.json");
    let checkpoint = run.join("checkpoint.json");
    if !convergence.exists() && !validation.exists() {
        return Err(Error::Usage(format!(
            "{} has neither convergence.json nor error_report.json",
            run.display()
        )));
    }
    let dir = out_dir(out, || run.to_path_buf())?;
    if convergence.exists() {
        let r: ConvergenceReport = read_json(&convergence)?;
        write_report_tables(&dir, &r)?;
    }
    if validation.exists() {
        let v: ValidationFile = read_json(&validation)?;
        if let Some(a) = &v.analytic {
            write_band_tables(&dir, a)?;
        }
    }
    if checkpoint.exists() {
        let (ck, nets) = load_checkpoint(&checkpoint, None)?;
        write_mpc_tables(&dir, &ck.config, &nets)?;
    }
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve { config, seed, out } => solve(&config, seed, out),
        Command::Sample {
            checkpoint,
            seed,
            paths,
            out,
        } => sample(&checkpoint, seed, paths, out),
        Command::Validate {
            checkpoint,
            model,
            oracle_paths,
            m_idio,
            out,
        } => validate(&checkpoint, model.as_deref(), oracle_paths, m_idio, out),
        Command::Report { run, out } => report(&run, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mvfbsde: error: {e}");
            ExitCode::FAILURE
        }
    }
}
