use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use mbdp::agent::{ablation_sweep, four_variant_grids, mbdp_train, robustness_grid, PolicyParams, TrainError, TrainOptions};
use mbdp::config::{apply_override, ConfigError, TrainConfig};
use mbdp::run::{config_run_id, prepare_out_dir, write_residual_trace, RunError, RunManifest};
use mbdp::seed;
use mbdp::verify::{self, VerifyOptions};

/// Model-based double-dropout planning: train, verify and evaluate.
#[derive(Debug, Parser)]
#[command(name = "mbdp", version, about)]
struct Cli {
    /// Cap on worker threads for ensemble training, rollouts and
    /// evaluation. `--workers 1` makes runs bit-reproducible.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent and write metrics, checkpoints and a manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Do not print per-epoch summary lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Check the dropout/CVaR identities and bounds on random enumerable MDPs.
    Verify {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately negate the CVaR under test; the run must fail.
        #[arg(long)]
        inject_cvar_sign_flip: bool,
    },
    /// Evaluate a trained policy on a grid of mass/friction perturbations.
    RobustnessGrid {
        /// Run directory produced by `train`.
        #[arg(long, required_unless_present = "four_variants", conflicts_with = "four_variants")]
        run: Option<PathBuf>,
        /// Train no-dropout, alpha-only, beta-only and both variants from
        /// the given config and emit one matrix each.
        #[arg(long)]
        four_variants: bool,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 1.0, 1.2])]
        masses: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 1.0, 1.2])]
        frictions: Vec<f64>,
        /// Episodes per cell (defaults to run.eval_episodes).
        #[arg(long)]
        episodes: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train one cell per (alpha, beta, seed) and record efficiency and
    /// robustness.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Add an alpha = beta = 0 reference cell per seed.
        #[arg(long)]
        baseline: bool,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 1.0, 1.2])]
        masses: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 1.0, 1.2])]
        frictions: Vec<f64>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write the scaled update-residual curve of a finished run.
    ResidualTrace {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

/// Precedence: named flags > `--set` > config file (or manifest) > defaults.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long, conflicts_with = "from_manifest")]
    config: Option<PathBuf>,
    /// Reuse the resolved config of an earlier run (its directory or
    /// manifest file).
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    /// Override one key, e.g. `--set model.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory (default: `$MBDP_OUT_ROOT/<command>-<run id>`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "MBDP_OUT_ROOT", default_value = "runs", hide_env_values = true)]
    out_root: PathBuf,
    /// Replace an existing run directory.
    #[arg(long)]
    overwrite: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, ConfigError> {
        let mut overrides = self.set.clone();
        let named = [
            ("dropout.alpha", self.alpha.map(|v| format!("{v:?}"))),
            ("dropout.beta", self.beta.map(|v| format!("{v:?}"))),
            ("dropout.gamma", self.gamma.map(|v| format!("{v:?}"))),
            ("run.epochs", self.epochs.map(|v| v.to_string())),
            ("run.env", self.env.as_ref().map(|v| format!("{v:?}"))),
            ("run.seed", self.seed.map(|v| v.to_string())),
        ];
        overrides.extend(named.into_iter().filter_map(|(k, v)| v.map(|v| format!("{k}={v}"))));
        match &self.from_manifest {
            None => TrainConfig::load(self.config.as_deref(), &overrides),
            Some(m) => {
                let base = RunManifest::read(m).map_err(|e| ConfigError::Invalid(vec![e.to_string()]))?.config;
                let mut table: toml::Table = base.to_toml_string().parse().expect("serialized config parses");
                for o in &overrides {
                    apply_override(&mut table, o)?;
                }
                let cfg = TrainConfig::from_table(table)?;
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }
}

impl OutArgs {
    fn dir(&self, command: &str, run_id: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.out_root.join(format!("{command}-{run_id}")))
    }
}

enum Failure {
    Config(String),
    Numeric(String),
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            e if e.is_numeric() => Failure::Numeric(e.to_string()),
            e => Failure::Other(e.into()),
        }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => c.into(),
            e => Failure::Other(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

struct Ctx {
    workers: usize,
    args: Vec<String>,
}

/// Open a fresh run directory and write its manifest.
fn start_run(ctx: &Ctx, command: &str, cfg: &TrainConfig, out: &OutArgs) -> Result<(PathBuf, RunManifest), Failure> {
    let dir = out.dir(command, &config_run_id(cfg));
    prepare_out_dir(&dir, out.overwrite)?;
    let manifest = RunManifest::new(command, ctx.args.clone(), cfg, &dir, ctx.workers);
    manifest.write(&dir)?;
    Ok((dir, manifest))
}

/// Record how the run ended, then hand the result back.
fn finish_run<T>(dir: &Path, mut manifest: RunManifest, result: Result<T, Failure>) -> Result<T, Failure> {
    let status = match &result {
        Ok(_) => "ok".to_string(),
        Err(Failure::Config(m) | Failure::Numeric(m)) => m.clone(),
        Err(Failure::Other(e)) => format!("{e:#}"),
    };
    manifest.finish(dir, &status)?;
    result
}

fn cmd_train(ctx: &Ctx, config: &ConfigArgs, out: &OutArgs, quiet: bool) -> Result<(), Failure> {
    let cfg = config.resolve()?;
    let (dir, manifest) = start_run(ctx, "train", &cfg, out)?;
    eprintln!("run {} -> {}", manifest.run_id, dir.display());
    let opts = TrainOptions {
        out_dir: Some(dir.clone()),
        run_id: manifest.run_id.clone(),
        verbose: !quiet,
    };
    let result = mbdp_train(&cfg, &opts).map_err(Failure::from).map(|o| {
        if let Some(last) = o.reports.last() {
            println!(
                "final epoch {}: eval return {:.3} ± {:.3} over {} episodes",
                last.epoch, last.eval_return, last.eval_return_std, cfg.run.eval_episodes
            );
        } else {
            println!("no epochs run");
        }
    });
    finish_run(&dir, manifest, result)
}

fn cmd_verify(trials: usize, tol: f64, seed: u64, flip: bool) -> Result<(), Failure> {
    if trials == 0 {
        eprintln!("warning: --trials 0: only the fixed parameter-grid check runs; MDP checks pass vacuously");
    }
    let started = Instant::now();
    let rows = verify::run(&VerifyOptions {
        trials,
        tolerance: tol,
        seed,
        inject_cvar_sign_flip: flip,
    })
    .context("building verification cases")?;
    println!("{:<6} {:>8} {:>14}  check", "result", "cases", "max violation");
    for r in &rows {
        println!(
            "{:<6} {:>8} {:>14.3e}  {}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.cases,
            r.max_violation,
            r.name
        );
    }
    println!("tolerance {tol:e}, {trials} trials, {:.2}s", started.elapsed().as_secs_f64());
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Other(anyhow::anyhow!("{failed} check(s) exceeded the tolerance")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_grid(
    ctx: &Ctx,
    run: Option<&Path>,
    masses: &[f64],
    frictions: &[f64],
    episodes: Option<usize>,
    config: &ConfigArgs,
    out: &OutArgs,
) -> Result<(), Failure> {
    match run {
        Some(run_dir) => {
            let source = RunManifest::read(run_dir)?;
            let mut cfg = source.config.clone();
            if let Some(n) = episodes {
                cfg.run.eval_episodes = n;
            }
            let (dir, manifest) = start_run(ctx, "robustness-grid", &cfg, out)?;
            let result = (|| -> Result<(), Failure> {
                let ckpt = run_dir.join("checkpoints").join("final").join("agent");
                let agent = PolicyParams::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
                let kind = cfg.env_kind()?;
                let grid_seed = seed::derive(cfg.run.seed, "robustness-grid", &[]);
                let g = robustness_grid(&agent, kind, masses, frictions, cfg.run.eval_episodes, cfg.dropout.gamma, grid_seed)
                    .context("evaluating grid")?;
                g.write_csv(&dir.join("grid.csv"), &source.run_id).context("writing grid.csv")?;
                print_grid("policy", &g);
                Ok(())
            })();
            finish_run(&dir, manifest, result)
        }
        None => {
            let mut cfg = config.resolve()?;
            if let Some(n) = episodes {
                cfg.run.eval_episodes = n;
            }
            let (dir, manifest) = start_run(ctx, "robustness-grid", &cfg, out)?;
            let result = four_variant_grids(&cfg, masses, frictions, Some(&dir), &manifest.run_id)
                .map_err(Failure::from)
                .map(|grids| {
                    for (v, g) in &grids {
                        print_grid(v.name, g);
                    }
                });
            finish_run(&dir, manifest, result)
        }
    }
}

fn print_grid(name: &str, g: &mbdp::agent::GridResult) {
    println!("{name}: mean {:.3}", g.mean());
    print!("  mass\\friction");
    for c in &g.frictions {
        print!(" {c:>9}");
    }
    println!();
    for (m, row) in g.masses.iter().zip(&g.returns) {
        print!("  {m:>13}");
        for v in row {
            print!(" {v:>9.3}");
        }
        println!();
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    ctx: &Ctx,
    alphas: &[f64],
    betas: &[f64],
    seeds: &[u64],
    baseline: bool,
    masses: &[f64],
    frictions: &[f64],
    config: &ConfigArgs,
    out: &OutArgs,
) -> Result<(), Failure> {
    let cfg = config.resolve()?;
    let (dir, manifest) = start_run(ctx, "sweep", &cfg, out)?;
    let result = (|| -> Result<(), Failure> {
        let rows = ablation_sweep(&cfg, alphas, betas, seeds, baseline, masses, frictions, Some(&dir), &manifest.run_id);
        let mut w = csv::Writer::from_path(dir.join("sweep.csv")).context("creating sweep.csv")?;
        for r in &rows {
            w.serialize(r).context("writing sweep.csv")?;
            println!(
                "alpha {:<5} beta {:<5} seed {:<4}{} final {:>9.3} robust {:>9.3} {}",
                r.alpha,
                r.beta,
                r.seed,
                if r.baseline { " (baseline)" } else { "" },
                r.final_return,
                r.robust_return,
                r.error
            );
        }
        w.flush().context("writing sweep.csv")?;
        let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
        if failed > 0 {
            eprintln!("warning: {failed} of {} cells failed; see the error column", rows.len());
        }
        Ok(())
    })();
    finish_run(&dir, manifest, result)
}

fn cmd_residual_trace(run: &Path, overwrite: bool) -> Result<(), Failure> {
    let t = write_residual_trace(run, overwrite)?;
    println!("wrote {} ({} epochs)", run.join(mbdp::run::TRACE_FILE).display(), t.rows.len());
    println!(
        "eta > 0 in {:.1}% of {} epochs with a residual; {:.1}% over the first half",
        100.0 * t.positive_fraction,
        t.finite,
        100.0 * t.early_positive_fraction
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let workers = cli.workers.unwrap_or(0);
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring worker pool")?;
    }
    let ctx = Ctx {
        workers,
        args: std::env::args().skip(1).collect(),
    };
    match &cli.command {
        Command::Train { config, out, quiet } => cmd_train(&ctx, config, out, *quiet),
        Command::Verify {
            trials,
            tol,
            seed,
            inject_cvar_sign_flip,
        } => cmd_verify(*trials, *tol, *seed, *inject_cvar_sign_flip),
        Command::RobustnessGrid {
            run,
            four_variants: _,
            masses,
            frictions,
            episodes,
            config,
            out,
        } => cmd_grid(&ctx, run.as_deref(), masses, frictions, *episodes, config, out),
        Command::Sweep {
            alphas,
            betas,
            seeds,
            baseline,
            masses,
            frictions,
            config,
            out,
        } => cmd_sweep(&ctx, alphas, betas, seeds, *baseline, masses, frictions, config, out),
        Command::ResidualTrace { run, overwrite } => cmd_residual_trace(run, *overwrite),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("config error: {m}"),
                Failure::Numeric(m) => eprintln!("numeric failure: {m}"),
                Failure::Other(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
