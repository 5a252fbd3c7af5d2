use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use das::driver::{
    compare, comparison_csv, flow_diagnostic, grid_mse, load_config, load_run, origin_grid, relative_error, resolve_config,
    residual_variance, run_dir_name, run_with_progress, tail_probability, write_run_dir, RunConfig, Strategy,
};
use das::flow::FlowModel;
use das::SurrogateNet;

/// Neural PDE solver with residual-driven adaptive sampling.
#[derive(Parser)]
#[command(name = "das", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed and write a run directory for each.
    Run(RunArgs),
    /// Recompute error metrics from a run directory's checkpoint.
    Evaluate(EvaluateArgs),
    /// Seed-average metrics across run directories into one CSV.
    Compare(CompareArgs),
    /// Report how well a run's final flow matches its residual distribution (d <= 2).
    Diag(DiagArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration merged onto the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset to start from: peak2d, twopeak2d, linear_hd, nonlinear_hd.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Parent directory for the run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Dotted override such as `train.batch=250`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Print every metrics row while training.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    run_dir: PathBuf,
    /// Nodes per axis of the full-domain grid (defaults to the run's setting).
    #[arg(long)]
    grid_n: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    run_dirs: Vec<PathBuf>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagArgs {
    run_dir: PathBuf,
    /// Quadrature nodes per axis (defaults to the run's setting, or 128).
    #[arg(long)]
    grid: Option<usize>,
    /// Also report the flow mass where `|r²/p̂ - ∫r²|` exceeds this threshold.
    #[arg(long)]
    tail: Option<f64>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Diag(a) => cmd_diag(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn resolve(a: &RunArgs) -> Result<RunConfig> {
    let mut overrides = a.overrides.clone();
    if let Some(s) = a.strategy {
        overrides.push(format!("sampling.strategy={}", s.name()));
    }
    if let Some(seeds) = &a.seeds {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("seeds=[{}]", list.join(",")));
    }
    let cfg = match &a.config {
        Some(path) => load_config(path, a.preset.as_deref(), &overrides),
        None => {
            if a.preset.is_none() {
                bail!("either --config or --preset is required");
            }
            resolve_config(a.preset.as_deref(), None, &overrides)
        }
    };
    Ok(cfg?)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = resolve(&a)?;
    let dirs: Vec<PathBuf> = cfg.seeds.iter().map(|&s| a.out.join(run_dir_name(&cfg, s))).collect();
    if let Some(d) = dirs.iter().find(|d| d.exists()) {
        bail!("{} already exists; refusing to overwrite", d.display());
    }
    for (&seed, dir) in cfg.seeds.iter().zip(&dirs) {
        let out = run_with_progress(&cfg, seed, |row| {
            if a.verbose {
                eprintln!("{row:?}");
            }
        })
        .with_context(|| format!("seed {seed} failed"))?;
        write_run_dir(dir, &cfg, &out).with_context(|| format!("writing {}", dir.display()))?;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6e}"));
        println!(
            "{}: grid_error={} rel_error={} loss={}",
            dir.display(),
            fmt(out.record.last(|r| r.grid_error)),
            fmt(out.record.last(|r| r.rel_error)),
            fmt(out.record.last(|r| r.loss)),
        );
    }
    Ok(())
}

fn load_net(dir: &Path) -> Result<SurrogateNet> {
    let path = dir.join("net.json");
    SurrogateNet::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let run = load_run(&a.run_dir)?;
    let cfg = &run.config;
    let problem = cfg.build_problem()?;
    let net = load_net(&a.run_dir)?;
    let d = problem.dim();
    let grid_n = a.grid_n.unwrap_or(cfg.eval.grid_n);
    if grid_n > 0 && d <= 3 {
        println!("grid_error={:.16e}", grid_mse(&net, &problem, grid_n)?);
    }
    let n = cfg.local_n(d);
    if n > 0 {
        let g = origin_grid(d, n, cfg.eval.local_half_width)?;
        println!("rel_error={:.16e}", relative_error(&net, &problem, &g)?);
        if g.rows() >= 2 {
            println!("residual_variance={:.16e}", residual_variance(&net, &problem, &g)?);
        }
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    if a.run_dirs.len() < 2 {
        bail!("compare needs at least two run directories");
    }
    let runs = a.run_dirs.iter().map(|d| load_run(d)).collect::<das::Result<Vec<_>>>()?;
    let csv = comparison_csv(&compare(&runs)?);
    match a.out {
        Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_diag(a: DiagArgs) -> Result<()> {
    let run = load_run(&a.run_dir)?;
    let problem = run.config.build_problem()?;
    let net = load_net(&a.run_dir)?;
    let path = a.run_dir.join("flow.json");
    if !path.exists() {
        bail!("{} has no flow checkpoint (strategy {})", a.run_dir.display(), run.config.sampling.strategy.name());
    }
    let flow = FlowModel::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let n = a.grid.or((run.config.eval.kl_grid > 0).then_some(run.config.eval.kl_grid)).unwrap_or(128);
    let diag = flow_diagnostic(&flow, &net, &problem, n)?;
    match diag.kl {
        Some(kl) => println!("kl={kl:.16e}"),
        None => println!("kl=undefined (residual vanishes on the grid)"),
    }
    println!("c_hat={:.16e}\ntau1={:.16e}\ntau2={:.16e}", diag.c_hat, diag.tau1, diag.tau2);
    if let Some(t) = a.tail {
        let r2 = |x: &das::Mat| Ok(problem.residual_batch(&net, x)?.into_iter().map(|r| r * r).collect());
        let p = tail_probability(problem.domain(), n, t, r2, |x| flow.log_density(x))?;
        println!("tail_probability={p:.16e}");
    }
    Ok(())
}
