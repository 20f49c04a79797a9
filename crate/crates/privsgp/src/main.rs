//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use clap::{Parser, Subcommand};
use privsgp::config::{load_config, ConfigError, ConfigMap, LoadedConfig};
use privsgp::engine::{run, write_metrics_csv, write_states, PrivacyMode};
use privsgp::privacy::{
    accountant_epsilon, calibrate_sigma_accountant, calibrate_sigma_closed_form,
    optimal_iterations, utility_bound,
};
use privsgp::recipes::{run_recipe, RecipeError};
use privsgp::topology::{consensus_constants, verify_b_strong_connectivity};
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "privsgp", about = "Differentially private decentralized SGD simulator")]
struct Cli {
    /// Config file (flat dotted key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV/JSON artifacts (default: current dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run this many sweep points concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    parallel: usize,
    /// Overrides run.metrics_stride from the config.
    #[arg(long, global = true)]
    metrics_stride: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Executes a single run and writes metrics.csv (and states.bin).
    Run,
    /// Executes the configured sweep recipe.
    Sweep,
    /// Prints the planner's optimal iteration count and noise as JSON.
    PlanK,
    /// Prints calibrated per-node noise scales as JSON.
    Calibrate,
    /// Verifies B-strong connectivity and prints consensus constants.
    TopologyCheck,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RecipeError> for CliError {
    fn from(e: RecipeError) -> Self {
        match e {
            RecipeError::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("PRIVSGP_THREADS") {
        if let Ok(t) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
        } else {
            eprintln!("config error: PRIVSGP_THREADS must be a positive integer");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load(cli: &Cli) -> Result<LoadedConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this subcommand".into()))?;
    let map = ConfigMap::load(path)?;
    let mut loaded = load_config(&map)?;
    if let Some(seed) = cli.seed {
        loaded.run.seed = seed;
        if loaded.seeds == vec![0] || loaded.seeds.len() == 1 {
            loaded.seeds = vec![seed];
        }
    }
    if let Some(stride) = cli.metrics_stride {
        loaded.run.metrics_stride = stride;
    }
    Ok(loaded)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run => cmd_run(cli),
        Command::Sweep => cmd_sweep(cli),
        Command::PlanK => cmd_plan_k(cli),
        Command::Calibrate => cmd_calibrate(cli),
        Command::TopologyCheck => cmd_topology_check(cli),
    }
}

fn cmd_run(cli: &Cli) -> Result<(), CliError> {
    let loaded = load(cli)?;
    let problem = loaded.problem_spec.build(loaded.run.n())?;
    let result = run(&loaded.run, &problem, None).map_err(|e| CliError::Runtime(e.to_string()))?;
    let dir = out_dir(cli);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &result.metrics).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(dir.join("metrics.csv"), csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_states(&dir.join("states.bin"), &result.final_states)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let last = result.metrics.last().expect("metrics non-empty");
    println!(
        "{}",
        json!({
            "final_loss": last.loss,
            "final_grad_sq": last.grad_sq,
            "iterations": loaded.run.k,
            "sigma_per_node": result.sigmas,
        })
    );
    Ok(())
}

fn cmd_sweep(cli: &Cli) -> Result<(), CliError> {
    let loaded = load(cli)?;
    let summary = run_recipe(&loaded, &out_dir(cli), cli.parallel.max(1))?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{}",
        json!({
            "kind": summary.kind,
            "points": summary.points.len(),
            "argmin_label": summary.argmin_label,
            "k_star": summary.k_star,
        })
    );
    Ok(())
}

fn budgets_or_err(loaded: &LoadedConfig) -> Result<&[privsgp::privacy::PrivacyBudget], CliError> {
    if loaded.run.budgets.is_empty() {
        return Err(CliError::Config(
            "privacy.epsilon and privacy.delta (or per-node lists) are required".into(),
        ));
    }
    Ok(&loaded.run.budgets)
}

fn cmd_plan_k(cli: &Cli) -> Result<(), CliError> {
    let loaded = load(cli)?;
    let constants = loaded
        .constants
        .as_ref()
        .ok_or_else(|| CliError::Config("constants.* block is required for plan-k".into()))?;
    let budgets = budgets_or_err(&loaded)?;
    let n = loaded.run.n();
    let j = loaded.problem_spec.samples_per_node;
    let k_star = optimal_iterations(constants, budgets, n, j)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let g_bound = if loaded.run.clip.is_finite() { loaded.run.clip } else { constants.g };
    let sigma_per_node: Vec<f64> = budgets
        .iter()
        .map(|b| privsgp::privacy::closed_form_sigma(k_star, j, *b, g_bound, constants.c2))
        .collect();
    let predicted_bound = utility_bound(constants, budgets, n, j);
    println!(
        "{}",
        json!({
            "K_star": k_star,
            "sigma_per_node": sigma_per_node,
            "predicted_bound": predicted_bound,
        })
    );
    Ok(())
}

fn cmd_calibrate(cli: &Cli) -> Result<(), CliError> {
    let loaded = load(cli)?;
    let budgets = budgets_or_err(&loaded)?;
    if !loaded.run.clip.is_finite() {
        return Err(CliError::Config("privacy.clip (bound G) is required for calibrate".into()));
    }
    let j = loaded.problem_spec.samples_per_node;
    let k = loaded.run.k;
    let use_closed_form = matches!(loaded.run.privacy_mode, PrivacyMode::BudgetClosedForm);
    let mut sigma = Vec::with_capacity(budgets.len());
    let mut epsilon_check = Vec::with_capacity(budgets.len());
    for b in budgets {
        let s = if use_closed_form {
            calibrate_sigma_closed_form(k, j, *b, loaded.run.clip, loaded.run.c1, loaded.run.c2)
                .map_err(|e| CliError::Config(e.to_string()))?
        } else {
            calibrate_sigma_accountant(
                k,
                j,
                *b,
                loaded.run.clip,
                loaded.run.sensitivity_factor,
                loaded.run.lambda_max,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?
        };
        let sensitivity = loaded.run.sensitivity_factor * loaded.run.clip / j as f64;
        let eps = accountant_epsilon(s / sensitivity, 1.0 / j as f64, k, b.delta, loaded.run.lambda_max)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        sigma.push(s);
        epsilon_check.push(eps);
    }
    println!(
        "{}",
        json!({
            "sigma": sigma,
            "epsilon_check": epsilon_check,
            "mode": if use_closed_form { "closed-form" } else { "accountant" },
        })
    );
    Ok(())
}

fn cmd_topology_check(cli: &Cli) -> Result<(), CliError> {
    let loaded = load(cli)?;
    let schedule = &loaded.run.schedule;
    let window = loaded.run.window.unwrap_or_else(|| schedule.period());
    let report = verify_b_strong_connectivity(schedule, window);
    let dim = match loaded.constants.as_ref() {
        Some(c) => c.d,
        None => loaded.problem_spec.build(schedule.n)?.dim(),
    };
    let constants = consensus_constants(schedule, window, dim)
        .map(|c| {
            json!({
                "eps_min": c.eps_min,
                "delta": c.delta,
                "lambda": c.lambda,
                "q": c.q,
                "C": if c.c.is_finite() { json!(c.c) } else { json!("inf") },
            })
        })
        .unwrap_or(json!(null));
    println!(
        "{}",
        json!({
            "n": schedule.n,
            "window_B": window,
            "connected": report.connected,
            "union_diameter": report.diameter,
            "constants": constants,
        })
    );
    if !report.connected {
        return Err(CliError::Runtime(format!(
            "schedule is not {window}-strongly connected"
        )));
    }
    Ok(())
}
