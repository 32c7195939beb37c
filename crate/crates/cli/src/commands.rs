//! Subcommand definitions and their implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use scmarket_core::dynamics::{integrate, perturb_state, IntegrationOptions};
use scmarket_core::equilibrium::{
    interior_point_iterate, solve_kkt_closed_form, tatonnement, EquilibriumResult, SolveStatus, Warning,
};
use scmarket_core::welfare::{compare, WelfareOptions};
use scmarket_core::{DynamicState, IntegrationMethod, MarketScenario, PerturbationSpec, SolverOptions, TerminalStatus};

use crate::error::CliError;
use crate::output::{ensure_dir, num, write_csv, RunManifest};
use crate::scenario_file::load_scenario;
use crate::sweep::{linspace, stability_map, SweepGrid};

#[derive(Debug, Parser)]
#[command(
    name = "scmarket",
    version,
    args_override_self = true,
    about = "Small-cloud market equilibrium, dynamics and stability analysis"
)]
pub struct Cli {
    /// Directory for CSV outputs and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for randomized perturbations.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for sweeps (0: one per core). Never changes results.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute the market equilibrium.
    Solve(SolveArgs),
    /// Integrate the gradient-play dynamics from a perturbed equilibrium.
    Simulate(SimulateArgs),
    /// Largest real eigenvalue part over a grid of time constants and curtailment.
    StabilityMap(MapArgs),
    /// Compare utilitarian, egalitarian and Rawlsian allocations.
    Welfare(WelfareArgs),
    /// Check a scenario file and report violations.
    Validate(ValidateArgs),
    /// Repeat the run recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolveMethod {
    ClosedForm,
    Tatonnement,
    InteriorPoint,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub scenario: PathBuf,
    #[arg(long, value_enum, default_value = "closed-form")]
    pub method: SolveMethod,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub max_iterations: u64,
    /// Step size of the iterative methods.
    #[arg(long, default_value_t = 0.01)]
    pub step_scale: f64,
    /// Clamp best responses to the VM bounds.
    #[arg(long)]
    pub enforce_bounds: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Integrator {
    Rk4,
    Euler,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub t_end: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, value_enum, default_value = "rk4")]
    pub method: Integrator,
    /// Relative perturbation of every equilibrium component, drawn
    /// uniformly from `[-p, p]`.
    #[arg(long, default_value_t = 0.01)]
    pub perturb: f64,
    /// Keep every n-th integration step.
    #[arg(long, default_value_t = 1)]
    pub record_every: usize,
    /// Track capacity multipliers.
    #[arg(long)]
    pub capacity: bool,
    /// Supply perturbation factor, as `SC_ID=FACTOR` (repeatable).
    #[arg(long = "supply-factor", value_parser = parse_factor)]
    pub supply_factors: Vec<(String, f64)>,
    /// Integrate to `t_end` even after the field vanishes.
    #[arg(long)]
    pub no_early_stop: bool,
}

fn parse_factor(s: &str) -> Result<(String, f64), String> {
    let (id, f) = s.split_once('=').ok_or_else(|| format!("expected SC_ID=FACTOR, got `{s}`"))?;
    let f: f64 = f.parse().map_err(|e| format!("bad factor in `{s}`: {e}"))?;
    Ok((id.to_string(), f))
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected K1,K2, got `{s}`"))?;
    let parse = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("bad value in `{s}`: {e}"));
    Ok((parse(a)?, parse(b)?))
}

#[derive(Debug, Args)]
pub struct MapArgs {
    pub scenario: PathBuf,
    /// Smallest price time constant. The sweep starts above zero because a
    /// zero time constant divides by zero in the price equation.
    #[arg(long, default_value_t = 0.05)]
    pub tau_rho_min: f64,
    #[arg(long, default_value_t = 5.0)]
    pub tau_rho_max: f64,
    #[arg(long, default_value_t = 25)]
    pub tau_rho_points: usize,
    #[arg(long, default_value_t = 0.05)]
    pub tau_ag_min: f64,
    #[arg(long, default_value_t = 0.2)]
    pub tau_ag_max: f64,
    #[arg(long, default_value_t = 16)]
    pub tau_ag_points: usize,
    /// Curtailment pair `K1,K2` (repeatable; default 0,0 0.02,0.02 0.05,0.05).
    #[arg(long = "kappa", value_parser = parse_pair)]
    pub kappa: Vec<(f64, f64)>,
}

impl MapArgs {
    pub fn grid(&self) -> SweepGrid {
        SweepGrid {
            tau_rho_values: linspace(self.tau_rho_min, self.tau_rho_max, self.tau_rho_points),
            tau_ag_values: linspace(self.tau_ag_min, self.tau_ag_max, self.tau_ag_points),
            kappa_values: if self.kappa.is_empty() { SweepGrid::default().kappa_values } else { self.kappa.clone() },
        }
    }
}

#[derive(Debug, Args)]
pub struct WelfareArgs {
    pub scenario: PathBuf,
    /// Starting points for the egalitarian utility window search.
    #[arg(long, default_value_t = WelfareOptions::default().window_grid_points)]
    pub grid_points: usize,
    #[arg(long, default_value_t = WelfareOptions::default().bisection_iterations)]
    pub bisection_iterations: usize,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub scenario: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

/// What a command produced: files written and a status for the manifest.
struct Outcome {
    outputs: Vec<String>,
    status: String,
    grid: Option<SweepGrid>,
    failure: Option<CliError>,
}

fn solver_err(e: impl ToString) -> CliError {
    CliError::Solver(e.to_string())
}

fn label_parts(label: &str) -> (&str, &str) {
    label.split_once(':').unwrap_or((label, ""))
}

fn warning_text(w: &Warning) -> String {
    match w {
        Warning::NegativePrice { sc, rho } => format!("negative price {rho} at {sc}"),
        Warning::OutOfBounds { component, value, min, max } => format!("{component} = {value} outside [{min}, {max}]"),
    }
}

fn solve(args: &SolveArgs, scenario: &MarketScenario, out: &Path) -> Result<Outcome, CliError> {
    let opts = SolverOptions {
        tolerance: args.tolerance,
        max_iterations: args.max_iterations,
        step_scale: args.step_scale,
        enforce_bounds: args.enforce_bounds,
    };
    let result: EquilibriumResult = match args.method {
        SolveMethod::ClosedForm => solve_kkt_closed_form(scenario),
        SolveMethod::Tatonnement => tatonnement(scenario, &opts),
        SolveMethod::InteriorPoint => interior_point_iterate(scenario, &opts),
    }
    .map_err(solver_err)?;
    let labels = scenario.state_labels().map_err(solver_err)?;
    let mut rows: Vec<Vec<String>> = labels
        .iter()
        .zip(result.state.to_vector())
        .map(|(l, v)| {
            let (kind, id) = label_parts(l);
            vec![kind.to_string(), id.to_string(), num(v)]
        })
        .collect();
    rows.push(vec!["kkt_residual".into(), String::new(), num(result.kkt_residual)]);
    rows.push(vec!["iterations".into(), String::new(), result.iterations.to_string()]);
    rows.push(vec!["method".into(), String::new(), result.method.to_string()]);
    let status = match result.status {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIterations => "max_iterations",
        SolveStatus::Diverged => "diverged",
    };
    rows.push(vec!["status".into(), String::new(), status.into()]);
    for w in &result.warnings {
        rows.push(vec!["warning".into(), String::new(), warning_text(w)]);
    }
    let path = out.join("solve.csv");
    write_csv(&path, &["component".into(), "id".into(), "value".into()], &rows)?;
    let failure = (result.status != SolveStatus::Converged)
        .then(|| CliError::NotConverged(format!("{} stopped with status {status}", result.method)));
    Ok(Outcome { outputs: vec!["solve.csv".into()], status: status.into(), grid: None, failure })
}

fn simulate(args: &SimulateArgs, scenario: &MarketScenario, seed: u64, out: &Path) -> Result<Outcome, CliError> {
    let eq = solve_kkt_closed_form(scenario).map_err(solver_err)?.state;
    let base = if args.capacity { DynamicState::with_capacity(eq) } else { DynamicState::without_capacity(eq) };
    let x0 = perturb_state(&base, args.perturb, seed).map_err(solver_err)?;
    let opts = IntegrationOptions {
        t_end: args.t_end,
        dt: args.dt,
        method: match args.method {
            Integrator::Rk4 => IntegrationMethod::Rk4,
            Integrator::Euler => IntegrationMethod::Euler,
        },
        record_every: args.record_every,
        stop_on_convergence: !args.no_early_stop,
    };
    let perturbation = (!args.supply_factors.is_empty()).then(|| PerturbationSpec {
        supply_factors: args.supply_factors.iter().cloned().collect::<BTreeMap<_, _>>(),
        ..Default::default()
    });
    let tr = integrate(scenario, &x0, &opts, perturbation.as_ref()).map_err(solver_err)?;
    let mut header = vec!["t".to_string()];
    header.extend(scenario.state_labels().map_err(solver_err)?);
    if args.capacity {
        header.extend(scenario.scs.iter().map(|s| format!("mu:{}", s.id)));
    }
    let rows: Vec<Vec<String>> = tr
        .times
        .iter()
        .zip(&tr.states)
        .map(|(t, st)| std::iter::once(num(*t)).chain(st.to_vector().into_iter().map(num)).collect())
        .collect();
    write_csv(&out.join("trajectory.csv"), &header, &rows)?;
    let status = tr.terminal_status.as_str().to_string();
    let failure = (tr.terminal_status == TerminalStatus::Diverged)
        .then(|| CliError::NotConverged(format!("trajectory diverged by t = {}", tr.times.last().unwrap_or(&0.0))));
    Ok(Outcome { outputs: vec!["trajectory.csv".into()], status, grid: None, failure })
}

fn map(args: &MapArgs, scenario: &MarketScenario, jobs: usize, out: &Path) -> Result<Outcome, CliError> {
    let grid = args.grid();
    let rows = stability_map(scenario, &grid, jobs)?;
    let header: Vec<String> =
        ["tau_rho", "tau_ag", "kappa1", "kappa2", "max_real_eig", "is_hurwitz"].map(String::from).to_vec();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.cell.tau_rho),
                num(r.cell.tau_ag),
                num(r.cell.kappa1),
                num(r.cell.kappa2),
                num(r.max_real_eig),
                r.is_hurwitz.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("stability_map.csv"), &header, &table)?;
    let stable = rows.iter().filter(|r| r.is_hurwitz).count();
    Ok(Outcome {
        outputs: vec!["stability_map.csv".into()],
        status: format!("{} cells, {stable} Hurwitz", rows.len()),
        grid: Some(grid),
        failure: None,
    })
}

fn welfare(args: &WelfareArgs, scenario: &MarketScenario, seed: u64, out: &Path) -> Result<Outcome, CliError> {
    let opts = WelfareOptions {
        window_grid_points: args.grid_points,
        bisection_iterations: args.bisection_iterations,
        seed,
        ..Default::default()
    };
    let report = compare(scenario, &opts).map_err(solver_err)?;
    let labels = scenario.state_labels().map_err(solver_err)?;
    let mut rows = Vec::new();
    for (kind, state) in &report.allocations {
        let t = kind.as_str().to_string();
        rows.push(vec![t.clone(), "utilitarian_sw".into(), String::new(), num(report.utilitarian_sw[kind])]);
        rows.push(vec![t.clone(), "sw_ratio".into(), String::new(), num(report.sw_ratio[kind])]);
        for (sc, r) in scenario.scs.iter().zip(&report.sc_cost_ratios[kind]) {
            rows.push(vec![t.clone(), "sc_cost_ratio".into(), sc.id.clone(), num(*r)]);
        }
        for (c, r) in scenario.customers.iter().zip(&report.customer_utility_ratios[kind]) {
            rows.push(vec![t.clone(), "customer_utility_ratio".into(), c.id.clone(), num(*r)]);
        }
        // regulator allocations carry quantities only; prices are omitted
        for (l, v) in labels.iter().zip(state.to_vector()) {
            if !l.starts_with("rho:") {
                rows.push(vec![t.clone(), "allocation".into(), l.clone(), num(v)]);
            }
        }
    }
    let header = ["welfare_type", "metric", "stakeholder", "value"].map(String::from).to_vec();
    write_csv(&out.join("welfare.csv"), &header, &rows)?;
    Ok(Outcome { outputs: vec!["welfare.csv".into()], status: "solved".into(), grid: None, failure: None })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Solve(_) => "solve",
        Command::Simulate(_) => "simulate",
        Command::StabilityMap(_) => "stability-map",
        Command::Welfare(_) => "welfare",
        Command::Validate(_) => "validate",
        Command::Rerun(_) => "rerun",
    }
}

fn scenario_path(c: &Command) -> Option<&Path> {
    match c {
        Command::Solve(a) => Some(&a.scenario),
        Command::Simulate(a) => Some(&a.scenario),
        Command::StabilityMap(a) => Some(&a.scenario),
        Command::Welfare(a) => Some(&a.scenario),
        Command::Validate(a) => Some(&a.scenario),
        Command::Rerun(_) => None,
    }
}

/// Runs a parsed command line; `args` are recorded in the manifest.
pub fn execute(cli: &Cli, args: &[String]) -> Result<String, CliError> {
    if let Command::Rerun(r) = &cli.command {
        let manifest = RunManifest::read(&r.manifest)?;
        let mut replay = manifest.args.clone();
        // the recorded output directory stands unless a new one was given
        if args.iter().any(|a| a == "--out" || a.starts_with("--out=")) {
            replay.push("--out".into());
            replay.push(cli.out.display().to_string());
        }
        let parsed = Cli::try_parse_from(std::iter::once("scmarket".to_string()).chain(replay.iter().cloned()))
            .map_err(|e| CliError::Usage(format!("manifest arguments do not parse: {e}")))?;
        if matches!(parsed.command, Command::Rerun(_)) {
            return Err(CliError::Usage("a manifest cannot replay another rerun".into()));
        }
        return execute(&parsed, &replay);
    }
    let path = scenario_path(&cli.command).expect("every other command takes a scenario");
    let scenario = load_scenario(path)?;
    ensure_dir(&cli.out)?;
    let outcome = match &cli.command {
        Command::Solve(a) => solve(a, &scenario, &cli.out)?,
        Command::Simulate(a) => simulate(a, &scenario, cli.seed, &cli.out)?,
        Command::StabilityMap(a) => map(a, &scenario, cli.jobs, &cli.out)?,
        Command::Welfare(a) => welfare(a, &scenario, cli.seed, &cli.out)?,
        Command::Validate(_) => Outcome {
            outputs: Vec::new(),
            status: format!("valid: {} SCs, {} customers", scenario.scs.len(), scenario.customers.len()),
            grid: None,
            failure: None,
        },
        Command::Rerun(_) => unreachable!(),
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command_name(&cli.command).into(),
        args: args.to_vec(),
        scenario: Some(path.display().to_string()),
        seed: cli.seed,
        jobs: cli.jobs,
        grid: outcome.grid,
        outputs: outcome.outputs,
        status: outcome.status.clone(),
    };
    manifest.write(&cli.out)?;
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(outcome.status),
    }
}
