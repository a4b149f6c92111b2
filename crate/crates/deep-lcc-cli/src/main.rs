//! Batch front end: data collection, model analysis, closed-loop runs and
//! three-way fuel comparisons, all driven by one TOML configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure
//! (collision or solver failure), 4 missing prerequisite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use deep_lcc::config::RunConfig;

mod svg;
use deep_lcc::controller::{DeepLccController, EquilibriumEstimation, StepMeta};
use deep_lcc::data::{collect_dataset, is_persistently_exciting, partition, TrajectoryDataset};
use deep_lcc::error::Error;
use deep_lcc::model::{analyze_controllability, analyze_observability, model_from_platoon, InputChoice};
use deep_lcc::mpc::{MpcController, MpcParams};
use deep_lcc::scenario::run_comparison;
use deep_lcc::trajectory::{RunOutcome, TrajectoryLog};
use deep_lcc::vehicle::{simulate_closed_loop, ZeroControl};

#[derive(Parser)]
#[command(name = "deep-lcc", version, about = "Data-driven predictive cruise control for mixed platoons")]
struct Cli {
    /// Path to the run configuration file.
    #[arg(long, global = true, default_value = "configs/experiment.toml")]
    config: PathBuf,
    /// Override the scenario seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print progress details to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an excitation dataset from the nonlinear platoon.
    Collect {
        /// Override the number of samples from the configuration.
        #[arg(long = "T")]
        samples: Option<usize>,
    },
    /// Controllability/observability analysis of the linearized model.
    Analyze {
        /// Adjoin the head-vehicle channel to the input matrix.
        #[arg(long)]
        combined: bool,
    },
    /// Closed-loop simulation under the configured scenario.
    Simulate {
        #[arg(long, value_enum, default_value_t = ControllerChoice::Deeplcc)]
        controller: ControllerChoice,
        /// Directory holding dataset.csv/dataset.json (defaults to the
        /// output directory).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also emit self-contained SVG velocity/spacing charts.
        #[arg(long)]
        svg: bool,
    },
    /// Run all-HDV, MPC and DeeP-LCC on the same scenario and compare fuel.
    Compare {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Override the scenario profile from the configuration.
        #[arg(long, value_parser = ["eudc", "brake"])]
        profile: Option<String>,
        /// Split the report into the scenario's phase windows.
        #[arg(long)]
        phases: bool,
        /// Also emit self-contained SVG velocity/spacing charts per strategy.
        #[arg(long)]
        svg: bool,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ControllerChoice {
    None,
    Mpc,
    Deeplcc,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            let payload = serde_json::json!({
                "error": err.root_cause().to_string(),
                "detail": format!("{err:#}"),
                "exit_code": code,
            });
            eprintln!("{payload}");
            ExitCode::from(code)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        match e {
            Error::InvalidConfig(_) | Error::DimensionMismatch(_) | Error::NoEquilibrium { .. } => 2,
            Error::InsufficientData { .. } => 2,
            Error::Collision { .. } | Error::SolverFailure { .. } | Error::UnobservableModel(_) => 3,
            Error::Io(_) => 4,
        }
    } else if err.downcast_ref::<MissingPrerequisite>().is_some() {
        4
    } else if err.downcast_ref::<RuntimeFailure>().is_some() {
        3
    } else {
        2
    }
}

#[derive(Debug)]
struct MissingPrerequisite(String);

impl std::fmt::Display for MissingPrerequisite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing prerequisite: {}", self.0)
    }
}

impl std::error::Error for MissingPrerequisite {}

#[derive(Debug)]
struct RuntimeFailure(String);

impl std::fmt::Display for RuntimeFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run failed: {}", self.0)
    }
}

impl std::error::Error for RuntimeFailure {}

fn run(cli: &Cli) -> anyhow::Result<()> {
    // Full validation happens at load, before any side effect.
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    let out_dir = cfg.output.dir.clone();

    match &cli.command {
        Command::Collect { samples } => {
            cmd_collect(&cfg, *samples, cli.seed, &out_dir, cli.verbose)
        }
        Command::Analyze { combined } => cmd_analyze(&cfg, *combined, &out_dir),
        Command::Simulate { controller, dataset, svg } => {
            cmd_simulate(&cfg, *controller, dataset.as_deref(), *svg, &out_dir, cli.verbose)
        }
        Command::Compare { dataset, profile, phases, svg } => {
            if let Some(profile) = profile {
                cfg.scenario.profile = profile.clone();
                cfg.validate()?;
            }
            cmd_compare(&cfg, dataset.as_deref(), *phases, *svg, &out_dir, cli.verbose)
        }
    }
}

fn cmd_collect(
    cfg: &RunConfig,
    samples: Option<usize>,
    seed: Option<u64>,
    out_dir: &Path,
    verbose: bool,
) -> anyhow::Result<()> {
    let platoon = cfg.platoon_config()?;
    let mut spec = cfg.collection_spec();
    if let Some(t) = samples {
        spec.samples = t;
    }
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    if verbose {
        eprintln!(
            "collecting {} samples around {} m/s with excitation {} (seed {})",
            spec.samples, spec.v_star, spec.excitation, spec.seed
        );
    }
    let dataset = collect_dataset(&platoon, &spec)?;
    let order = spec.tini + spec.horizon + 2 * platoon.n;
    let excitation = is_persistently_exciting(&dataset.combined_input(), order);
    if !excitation.verdict {
        return Err(RuntimeFailure(format!(
            "collected input is not persistently exciting of order {order} (rank {} of {})",
            excitation.rank, excitation.required_rank
        ))
        .into());
    }
    dataset.save(out_dir)?;
    println!(
        "dataset: {} samples, PE order {} ok (sigma_min {:.3e}), written to {}",
        dataset.samples(),
        order,
        excitation.sigma_min,
        out_dir.display()
    );
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig, combined: bool, out_dir: &Path) -> anyhow::Result<()> {
    let platoon = cfg.platoon_config()?;
    let model = model_from_platoon(&platoon, cfg.collection.v_star)?;
    let input_choice = if combined { InputChoice::Combined } else { InputChoice::CavOnly };
    let ctrb = analyze_controllability(&model, input_choice);
    let obsv = analyze_observability(&model);
    let condition7 = model.coeffs.values().all(deep_lcc::model::check_condition7);

    let report = serde_json::json!({
        "n": platoon.n,
        "m": platoon.m(),
        "cav_set": platoon.cav_set,
        "condition7": condition7,
        "controllability": {
            "input": ctrb.input_choice,
            "rank": ctrb.rank,
            "dim_uncontrollable": ctrb.dim_uncontrollable,
            "stabilizable": ctrb.stabilizable,
            "controllable": ctrb.controllable(),
            "predicted_rank": ctrb.predicted_rank,
            "matches_prediction": ctrb.matches_prediction,
        },
        "observability": {
            "rank": obsv.rank,
            "observable": obsv.observable,
            "matches_prediction": obsv.matches_prediction,
        },
        "pbh": ctrb.pbh,
        "heterogeneous": ctrb.heterogeneous,
    });
    let pretty = serde_json::to_string_pretty(&report)?;
    write_atomic(&out_dir.join("analysis.json"), pretty.as_bytes())?;
    println!("{pretty}");
    Ok(())
}

fn load_dataset(cfg: &RunConfig, dataset_dir: Option<&Path>, out_dir: &Path) -> anyhow::Result<TrajectoryDataset> {
    let dir = dataset_dir.unwrap_or(out_dir);
    let ds = TrajectoryDataset::load(dir).map_err(|e| {
        anyhow::Error::new(MissingPrerequisite(format!(
            "no dataset under {} (run `deep-lcc collect` first): {e}",
            dir.display()
        )))
    })?;
    let platoon = cfg.platoon_config()?;
    if ds.n != platoon.n || ds.cav_set != platoon.cav_set {
        return Err(Error::DimensionMismatch(format!(
            "dataset topology (n = {}, cav_set = {:?}) does not match the configuration \
             (n = {}, cav_set = {:?})",
            ds.n, ds.cav_set, platoon.n, platoon.cav_set
        ))
        .into());
    }
    if (ds.dt - platoon.dt_control).abs() > 1e-12 {
        return Err(Error::DimensionMismatch(format!(
            "dataset sampled at {} s, configuration uses {} s",
            ds.dt, platoon.dt_control
        ))
        .into());
    }
    Ok(ds)
}

fn write_step_log(path: &Path, steps: &[StepMeta]) -> anyhow::Result<()> {
    let mut out = String::new();
    for meta in steps {
        let line = serde_json::json!({
            "t": meta.t,
            "status": meta.status,
            "iterations": meta.iterations,
            "objective": if meta.objective.is_finite() { Some(meta.objective) } else { None },
            "norm_g": if meta.norm_g.is_finite() { Some(meta.norm_g) } else { None },
            "norm_sigma_y": if meta.norm_sigma_y.is_finite() { Some(meta.norm_sigma_y) } else { None },
            "v_star": meta.v_star,
            "fallback": meta.fallback,
        });
        let _ = writeln!(out, "{line}");
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

fn check_outcome(log: &TrajectoryLog) -> anyhow::Result<()> {
    match &log.outcome {
        RunOutcome::Completed => Ok(()),
        RunOutcome::Collision { time, vehicle } => Err(RuntimeFailure(format!(
            "collision at t = {time:.2} s (vehicle {vehicle}); partial log written"
        ))
        .into()),
        RunOutcome::ControllerFailure { time, reason } => Err(RuntimeFailure(format!(
            "controller failure at t = {time:.2} s: {reason}; partial log written"
        ))
        .into()),
    }
}

fn cmd_simulate(
    cfg: &RunConfig,
    choice: ControllerChoice,
    dataset_dir: Option<&Path>,
    emit_svg: bool,
    out_dir: &Path,
    verbose: bool,
) -> anyhow::Result<()> {
    let platoon = cfg.platoon_config()?;
    let scenario = cfg.scenario_def()?;
    let seed = cfg.scenario.seed;
    let duration = scenario.profile.duration();
    if verbose {
        eprintln!(
            "simulating '{}' for {:.1} s at dt = {} s (seed {seed})",
            scenario.name, duration, platoon.dt_control
        );
    }

    let (log, steps, label) = match choice {
        ControllerChoice::None => {
            let all_hdv = platoon.all_hdv_variant()?;
            let mut policy = ZeroControl::new(0);
            let log = simulate_closed_loop(&all_hdv, &mut policy, &scenario.profile, duration, seed)?;
            (log, Vec::new(), "all_hdv")
        }
        ControllerChoice::Mpc => {
            let model = deep_lcc::model::discretize(
                &model_from_platoon(&platoon, scenario.profile.velocity_at(0.0))?,
                platoon.dt_control,
            )?;
            let mut mpc = MpcController::new(
                model,
                MpcParams::from(&cfg.controller_params()),
                platoon.cav_eq_spacing,
                EquilibriumEstimation::WindowMean,
            )?;
            let log = simulate_closed_loop(&platoon, &mut mpc, &scenario.profile, duration, seed)?;
            (log, mpc.step_log, "mpc")
        }
        ControllerChoice::Deeplcc => {
            let ds = load_dataset(cfg, dataset_dir, out_dir)?;
            let blocks = partition(&ds, cfg.controller.tini, cfg.controller.horizon)?;
            let mut controller = DeepLccController::new(
                blocks,
                cfg.controller_params(),
                platoon.cav_eq_spacing,
                EquilibriumEstimation::WindowMean,
            )?;
            let log = simulate_closed_loop(&platoon, &mut controller, &scenario.profile, duration, seed)?;
            (log, controller.step_log, "deeplcc")
        }
    };

    let csv_path = out_dir.join(format!("trajectory_{label}.csv"));
    log.write_csv(&csv_path)?;
    if !steps.is_empty() {
        write_step_log(&out_dir.join(format!("solver_{label}.jsonl")), &steps)?;
    }
    if emit_svg {
        write_charts(&log, label, &scenario.name, out_dir)?;
    }
    println!(
        "wrote {} ({} control steps, outcome {:?})",
        csv_path.display(),
        log.steps.len(),
        log.outcome
    );
    check_outcome(&log)
}

fn cmd_compare(
    cfg: &RunConfig,
    dataset_dir: Option<&Path>,
    split_phases: bool,
    emit_svg: bool,
    out_dir: &Path,
    verbose: bool,
) -> anyhow::Result<()> {
    let platoon = cfg.platoon_config()?;
    let mut scenario = cfg.scenario_def()?;
    if !split_phases {
        scenario.phases = vec![(0.0, scenario.profile.duration())];
        scenario.braking_phase = vec![true];
    }
    let ds = load_dataset(cfg, dataset_dir, out_dir)?;
    let blocks = partition(&ds, cfg.controller.tini, cfg.controller.horizon)?;
    let seed = cfg.scenario.seed;
    if verbose {
        eprintln!("comparing strategies on '{}' (seed {seed})", scenario.name);
    }

    let output = run_comparison(
        &platoon,
        &blocks,
        &cfg.controller_params(),
        &scenario,
        seed,
        &cfg.fuel_vehicles(),
        &cfg.fuel_coefficients(),
    )?;

    output.log_all_hdv.write_csv(&out_dir.join("trajectory_all_hdv.csv"))?;
    output.log_mpc.write_csv(&out_dir.join("trajectory_mpc.csv"))?;
    output.log_deep_lcc.write_csv(&out_dir.join("trajectory_deeplcc.csv"))?;
    if emit_svg {
        write_charts(&output.log_all_hdv, "all_hdv", &scenario.name, out_dir)?;
        write_charts(&output.log_mpc, "mpc", &scenario.name, out_dir)?;
        write_charts(&output.log_deep_lcc, "deeplcc", &scenario.name, out_dir)?;
    }
    write_step_log(&out_dir.join("solver_mpc.jsonl"), &output.mpc_steps)?;
    write_step_log(&out_dir.join("solver_deeplcc.jsonl"), &output.deep_lcc_steps)?;

    let json = serde_json::to_string_pretty(&output.report)?;
    write_atomic(&out_dir.join("fuel_report.json"), json.as_bytes())?;
    print!("{}", output.report.to_table());

    for fuel in [&output.report.all_hdv, &output.report.mpc, &output.report.deep_lcc] {
        if !fuel.completed {
            return Err(RuntimeFailure(format!(
                "{} run did not complete: {}",
                fuel.strategy.label(),
                fuel.failure.clone().unwrap_or_default()
            ))
            .into());
        }
    }
    Ok(())
}

fn write_charts(
    log: &deep_lcc::trajectory::TrajectoryLog,
    label: &str,
    scenario: &str,
    out_dir: &Path,
) -> anyhow::Result<()> {
    let velocity = svg::velocity_chart(log, &format!("{scenario}: velocities ({label})"));
    write_atomic(&out_dir.join(format!("velocity_{label}.svg")), velocity.as_bytes())?;
    let spacing = svg::spacing_chart(log, &format!("{scenario}: spacings ({label})"));
    write_atomic(&out_dir.join(format!("spacing_{label}.svg")), spacing.as_bytes())?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    use std::fs;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.to_path_buf();
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    tmp.set_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
