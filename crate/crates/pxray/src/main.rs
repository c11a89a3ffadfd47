//! Command-line surface: clone a policy from the scripted expert, attribute
//! a single observation, run trajectory/target-change analyses, and run the
//! oracle check suites.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pxray::analysis::{
    emit_heatmap, initial_image_diagnostic, run_trajectory_analysis, target_change_diagnostic,
    target_change_experiment, write_series_csv, HeatmapKind, TargetChange,
};
use pxray::attribution::{attribute, ImportanceFactors, Method};
use pxray::checks::run_suites;
use pxray::env::{
    collect_dataset, default_arm, load_observation_raw, EpisodeConfig, Gains, Scene,
};
use pxray::error::Error;
use pxray::kinematics::{importance_factors, AlphaMode, ArmModel, ArmState};
use pxray::network::PolicyNetwork;
use pxray::tensor::Tensor;
use pxray::train::{clone_policy, ArchSpec, Hyperparams};
use pxray::weights::{load_weights, save_weights};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "pxray", version, about = "Input attribution for visuomotor policy networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Behavioral-clone a policy from the scripted reaching expert.
    Clone(CloneArgs),
    /// Attribute one observation back to its inputs.
    Attribute(AttributeArgs),
    /// Roll the policy out and record relevance ratios per step.
    Rollout(RolloutArgs),
    /// Run the oracle/property suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct CloneArgs {
    /// Expert episodes per target (extra episodes perturb the start state).
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    /// Episode configuration JSON (targets, start states, steps, seed).
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long, env = "PXRAY_SEED")]
    seed: Option<u64>,
    /// Architecture description JSON; defaults to the bundled toy network.
    #[arg(long)]
    arch: Option<PathBuf>,
    /// Output weight file.
    #[arg(long)]
    out: PathBuf,
    /// Training report JSON (defaults to <out>.report.json).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = Hyperparams::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = Hyperparams::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = Hyperparams::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = Hyperparams::default().momentum)]
    momentum: f64,
    /// Record every n-th step of each expert rollout.
    #[arg(long, default_value_t = 2)]
    subsample: usize,
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Observation JSON: {"image": [...], "config": [...]}.
    #[arg(long)]
    obs: PathBuf,
    /// dtd, rap, or gbp.
    #[arg(long)]
    method: String,
    /// kinematic or uniform.
    #[arg(long, default_value = "uniform")]
    alpha: String,
    /// Arm description JSON; required for kinematic alpha.
    #[arg(long)]
    arm: Option<PathBuf>,
    /// Image-relevance heatmap (ASCII PGM).
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Config-relevance heatmap (ASCII PGM plus companion CSV).
    #[arg(long)]
    config_heatmap: Option<PathBuf>,
    /// Relevance summary CSV (per-feature values, group totals, drops).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    steps: usize,
    /// Comma-separated methods, e.g. dtd,rap,gbp.
    #[arg(long, default_value = "dtd")]
    methods: String,
    #[arg(long, default_value = "kinematic")]
    alpha: String,
    #[arg(long)]
    out: PathBuf,
    /// Swap the target at this step (new target drawn between the
    /// configured targets).
    #[arg(long)]
    target_change_step: Option<usize>,
    /// Episode configuration JSON; defaults to the bundled toy setup.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Which configured (start, target) pair to roll out.
    #[arg(long, default_value_t = 0)]
    target_index: usize,
    #[arg(long, env = "PXRAY_SEED")]
    seed: Option<u64>,
    /// Compute kinematic alpha once at step 0 instead of per step.
    #[arg(long)]
    freeze_alpha: bool,
}

#[derive(Args)]
struct CheckArgs {
    /// conservation, gradients, kinematics, reduction, conv-unroll, or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, env = "PXRAY_SEED")]
    seed: Option<u64>,
}

/// Error carrying the process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(err: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_CONFIG, message: err.to_string() }
    }

    fn runtime(err: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_RUNTIME, message: err.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Clone(args) => cmd_clone(args),
        Command::Attribute(args) => cmd_attribute(args),
        Command::Rollout(args) => cmd_rollout(args),
        Command::Check(args) => cmd_check(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn cmd_clone(args: CloneArgs) -> Result<(), CliError> {
    let episodes = match &args.targets {
        Some(path) => EpisodeConfig::load(path).map_err(CliError::config)?,
        None => EpisodeConfig::default_toy(),
    };
    let seed = args.seed.unwrap_or(episodes.seed);
    let arm = default_arm();
    let arch = match &args.arch {
        Some(path) => ArchSpec::load(path).map_err(CliError::config)?,
        None => ArchSpec::toy(arm.num_joints()),
    };
    if args.episodes == 0 {
        return Err(CliError::config("--episodes must be at least 1"));
    }
    let image_size = (arch.image_shape[0], arch.image_shape[1]);
    let hp = Hyperparams {
        learning_rate: args.learning_rate,
        momentum: args.momentum,
        epochs: args.epochs,
        batch_size: args.batch_size,
        target_mse: None,
    };

    let dataset =
        collect_dataset(&arm, &episodes, &Gains::default(), image_size, args.subsample, args.episodes)
            .map_err(CliError::config)?;
    let (net, report) = clone_policy(&dataset, &arch, &hp, seed).map_err(|e| match e {
        Error::Training { .. } => CliError::runtime(e),
        Error::Config { .. } | Error::Shape { .. } => CliError::config(e),
        other => CliError::runtime(other),
    })?;

    save_weights(&net, &args.out).map_err(CliError::runtime)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    report.save(&report_path).map_err(CliError::runtime)?;
    eprintln!(
        "cloned on {} samples: mse {:.6} ({:.2}% of torque variance), weights -> {}",
        report.samples,
        report.final_mse,
        100.0 * report.final_mse / report.torque_variance.max(1e-300),
        args.out.display()
    );
    Ok(())
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    s.parse::<Method>().map_err(CliError::config)
}

fn parse_alpha_mode(s: &str) -> Result<AlphaMode, CliError> {
    s.parse::<AlphaMode>().map_err(CliError::config)
}

/// Pulls the arm state (joint positions and velocities) out of an
/// observation's configuration vector using the network's declared groups.
fn state_from_config(net: &PolicyNetwork, config: &Tensor, joints: usize) -> Result<ArmState, CliError> {
    let range = |name: &str| -> Result<(usize, usize), CliError> {
        net.input_groups
            .iter()
            .find(|g| g.name == name)
            .map(|g| (g.lo, g.hi))
            .ok_or_else(|| {
                CliError::config(format!("network declares no {name:?} input group"))
            })
    };
    let (plo, phi) = range("joint_pos")?;
    let (vlo, vhi) = range("joint_vel")?;
    if phi - plo != joints || vhi - vlo != joints {
        return Err(CliError::config(format!(
            "joint groups cover {} positions / {} velocities for a {joints}-joint arm",
            phi - plo,
            vhi - vlo
        )));
    }
    Ok(ArmState {
        theta: config.data()[plo..phi].to_vec(),
        omega: config.data()[vlo..vhi].to_vec(),
    })
}

fn cmd_attribute(args: AttributeArgs) -> Result<(), CliError> {
    let method = parse_method(&args.method)?;
    let alpha_mode = parse_alpha_mode(&args.alpha)?;
    let net = load_weights(&args.weights).map_err(CliError::config)?;
    let (image_raw, config_raw) = load_observation_raw(&args.obs).map_err(CliError::config)?;
    let (h, w, c) = net.image_shape;
    let image = Tensor::new(vec![h, w, c], image_raw).map_err(CliError::config)?;
    let config = Tensor::new(vec![net.config_dim], config_raw).map_err(CliError::config)?;

    let alpha = match alpha_mode {
        AlphaMode::Uniform => ImportanceFactors::uniform(net.num_joints()),
        AlphaMode::Kinematic => {
            let arm_path = args.arm.as_ref().ok_or_else(|| {
                CliError::config("--alpha kinematic requires --arm <arm.json>")
            })?;
            let arm = ArmModel::load(arm_path).map_err(CliError::config)?;
            if arm.num_joints() != net.num_joints() {
                return Err(CliError::config(format!(
                    "arm has {} joints, network outputs {}",
                    arm.num_joints(),
                    net.num_joints()
                )));
            }
            let state = state_from_config(&net, &config, arm.num_joints())?;
            importance_factors(&arm, &state, AlphaMode::Kinematic)
        }
    };

    let result = attribute(method, &net, &image, &config, &alpha).map_err(CliError::runtime)?;

    if let Some(path) = &args.heatmap {
        emit_heatmap(&result, HeatmapKind::Image, path).map_err(CliError::runtime)?;
    }
    if let Some(path) = &args.config_heatmap {
        emit_heatmap(&result, HeatmapKind::Config, path).map_err(CliError::runtime)?;
    }
    if let Some(path) = &args.csv {
        write_attribution_csv(&result, path).map_err(CliError::runtime)?;
    }
    eprintln!(
        "{}: output total {:.6}, input total {:.6}, dropped {:.3e} over {} drops",
        method.as_str(),
        result.output_total,
        result.total_relevance(),
        result.drops.mass,
        result.drops.count
    );
    Ok(())
}

/// Attribution summary CSV: named per-feature config relevance, the image
/// total, group totals, and the conservation bookkeeping.
fn write_attribution_csv(
    result: &pxray::attribution::AttributionResult,
    path: &PathBuf,
) -> Result<(), Error> {
    use std::fmt::Write as _;
    let mut out = String::from("name,value\n");
    for (i, v) in result.config_relevance.data().iter().enumerate() {
        let name = result
            .input_groups
            .iter()
            .find(|g| g.lo <= i && i < g.hi)
            .map(|g| format!("{}[{}]", g.name, i - g.lo))
            .unwrap_or_else(|| format!("config[{i}]"));
        let _ = writeln!(out, "{name},{v:.8e}");
    }
    for (name, v) in &result.group_totals {
        let _ = writeln!(out, "group_{name},{v:.8e}");
    }
    let _ = writeln!(out, "output_total,{:.8e}", result.output_total);
    let _ = writeln!(out, "dropped_mass,{:.8e}", result.drops.mass);
    let _ = writeln!(out, "drop_count,{}", result.drops.count);
    std::fs::write(path, out).map_err(|e| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn cmd_rollout(args: RolloutArgs) -> Result<(), CliError> {
    let alpha_mode = parse_alpha_mode(&args.alpha)?;
    let methods: Vec<Method> = args
        .methods
        .split(',')
        .filter(|s| !s.is_empty())
        .map(parse_method)
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(CliError::config("--methods must name at least one method"));
    }
    let net = load_weights(&args.weights).map_err(CliError::config)?;
    let episodes = match &args.targets {
        Some(path) => EpisodeConfig::load(path).map_err(CliError::config)?,
        None => EpisodeConfig::default_toy(),
    };
    let seed = args.seed.unwrap_or(episodes.seed);
    if args.target_index >= episodes.targets.len() {
        return Err(CliError::config(format!(
            "--target-index {} out of range for {} targets",
            args.target_index,
            episodes.targets.len()
        )));
    }
    let arm = default_arm();
    let target = episodes.targets[args.target_index];
    let start = episodes.start_for(args.target_index);
    let (h, w, _) = net.image_shape;
    let scene = Scene::new(
        arm,
        ArmState { theta: start.theta.clone(), omega: start.omega.clone() },
        (target[0], target[1]),
        (h, w),
    )
    .map_err(CliError::config)?;

    let series = match args.target_change_step {
        Some(k) => {
            let rule = TargetChange::RandomBetween { targets: episodes.targets.clone(), seed };
            target_change_experiment(
                &net,
                &scene,
                alpha_mode,
                &methods,
                args.steps,
                k,
                &rule,
                args.freeze_alpha,
            )
            .map_err(CliError::runtime)?
        }
        None => {
            run_trajectory_analysis(&net, &scene, alpha_mode, &methods, args.steps, args.freeze_alpha)
                .map_err(CliError::runtime)?
        }
    };

    write_series_csv(&series, &args.out).map_err(CliError::runtime)?;
    for s in &series {
        if let Some(d) = initial_image_diagnostic(s) {
            eprintln!("{}", d.render());
        }
        if let Some(d) = target_change_diagnostic(s) {
            eprintln!("{}", d.render());
        }
    }
    eprintln!(
        "rolled out {} steps x {} methods -> {}",
        args.steps,
        series.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<(), CliError> {
    let seed = args.seed.unwrap_or(0);
    let reports = run_suites(&args.suite, args.trials, seed).map_err(CliError::config)?;
    let mut all_passed = true;
    for report in &reports {
        println!("{}", report.render());
        all_passed &= report.passed;
    }
    if all_passed {
        Ok(())
    } else {
        Err(CliError::runtime("one or more check suites failed"))
    }
}
