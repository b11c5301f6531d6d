use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DVector;

use gridprice::agent::PriceTaker;
use gridprice::feeder::SensitivityModel;
use gridprice::agent::DerAgent;
use gridprice::operator::{certify_step_sizes, OperatorConfig};
use gridprice::runtime::{
    empirical_contraction, mismatch_norm, offline_solve, online_run, slot_agents, slot_config, slot_model,
    slot_oracle, tracking_bound_report, uncontrolled_run, IterateState, OfflineOptions, OnlineOptions, PlantModel,
    RuntimeError,
};
use gridprice::scenario::io::{save_timeline, Feeder};
use gridprice::scenario::report::{
    write_offline_figures, write_online_figures, write_summary_json, write_trace_csv, RunSummary,
};
use gridprice::scenario::synth::{synth_profiles, DayCurve, NodeProfiles, ProfileShape};
use gridprice::scenario::{load_scenario, LoadedScenario, RunConfig, ScenarioError, ScenarioTimeline};

/// Incentive-based voltage regulation on radial feeders.
#[derive(Parser)]
#[command(name = "gridprice", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one instance to convergence on the linear model.
    Offline(RunArgs),
    /// Run K iterations per timeslot against the branch-flow plant.
    Online(RunArgs),
    /// Check the step sizes for one instance.
    Certify(RunArgs),
    /// Load and validate a scenario without running it.
    Validate(RunArgs),
    /// Generate a synthetic timeline for a feeder.
    Synth(SynthArgs),
    /// Online run plus the uncontrolled baseline, written as figure tables
    /// and plot scripts.
    Report(RunArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Feeder JSON file.
    #[arg(long)]
    feeder: PathBuf,
    /// Timeline CSV file.
    #[arg(long)]
    timeline: Option<PathBuf>,
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Iterations per timeslot.
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the voltage-deviation objective.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eps1: Option<f64>,
    #[arg(long)]
    eps2: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
    /// Timeslot used for single-instance commands.
    #[arg(long, default_value_t = 0)]
    slot: usize,
    /// Run even if the step sizes are not certified.
    #[arg(long)]
    allow_uncertified: bool,
    /// Feed the linear model back instead of the branch-flow plant.
    #[arg(long)]
    linear_plant: bool,
    /// Compute the tracking bound against per-slot oracle solutions.
    #[arg(long)]
    track: bool,
}

#[derive(Args, Clone)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 7200)]
    slots: usize,
    #[arg(long, default_value_t = 11.0)]
    start_hour: f64,
    #[arg(long, default_value_t = 1.0)]
    slot_seconds: f64,
    /// Peak available PV power as a fraction of the inverter rating.
    #[arg(long, default_value_t = 0.9)]
    pv_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    cloud_volatility: f64,
}

fn load(common: &Common) -> Result<LoadedScenario> {
    let mut sc = load_scenario(&common.feeder, common.timeline.as_deref(), common.config.as_deref())?;
    if let Some(out) = &common.out {
        sc.config.out_dir = out.display().to_string();
    }
    if let Some(seed) = common.seed {
        sc.config.seed = seed;
    }
    Ok(sc)
}

fn load_run(args: &RunArgs) -> Result<LoadedScenario> {
    let mut sc = load(&args.common)?;
    let c = &mut sc.config;
    if let Some(k) = args.k {
        c.k = k;
    }
    if let Some(g) = args.gamma {
        c.gamma = g;
    }
    if let Some(e) = args.eps1 {
        c.eps1 = e;
    }
    if let Some(e) = args.eps2 {
        c.eps2 = e;
    }
    if let Some(p) = args.phi {
        c.phi = p;
    }
    gridprice::scenario::io::validate_config(c)?;
    Ok(sc)
}

/// The problem instance of one slot, or the feeder's own loads and PV
/// availability without a timeline.
fn instance(sc: &LoadedScenario, slot: usize) -> Result<(SensitivityModel, Vec<DerAgent>, OperatorConfig)> {
    let f = &sc.feeder;
    let cfg = sc.config.operator_config(f.n());
    match &sc.timeline {
        Some(tl) => {
            let s = tl
                .slots
                .get(slot)
                .with_context(|| format!("timeline has {} slots, asked for slot {slot}", tl.len()))?;
            Ok((slot_model(&f.model, s), slot_agents(&f.agents, s), slot_config(&cfg, s)))
        }
        None => Ok((f.model.clone(), f.agents.clone(), cfg)),
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from(&cfg.out_dir)
}

fn validate(args: &RunArgs) -> Result<()> {
    let sc = load_run(args)?;
    let f = &sc.feeder;
    println!("feeder: {} buses plus substation, {} customers", f.n(), f.agents.len());
    if let Some(tl) = &sc.timeline {
        println!("timeline: {} slots of {} s", tl.len(), tl.slot_seconds);
    }
    println!("config: eps1={} eps2={} phi={} gamma={} K={}", sc.config.eps1, sc.config.eps2, sc.config.phi, sc.config.gamma, sc.config.k);
    Ok(())
}

fn certify(args: &RunArgs) -> Result<()> {
    let sc = load_run(args)?;
    let (model, agents, cfg) = instance(&sc, args.slot)?;
    let rep = certify_step_sizes(&model, &agents, &cfg);
    let text = serde_json::to_string_pretty(&rep)?;
    println!("{text}");
    let dir = out_dir(&sc.config);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("certify.json"), text + "\n")?;
    Ok(())
}

fn offline(args: &RunArgs) -> Result<()> {
    let sc = load_run(args)?;
    let (model, agents, cfg) = instance(&sc, args.slot)?;
    let dir = out_dir(&sc.config);
    let opts = OfflineOptions {
        stop: sc.config.stop_rule(),
        acknowledge_uncertified: args.allow_uncertified,
        ..Default::default()
    };
    let mut states: Vec<IterateState> = Vec::new();
    let mut keep = |s: &IterateState| states.push(s.clone());
    let result = offline_solve(&model, &agents, &cfg, &opts, Some(&mut keep));
    let (diag, converged) = match result {
        Ok((_, d)) => (d, true),
        Err(RuntimeError::NotConverged { diagnostics, .. }) => (*diagnostics, false),
        Err(e) => return Err(e.into()),
    };
    write_trace_csv(&dir.join("trace.csv"), &states, &agents, &cfg)?;
    write_offline_figures(&dir, &diag.step_norms)?;
    let mut summary = RunSummary::from_diagnostics("offline", &diag);
    summary.slots = 1;
    summary.k = diag.iterations;
    summary.max_voltage = states.last().map(|s| s.v.max());
    write_summary_json(&dir.join("summary.json"), &summary)?;
    println!("{} after {} iterations; output in {}", if converged { "converged" } else { "not converged" }, diag.iterations, dir.display());
    if !converged {
        return Err(RuntimeError::NotConverged {
            max_iter: diag.iterations,
            state: Box::new(states.pop().expect("initial state recorded")),
            diagnostics: Box::new(diag),
        }
        .into());
    }
    Ok(())
}

struct OnlineOutcome {
    trace: gridprice::runtime::OnlineTrace,
    summary: RunSummary,
    timeline: ScenarioTimeline,
    cfg: OperatorConfig,
}

fn run_online(args: &RunArgs, sc: &LoadedScenario) -> Result<OnlineOutcome> {
    let f = &sc.feeder;
    let tl = sc.timeline.clone().context("online runs need --timeline")?;
    let cfg = sc.config.operator_config(f.n());
    let (m0, a0, c0) = instance(sc, 0)?;
    let rep = certify_step_sizes(&m0, &a0, &c0);
    if !rep.certified && !args.allow_uncertified {
        return Err(RuntimeError::Uncertified { modulus: rep.modulus }.into());
    }
    let opts = OnlineOptions {
        k: sc.config.k,
        plant: if args.linear_plant { PlantModel::Linear } else { PlantModel::Nonlinear },
        record_iterations: true,
        solver: sc.config.solver_options(),
        ..Default::default()
    };
    let trace = online_run(&f.topology, &f.model, &f.agents, &tl, &cfg, &opts)?;
    let d = &trace.diagnostics;
    let mut summary = RunSummary::from_diagnostics("online", d);
    summary.slots = tl.len();
    summary.k = sc.config.k;
    summary.theta = Some(rep.theta);
    summary.max_voltage = trace.slots.iter().map(|s| s.state.v.max()).reduce(f64::max);
    let v_hi = sc.config.v_hi + 5e-3;
    let within = trace.slots.iter().filter(|s| s.state.v.max() <= v_hi).count();
    summary.share_within_limit = Some(within as f64 / tl.len() as f64);

    let delta = empirical_contraction(&m0, &a0, &c0, rep.theta, 1000, sc.config.seed, None, Default::default())?;
    summary.delta_hat = Some(delta);
    summary.rho_hat = Some(mismatch_norm(&m0, &a0, &c0, d.model_error.unwrap_or(0.0), rep.theta));
    if args.track {
        let every = if f.n() <= 6 { 1 } else { 10 };
        let oracles = trace
            .slots
            .iter()
            .filter(|r| r.t % every == 0)
            .map(|r| Ok((r.t, slot_oracle(&f.model, &tl, &cfg, r)?)))
            .collect::<Result<Vec<_>, RuntimeError>>()?;
        let r = tracking_bound_report(&trace, &oracles, &m0, &c0, delta, rep.theta, sc.config.k, tl.len() / 5);
        summary.sigma_hat = Some(r.sigma_hat);
        summary.bound_lhs = Some(r.lhs);
        summary.bound_rhs = Some(r.rhs);
        summary.bound_slack = Some(r.slack);
    }
    Ok(OnlineOutcome {
        trace,
        summary,
        timeline: tl,
        cfg,
    })
}

fn online(args: &RunArgs) -> Result<()> {
    let sc = load_run(args)?;
    let dir = out_dir(&sc.config);
    let out = run_online(args, &sc)?;
    let agents = &out.trace.slots[0].agents;
    write_trace_csv(&dir.join("trace.csv"), &out.trace.iterations, agents, &out.cfg)?;
    write_summary_json(&dir.join("summary.json"), &out.summary)?;
    println!(
        "{} slots, max voltage {:.4}; output in {}",
        out.timeline.len(),
        out.summary.max_voltage.unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

fn report(args: &RunArgs) -> Result<()> {
    let sc = load_run(args)?;
    let dir = out_dir(&sc.config);
    let mut out = run_online(args, &sc)?;
    let f = &sc.feeder;
    let unc = uncontrolled_run(&f.topology, &f.agents, &out.timeline, sc.config.solver_options())?;
    out.summary.uncontrolled_max_voltage = unc.iter().map(|v| v.max()).reduce(f64::max);
    write_online_figures(&dir, &out.trace, &unc, &out.cfg, out.timeline.slot_seconds, 0.0)?;
    write_summary_json(&dir.join("summary.json"), &out.summary)?;
    println!("figures written to {}", dir.display());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let sc = load(&args.common)?;
    let f: &Feeder = &sc.feeder;
    let n = f.n();
    let (p_load, q_load) = f.topology.base_loads();
    let mut pv_peak = DVector::zeros(n);
    for a in &f.agents {
        if let Some(eta) = a.set().eta {
            pv_peak[a.bus() - 1] += eta * args.pv_scale;
        }
    }
    let shape = ProfileShape {
        day_curve: DayCurve {
            start_hour: args.start_hour,
            slot_seconds: args.slot_seconds,
            ..Default::default()
        },
        cloud_volatility: args.cloud_volatility,
        ..Default::default()
    };
    if args.slots == 0 {
        bail!(ScenarioError::validation("synth", "need at least one slot"));
    }
    let tl = synth_profiles(sc.config.seed, args.slots, &NodeProfiles { p_load, q_load, pv_peak }, &shape);
    let path = match &args.common.out {
        Some(p) => p.clone(),
        None => Path::new(&sc.config.out_dir).join("timeline.csv"),
    };
    save_timeline(&tl, &path)?;
    info!("wrote {} slots", tl.len());
    println!("timeline written to {}", path.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ScenarioError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<RuntimeError>() {
            return match e {
                RuntimeError::NotConverged { .. } => 3,
                RuntimeError::Uncertified { .. }
                | RuntimeError::InvalidK
                | RuntimeError::EmptyTimeline
                | RuntimeError::SlotDimension { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Offline(a) => offline(a),
        Cmd::Online(a) => online(a),
        Cmd::Certify(a) => certify(a),
        Cmd::Validate(a) => validate(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
