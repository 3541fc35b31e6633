//! The `cmg` command line: plan, generate, train-toy, eval, convert, demo.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input, 3 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::{json, Map, Value};

use crate::config::{help_table, RunConfig};
use crate::data::{synthetic_dataset, synthetic_motions};
use crate::diffusion::{build_schedule, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::io::json::to_canonical_pretty;
use crate::io::motion_file::{motion_from_csv, motion_to_csv, read_motion, write_motion, MotionFile, MotionHeader, ReprKind};
use crate::io::write_atomic;
use crate::model::checkpoint::{load_weights, save_weights};
use crate::model::{train_toy, DenoiserWeights, HashedBowEmbedder, TextCondition, TextEmbedder};
use crate::motion::{global_to_relative, relative_to_global, repr_dim, GlobalMotion, Skeleton};
use crate::pipeline::{agent_texts, evaluate, generate_agents, EvalInputs, MetricsReport};
use crate::planner::llm::{derive_params, LlmClient};
use crate::planner::{apply_event, plan_scene, read_plan, write_plan, Backend, CrowdParams, ScenePlan};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cmg", version, about = "Crowd scene planning and spatially controlled motion diffusion")]
pub struct Cli {
    /// TOML config file with dotted keys (see the key table below).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan a crowd scene and write cmg_plan_v1 JSON.
    Plan(PlanArgs),
    /// Sample motion for every agent of a plan.
    Generate(GenerateArgs),
    /// Train the toy denoiser on synthetic motion.
    TrainToy(TrainArgs),
    /// Compute metrics for a motion file.
    Eval(EvalArgs),
    /// Transcode motion files (CMG1 <-> CSV, relative <-> global).
    Convert(ConvertArgs),
    /// Offline plan -> train -> generate -> eval.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct CrowdArgs {
    /// Number of agents.
    #[arg(long)]
    pub n: Option<usize>,
    /// Mean group size.
    #[arg(long)]
    pub s: Option<f64>,
    /// Density in [0, 1].
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Interaction level in [0, 1].
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub scene: String,
    #[command(flatten)]
    pub crowd: CrowdArgs,
    /// Event to apply after planning; repeatable, applied in order.
    #[arg(long)]
    pub event: Vec<String>,
    /// Never contact the LLM endpoint.
    #[arg(long)]
    pub offline: bool,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReprArg {
    Relative,
    Global,
}

impl From<ReprArg> for ReprKind {
    fn from(r: ReprArg) -> Self {
        match r {
            ReprArg::Relative => ReprKind::Relative,
            ReprArg::Global => ReprKind::Global,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_name = "PATH")]
    pub plan: PathBuf,
    /// Checkpoint; defaults to paths.weights.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Stored representation; relative motion drops world placement.
    #[arg(long, value_enum, default_value = "global")]
    pub repr: ReprArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Checkpoint to write; defaults to paths.weights.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Also write the per-step loss history as JSON.
    #[arg(long, value_name = "PATH")]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub motions: PathBuf,
    /// Plan supplying control targets and texts.
    #[arg(long, value_name = "PATH")]
    pub plan: Option<PathBuf>,
    /// Real motions for FID.
    #[arg(long, value_name = "PATH")]
    pub reference: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// `.csv` writes CSV, anything else a CMG1 file.
    #[arg(long, value_name = "PATH")]
    pub output: PathBuf,
    /// Target representation; unchanged when omitted.
    #[arg(long, value_enum)]
    pub to: Option<ReprArg>,
    /// Representation of a CSV input.
    #[arg(long, value_enum, default_value = "global")]
    pub csv_repr: ReprArg,
    /// Frame rate of a CSV input.
    #[arg(long, default_value_t = 20.0)]
    pub csv_fps: f64,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "people stroll and chat in a public square")]
    pub scene: String,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value = "a street performer starts a show in the middle of the square")]
    pub event: String,
    /// Use this checkpoint instead of training one.
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
    /// Training steps when no checkpoint is given.
    #[arg(long, default_value_t = 150)]
    pub train_steps: usize,
}

/// Parses `argv` (program name first) and runs it; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let json_errors = argv.iter().any(|a| a == "--json-errors");
    let cmd = Cli::command().after_long_help(format!("Configuration keys (file, CMG_<KEY> env, --set):\n{}", help_table()));
    let cli = match cmd.try_get_matches_from(&argv).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            if code == EXIT_USAGE && json_errors {
                report_json("usage", e.to_string().lines().next().unwrap_or("usage error"), code);
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = if e.is_validation() { EXIT_INVALID } else { EXIT_RUNTIME };
            if cli.json_errors {
                report_json(e.kind(), &e.to_string(), code);
            } else {
                eprintln!("error: {e}");
            }
            code
        }
    }
}

fn report_json(kind: &str, message: &str, code: i32) {
    let v = json!({"error": {"kind": kind, "message": message, "exit_code": code}});
    eprintln!("{v}");
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let skel = Skeleton::hml22();
    match &cli.command {
        Command::Plan(a) => cmd_plan(&cfg, &skel, a),
        Command::Generate(a) => cmd_generate(&cfg, &skel, a),
        Command::TrainToy(a) => cmd_train(&cfg, &skel, a),
        Command::Eval(a) => cmd_eval(&cfg, &skel, a),
        Command::Convert(a) => cmd_convert(&skel, a),
        Command::Demo(a) => cmd_demo(cfg, &skel, a),
    }
}

const DEFAULT_N: usize = 8;

fn crowd_params(scene: &str, a: &CrowdArgs, client: Option<&LlmClient>) -> Result<CrowdParams> {
    let n = a.n.unwrap_or(DEFAULT_N);
    let complete = a.s.is_some() && a.sigma.is_some() && a.alpha.is_some();
    let mut base = CrowdParams {
        n,
        s: 4.0,
        sigma: 0.5,
        alpha: 0.3,
    };
    if let (Some(client), false) = (client, complete) {
        match derive_params(client, scene, n) {
            Ok((p, _)) => base = p,
            Err(e) => warn!("LLM parameter derivation failed, using defaults: {e}"),
        }
    }
    let p = CrowdParams {
        n,
        s: a.s.unwrap_or(base.s),
        sigma: a.sigma.unwrap_or(base.sigma),
        alpha: a.alpha.unwrap_or(base.alpha),
    };
    p.validate()?;
    Ok(p)
}

fn build_plan(cfg: &RunConfig, skel: &Skeleton, scene: &str, crowd: &CrowdArgs, events: &[String], offline: bool) -> Result<ScenePlan> {
    let client = if offline { None } else { cfg.llm_config().map(LlmClient::new) };
    let backend = client.as_ref().map_or(Backend::Fallback, Backend::Llm);
    let params = crowd_params(scene, crowd, client.as_ref())?;
    let mut plan = plan_scene(scene, &params, &backend, &cfg.planner, skel, cfg.seed)?;
    for e in events {
        plan = apply_event(&plan, e, None, &backend)?;
    }
    Ok(plan)
}

fn cmd_plan(cfg: &RunConfig, skel: &Skeleton, a: &PlanArgs) -> Result<()> {
    let plan = build_plan(cfg, skel, &a.scene, &a.crowd, &a.event, a.offline)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("plan.json"));
    write_plan(&plan, &out)?;
    println!("wrote {} ({} agents, {} groups)", out.display(), plan.agents.len(), plan.groups.len());
    Ok(())
}

fn schedule(cfg: &RunConfig) -> Result<DiffusionSchedule> {
    build_schedule(cfg.diffusion.t, cfg.diffusion.beta_start, cfg.diffusion.beta_end)
}

fn write_generated(motions: &[GlobalMotion], skel: &Skeleton, repr: ReprKind, out: &Path) -> Result<()> {
    let file = match repr {
        ReprKind::Global => MotionFile::from_global(motions, skel.joint_names())?,
        ReprKind::Relative => {
            let rel = motions.iter().map(|m| global_to_relative(m, skel)).collect::<Result<Vec<_>>>()?;
            MotionFile::from_relative(&rel, skel.joint_names())?
        }
    };
    write_motion(&file, out)
}

fn cmd_generate(cfg: &RunConfig, skel: &Skeleton, a: &GenerateArgs) -> Result<()> {
    let plan = read_plan(&a.plan)?;
    let (w, _) = load_weights(a.weights.as_deref().unwrap_or(&cfg.paths.weights))?;
    let motions = generate_agents(&plan, &w, &schedule(cfg)?, &cfg.sample_config(), skel, cfg.seed)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join("motions.cmg"));
    write_generated(&motions, skel, a.repr.into(), &out)?;
    println!("wrote {} ({} agents)", out.display(), motions.len());
    Ok(())
}

fn train(cfg: &RunConfig, skel: &Skeleton) -> Result<(DenoiserWeights, crate::model::TrainReport)> {
    let mc = cfg.model_config(skel.num_joints());
    let embedder = HashedBowEmbedder::new(mc.text_dim);
    let data = synthetic_dataset(cfg.train.sequences, mc.frames, cfg.planner.fps, cfg.seed, skel, &embedder)?;
    train_toy(&data, mc, &cfg.train_config(), skel)
}

fn cmd_train(cfg: &RunConfig, skel: &Skeleton, a: &TrainArgs) -> Result<()> {
    let (w, report) = train(cfg, skel)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.weights.clone());
    save_weights(&w, cfg.seed, &out)?;
    let (first, last) = (report.initial(20), report.last(20));
    println!(
        "trained {} steps: L_whole {:.4} -> {:.4}, L_foot {:.4} -> {:.4}; wrote {}",
        report.history.len(),
        first.whole,
        last.whole,
        first.foot,
        last.foot,
        out.display()
    );
    if let Some(path) = &a.history {
        let mut text = to_canonical_pretty(&report.history)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

fn globals_of(file: &MotionFile, skel: &Skeleton) -> Result<Vec<GlobalMotion>> {
    match file.header.repr {
        ReprKind::Global => file.global(),
        ReprKind::Relative => file.relative()?.iter().map(|m| relative_to_global(m, skel)).collect(),
    }
}

/// `{metric: value, ..., config: {...}, seed}` as canonical JSON.
pub fn report_json_text(report: &MetricsReport, cfg: &RunConfig) -> Result<String> {
    let mut map = match serde_json::to_value(report).map_err(|e| Error::Format(e.to_string()))? {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    let config = serde_json::to_value(cfg).map_err(|e| Error::Format(e.to_string()))?;
    map.insert("config".into(), config);
    map.insert("seed".into(), json!(cfg.seed));
    let mut text = to_canonical_pretty(&Value::Object(map))?;
    text.push('\n');
    Ok(text)
}

fn texts_for(plan: &ScenePlan, dim: usize) -> Vec<TextCondition> {
    let e = HashedBowEmbedder::new(dim);
    plan.agents.iter().map(|a| e.condition(&a.text)).collect()
}

fn cmd_eval(cfg: &RunConfig, skel: &Skeleton, a: &EvalArgs) -> Result<()> {
    let motions = globals_of(&read_motion(&a.motions)?, skel)?;
    let plan = a.plan.as_deref().map(read_plan).transpose()?;
    let reference = a.reference.as_deref().map(|p| read_motion(p).and_then(|f| globals_of(&f, skel))).transpose()?;
    let texts = plan.as_ref().map(|p| texts_for(p, cfg.model.text_dim));
    let inputs = EvalInputs {
        plan: plan.as_ref(),
        reference: reference.as_deref(),
        texts: texts.as_deref(),
    };
    let report = evaluate(&motions, inputs, &cfg.metrics, skel, cfg.seed)?;
    let text = report_json_text(&report, cfg)?;
    match &a.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn is_csv(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn cmd_convert(skel: &Skeleton, a: &ConvertArgs) -> Result<()> {
    let file = if is_csv(&a.input) {
        let j = skel.num_joints();
        let header = MotionHeader {
            version: crate::io::motion_file::MOTION_VERSION,
            n: 0,
            f: 0,
            joints: j,
            dim: repr_dim(j),
            fps: a.csv_fps,
            dtype: "f32le".into(),
            repr: a.csv_repr.into(),
            joint_names: skel.joint_names(),
        };
        motion_from_csv(&std::fs::read_to_string(&a.input)?, header)?
    } else {
        read_motion(&a.input)?
    };
    let target: ReprKind = a.to.map_or(file.header.repr, Into::into);
    let file = match (file.header.repr, target) {
        (ReprKind::Relative, ReprKind::Global) => {
            let g = file.relative()?.iter().map(|m| relative_to_global(m, skel)).collect::<Result<Vec<_>>>()?;
            MotionFile::from_global(&g, file.header.joint_names.clone())?
        }
        (ReprKind::Global, ReprKind::Relative) => {
            let r = file.global()?.iter().map(|m| global_to_relative(m, skel)).collect::<Result<Vec<_>>>()?;
            MotionFile::from_relative(&r, file.header.joint_names.clone())?
        }
        _ => file,
    };
    if is_csv(&a.output) {
        write_atomic(&a.output, motion_to_csv(&file).as_bytes())?;
    } else {
        write_motion(&file, &a.output)?;
    }
    println!("wrote {}", a.output.display());
    Ok(())
}

fn cmd_demo(mut cfg: RunConfig, skel: &Skeleton, a: &DemoArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let dir = a.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    let crowd = CrowdArgs {
        n: Some(a.n),
        s: Some(2.0),
        sigma: Some(0.5),
        alpha: Some(0.3),
    };
    let events = if a.event.is_empty() { Vec::new() } else { vec![a.event.clone()] };
    let plan = build_plan(&cfg, skel, &a.scene, &crowd, &events, true)?;
    write_plan(&plan, &dir.join("plan.json"))?;

    let w = match &a.weights {
        Some(p) => load_weights(p)?.0,
        None => {
            cfg.train.steps = a.train_steps;
            info!("training {} steps", a.train_steps);
            let (w, _) = train(&cfg, skel)?;
            save_weights(&w, cfg.seed, &dir.join("weights.cmgw"))?;
            w
        }
    };
    let motions = generate_agents(&plan, &w, &schedule(&cfg)?, &cfg.sample_config(), skel, cfg.seed)?;
    write_generated(&motions, skel, ReprKind::Global, &dir.join("motions.cmg"))?;

    let mc = cfg.model_config(skel.num_joints());
    let reference: Vec<GlobalMotion> = synthetic_motions(cfg.train.sequences, mc.frames, cfg.planner.fps, cfg.seed, skel)?
        .into_iter()
        .map(|m| m.global)
        .collect();
    let texts = agent_texts(&plan, &w);
    let inputs = EvalInputs {
        plan: Some(&plan),
        reference: Some(&reference),
        texts: Some(&texts),
    };
    let report = evaluate(&motions, inputs, &cfg.metrics, skel, cfg.seed)?;
    write_atomic(&dir.join("report.json"), report_json_text(&report, &cfg)?.as_bytes())?;
    println!(
        "demo: {} agents, avg_err {} m, foot skating {:.3}; outputs in {}",
        motions.len(),
        report.avg_err_m.map_or("n/a".into(), |v| format!("{v:.3}")),
        report.foot_skating_ratio,
        dir.display()
    );
    Ok(())
}
