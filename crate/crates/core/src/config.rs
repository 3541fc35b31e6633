//! Run configuration: flat dotted keys read from a TOML file, overridden by
//! `CMG_*` environment variables, overridden in turn by `--set key=value`.
//!
//! Every key lives in [`KEYS`]; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::diffusion::MeanMode;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, StepRule};
use crate::model::{ConMode, LossWeights, ModelConfig, Optimizer, TrainConfig};
use crate::planner::llm::LlmConfig;
use crate::planner::{Interp, PlannerConfig};
use crate::sampling::SampleConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub infer_steps: usize,
    pub cfg_scale: f64,
    pub mean_mode: MeanMode,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            infer_steps: 50,
            cfg_scale: 2.5,
            mean_mode: MeanMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GuidanceSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: GuidanceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub lr_decay_fraction: f64,
    pub text_dropout: f64,
    pub grad_clip: Option<f64>,
    /// Number of synthetic training sequences.
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSection {
    pub latent: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub ffn_mult: usize,
    pub text_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LlmSection {
    /// Chat-completions URL; empty means offline.
    pub endpoint: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsConfig {
    pub threshold_m: f64,
    pub foot_height: f64,
    pub foot_slide: f64,
    pub r_precision_pool: usize,
    pub diversity_pairs: usize,
    pub text_projection_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            threshold_m: 0.5,
            foot_height: 0.05,
            foot_slide: 0.0025,
            r_precision_pool: 32,
            diversity_pairs: 300,
            text_projection_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub weights: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub guidance: GuidanceSection,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub model: ModelSection,
    pub planner: PlannerConfig,
    pub llm: LlmSection,
    pub metrics: MetricsConfig,
    /// Left out of reports so outputs do not depend on where they are written.
    #[serde(skip)]
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        let l = LlmConfig::new("");
        RunConfig {
            seed: 0,
            diffusion: DiffusionConfig::default(),
            guidance: GuidanceSection {
                enabled: true,
                params: GuidanceConfig::default(),
            },
            loss: LossWeights::default(),
            train: TrainSection {
                steps: t.steps,
                batch: t.batch,
                lr: t.lr,
                optimizer: t.optimizer,
                momentum: t.momentum,
                lr_decay_fraction: t.lr_decay_fraction,
                text_dropout: t.text_dropout,
                grad_clip: t.grad_clip,
                sequences: 8,
            },
            model: ModelSection {
                latent: m.latent,
                blocks: m.blocks,
                time_dim: m.time_dim,
                ffn_mult: m.ffn_mult,
                text_dim: m.text_dim,
            },
            planner: PlannerConfig::default(),
            llm: LlmSection {
                endpoint: l.endpoint,
                model: l.model,
                timeout_ms: l.timeout_ms,
                max_retries: l.max_retries,
                backoff_ms: l.backoff_ms,
            },
            metrics: MetricsConfig::default(),
            paths: PathsConfig {
                out_dir: PathBuf::from("out"),
                weights: PathBuf::from("out/toy.cmgw"),
            },
        }
    }
}

/// One documented configuration key.
#[derive(Clone, Copy, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub help: &'static str,
}

const fn k(key: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, help }
}

pub const KEYS: &[KeySpec] = &[
    k("seed", "master seed for planning, sampling and metrics"),
    k("diffusion.T", "training diffusion steps"),
    k("diffusion.beta_start", "first beta of the linear schedule"),
    k("diffusion.beta_end", "last beta of the linear schedule"),
    k("diffusion.infer_steps", "strided sampling steps"),
    k("diffusion.cfg_scale", "classifier-free guidance scale"),
    k("diffusion.mean_mode", "reverse mean: ddpm_posterior | renoise"),
    k("guidance.enabled", "run IK guidance during sampling"),
    k("guidance.eta", "IK step size (fraction of the Polyak step for step_rule=polyak)"),
    k("guidance.step_rule", "IK update length: polyak | fixed"),
    k("guidance.inner_steps", "IK updates per guided sampling step"),
    k("guidance.last_n", "final sampling steps with IK guidance"),
    k("guidance.clamp", "max norm of one IK update, or none"),
    k("loss.lambda_whole", "weight of the whole-body loss"),
    k("loss.lambda_con", "weight of the control loss"),
    k("loss.lambda_foot", "weight of the foot-sliding loss"),
    k("loss.h_thresh", "grounded-foot height for the foot loss (m)"),
    k("loss.con_mode", "control loss form: normalized | literal"),
    k("train.steps", "optimizer steps for train-toy"),
    k("train.batch", "sequences per step"),
    k("train.lr", "learning rate"),
    k("train.optimizer", "adam | sgd"),
    k("train.momentum", "SGD momentum"),
    k("train.lr_decay_fraction", "final fraction of steps at lr/10"),
    k("train.text_dropout", "probability of training with the null text"),
    k("train.grad_clip", "global gradient-norm clip, or none"),
    k("train.sequences", "synthetic training sequences"),
    k("model.latent", "latent width per joint token"),
    k("model.blocks", "transformer blocks"),
    k("model.time_dim", "timestep embedding width (even)"),
    k("model.ffn_mult", "feed-forward expansion factor"),
    k("model.text_dim", "text embedding width"),
    k("planner.frames", "frames per agent"),
    k("planner.fps", "frame rate"),
    k("planner.group_spacing", "anchor spacing at density 0.5 (m)"),
    k("planner.v_max", "pelvis speed limit (m/s)"),
    k("planner.eps_return", "passing return tolerance (m)"),
    k("planner.keyframe_stride", "frames between keyframes"),
    k("planner.interp", "keyframe interpolation: catmull_rom | linear"),
    k("planner.walk_speed", "walking group speed (m/s)"),
    k("planner.hand_distance", "gap between paired hands (m)"),
    k("planner.hand_height", "height of paired hands (m)"),
    k("planner.interaction_alpha", "interaction level that enables paired hands"),
    k("llm.endpoint", "chat-completions URL; empty plans offline"),
    k("llm.model", "model name sent to the endpoint"),
    k("llm.timeout_ms", "per-request timeout"),
    k("llm.max_retries", "retries after the first attempt"),
    k("llm.backoff_ms", "first retry delay, doubled per retry"),
    k("metrics.threshold_m", "spatial error threshold (m)"),
    k("metrics.foot_height", "foot-skating height threshold (m)"),
    k("metrics.foot_slide", "foot-skating slide threshold (m/frame)"),
    k("metrics.r_precision_pool", "R-precision pool size"),
    k("metrics.diversity_pairs", "pairs sampled for diversity"),
    k("metrics.text_projection_seed", "seed of the text feature projection"),
    k("paths.out_dir", "output directory"),
    k("paths.weights", "checkpoint path"),
];

/// Environment variable that overrides `key`, e.g. `CMG_GUIDANCE_LAST_N`.
pub fn env_name(key: &str) -> String {
    format!("CMG_{}", key.replace('.', "_").to_uppercase())
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::validation(format!("invalid value {v:?} for {key}")))
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|e: Error| Error::validation(format!("{key}: {e}")))
}

fn parse_opt(key: &str, v: &str) -> Result<Option<f64>> {
    match v.trim() {
        "none" | "" => Ok(None),
        s => parse(key, s).map(Some),
    }
}

fn show_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| format!("{x:?}"))
}

fn name_of<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl RunConfig {
    /// Current value of `key` as text.
    pub fn get(&self, key: &str) -> Result<String> {
        let f = |x: f64| format!("{x:?}");
        Ok(match key {
            "seed" => self.seed.to_string(),
            "diffusion.T" => self.diffusion.t.to_string(),
            "diffusion.beta_start" => f(self.diffusion.beta_start),
            "diffusion.beta_end" => f(self.diffusion.beta_end),
            "diffusion.infer_steps" => self.diffusion.infer_steps.to_string(),
            "diffusion.cfg_scale" => f(self.diffusion.cfg_scale),
            "diffusion.mean_mode" => name_of(&self.diffusion.mean_mode),
            "guidance.enabled" => self.guidance.enabled.to_string(),
            "guidance.eta" => f(self.guidance.params.eta),
            "guidance.step_rule" => name_of(&self.guidance.params.step_rule),
            "guidance.inner_steps" => self.guidance.params.inner_steps.to_string(),
            "guidance.last_n" => self.guidance.params.last_n.to_string(),
            "guidance.clamp" => show_opt(self.guidance.params.clamp),
            "loss.lambda_whole" => f(self.loss.whole),
            "loss.lambda_con" => f(self.loss.con),
            "loss.lambda_foot" => f(self.loss.foot),
            "loss.h_thresh" => f(self.loss.h_thresh),
            "loss.con_mode" => name_of(&self.loss.con_mode),
            "train.steps" => self.train.steps.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.lr" => f(self.train.lr),
            "train.optimizer" => name_of(&self.train.optimizer),
            "train.momentum" => f(self.train.momentum),
            "train.lr_decay_fraction" => f(self.train.lr_decay_fraction),
            "train.text_dropout" => f(self.train.text_dropout),
            "train.grad_clip" => show_opt(self.train.grad_clip),
            "train.sequences" => self.train.sequences.to_string(),
            "model.latent" => self.model.latent.to_string(),
            "model.blocks" => self.model.blocks.to_string(),
            "model.time_dim" => self.model.time_dim.to_string(),
            "model.ffn_mult" => self.model.ffn_mult.to_string(),
            "model.text_dim" => self.model.text_dim.to_string(),
            "planner.frames" => self.planner.frames.to_string(),
            "planner.fps" => f(self.planner.fps),
            "planner.group_spacing" => f(self.planner.group_spacing),
            "planner.v_max" => f(self.planner.v_max),
            "planner.eps_return" => f(self.planner.eps_return),
            "planner.keyframe_stride" => self.planner.keyframe_stride.to_string(),
            "planner.interp" => name_of(&self.planner.interp),
            "planner.walk_speed" => f(self.planner.walk_speed),
            "planner.hand_distance" => f(self.planner.hand_distance),
            "planner.hand_height" => f(self.planner.hand_height),
            "planner.interaction_alpha" => f(self.planner.interaction_alpha),
            "llm.endpoint" => self.llm.endpoint.clone(),
            "llm.model" => self.llm.model.clone(),
            "llm.timeout_ms" => self.llm.timeout_ms.to_string(),
            "llm.max_retries" => self.llm.max_retries.to_string(),
            "llm.backoff_ms" => self.llm.backoff_ms.to_string(),
            "metrics.threshold_m" => f(self.metrics.threshold_m),
            "metrics.foot_height" => f(self.metrics.foot_height),
            "metrics.foot_slide" => f(self.metrics.foot_slide),
            "metrics.r_precision_pool" => self.metrics.r_precision_pool.to_string(),
            "metrics.diversity_pairs" => self.metrics.diversity_pairs.to_string(),
            "metrics.text_projection_seed" => self.metrics.text_projection_seed.to_string(),
            "paths.out_dir" => self.paths.out_dir.display().to_string(),
            "paths.weights" => self.paths.weights.display().to_string(),
            other => return Err(unknown(other)),
        })
    }

    /// Parses `v` into the field named by `key`.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.guidance.params;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "diffusion.T" => self.diffusion.t = parse(key, v)?,
            "diffusion.beta_start" => self.diffusion.beta_start = parse(key, v)?,
            "diffusion.beta_end" => self.diffusion.beta_end = parse(key, v)?,
            "diffusion.infer_steps" => self.diffusion.infer_steps = parse(key, v)?,
            "diffusion.cfg_scale" => self.diffusion.cfg_scale = parse(key, v)?,
            "diffusion.mean_mode" => self.diffusion.mean_mode = parse_enum(key, v)?,
            "guidance.enabled" => self.guidance.enabled = parse(key, v)?,
            "guidance.eta" => g.eta = parse(key, v)?,
            "guidance.step_rule" => g.step_rule = parse_enum::<StepRule>(key, v)?,
            "guidance.inner_steps" => g.inner_steps = parse(key, v)?,
            "guidance.last_n" => g.last_n = parse(key, v)?,
            "guidance.clamp" => g.clamp = parse_opt(key, v)?,
            "loss.lambda_whole" => self.loss.whole = parse(key, v)?,
            "loss.lambda_con" => self.loss.con = parse(key, v)?,
            "loss.lambda_foot" => self.loss.foot = parse(key, v)?,
            "loss.h_thresh" => self.loss.h_thresh = parse(key, v)?,
            "loss.con_mode" => self.loss.con_mode = parse_enum::<ConMode>(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.optimizer" => self.train.optimizer = parse_enum::<Optimizer>(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.lr_decay_fraction" => self.train.lr_decay_fraction = parse(key, v)?,
            "train.text_dropout" => self.train.text_dropout = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse_opt(key, v)?,
            "train.sequences" => self.train.sequences = parse(key, v)?,
            "model.latent" => self.model.latent = parse(key, v)?,
            "model.blocks" => self.model.blocks = parse(key, v)?,
            "model.time_dim" => self.model.time_dim = parse(key, v)?,
            "model.ffn_mult" => self.model.ffn_mult = parse(key, v)?,
            "model.text_dim" => self.model.text_dim = parse(key, v)?,
            "planner.frames" => self.planner.frames = parse(key, v)?,
            "planner.fps" => self.planner.fps = parse(key, v)?,
            "planner.group_spacing" => self.planner.group_spacing = parse(key, v)?,
            "planner.v_max" => self.planner.v_max = parse(key, v)?,
            "planner.eps_return" => self.planner.eps_return = parse(key, v)?,
            "planner.keyframe_stride" => self.planner.keyframe_stride = parse(key, v)?,
            "planner.interp" => self.planner.interp = parse_enum::<Interp>(key, v)?,
            "planner.walk_speed" => self.planner.walk_speed = parse(key, v)?,
            "planner.hand_distance" => self.planner.hand_distance = parse(key, v)?,
            "planner.hand_height" => self.planner.hand_height = parse(key, v)?,
            "planner.interaction_alpha" => self.planner.interaction_alpha = parse(key, v)?,
            "llm.endpoint" => self.llm.endpoint = v.trim().to_owned(),
            "llm.model" => self.llm.model = v.trim().to_owned(),
            "llm.timeout_ms" => self.llm.timeout_ms = parse(key, v)?,
            "llm.max_retries" => self.llm.max_retries = parse(key, v)?,
            "llm.backoff_ms" => self.llm.backoff_ms = parse(key, v)?,
            "metrics.threshold_m" => self.metrics.threshold_m = parse(key, v)?,
            "metrics.foot_height" => self.metrics.foot_height = parse(key, v)?,
            "metrics.foot_slide" => self.metrics.foot_slide = parse(key, v)?,
            "metrics.r_precision_pool" => self.metrics.r_precision_pool = parse(key, v)?,
            "metrics.diversity_pairs" => self.metrics.diversity_pairs = parse(key, v)?,
            "metrics.text_projection_seed" => self.metrics.text_projection_seed = parse(key, v)?,
            "paths.out_dir" => self.paths.out_dir = PathBuf::from(v.trim()),
            "paths.weights" => self.paths.weights = PathBuf::from(v.trim()),
            other => return Err(unknown(other)),
        }
        Ok(())
    }

    /// Applies `key = value` pairs from TOML text. Nested tables and dotted
    /// keys are equivalent.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::validation(format!("config file: {}", e.message())))?;
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(table), &mut flat)?;
        for (key, value) in flat {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    /// Applies every `CMG_*` variable that names a known key.
    pub fn apply_env_from<F: Fn(&str) -> Option<String>>(&mut self, lookup: F) -> Result<()> {
        for spec in KEYS {
            if let Some(v) = lookup(&env_name(spec.key)) {
                self.set(spec.key, &v)?;
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let p = p.as_ref();
            let (key, value) = p
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("override {p:?} is not key=value")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults, then the file, then the process environment, then overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_toml(&text)?;
        }
        cfg.apply_env_from(|name| std::env::var(name).ok())?;
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.diffusion;
        if d.t == 0 || d.infer_steps == 0 || d.infer_steps > d.t {
            return Err(Error::validation("diffusion.infer_steps must lie in 1..=diffusion.T"));
        }
        if !(d.cfg_scale.is_finite()) {
            return Err(Error::validation("diffusion.cfg_scale must be finite"));
        }
        self.guidance.params.validate(d.infer_steps)?;
        self.train_config().validate()?;
        self.model_config(22).validate()?;
        self.planner.validate()?;
        let m = &self.metrics;
        if !(m.threshold_m > 0.0 && m.foot_height >= 0.0 && m.foot_slide >= 0.0) {
            return Err(Error::validation("metrics thresholds must be positive"));
        }
        if m.r_precision_pool < 2 || m.diversity_pairs == 0 {
            return Err(Error::validation("metrics.r_precision_pool >= 2 and metrics.diversity_pairs >= 1"));
        }
        if self.train.sequences == 0 {
            return Err(Error::validation("train.sequences must be at least 1"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch: t.batch,
            lr: t.lr,
            optimizer: t.optimizer,
            momentum: t.momentum,
            lr_decay_fraction: t.lr_decay_fraction,
            text_dropout: t.text_dropout,
            seed: self.seed,
            loss: self.loss,
            diffusion_steps: self.diffusion.t,
            beta_start: self.diffusion.beta_start,
            beta_end: self.diffusion.beta_end,
            grad_clip: t.grad_clip,
        }
    }

    pub fn model_config(&self, joints: usize) -> ModelConfig {
        ModelConfig {
            frames: self.planner.frames,
            joints,
            latent: self.model.latent,
            blocks: self.model.blocks,
            text_dim: self.model.text_dim,
            time_dim: self.model.time_dim,
            ffn_mult: self.model.ffn_mult,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            steps: self.diffusion.infer_steps,
            cfg_scale: self.diffusion.cfg_scale,
            mean_mode: self.diffusion.mean_mode,
            guidance: self.guidance.enabled.then_some(self.guidance.params),
            fps: self.planner.fps,
        }
    }

    /// Client settings, or `None` when no endpoint is configured. The API
    /// key comes only from the environment.
    pub fn llm_config(&self) -> Option<LlmConfig> {
        if self.llm.endpoint.is_empty() {
            return None;
        }
        let mut c = LlmConfig::new(self.llm.endpoint.clone());
        c.api_key = std::env::var(crate::planner::llm::ENV_API_KEY).ok().filter(|s| !s.is_empty());
        c.model = self.llm.model.clone();
        c.timeout_ms = self.llm.timeout_ms;
        c.max_retries = self.llm.max_retries;
        c.backoff_ms = self.llm.backoff_ms;
        Some(c)
    }

    /// Every key with its current value, in table order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|s| (s.key, self.get(s.key).expect("table keys are known")))
            .collect()
    }
}

fn unknown(key: &str) -> Error {
    Error::validation(format!("unknown config key {key:?}"))
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) -> Result<()> {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out)?;
            }
        }
        toml::Value::String(s) => {
            out.insert(prefix.to_owned(), s.clone());
        }
        toml::Value::Integer(i) => {
            out.insert(prefix.to_owned(), i.to_string());
        }
        toml::Value::Float(x) => {
            out.insert(prefix.to_owned(), format!("{x:?}"));
        }
        toml::Value::Boolean(b) => {
            out.insert(prefix.to_owned(), b.to_string());
        }
        _ => return Err(Error::validation(format!("config key {prefix}: unsupported value type"))),
    }
    Ok(())
}

/// The `--help` table: one line per key with its default.
pub fn help_table() -> String {
    let d = RunConfig::default();
    let width = KEYS.iter().map(|s| s.key.len()).max().unwrap_or(0);
    let mut out = String::new();
    for s in KEYS {
        let v = d.get(s.key).expect("table keys are known");
        let v = if v.is_empty() { "\"\"".to_owned() } else { v };
        out.push_str(&format!("  {:width$}  {}  [default: {}]\n", s.key, s.help, v));
    }
    out
}
