//! Small-scale training loop for the denoiser.

use std::rc::Rc;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{ConLoss, FootLoss};
use super::net::{forward_graph, Inputs, Params};
use super::text::TextCondition;
use super::{DenoiserWeights, LossParts, LossWeights, ModelConfig, Normalizer};
use crate::autodiff::{Graph, Tensor};
use crate::control::AgentControl;
use crate::diffusion::{build_schedule, forward_noise, gaussian, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::motion::repr::relative_to_global_raw;
use crate::motion::{RelativeMotion, Skeleton};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    SgdMomentum,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" | "sgd_momentum" => Ok(Optimizer::SgdMomentum),
            other => Err(Error::validation(format!("unknown optimizer {other:?} (expected adam | sgd)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    /// Fraction of final steps trained at a tenth of the learning rate.
    pub lr_decay_fraction: f64,
    /// Probability of replacing the text with the null condition.
    pub text_dropout: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 2,
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            lr_decay_fraction: 0.2,
            text_dropout: 0.1,
            seed: 0,
            loss: LossWeights::default(),
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::validation("batch must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::validation("learning rate must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.text_dropout) || !(0.0..=1.0).contains(&self.lr_decay_fraction) {
            return Err(Error::validation("text_dropout and lr_decay_fraction must lie in [0, 1]"));
        }
        self.loss.validate()
    }

    fn lr_at(&self, step: usize) -> f64 {
        let decay_from = ((1.0 - self.lr_decay_fraction) * self.steps as f64).round() as usize;
        if step >= decay_from {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// One training example. Without an explicit control signal a random one
/// is drawn from the ground truth at every step.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub text: TextCondition,
    pub motion: RelativeMotion,
    pub control: Option<AgentControl>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch-averaged loss parts per step.
    pub history: Vec<LossParts>,
}

impl TrainReport {
    /// Mean of the parts over the first or last `n` steps.
    fn window(&self, n: usize, last: bool) -> LossParts {
        let n = n.min(self.history.len()).max(1);
        let slice = if last {
            &self.history[self.history.len().saturating_sub(n)..]
        } else {
            &self.history[..n.min(self.history.len())]
        };
        let k = slice.len().max(1) as f64;
        let mut p = LossParts::default();
        for h in slice {
            p.whole += h.whole / k;
            p.con += h.con / k;
            p.foot += h.foot / k;
            p.total += h.total / k;
        }
        p
    }

    pub fn initial(&self, n: usize) -> LossParts {
        self.window(n, false)
    }

    pub fn last(&self, n: usize) -> LossParts {
        self.window(n, true)
    }
}

/// Random control drawn from a ground-truth global motion.
pub fn random_control<R: Rng + ?Sized>(positions: &[f64], frames: usize, joints: usize, rng: &mut R) -> AgentControl {
    let mut c = AgentControl::empty(frames, joints);
    let put = |c: &mut AgentControl, i: usize, j: usize| {
        let o = 3 * (i * joints + j);
        c.set(i, j, [positions[o], positions[o + 1], positions[o + 2]]);
    };
    match rng.random_range(0..4) {
        0 => {}
        1 => (0..frames).for_each(|i| put(&mut c, i, 0)),
        2 => {
            let stride = rng.random_range(5..=15);
            let start = rng.random_range(0..stride);
            (start..frames).step_by(stride).for_each(|i| put(&mut c, i, 0));
        }
        _ => {
            let count = rng.random_range(1..=3);
            for _ in 0..count {
                let j = rng.random_range(0..joints);
                let density = rng.random_range(0.05..0.5);
                for i in 0..frames {
                    if rng.random_bool(density) {
                        put(&mut c, i, j);
                    }
                }
            }
        }
    }
    c
}

struct OptimState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Total training loss of one example and its gradient with respect to every
/// weight tensor, in [`DenoiserWeights::tensors`] order.
///
/// `x0_norm` and `x_t` are normalized; `L_con` and `L_foot` are evaluated on
/// the denormalized prediction.
#[allow(clippy::too_many_arguments)]
pub fn example_gradients(
    w: &DenoiserWeights,
    skel: &Skeleton,
    lw: &LossWeights,
    fps: f64,
    x0_norm: &[f64],
    x_t: &[f64],
    t: usize,
    text: &TextCondition,
    control: &AgentControl,
) -> Result<(LossParts, Vec<Tensor>)> {
    let cfg = &w.config;
    let inp = Inputs::new(w, x_t, t, text, control)?;
    let mut g = Graph::new();
    let p = Params::trainable(&mut g, w);
    let out = forward_graph(&mut g, &p, &inp);
    let d = cfg.repr_dim();
    let target = Rc::new(Tensor::from_vec(&[cfg.frames, d], x0_norm.to_vec()));
    let whole = g.mse(out, target);

    let std = g.constant(Tensor::from_vec(&[d], w.norm.std.clone()));
    let mean = g.constant(Tensor::from_vec(&[d], w.norm.mean.clone()));
    let raw = g.mul_bcast(out, std);
    let raw = g.add_bcast(raw, mean);
    let raw_val = g.value(raw).data().to_vec();

    let con_op = ConLoss::new(control, fps, lw.con_mode);
    let con_v = con_op.value(&raw_val);
    let con = g.custom(raw, Tensor::scalar(con_v), Box::new(con_op));
    let foot_op = FootLoss::new(skel, cfg.frames, fps, lw.h_thresh);
    let foot_v = foot_op.value(&raw_val);
    let foot = g.custom(raw, Tensor::scalar(foot_v), Box::new(foot_op));

    let a = g.scale(whole, lw.whole);
    let b = g.scale(con, lw.con);
    let c = g.scale(foot, lw.foot);
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    let parts = LossParts {
        whole: g.value(whole).item(),
        con: con_v,
        foot: foot_v,
        total: g.value(total).item(),
    };
    let mut grads = g.backward(total);
    let tensors = p
        .vars()
        .iter()
        .zip(w.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((parts, tensors))
}

fn check_dataset(data: &[TrainSample], cfg: &ModelConfig, skel: &Skeleton) -> Result<()> {
    if data.is_empty() {
        return Err(Error::validation("training dataset is empty"));
    }
    if skel.num_joints() != cfg.joints {
        return Err(Error::shape("train_toy skeleton", &[cfg.joints], &[skel.num_joints()]));
    }
    for s in data {
        if s.motion.frames != cfg.frames || s.motion.joints != cfg.joints {
            return Err(Error::shape(
                "train_toy sample",
                &[cfg.frames, cfg.joints],
                &[s.motion.frames, s.motion.joints],
            ));
        }
        if s.text.embedding.len() != cfg.text_dim {
            return Err(Error::shape("train_toy text", &[cfg.text_dim], &[s.text.embedding.len()]));
        }
        if let Some(c) = &s.control {
            if c.frames != cfg.frames || c.joints != cfg.joints {
                return Err(Error::shape("train_toy control", &[cfg.frames, cfg.joints], &[c.frames, c.joints]));
            }
            c.validate()?;
        }
    }
    Ok(())
}

/// Trains a fresh denoiser on `data`. Deterministic for a fixed seed.
pub fn train_toy(
    data: &[TrainSample],
    model: ModelConfig,
    cfg: &TrainConfig,
    skel: &Skeleton,
) -> Result<(DenoiserWeights, TrainReport)> {
    model.validate()?;
    cfg.validate()?;
    check_dataset(data, &model, skel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = DenoiserWeights::init(model, &mut rng)?;
    w.norm = Normalizer::fit(w.config.repr_dim(), data.iter().map(|s| s.motion.data.as_slice()));
    let sched = build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
    let report = train_loop(&mut w, data, cfg, skel, &sched, &mut rng)?;
    Ok((w, report))
}

/// Continues training existing weights (normalization is kept).
pub fn train_more(
    w: &mut DenoiserWeights,
    data: &[TrainSample],
    cfg: &TrainConfig,
    skel: &Skeleton,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(data, &w.config, skel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sched = build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
    train_loop(w, data, cfg, skel, &sched, &mut rng)
}

fn train_loop(
    w: &mut DenoiserWeights,
    data: &[TrainSample],
    cfg: &TrainConfig,
    skel: &Skeleton,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    let normalized: Vec<Vec<f64>> = data.iter().map(|s| w.norm.normalize(&s.motion.data)).collect();
    let globals: Vec<Vec<f64>> = data
        .iter()
        .map(|s| relative_to_global_raw(&s.motion.data, s.motion.frames, s.motion.joints, s.motion.fps))
        .collect();
    let mut state = OptimState {
        m: w.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        v: w.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        t: 0,
    };
    let mut report = TrainReport::default();
    let (frames, joints) = (w.config.frames, w.config.joints);
    for step in 0..cfg.steps {
        let mut acc: Vec<Vec<f64>> = w.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        let mut parts = LossParts::default();
        for _ in 0..cfg.batch {
            let k = rng.random_range(0..data.len());
            let sample = &data[k];
            let t = rng.random_range(0..sched.len());
            let eps = gaussian(rng, normalized[k].len());
            let noised = forward_noise(&normalized[k], t, &eps, sched)?;
            let text = if rng.random_bool(cfg.text_dropout) {
                sample.text.to_null()
            } else {
                sample.text.clone()
            };
            let control = match &sample.control {
                Some(c) => c.clone(),
                None => random_control(&globals[k], frames, joints, rng),
            };
            let (p, grads) = example_gradients(
                w,
                skel,
                &cfg.loss,
                sample.motion.fps,
                &normalized[k],
                &noised.x_t,
                t,
                &text,
                &control,
            )?;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
            }
            parts.whole += p.whole;
            parts.con += p.con;
            parts.foot += p.foot;
            parts.total += p.total;
        }
        let inv = 1.0 / cfg.batch as f64;
        parts.whole *= inv;
        parts.con *= inv;
        parts.foot *= inv;
        parts.total *= inv;
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {} (parts {parts:?})", parts.total),
            });
        }
        let mut sq = 0.0;
        for a in acc.iter_mut() {
            for x in a.iter_mut() {
                *x *= inv;
                sq += *x * *x;
            }
        }
        if !sq.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        let clip = match cfg.grad_clip {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        apply_update(w, &acc, clip, cfg, cfg.lr_at(step), &mut state);
        if step % 100 == 0 || step + 1 == cfg.steps {
            info!(
                "step {step}: total {:.5} whole {:.5} con {:.5} foot {:.5}",
                parts.total, parts.whole, parts.con, parts.foot
            );
        } else {
            debug!("step {step}: total {:.5}", parts.total);
        }
        report.history.push(parts);
    }
    Ok(report)
}

fn apply_update(w: &mut DenoiserWeights, grads: &[Vec<f64>], clip: f64, cfg: &TrainConfig, lr: f64, st: &mut OptimState) {
    st.t += 1;
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let bc1 = 1.0 - f64::powi(b1, st.t);
    let bc2 = 1.0 - f64::powi(b2, st.t);
    for (k, t) in w.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut st.m[k], &mut st.v[k], &grads[k]);
        for (i, x) in t.data_mut().iter_mut().enumerate() {
            let gi = g[i] * clip;
            match cfg.optimizer {
                Optimizer::Adam => {
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    *x -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                }
                Optimizer::SgdMomentum => {
                    m[i] = cfg.momentum * m[i] + gi;
                    *x -= lr * m[i];
                }
            }
        }
    }
}
