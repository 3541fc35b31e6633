//! Strided ancestral sampling with classifier-free guidance and late IK
//! guidance.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::AgentControl;
use crate::diffusion::{cfg_combine, gaussian, reverse_step, DiffusionSchedule, MeanMode};
use crate::error::{Error, Result};
use crate::guidance::{ik_guide, GuidanceConfig};
use crate::model::{denoise_forward, DenoiserWeights, TextCondition};
use crate::motion::{RelativeMotion, Skeleton, DEFAULT_FPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub mean_mode: MeanMode,
    /// IK guidance for the final iterations; `None` disables it.
    pub guidance: Option<GuidanceConfig>,
    pub fps: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: 50,
            cfg_scale: 2.5,
            mean_mode: MeanMode::default(),
            guidance: Some(GuidanceConfig::default()),
            fps: DEFAULT_FPS,
        }
    }
}

/// Draws one motion for one agent.
///
/// `sched` is the full training schedule; it is respaced to `cfg.steps`
/// evenly spaced timesteps. Control targets are in the agent's first-frame
/// root frame. The result is in physical (denormalized) units.
pub fn sample<R: Rng + ?Sized>(
    w: &DenoiserWeights,
    sched: &DiffusionSchedule,
    text: &TextCondition,
    control: &AgentControl,
    skel: &Skeleton,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<RelativeMotion> {
    let (f, j) = (w.config.frames, w.config.joints);
    if cfg.steps == 0 || cfg.steps > sched.len() {
        return Err(Error::validation(format!(
            "sampling steps must lie in 1..={}, got {}",
            sched.len(),
            cfg.steps
        )));
    }
    if control.frames != f || control.joints != j {
        return Err(Error::validation(format!(
            "control covers {} frames x {} joints, model expects {f} x {j}",
            control.frames, control.joints
        )));
    }
    if skel.num_joints() != j {
        return Err(Error::shape("sample skeleton", &[j], &[skel.num_joints()]));
    }
    control.validate()?;
    if let Some(g) = &cfg.guidance {
        g.validate(cfg.steps)?;
    }
    let strided = sched.respace(cfg.steps)?;
    let null = text.to_null();
    let d = w.config.repr_dim();
    let mut x = gaussian(rng, f * d);
    for k in (1..=cfg.steps).rev() {
        let t = strided.timesteps()[k - 1];
        let cond = denoise_forward(w, &x, t, text, control)?;
        let uncond = denoise_forward(w, &x, t, &null, control)?;
        let mut x0 = cfg_combine(&cond, &uncond, cfg.cfg_scale)?;
        if let Some(g) = &cfg.guidance {
            if k <= g.last_n && !control.is_empty() {
                let raw = RelativeMotion::new(f, j, cfg.fps, w.norm.denormalize(&x0))?;
                let guided = ik_guide(&raw, control, skel, g)?;
                x0 = w.norm.normalize(&guided.data);
            }
        }
        x = reverse_step(&x, &x0, k, &strided, cfg.mean_mode, Some(&mut *rng))?;
    }
    RelativeMotion::new(f, j, cfg.fps, w.norm.denormalize(&x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::build_schedule;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(joints: usize) -> DenoiserWeights {
        let cfg = ModelConfig {
            frames: 6,
            joints,
            latent: 8,
            blocks: 1,
            text_dim: 8,
            time_dim: 8,
            ffn_mult: 1,
        };
        DenoiserWeights::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn single_step_and_determinism() {
        let skel = Skeleton::hml22();
        let w = tiny(22);
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        let text = TextCondition {
            embedding: vec![0.1; 8],
            null: false,
        };
        let ctrl = AgentControl::empty(6, 22);
        let cfg = SampleConfig {
            steps: 1,
            guidance: None,
            ..SampleConfig::default()
        };
        let a = sample(&w, &s, &text, &ctrl, &skel, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.data.len(), 6 * 263);
        assert!(a.data.iter().all(|v| v.is_finite()));
        let cfg = SampleConfig {
            steps: 5,
            guidance: Some(GuidanceConfig {
                last_n: 2,
                ..GuidanceConfig::default()
            }),
            ..SampleConfig::default()
        };
        let b1 = sample(&w, &s, &text, &ctrl, &skel, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b2 = sample(&w, &s, &text, &ctrl, &skel, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn rejects_mismatched_control() {
        let skel = Skeleton::hml22();
        let w = tiny(22);
        let s = build_schedule(100, 1e-4, 0.02).unwrap();
        let text = TextCondition::null(8);
        let bad = AgentControl::empty(7, 22);
        let err = sample(&w, &s, &text, &bad, &skel, &SampleConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(err.unwrap_err().is_validation());
        let too_many = SampleConfig {
            steps: 101,
            ..SampleConfig::default()
        };
        let ok_ctrl = AgentControl::empty(6, 22);
        assert!(sample(&w, &s, &text, &ok_ctrl, &skel, &too_many, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
