//! IK guidance: gradient descent on the mean distance between controlled
//! joints and their targets, differentiated through forward kinematics.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::control::AgentControl;
use crate::error::{Error, Result};
use crate::model::loss::ConLoss;
use crate::model::ConMode;
use crate::motion::repr::{relative_to_global_raw, relative_to_global_vjp};
use crate::motion::{RelativeMotion, Skeleton};

/// How the length of each inner update is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `mu <- mu - eta * grad`.
    Fixed,
    /// `mu <- mu - eta * D / |grad|^2 * grad`, the Polyak step for a zero
    /// optimum. The update shrinks with the remaining discrepancy.
    #[default]
    Polyak,
}

impl std::str::FromStr for StepRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(StepRule::Fixed),
            "polyak" => Ok(StepRule::Polyak),
            other => Err(Error::validation(format!(
                "unknown guidance step rule '{other}' (expected fixed or polyak)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Step size of each inner update, or the fraction of the Polyak step.
    pub eta: f64,
    pub step_rule: StepRule,
    pub inner_steps: usize,
    /// Number of final sampling steps with guidance enabled.
    pub last_n: usize,
    /// Optional cap on the norm of a single update.
    pub clamp: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            eta: 0.5,
            step_rule: StepRule::Polyak,
            inner_steps: 5,
            last_n: 10,
            clamp: None,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, infer_steps: usize) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::validation("guidance.eta must be positive"));
        }
        if self.inner_steps == 0 {
            return Err(Error::validation("guidance.inner_steps must be at least 1"));
        }
        if self.last_n > infer_steps {
            return Err(Error::validation(format!(
                "guidance.last_n = {} exceeds the {infer_steps} sampling steps",
                self.last_n
            )));
        }
        if let Some(c) = self.clamp {
            if !(c > 0.0) {
                return Err(Error::validation("guidance.clamp must be positive"));
            }
        }
        Ok(())
    }
}

/// Mean controlled-joint distance and the number of controlled entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Discrepancy {
    pub value: f64,
    pub controlled: usize,
}

impl Discrepancy {
    /// True when nothing is controlled and guidance is a no-op.
    pub fn no_control(&self) -> bool {
        self.controlled == 0
    }
}

fn check(mu: &RelativeMotion, control: &AgentControl, skel: &Skeleton) -> Result<()> {
    if mu.joints != skel.num_joints() || control.joints != mu.joints || control.frames != mu.frames {
        return Err(Error::shape(
            "ik_discrepancy",
            &[mu.frames, mu.joints],
            &[control.frames, control.joints],
        ));
    }
    if mu.data.len() != mu.frames * mu.dim() {
        return Err(Error::shape("ik_discrepancy", &[mu.frames, mu.dim()], &[mu.data.len()]));
    }
    control.validate()
}

pub fn ik_discrepancy(mu: &RelativeMotion, control: &AgentControl, skel: &Skeleton) -> Result<Discrepancy> {
    check(mu, control, skel)?;
    let op = ConLoss::new(control, mu.fps, ConMode::Normalized);
    Ok(Discrepancy {
        value: op.value(&mu.data),
        controlled: control.controlled_count(),
    })
}

/// Discrepancy and its gradient with respect to every relative channel.
pub fn ik_discrepancy_grad(
    mu: &RelativeMotion,
    control: &AgentControl,
    skel: &Skeleton,
) -> Result<(Discrepancy, Vec<f64>)> {
    check(mu, control, skel)?;
    let controlled = control.controlled_count();
    if controlled == 0 {
        return Ok((Discrepancy { value: 0.0, controlled }, vec![0.0; mu.data.len()]));
    }
    let (f, j) = (mu.frames, mu.joints);
    let pos = relative_to_global_raw(&mu.data, f, j, mu.fps);
    let count = controlled as f64;
    let mut gp = vec![0.0; pos.len()];
    let mut total = 0.0;
    for c in 0..f * j {
        if control.mask[c] == 0.0 {
            continue;
        }
        let d = [
            pos[3 * c] - control.targets[3 * c],
            pos[3 * c + 1] - control.targets[3 * c + 1],
            pos[3 * c + 2] - control.targets[3 * c + 2],
        ];
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        total += n;
        // zero distance: subgradient 0
        if n > 0.0 {
            for k in 0..3 {
                gp[3 * c + k] = d[k] / (n * count);
            }
        }
    }
    let grad = relative_to_global_vjp(&mu.data, f, j, mu.fps, &gp);
    Ok((
        Discrepancy {
            value: total / count,
            controlled,
        },
        grad,
    ))
}

/// Result of [`ik_guide_traced`]: the adjusted mean and `D` before each
/// inner step plus after the last one.
#[derive(Clone, Debug)]
pub struct GuideTrace {
    pub motion: RelativeMotion,
    pub discrepancies: Vec<f64>,
    pub aborted: bool,
}

pub fn ik_guide(mu: &RelativeMotion, control: &AgentControl, skel: &Skeleton, cfg: &GuidanceConfig) -> Result<RelativeMotion> {
    ik_guide_traced(mu, control, skel, cfg).map(|t| t.motion)
}

/// `inner_steps` updates `mu <- mu - eta * dD/dmu` over the whole relative
/// vector. A non-finite gradient abandons the step and returns `mu` as given.
pub fn ik_guide_traced(
    mu: &RelativeMotion,
    control: &AgentControl,
    skel: &Skeleton,
    cfg: &GuidanceConfig,
) -> Result<GuideTrace> {
    check(mu, control, skel)?;
    if control.is_empty() {
        return Ok(GuideTrace {
            motion: mu.clone(),
            discrepancies: vec![0.0],
            aborted: false,
        });
    }
    let mut cur = mu.clone();
    let mut trace = Vec::with_capacity(cfg.inner_steps + 1);
    for _ in 0..cfg.inner_steps {
        let (d, grad) = ik_discrepancy_grad(&cur, control, skel)?;
        trace.push(d.value);
        if grad.iter().any(|g| !g.is_finite()) {
            warn!("IK guidance produced a non-finite gradient; step skipped");
            return Ok(GuideTrace {
                motion: mu.clone(),
                discrepancies: trace,
                aborted: true,
            });
        }
        let sq: f64 = grad.iter().map(|g| g * g).sum();
        if sq == 0.0 {
            break;
        }
        let mut scale = match cfg.step_rule {
            StepRule::Fixed => cfg.eta,
            StepRule::Polyak => cfg.eta * d.value / sq,
        };
        if let Some(c) = cfg.clamp {
            let norm = sq.sqrt() * scale;
            if norm > c {
                scale *= c / norm;
            }
        }
        for (x, g) in cur.data.iter_mut().zip(&grad) {
            *x -= scale * g;
        }
    }
    trace.push(ik_discrepancy(&cur, control, skel)?.value);
    Ok(GuideTrace {
        motion: cur,
        discrepancies: trace,
        aborted: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{relative_to_global, ReprLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn walk(skel: &Skeleton, f: usize) -> RelativeMotion {
        let layout = ReprLayout::new(skel.num_joints());
        let rest = skel.rest_pose();
        let mut m = RelativeMotion::zeros(f, skel.num_joints(), 20.0);
        for i in 0..f {
            let row = m.frame_mut(i);
            row[0] = 0.2;
            row[2] = 1.0;
            row[3] = 0.9;
            for (j, r) in rest.iter().enumerate().skip(1) {
                let o = layout.local_pos(j);
                row[o..o + 3].copy_from_slice(r);
            }
        }
        m
    }

    #[test]
    fn hand_cases() {
        let skel = Skeleton::hml22();
        let m = walk(&skel, 10);
        let g = relative_to_global(&m, &skel).unwrap();
        let mut c = AgentControl::empty(10, 22);
        c.set(3, 0, g.pos(3, 0));
        assert_eq!(ik_discrepancy(&m, &c, &skel).unwrap().value, 0.0);
        let p = g.pos(5, 20);
        c.set(5, 20, [p[0], p[1] + 0.5, p[2]]);
        let d = ik_discrepancy(&m, &c, &skel).unwrap();
        assert!((d.value - 0.25).abs() < 1e-12);

        let mut three = AgentControl::empty(10, 22);
        for (k, off) in [0.1, 0.2, 0.6].into_iter().enumerate() {
            let p = g.pos(k, 4);
            three.set(k, 4, [p[0] + off, p[1], p[2]]);
        }
        assert!((ik_discrepancy(&m, &three, &skel).unwrap().value - 0.3).abs() < 1e-12);

        let empty = ik_discrepancy(&m, &AgentControl::empty(10, 22), &skel).unwrap();
        assert!(empty.no_control() && empty.value == 0.0);
    }

    #[test]
    fn identity_when_matched_or_unmasked() {
        let skel = Skeleton::hml22();
        let m = walk(&skel, 8);
        let g = relative_to_global(&m, &skel).unwrap();
        let mut c = AgentControl::empty(8, 22);
        c.set(7, 0, g.pos(7, 0));
        c.set(2, 21, g.pos(2, 21));
        let cfg = GuidanceConfig::default();
        assert_eq!(ik_guide(&m, &c, &skel, &cfg).unwrap(), m);
        assert_eq!(ik_guide(&m, &AgentControl::empty(8, 22), &skel, &cfg).unwrap(), m);
    }

    #[test]
    fn descent_on_pelvis_target() {
        let skel = Skeleton::hml22();
        let m = walk(&skel, 20);
        let g = relative_to_global(&m, &skel).unwrap();
        let mut c = AgentControl::empty(20, 22);
        let p = g.pos(15, 0);
        c.set(15, 0, [p[0] + 0.4, p[1] - 0.1, p[2] + 0.3]);
        let cfg = GuidanceConfig {
            eta: 0.05,
            step_rule: StepRule::Fixed,
            inner_steps: 50,
            last_n: 10,
            clamp: None,
        };
        let tr = ik_guide_traced(&m, &c, &skel, &cfg).unwrap();
        assert_eq!(tr.discrepancies.len(), 51);
        for w in tr.discrepancies.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        assert!(tr.discrepancies[50] < tr.discrepancies[0]);
        // root channels move, not only the controlled entry
        assert_ne!(tr.motion.frame(3)[2], m.frame(3)[2]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let skel = Skeleton::hml22();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = walk(&skel, 8);
        m.data.iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
        let mut c = AgentControl::empty(8, 22);
        for i in 0..8 {
            c.set(i, rng.random_range(0..22), [rng.random_range(-1.0..1.0), 1.0, rng.random_range(-1.0..1.0)]);
        }
        let (_, grad) = ik_discrepancy_grad(&m, &c, &skel).unwrap();
        let h = 1e-6;
        for k in 0..m.data.len() {
            let mut a = m.clone();
            a.data[k] += h;
            let mut b = m.clone();
            b.data[k] -= h;
            let num = (ik_discrepancy(&a, &c, &skel).unwrap().value - ik_discrepancy(&b, &c, &skel).unwrap().value) / (2.0 * h);
            assert!((num - grad[k]).abs() <= 1e-6 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn validates_config() {
        assert!(GuidanceConfig::default().validate(50).is_ok());
        assert!(GuidanceConfig { last_n: 60, ..Default::default() }.validate(50).is_err());
        assert!(GuidanceConfig { eta: 0.0, ..Default::default() }.validate(50).is_err());
    }
}
