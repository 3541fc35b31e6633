//! Keyframed ground-plane trajectories and their densification into
//! per-frame control targets.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::control::SpatialControl;
use crate::error::{Error, Result};

use super::ScenePlan;

/// A pelvis ground position `(x, z)` pinned to a frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: usize,
    pub pos: [f64; 2],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    #[default]
    CatmullRom,
    Linear,
}

impl FromStr for Interp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "catmull_rom" | "catmull-rom" => Ok(Interp::CatmullRom),
            "linear" => Ok(Interp::Linear),
            _ => Err(Error::validation(format!(
                "unknown interpolation {s:?}; expected catmull_rom or linear"
            ))),
        }
    }
}

fn lerp2(a: [f64; 2], b: [f64; 2], u: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u]
}

/// Uniform Catmull-Rom segment between `p1` and `p2`.
pub fn catmull_rom(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], p3: [f64; 2], u: f64) -> [f64; 2] {
    let (u2, u3) = (u * u, u * u * u);
    let mut out = [0.0; 2];
    for k in 0..2 {
        out[k] = 0.5
            * (2.0 * p1[k]
                + (p2[k] - p0[k]) * u
                + (2.0 * p0[k] - 5.0 * p1[k] + 4.0 * p2[k] - p3[k]) * u2
                + (3.0 * p1[k] - p0[k] - 3.0 * p2[k] + p3[k]) * u3);
    }
    out
}

/// Checks that keyframe frames strictly increase and lie before `frames`.
pub fn check_keyframes(keys: &[Keyframe], frames: usize) -> Result<()> {
    if keys.is_empty() {
        return Err(Error::validation("trajectory has no keyframes"));
    }
    for w in keys.windows(2) {
        if w[1].frame <= w[0].frame {
            return Err(Error::validation(format!(
                "keyframes out of order: frame {} follows frame {}",
                w[1].frame, w[0].frame
            )));
        }
    }
    if let Some(k) = keys.iter().find(|k| k.frame >= frames || !k.pos.iter().all(|v| v.is_finite())) {
        return Err(Error::validation(format!(
            "keyframe at frame {} is outside 0..{frames} or not finite",
            k.frame
        )));
    }
    Ok(())
}

/// Position at every frame. Keys are held constant outside their range;
/// Catmull-Rom tangents are uniform in key index with the end keys repeated.
pub fn densify(keys: &[Keyframe], frames: usize, interp: Interp) -> Result<Vec<[f64; 2]>> {
    check_keyframes(keys, frames)?;
    let n = keys.len();
    let at = |k: isize| keys[k.clamp(0, n as isize - 1) as usize].pos;
    let mut out = Vec::with_capacity(frames);
    let mut seg = 0usize;
    for t in 0..frames {
        if t <= keys[0].frame {
            out.push(keys[0].pos);
            continue;
        }
        if t >= keys[n - 1].frame {
            out.push(keys[n - 1].pos);
            continue;
        }
        while keys[seg + 1].frame <= t {
            seg += 1;
        }
        let (a, b) = (keys[seg], keys[seg + 1]);
        if a.frame == t {
            out.push(a.pos);
            continue;
        }
        let u = (t - a.frame) as f64 / (b.frame - a.frame) as f64;
        let s = seg as isize;
        out.push(match interp {
            Interp::Linear => lerp2(a.pos, b.pos, u),
            Interp::CatmullRom => catmull_rom(at(s - 1), a.pos, b.pos, at(s + 2), u),
        });
    }
    Ok(out)
}

/// Limits every per-frame step to `max_step` by trailing the path.
pub fn clamp_speed(path: &mut [[f64; 2]], max_step: f64) {
    for i in 1..path.len() {
        let (p, q) = (path[i - 1], path[i]);
        let d = [q[0] - p[0], q[1] - p[1]];
        let len = d[0].hypot(d[1]);
        // small slack keeps already-feasible paths bit-exact
        if len > max_step * (1.0 + 1e-12) {
            let s = max_step / len;
            path[i] = [p[0] + d[0] * s, p[1] + d[1] * s];
        }
    }
}

/// Dense, speed-clamped pelvis path of every agent.
pub fn dense_paths(plan: &ScenePlan, interp: Interp) -> Result<Vec<Vec<[f64; 2]>>> {
    let max_step = plan.config.v_max / plan.fps;
    plan.agents
        .iter()
        .map(|a| {
            let mut p = densify(&a.keyframes, plan.frames, interp)?;
            clamp_speed(&mut p, max_step);
            Ok(p)
        })
        .collect()
}

/// Writes pelvis targets at every frame and interaction joints at their
/// constraint frames; the mask is set exactly where a target was written.
pub fn trajectories_to_control(plan: &ScenePlan, interp: Interp) -> Result<SpatialControl> {
    let paths = dense_paths(plan, interp)?;
    let mut control = SpatialControl::empty(plan.agents.len(), plan.frames, plan.joints);
    for (a, path) in paths.iter().enumerate() {
        for (i, p) in path.iter().enumerate() {
            control.set(a, i, 0, [p[0], plan.pelvis_height, p[1]]);
        }
    }
    for g in &plan.groups {
        for c in &g.interaction_joints {
            for &i in &c.frames {
                if i >= plan.frames || c.joint_a >= plan.joints || c.joint_b >= plan.joints {
                    return Err(Error::validation("interaction constraint outside the plan"));
                }
                let (pa, pb) = (paths[c.agent_a][i], paths[c.agent_b][i]);
                let mid = lerp2(pa, pb, 0.5);
                let d = [pb[0] - pa[0], pb[1] - pa[1]];
                let len = d[0].hypot(d[1]);
                let u = if len > 1e-9 { [d[0] / len, d[1] / len] } else { [1.0, 0.0] };
                let h = 0.5 * c.distance;
                control.set(c.agent_a, i, c.joint_a, [mid[0] - u[0] * h, c.height, mid[1] - u[1] * h]);
                control.set(c.agent_b, i, c.joint_b, [mid[0] + u[0] * h, c.height, mid[1] + u[1] * h]);
            }
        }
    }
    Ok(control)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kf(frame: usize, x: f64, z: f64) -> Keyframe {
        Keyframe { frame, pos: [x, z] }
    }

    #[test]
    fn linear_midpoint_and_constant() {
        let p = densify(&[kf(0, 0.0, 0.0), kf(10, 2.0, -4.0)], 11, Interp::Linear).unwrap();
        assert_eq!(p[5], [1.0, -2.0]);
        let c = densify(&[kf(3, 1.5, 2.5)], 8, Interp::CatmullRom).unwrap();
        assert!(c.iter().all(|q| *q == [1.5, 2.5]));
    }

    #[test]
    fn catmull_rom_matches_pyramid_form() {
        // Barry-Goldman recursion with uniform knots as an independent evaluation
        fn pyramid(p: [[f64; 2]; 4], u: f64) -> [f64; 2] {
            let t = [-1.0, 0.0, 1.0, 2.0];
            let l = |a: [f64; 2], b: [f64; 2], t0: f64, t1: f64| {
                let w = (u - t0) / (t1 - t0);
                [a[0] * (1.0 - w) + b[0] * w, a[1] * (1.0 - w) + b[1] * w]
            };
            let a1 = l(p[0], p[1], t[0], t[1]);
            let a2 = l(p[1], p[2], t[1], t[2]);
            let a3 = l(p[2], p[3], t[2], t[3]);
            let b1 = l(a1, a2, t[0], t[2]);
            let b2 = l(a2, a3, t[1], t[3]);
            l(b1, b2, t[1], t[2])
        }
        let keys = [kf(0, 0.0, 0.0), kf(10, 1.0, 2.0), kf(20, 3.0, 1.0), kf(30, 4.0, 4.0)];
        let p = densify(&keys, 31, Interp::CatmullRom).unwrap();
        let pts = [[0.0, 0.0], [1.0, 2.0], [3.0, 1.0], [4.0, 4.0]];
        for t in 10..=20 {
            let want = pyramid(pts, (t - 10) as f64 / 10.0);
            assert!((p[t][0] - want[0]).abs() < 1e-12 && (p[t][1] - want[1]).abs() < 1e-12);
        }
        for (k, key) in keys.iter().enumerate() {
            assert_eq!(p[key.frame], pts[k]);
        }
    }

    #[test]
    fn rejects_out_of_order() {
        let err = densify(&[kf(5, 0.0, 0.0), kf(5, 1.0, 0.0)], 10, Interp::Linear).unwrap_err();
        assert!(err.is_validation());
        assert!(densify(&[kf(12, 0.0, 0.0)], 10, Interp::Linear).is_err());
    }

    #[test]
    fn speed_clamp() {
        let mut p = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        clamp_speed(&mut p, 0.4);
        assert!((p[1][0] - 0.4).abs() < 1e-15 && (p[2][0] - 0.8).abs() < 1e-15 && p[3][0] == 1.0);
    }
}
