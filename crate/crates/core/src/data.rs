//! Procedural motion for the default 22-joint skeleton: walking, standing
//! and waving, with feet planted exactly during stance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TextEmbedder, TrainSample};
use crate::motion::{global_to_relative, rot_y, GlobalMotion, RelativeMotion, Skeleton};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Walk,
    Stand,
    Wave,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitParams {
    pub style: Style,
    /// Forward speed (m/s); ignored when standing.
    pub speed: f64,
    /// Yaw rate (rad/s), positive turns left.
    pub turn_rate: f64,
    /// Gait cycles per second.
    pub cadence: f64,
    /// Peak foot lift during swing (m).
    pub lift: f64,
    pub frames: usize,
    pub fps: f64,
}

impl Default for GaitParams {
    fn default() -> Self {
        GaitParams {
            style: Style::Walk,
            speed: 1.0,
            turn_rate: 0.0,
            cadence: 1.0,
            lift: 0.12,
            frames: 60,
            fps: 20.0,
        }
    }
}

/// A generated motion together with its stance schedule: `planted[i]` is
/// true for a foot that stays put from frame `i` to the next frame.
#[derive(Clone, Debug)]
pub struct SyntheticMotion {
    pub global: GlobalMotion,
    pub planted: Vec<[bool; 2]>,
    pub text: String,
}

const STANCE: f64 = 0.6;
const ANKLE_H: f64 = 0.04;

struct Bones {
    idx: std::collections::HashMap<&'static str, usize>,
}

impl Bones {
    fn new(skel: &Skeleton) -> Result<Self> {
        const NAMES: [&str; 22] = [
            "pelvis",
            "left_hip",
            "right_hip",
            "spine1",
            "left_knee",
            "right_knee",
            "spine2",
            "left_ankle",
            "right_ankle",
            "spine3",
            "left_foot",
            "right_foot",
            "neck",
            "left_collar",
            "right_collar",
            "head",
            "left_shoulder",
            "right_shoulder",
            "left_elbow",
            "right_elbow",
            "left_wrist",
            "right_wrist",
        ];
        let mut idx = std::collections::HashMap::new();
        for n in NAMES {
            let j = skel
                .joint_index(n)
                .ok_or_else(|| Error::validation(format!("synthetic motion needs joint {n:?}")))?;
            idx.insert(n, j);
        }
        Ok(Bones { idx })
    }

    fn j(&self, n: &str) -> usize {
        self.idx[n]
    }
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn lerp(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s, a[2] + (b[2] - a[2]) * s]
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Knee position for a two-bone chain bending towards `forward`.
fn two_bone_knee(hip: [f64; 3], ankle: [f64; 3], upper: f64, lower: f64, forward: [f64; 3]) -> [f64; 3] {
    let d = [ankle[0] - hip[0], ankle[1] - hip[1], ankle[2] - hip[2]];
    let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-9);
    let u = [d[0] / len, d[1] / len, d[2] / len];
    let reach = len.min(upper + lower - 1e-6);
    // distance along the hip-ankle axis and perpendicular offset
    let a = (upper * upper - lower * lower + reach * reach) / (2.0 * reach);
    let h = (upper * upper - a * a).max(0.0).sqrt();
    let dot = forward[0] * u[0] + forward[1] * u[1] + forward[2] * u[2];
    let mut p = [forward[0] - dot * u[0], forward[1] - dot * u[1], forward[2] - dot * u[2]];
    let pn = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if pn < 1e-9 {
        p = [0.0, 0.0, 1.0];
    } else {
        p = [p[0] / pn, p[1] / pn, p[2] / pn];
    }
    [hip[0] + u[0] * a + p[0] * h, hip[1] + u[1] * a + p[1] * h, hip[2] + u[2] * a + p[2] * h]
}

/// Generates one motion on the default skeleton.
pub fn synthesize(p: &GaitParams, skel: &Skeleton) -> Result<SyntheticMotion> {
    if p.frames < 2 || !(p.fps > 0.0) || !(p.cadence > 0.0) {
        return Err(Error::validation("synthetic motion needs frames >= 2, fps > 0, cadence > 0"));
    }
    let b = Bones::new(skel)?;
    let f = p.frames;
    let dt = 1.0 / p.fps;
    let moving = p.style == Style::Walk;
    let speed = if moving { p.speed } else { 0.0 };
    let turn = if moving { p.turn_rate } else { 0.0 };

    // root path, sampled finely enough to evaluate plant positions anywhere
    let heading = |t: f64| turn * t;
    let root_xz = |t: f64| -> [f64; 2] {
        if turn.abs() < 1e-9 {
            [0.0, speed * t]
        } else {
            let r = speed / turn;
            // d/dt (x, z) = speed * (sin h, cos h)
            [r * (1.0 - (turn * t).cos()), r * (turn * t).sin()]
        }
    };
    let period = 1.0 / p.cadence;
    // left foot starts its stance at phase 0, the right foot half a cycle later
    let offsets = [0.0, 0.5];
    let lateral = [0.09, -0.09];
    let plant_at = |t_mid: f64, side: usize| -> [f64; 3] {
        let r = root_xz(t_mid);
        let off = rot_y(heading(t_mid), [lateral[side], 0.0, 0.0]);
        [r[0] + off[0], ANKLE_H, r[1] + off[2]]
    };

    let mut positions = Vec::with_capacity(f * 22 * 3);
    let mut ankle_track = vec![[[0.0; 3]; 2]; f];
    let mut planted_now = vec![[false; 2]; f];
    let mut foot_heading = vec![[0.0f64; 2]; f];
    for i in 0..f {
        let t = i as f64 * dt;
        for side in 0..2 {
            let phase = (t / period + 1.0 - offsets[side]).rem_euclid(1.0);
            let cycle = (t / period + 1.0 - offsets[side]).floor();
            let cycle_start = (cycle - 1.0 + offsets[side]) * period;
            if !moving {
                let r = root_xz(0.0);
                ankle_track[i][side] = [r[0] + lateral[side], ANKLE_H, r[1]];
                planted_now[i][side] = true;
                continue;
            }
            let stance_mid = |c: f64| cycle_start + (c + 0.5 * STANCE) * period;
            // the boundary frame still belongs to the stance
            if phase < STANCE + 1e-9 {
                let tm = stance_mid(0.0);
                ankle_track[i][side] = plant_at(tm, side);
                foot_heading[i][side] = heading(tm);
                planted_now[i][side] = true;
            } else {
                let s = ((phase - STANCE) / (1.0 - STANCE)).max(0.0);
                let (ta, tb) = (stance_mid(0.0), stance_mid(1.0));
                let (a, bb) = (plant_at(ta, side), plant_at(tb, side));
                let mut q = lerp(a, bb, smoothstep(s));
                q[1] = ANKLE_H + p.lift * (std::f64::consts::PI * s).sin();
                ankle_track[i][side] = q;
                foot_heading[i][side] = heading(ta) + (heading(tb) - heading(ta)) * smoothstep(s);
            }
        }
    }

    for i in 0..f {
        let t = i as f64 * dt;
        let th = heading(t);
        let r = root_xz(t);
        let phase = (t / period).rem_euclid(1.0) * std::f64::consts::TAU;
        let (bob, sway) = match p.style {
            Style::Walk => (0.015 * (2.0 * phase).cos(), 0.0),
            Style::Stand | Style::Wave => (0.005 * (0.5 * phase).sin(), 0.01 * (0.5 * phase).sin()),
        };
        let pelvis_h = if moving { 0.86 } else { 0.90 };
        let pelvis = add([r[0], pelvis_h + bob, r[1]], rot_y(th, [sway, 0.0, 0.0]));
        let mut frame = vec![[0.0; 3]; 22];
        let local = |v: [f64; 3]| rot_y(th, v);
        frame[b.j("pelvis")] = pelvis;
        let lean = if moving { 0.02 * speed } else { 0.0 };
        let spine1 = add(pelvis, local([0.0, 0.11, -0.02 + lean]));
        let spine2 = add(spine1, local([0.0, 0.13, lean]));
        let spine3 = add(spine2, local([0.0, 0.05, 0.02 + lean * 0.5]));
        let neck = add(spine3, local([0.0, 0.21, -0.02]));
        frame[b.j("spine1")] = spine1;
        frame[b.j("spine2")] = spine2;
        frame[b.j("spine3")] = spine3;
        frame[b.j("neck")] = neck;
        frame[b.j("head")] = add(neck, local([0.0, 0.09, 0.05]));
        let forward = local([0.0, 0.0, 1.0]);
        for (side, sgn) in [(0usize, 1.0), (1usize, -1.0)] {
            let name = |n: &str| format!("{}_{n}", if side == 0 { "left" } else { "right" });
            let hip = add(pelvis, local([0.06 * sgn, -0.09, 0.0]));
            let ankle = ankle_track[i][side];
            frame[b.j(&name("hip"))] = hip;
            frame[b.j(&name("ankle"))] = ankle;
            frame[b.j(&name("knee"))] = two_bone_knee(hip, ankle, 0.40, 0.401, forward);
            let toe_dir = rot_y(if moving { foot_heading[i][side] } else { th }, [0.0, -ANKLE_H, 0.12]);
            frame[b.j(&name("foot"))] = add(ankle, toe_dir);

            let collar = add(spine3, local([0.07 * sgn, 0.12, 0.0]));
            let shoulder = add(collar, local([0.10 * sgn, 0.03, 0.0]));
            frame[b.j(&name("collar"))] = collar;
            frame[b.j(&name("shoulder"))] = shoulder;
            let waving = p.style == Style::Wave && side == 1;
            let (elbow, wrist) = if waving {
                let w = (2.0 * std::f64::consts::TAU * t).sin();
                let elbow = add(shoulder, local([-0.12, 0.22, 0.05]));
                (elbow, add(elbow, local([-0.05 + 0.12 * w, 0.22, 0.04])))
            } else {
                // arms swing against the legs on the same side
                let amp = if moving { 0.35 * speed.min(1.5) } else { 0.05 };
                let swing = -sgn * amp * phase.sin();
                let upper = local([0.03 * sgn, -0.26 * swing.cos(), 0.26 * swing.sin()]);
                let elbow = add(shoulder, upper);
                let bend = swing + 0.3;
                (elbow, add(elbow, local([0.0, -0.25 * bend.cos(), 0.25 * bend.sin()])))
            };
            frame[b.j(&name("elbow"))] = elbow;
            frame[b.j(&name("wrist"))] = wrist;
        }
        for pnt in frame {
            positions.extend(pnt);
        }
    }
    let planted = (0..f)
        .map(|i| {
            let (a, c) = if i + 1 < f { (i, i + 1) } else { (i - 1, i) };
            [
                planted_now[a][0] && planted_now[c][0] && ankle_track[a][0] == ankle_track[c][0],
                planted_now[a][1] && planted_now[c][1] && ankle_track[a][1] == ankle_track[c][1],
            ]
        })
        .collect();
    Ok(SyntheticMotion {
        global: GlobalMotion::new(f, 22, p.fps, positions)?,
        planted,
        text: describe(p),
    })
}

/// Plain-language description of the generated motion.
pub fn describe(p: &GaitParams) -> String {
    match p.style {
        Style::Stand => "a person stands still and shifts weight gently".into(),
        Style::Wave => "a person stands in place and waves with the right hand".into(),
        Style::Walk => {
            let pace = if p.speed < 0.8 {
                "slowly"
            } else if p.speed < 1.2 {
                "at a steady pace"
            } else {
                "briskly"
            };
            let turn = if p.turn_rate > 0.15 {
                " while curving to the left"
            } else if p.turn_rate < -0.15 {
                " while curving to the right"
            } else {
                " in a straight line"
            };
            format!("a person walks forward {pace}{turn}")
        }
    }
}

/// Deterministic mixed dataset of `n` motions with distinct descriptions
/// where the parameter grid allows.
pub fn synthetic_motions(n: usize, frames: usize, fps: f64, seed: u64, skel: &Skeleton) -> Result<Vec<SyntheticMotion>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let style = match k % 8 {
            6 => Style::Stand,
            7 => Style::Wave,
            _ => Style::Walk,
        };
        let speed = [0.7, 1.0, 1.3][k % 3] + rng.random_range(-0.05..0.05);
        let turn = [0.0, 0.4, -0.4][(k / 3) % 3] + rng.random_range(-0.05..0.05);
        let params = GaitParams {
            style,
            speed,
            turn_rate: turn,
            cadence: 0.9 + 0.1 * speed + rng.random_range(-0.03..0.03),
            lift: 0.12,
            frames,
            fps,
        };
        out.push(synthesize(&params, skel)?);
    }
    Ok(out)
}

/// Training samples (relative motion + text embedding, random controls).
pub fn synthetic_dataset(
    n: usize,
    frames: usize,
    fps: f64,
    seed: u64,
    skel: &Skeleton,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<TrainSample>> {
    synthetic_motions(n, frames, fps, seed, skel)?
        .into_iter()
        .map(|m| {
            let motion: RelativeMotion = global_to_relative(&m.global, skel)?;
            Ok(TrainSample {
                text: embedder.condition(&m.text),
                motion,
                control: None,
            })
        })
        .collect()
}
