//! Event-driven trajectory rewrites for the six crowd response patterns.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::llm;
use super::scene::Backend;
use super::trajectory::{dense_paths, trajectories_to_control, Keyframe};
use super::{AppliedEvent, PlanSource, ScenePlan};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventPattern {
    Following,
    Avoiding,
    Queuing,
    Encircling,
    Passing,
    Random,
}

impl EventPattern {
    pub const ALL: [EventPattern; 6] = [
        EventPattern::Following,
        EventPattern::Avoiding,
        EventPattern::Queuing,
        EventPattern::Encircling,
        EventPattern::Passing,
        EventPattern::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventPattern::Following => "following",
            EventPattern::Avoiding => "avoiding",
            EventPattern::Queuing => "queuing",
            EventPattern::Encircling => "encircling",
            EventPattern::Passing => "passing",
            EventPattern::Random => "random",
        }
    }

    fn text(self) -> &'static str {
        match self {
            EventPattern::Following => "a person walks behind someone and follows them",
            EventPattern::Avoiding => "a person quickly steps aside to get out of the way",
            EventPattern::Queuing => "a person walks over and lines up behind others",
            EventPattern::Encircling => "a person walks over and stands in a circle around something",
            EventPattern::Passing => "a person steps aside to let something pass and then continues",
            EventPattern::Random => "a person wanders off in a random direction",
        }
    }
}

impl fmt::Display for EventPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_lowercase();
        Self::ALL.into_iter().find(|p| p.name() == lower).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|p| p.name()).collect();
            Error::validation(format!("unknown response pattern {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// Event keywords checked in order; the first hit selects the pattern.
const EVENT_KEYWORDS: &[(EventPattern, &[&str])] = &[
    (EventPattern::Following, &["follow", "leader", "guide", "tour"]),
    (EventPattern::Queuing, &["queue", "line up", "lines up", "ticket", "wait in line"]),
    (EventPattern::Encircling, &["circle", "surround", "gather around", "crowd around", "performer", "street show", "juggler"]),
    (EventPattern::Passing, &["pass", "passes", "walks by", "cyclist", "cart"]),
    (EventPattern::Avoiding, &["avoid", "obstacle", "car", "vehicle", "danger", "flee", "run away", "move away", "moves away", "alarm", "dog"]),
];

/// Keyword-table pattern selection used without an LLM.
pub fn select_pattern(description: &str) -> EventPattern {
    let lower = description.to_lowercase();
    EVENT_KEYWORDS
        .iter()
        .find(|(_, words)| words.iter().any(|w| lower.contains(w)))
        .map_or(EventPattern::Random, |(p, _)| *p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub pattern: EventPattern,
    /// Ground point: obstacle start, queue head, ring centre or crowd focus.
    pub epicenter: [f64; 2],
    /// Obstacle velocity in m/s (avoiding, passing) or queue axis (queuing).
    #[serde(default)]
    pub direction: Option<[f64; 2]>,
    /// Clearance (avoiding, passing) or ring radius (encircling), metres.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Queue slot spacing; 0.8 m when absent.
    #[serde(default)]
    pub spacing: Option<f64>,
    pub onset_frame: usize,
    pub duration_frames: usize,
    #[serde(default)]
    pub leader_agent: Option<usize>,
    /// Agents that react; all agents when absent. Avoiding and passing
    /// further restrict this to agents near the obstacle.
    #[serde(default)]
    pub agents: Option<Vec<usize>>,
}

const DEFAULT_QUEUE_SPACING: f64 = 0.8;
const FOLLOW_LAG_S: f64 = 0.5;
const FOLLOW_SIDE: f64 = 0.6;
const FOLLOW_GAP: f64 = 0.8;
const RANDOM_RADIUS: f64 = 3.0;

impl EventSpec {
    pub fn validate(&self, n: usize, frames: usize) -> Result<()> {
        if self.onset_frame >= frames {
            return Err(Error::validation(format!(
                "onset frame {} must precede the plan length {frames}",
                self.onset_frame
            )));
        }
        if self.duration_frames == 0 {
            return Err(Error::validation("event duration must be at least one frame"));
        }
        if !self.epicenter.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("event epicenter must be finite"));
        }
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(format!("{} events need {what}", self.pattern)))
            }
        };
        let positive = |v: Option<f64>| v.is_some_and(|r| r > 0.0 && r.is_finite());
        match self.pattern {
            EventPattern::Following => need(self.leader_agent.is_some_and(|l| l < n), "a valid leader_agent")?,
            EventPattern::Avoiding | EventPattern::Passing => {
                need(self.direction.is_some_and(|d| d.iter().all(|v| v.is_finite())), "a direction (velocity)")?;
                need(positive(self.radius), "a positive radius (clearance)")?;
            }
            EventPattern::Queuing => {
                let d = self.direction.unwrap_or([1.0, 0.0]);
                need(d[0].hypot(d[1]) > 1e-9, "a non-zero direction")?;
                need(self.spacing.is_none() || positive(self.spacing), "a positive spacing")?;
            }
            EventPattern::Encircling => need(positive(self.radius), "a positive radius")?,
            EventPattern::Random => {}
        }
        if let Some(a) = self.agents.as_ref().and_then(|v| v.iter().find(|&&a| a >= n)) {
            return Err(Error::validation(format!("event names agent {a}, plan has {n}")));
        }
        Ok(())
    }

    /// A reasonable event of the given pattern centred on the crowd.
    pub fn default_for(plan: &ScenePlan, pattern: EventPattern) -> Result<EventSpec> {
        let paths = dense_paths(plan, plan.config.interp)?;
        let onset = plan.frames / 4;
        let duration = (plan.frames / 2).max(1);
        let n = paths.len();
        let c = paths.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[onset][0] / n as f64, acc[1] + p[onset][1] / n as f64]);
        let mut spec = EventSpec {
            pattern,
            epicenter: c,
            direction: None,
            radius: None,
            spacing: None,
            onset_frame: onset,
            duration_frames: duration,
            leader_agent: None,
            agents: None,
        };
        match pattern {
            EventPattern::Following => {
                let d = |a: usize| (paths[a][onset][0] - c[0]).hypot(paths[a][onset][1] - c[1]);
                spec.leader_agent = (0..n).min_by(|&a, &b| d(a).total_cmp(&d(b)));
            }
            EventPattern::Avoiding | EventPattern::Passing => {
                let v = [1.2, 0.0];
                let half = 0.5 * duration as f64 / plan.fps;
                spec.epicenter = [c[0] - v[0] * half, c[1] - v[1] * half];
                spec.direction = Some(v);
                spec.radius = Some(1.5);
            }
            EventPattern::Queuing => {
                spec.direction = Some([1.0, 0.0]);
                spec.spacing = Some(DEFAULT_QUEUE_SPACING);
            }
            EventPattern::Encircling => spec.radius = Some((DEFAULT_QUEUE_SPACING * n as f64 / TAU).max(2.0)),
            EventPattern::Random => {}
        }
        Ok(spec)
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

/// Straight-line move from the onset position to `target`, arriving by the
/// end of the window when the speed limit allows, then holding.
fn approach(path: &[[f64; 2]], onset: usize, duration: usize, target: [f64; 2], max_step: f64) -> Vec<[f64; 2]> {
    let start = path[onset];
    let d = sub(target, start);
    let dist = norm(d);
    let step = (dist / duration as f64).min(max_step);
    let mut out = path.to_vec();
    for (t, p) in out.iter_mut().enumerate().skip(onset) {
        let s = step * (t - onset) as f64;
        *p = if s >= dist {
            target
        } else {
            [start[0] + d[0] * s / dist, start[1] + d[1] * s / dist]
        };
    }
    out
}

/// Obstacle corridor: segment from `a` along unit `dir` of length `len`.
struct Corridor {
    a: [f64; 2],
    dir: [f64; 2],
    len: f64,
    r: f64,
}

impl Corridor {
    fn new(spec: &EventSpec, fps: f64) -> Self {
        let v = spec.direction.unwrap_or([0.0, 0.0]);
        let len = norm(v) * spec.duration_frames as f64 / fps;
        let speed = norm(v);
        let dir = if speed > 1e-12 { [v[0] / speed, v[1] / speed] } else { [1.0, 0.0] };
        Corridor {
            a: spec.epicenter,
            dir,
            len,
            r: spec.radius.unwrap_or(0.0),
        }
    }

    /// Along-track and signed lateral coordinates.
    fn coords(&self, p: [f64; 2]) -> (f64, f64) {
        let d = sub(p, self.a);
        (d[0] * self.dir[0] + d[1] * self.dir[1], -d[0] * self.dir[1] + d[1] * self.dir[0])
    }

    /// Distance from `p` to the segment.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        let (lam, u) = self.coords(p);
        let e = (lam - self.len).max(-lam).max(0.0);
        u.hypot(e)
    }

    /// Lateral push that puts `p` at least `r` from the segment on side `s`.
    /// The required lateral offset is `r` alongside the segment and fades
    /// linearly to zero at `2r` past either end, which keeps the push
    /// continuous and never leaves a point closer than `r`.
    fn push(&self, p: [f64; 2], side: f64) -> [f64; 2] {
        let (lam, u) = self.coords(p);
        let e = (lam - self.len).max(-lam).max(0.0);
        let need = self.r * (2.0 - e / self.r).clamp(0.0, 1.0);
        let target = side * (side * u).max(need);
        let du = target - u;
        [-self.dir[1] * du, self.dir[0] * du]
    }
}

/// Agents named by the spec, or everyone.
fn candidates(spec: &EventSpec, n: usize) -> Vec<usize> {
    let mut v = spec.agents.clone().unwrap_or_else(|| (0..n).collect());
    v.sort_unstable();
    v.dedup();
    v
}

fn corridor_paths(spec: &EventSpec, plan: &ScenePlan, paths: &[Vec<[f64; 2]>], passing: bool) -> Vec<(usize, Vec<[f64; 2]>)> {
    let cor = Corridor::new(spec, plan.fps);
    let (onset, dur) = (spec.onset_frame, spec.duration_frames);
    let max_step = plan.config.v_max / plan.fps;
    let mut out = Vec::new();
    for a in candidates(spec, paths.len()) {
        let path = &paths[a];
        let (_, u0) = cor.coords(path[onset]);
        let side = if u0 > 1e-9 {
            1.0
        } else if u0 < -1e-9 {
            -1.0
        } else if a % 2 == 0 {
            1.0
        } else {
            -1.0
        };
        let window_end = if passing { (onset + dur).min(path.len()) } else { path.len() };
        if !(onset..window_end).any(|t| cor.distance(path[t]) < cor.r) {
            continue;
        }
        let offsets: Vec<[f64; 2]> = (0..path.len())
            .map(|t| {
                if t < onset {
                    return [0.0; 2];
                }
                let tau = (t - onset) as f64 / dur as f64;
                let w = if passing {
                    if tau >= 1.0 {
                        0.0
                    } else {
                        smoothstep(1.0 - (2.0 * tau - 1.0).abs())
                    }
                } else {
                    smoothstep(tau)
                };
                if w > 0.0 {
                    let d = cor.push(path[t], side);
                    [w * d[0], w * d[1]]
                } else {
                    [0.0; 2]
                }
            })
            .collect();
        let shifted = |c: f64| -> Vec<[f64; 2]> {
            path.iter().zip(&offsets).map(|(p, o)| [p[0] + c * o[0], p[1] + c * o[1]]).collect()
        };
        // a passing detour shrinks until it fits the speed limit, so the
        // agent is back on its own path when the window closes
        let scale = if passing && !feasible(&shifted(1.0), max_step) {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if feasible(&shifted(mid), max_step) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        } else {
            1.0
        };
        out.push((a, shifted(scale)));
    }
    out
}

fn feasible(path: &[[f64; 2]], max_step: f64) -> bool {
    path.windows(2).all(|w| norm(sub(w[1], w[0])) <= max_step * (1.0 + 1e-12))
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

fn rewrite(spec: &EventSpec, plan: &ScenePlan, paths: &[Vec<[f64; 2]>]) -> Vec<(usize, Vec<[f64; 2]>)> {
    let (onset, dur) = (spec.onset_frame, spec.duration_frames);
    let max_step = plan.config.v_max / plan.fps;
    let n = paths.len();
    match spec.pattern {
        EventPattern::Avoiding => corridor_paths(spec, plan, paths, false),
        EventPattern::Passing => corridor_paths(spec, plan, paths, true),
        EventPattern::Queuing => {
            let d = spec.direction.unwrap_or([1.0, 0.0]);
            let l = norm(d);
            let d = [d[0] / l, d[1] / l];
            let spacing = spec.spacing.unwrap_or(DEFAULT_QUEUE_SPACING);
            let mut who = candidates(spec, n);
            let proj = |a: usize| {
                let p = sub(paths[a][onset], spec.epicenter);
                p[0] * d[0] + p[1] * d[1]
            };
            who.sort_by(|&a, &b| proj(a).total_cmp(&proj(b)).then(a.cmp(&b)));
            who.iter()
                .enumerate()
                .map(|(k, &a)| {
                    let s = spacing * k as f64;
                    let slot = [spec.epicenter[0] + d[0] * s, spec.epicenter[1] + d[1] * s];
                    (a, approach(&paths[a], onset, dur, slot, max_step))
                })
                .collect()
        }
        EventPattern::Encircling => {
            let who = candidates(spec, n);
            let m = who.len();
            let r = spec.radius.unwrap_or(1.0);
            let c = spec.epicenter;
            let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(m * m);
            for &a in &who {
                let p = sub(paths[a][onset], c);
                let phi = p[1].atan2(p[0]);
                for k in 0..m {
                    pairs.push((angle_gap(phi, TAU * k as f64 / m as f64), a, k));
                }
            }
            pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(Ordering::Equal).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut slot_of = vec![None; n];
            let mut taken = vec![false; m];
            for (_, a, k) in pairs {
                if slot_of[a].is_none() && !taken[k] {
                    slot_of[a] = Some(k);
                    taken[k] = true;
                }
            }
            who.iter()
                .map(|&a| {
                    let th = TAU * slot_of[a].expect("every agent gets a slot") as f64 / m as f64;
                    let slot = [c[0] + r * th.cos(), c[1] + r * th.sin()];
                    (a, approach(&paths[a], onset, dur, slot, max_step))
                })
                .collect()
        }
        EventPattern::Random => candidates(spec, n)
            .into_iter()
            .map(|a| {
                let mix = plan.provenance.seed
                    ^ (a as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    ^ (onset as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
                let mut rng = ChaCha8Rng::seed_from_u64(mix);
                let rad = RANDOM_RADIUS * rng.random::<f64>().sqrt();
                let th = TAU * rng.random::<f64>();
                let p = paths[a][onset];
                (a, approach(&paths[a], onset, dur, [p[0] + rad * th.cos(), p[1] + rad * th.sin()], max_step))
            })
            .collect(),
        EventPattern::Following => {
            let leader = spec.leader_agent.expect("validated");
            let lp = &paths[leader];
            let dist = |a: usize| norm(sub(paths[a][onset], lp[onset]));
            let mut followers: Vec<usize> = candidates(spec, n).into_iter().filter(|&a| a != leader).collect();
            followers.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
            let heading = |tau: usize| {
                for back in 0..=tau {
                    let t = tau - back;
                    let d = sub(lp[(t + 1).min(lp.len() - 1)], lp[t.saturating_sub(1)]);
                    if norm(d) > 1e-9 {
                        return [d[0] / norm(d), d[1] / norm(d)];
                    }
                }
                [0.0, 1.0]
            };
            followers
                .iter()
                .enumerate()
                .map(|(k, &a)| {
                    let rank = k + 1;
                    let lag = (FOLLOW_LAG_S * plan.fps * rank as f64).round() as usize;
                    let side = FOLLOW_SIDE * (rank % 2) as f64;
                    let gap = FOLLOW_GAP * rank.div_ceil(2) as f64;
                    let mut q = paths[a].clone();
                    for t in onset + 1..q.len() {
                        let tau = t.saturating_sub(lag).max(onset);
                        let h = heading(tau);
                        let nrm = [h[1], -h[0]];
                        // extra trailing distance when the time lag alone leaves too little room
                        let back = (gap - norm(sub(lp[t], lp[tau]))).max(0.0);
                        let target = [
                            lp[tau][0] + nrm[0] * side - h[0] * back,
                            lp[tau][1] + nrm[1] * side - h[1] * back,
                        ];
                        let d = sub(target, q[t - 1]);
                        let len = norm(d);
                        let s = if len > max_step { max_step / len } else { 1.0 };
                        q[t] = [q[t - 1][0] + d[0] * s, q[t - 1][1] + d[1] * s];
                    }
                    (a, q)
                })
                .collect()
        }
    }
}

/// Rewrites the trajectories of the agents that react to an event from its
/// onset frame on. Without an explicit spec the pattern comes from the LLM
/// backend or the keyword table, with parameters from
/// [`EventSpec::default_for`].
pub fn apply_event(plan: &ScenePlan, description: &str, event: Option<EventSpec>, backend: &Backend) -> Result<ScenePlan> {
    let n = plan.agents.len();
    let (spec, source) = match event {
        Some(s) => (s, PlanSource::Fallback),
        None => {
            let from_llm = match backend {
                Backend::Llm(client) => match llm::interpret_event(client, description, n, plan.frames) {
                    Ok((spec, _)) if spec.validate(n, plan.frames).is_ok() => Some(spec),
                    Ok(_) => {
                        warn!("LLM event spec failed validation; using the keyword table");
                        None
                    }
                    Err(e) => {
                        warn!("LLM event interpretation failed: {e}; using the keyword table");
                        None
                    }
                },
                Backend::Fallback => None,
            };
            match from_llm {
                Some(s) => (s, PlanSource::Llm),
                None => (EventSpec::default_for(plan, select_pattern(description))?, PlanSource::Fallback),
            }
        }
    };
    spec.validate(n, plan.frames)?;
    let paths = dense_paths(plan, plan.config.interp)?;
    let changes = rewrite(&spec, plan, &paths);
    let mut out = plan.clone();
    let mut affected = Vec::with_capacity(changes.len());
    for (a, path) in changes {
        if path == paths[a] {
            continue;
        }
        out.agents[a].keyframes = path
            .iter()
            .enumerate()
            .map(|(frame, &pos)| Keyframe { frame, pos })
            .collect();
        out.agents[a].text = spec.pattern.text().to_string();
        affected.push(a);
    }
    affected.sort_unstable();
    out.control = trajectories_to_control(&out, out.config.interp)?;
    out.events.push(AppliedEvent {
        description: description.to_string(),
        spec,
        affected,
        source,
    });
    out.validate()?;
    Ok(out)
}

/// Distance from a point to the swept obstacle segment of an event.
pub fn obstacle_distance(spec: &EventSpec, fps: f64, p: [f64; 2]) -> f64 {
    Corridor::new(spec, fps).distance(p)
}

/// Angular position of `p` around `c` in `[0, 2pi)`.
pub fn polar_angle(c: [f64; 2], p: [f64; 2]) -> f64 {
    let a = (p[1] - c[1]).atan2(p[0] - c[0]);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}
