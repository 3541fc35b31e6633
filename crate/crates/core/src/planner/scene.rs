//! Scene-guided layout: groups, anchors, activities and base trajectories.

use std::f64::consts::TAU;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::llm::{self, LlmClient};
use super::trajectory::{trajectories_to_control, Keyframe};
use super::{
    AgentPlan, CrowdParams, Formation, Group, InteractionConstraint, PlanSource, PlannerConfig, Provenance, ScenePlan,
    PLAN_SCHEMA,
};
use crate::control::SpatialControl;
use crate::error::Result;
use crate::motion::Skeleton;

/// The fallback activity catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activity {
    Walk,
    StandAndConverse,
    Queue,
    DanceInCircle,
    ExerciseInRows,
    HandshakePair,
}

impl Activity {
    pub const ALL: [Activity; 6] = [
        Activity::Walk,
        Activity::StandAndConverse,
        Activity::Queue,
        Activity::DanceInCircle,
        Activity::ExerciseInRows,
        Activity::HandshakePair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activity::Walk => "walk",
            Activity::StandAndConverse => "stand_and_converse",
            Activity::Queue => "queue",
            Activity::DanceInCircle => "dance_in_circle",
            Activity::ExerciseInRows => "exercise_in_rows",
            Activity::HandshakePair => "handshake_pair",
        }
    }

    pub fn from_name(s: &str) -> Option<Activity> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    pub fn text(self) -> &'static str {
        match self {
            Activity::Walk => "a person walks forward at a steady pace",
            Activity::StandAndConverse => "a person stands and talks with others, gesturing with the hands",
            Activity::Queue => "a person stands in line and waits",
            Activity::DanceInCircle => "a person dances while moving around in a circle",
            Activity::ExerciseInRows => "a person does exercises in place",
            Activity::HandshakePair => "a person shakes hands with someone in front of them",
        }
    }

    pub fn formation(self) -> Formation {
        match self {
            Activity::Walk | Activity::ExerciseInRows => Formation::Cluster,
            Activity::StandAndConverse | Activity::DanceInCircle => Formation::Circle,
            Activity::Queue => Formation::Line,
            Activity::HandshakePair => Formation::Pair,
        }
    }
}

/// Scene keywords and the activities they suggest, checked in order.
const SCENE_KEYWORDS: &[(&[&str], &[Activity])] = &[
    (&["street", "road", "sidewalk", "commute", "crossing"], &[Activity::Walk]),
    (&["station", "ticket", "shop", "store", "bank", "counter"], &[Activity::Queue, Activity::Walk]),
    (&["party", "festival", "concert", "dance", "wedding"], &[Activity::DanceInCircle, Activity::StandAndConverse]),
    (&["gym", "yard", "exercise", "class", "fitness"], &[Activity::ExerciseInRows]),
    (&["office", "conference", "meeting", "greet", "reception"], &[Activity::HandshakePair, Activity::StandAndConverse]),
    (&["square", "plaza", "park", "cafe", "market", "campus"], &[Activity::StandAndConverse, Activity::Walk]),
];

fn scene_candidates(scene: &str) -> Vec<Activity> {
    let lower = scene.to_lowercase();
    let mut out = Vec::new();
    for (words, acts) in SCENE_KEYWORDS {
        if words.iter().any(|w| lower.contains(w)) {
            for a in *acts {
                if !out.contains(a) {
                    out.push(*a);
                }
            }
        }
    }
    if out.is_empty() {
        out = vec![Activity::Walk, Activity::StandAndConverse, Activity::Queue, Activity::DanceInCircle, Activity::ExerciseInRows];
    }
    out
}

/// Members of one group and whether it carries close-interaction constraints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemberSet {
    pub members: Vec<usize>,
    pub interactive: bool,
}

/// `max(1, ceil(n / s))` groups whose sizes differ by at most one, filled
/// from a seeded shuffle. When `alpha >= interaction_alpha`, each group of
/// two or more is tagged interactive with probability `alpha`, and at least
/// one such group always is.
pub fn divide_groups<R: Rng + ?Sized>(params: &CrowdParams, interaction_alpha: f64, rng: &mut R) -> Result<Vec<MemberSet>> {
    params.validate()?;
    let n = params.n;
    // ceil keeps every group at or below the requested average size
    let g = ((n as f64 / params.s - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (base, extra) = (n / g, n % g);
    let mut sets = Vec::with_capacity(g);
    let mut next = 0;
    for k in 0..g {
        let size = base + usize::from(k < extra);
        let mut members = order[next..next + size].to_vec();
        members.sort_unstable();
        next += size;
        sets.push(MemberSet {
            members,
            interactive: false,
        });
    }
    if params.alpha >= interaction_alpha {
        for s in sets.iter_mut() {
            let draw: f64 = rng.random();
            s.interactive = s.members.len() >= 2 && draw < params.alpha;
        }
        if !sets.iter().any(|s| s.interactive) {
            if let Some(s) = sets.iter_mut().filter(|s| s.members.len() >= 2).max_by_key(|s| s.members.len()) {
                s.interactive = true;
            }
        }
    }
    Ok(sets)
}

/// Source of activity assignments.
pub enum Backend<'a> {
    Fallback,
    Llm(&'a LlmClient),
}

/// Anchor grid centred on the origin with spacing `base * (1.5 - sigma)`,
/// never below 1 m.
fn anchors(g: usize, params: &CrowdParams, cfg: &PlannerConfig) -> Vec<[f64; 2]> {
    let spacing = (cfg.group_spacing * (1.5 - params.sigma)).max(1.0);
    let cols = (g as f64).sqrt().ceil() as usize;
    let rows = g.div_ceil(cols);
    (0..g)
        .map(|k| {
            let (r, c) = (k / cols, k % cols);
            [
                (c as f64 - (cols - 1) as f64 / 2.0) * spacing,
                (r as f64 - (rows - 1) as f64 / 2.0) * spacing,
            ]
        })
        .collect()
}

fn rotate(v: [f64; 2], dir: [f64; 2]) -> [f64; 2] {
    // local x is lateral, local z runs along dir
    [v[0] * dir[1] + v[1] * dir[0], -v[0] * dir[0] + v[1] * dir[1]]
}

fn grid_offsets(m: usize, spacing: f64) -> Vec<[f64; 2]> {
    let cols = (m as f64).sqrt().ceil() as usize;
    let rows = m.div_ceil(cols);
    (0..m)
        .map(|k| {
            [
                ((k % cols) as f64 - (cols - 1) as f64 / 2.0) * spacing,
                ((k / cols) as f64 - (rows - 1) as f64 / 2.0) * spacing,
            ]
        })
        .collect()
}

fn ring_radius(m: usize, arc: f64, min: f64) -> f64 {
    (arc * m as f64 / TAU).max(min)
}

/// Keyframes of every member of one group.
fn group_trajectories(act: Activity, anchor: [f64; 2], heading: f64, m: usize, cfg: &PlannerConfig) -> Vec<Vec<Keyframe>> {
    let dir = [heading.sin(), heading.cos()];
    let last = cfg.frames - 1;
    let mut key_frames: Vec<usize> = (0..cfg.frames).step_by(cfg.keyframe_stride).collect();
    if *key_frames.last().unwrap_or(&0) != last {
        key_frames.push(last);
    }
    let still = |p: [f64; 2]| vec![Keyframe { frame: 0, pos: p }];
    let at = |o: [f64; 2]| {
        let r = rotate(o, dir);
        [anchor[0] + r[0], anchor[1] + r[1]]
    };
    match act {
        Activity::Walk => {
            let half = 0.5 * last as f64 / cfg.fps;
            grid_offsets(m, 1.0)
                .into_iter()
                .map(|o| {
                    let p0 = at(o);
                    key_frames
                        .iter()
                        .map(|&t| {
                            let s = cfg.walk_speed * (t as f64 / cfg.fps - half);
                            Keyframe {
                                frame: t,
                                pos: [p0[0] + dir[0] * s, p0[1] + dir[1] * s],
                            }
                        })
                        .collect()
                })
                .collect()
        }
        Activity::DanceInCircle => {
            let r = ring_radius(m, 0.9, 1.0);
            let omega = (0.5f64).min(0.6 * cfg.v_max / r);
            (0..m)
                .map(|k| {
                    let phase = heading + TAU * k as f64 / m as f64;
                    key_frames
                        .iter()
                        .map(|&t| {
                            let a = phase + omega * t as f64 / cfg.fps;
                            Keyframe {
                                frame: t,
                                pos: [anchor[0] + r * a.cos(), anchor[1] + r * a.sin()],
                            }
                        })
                        .collect()
                })
                .collect()
        }
        Activity::StandAndConverse => {
            let r = if m == 1 { 0.0 } else { ring_radius(m, 0.8, 0.6) };
            (0..m)
                .map(|k| {
                    let a = heading + TAU * k as f64 / m as f64;
                    still([anchor[0] + r * a.cos(), anchor[1] + r * a.sin()])
                })
                .collect()
        }
        Activity::Queue => (0..m).map(|k| still(at([0.0, -0.8 * k as f64]))).collect(),
        Activity::ExerciseInRows => grid_offsets(m, 1.2).into_iter().map(|o| still(at(o))).collect(),
        Activity::HandshakePair => (0..m)
            .map(|k| {
                let pair = (k / 2) as f64 - ((m / 2).max(1) - 1) as f64 / 2.0;
                let o = if k + 1 == m && m % 2 == 1 {
                    [pair * 1.5, -1.0]
                } else {
                    [pair * 1.5, if k % 2 == 0 { -0.4 } else { 0.4 }]
                };
                still(at(o))
            })
            .collect(),
    }
}

fn hand_constraints(members: &[usize], joint: usize, cfg: &PlannerConfig) -> Vec<InteractionConstraint> {
    let stride = cfg.keyframe_stride.min(cfg.frames.max(2) / 2).max(1);
    let frames: Vec<usize> = (cfg.frames / 4..=(3 * cfg.frames / 4).min(cfg.frames - 1))
        .step_by(stride)
        .collect();
    members
        .chunks_exact(2)
        .map(|p| InteractionConstraint {
            agent_a: p[0],
            joint_a: joint,
            agent_b: p[1],
            joint_b: joint,
            distance: cfg.hand_distance,
            height: cfg.hand_height,
            frames: frames.clone(),
        })
        .collect()
}

/// Activities proposed by an LLM for each group, or the reason they were
/// rejected.
fn llm_activities(
    client: &LlmClient,
    scene: &str,
    sets: &[MemberSet],
) -> std::result::Result<(Vec<(Activity, String)>, usize, Vec<f64>), String> {
    let sizes: Vec<usize> = sets.iter().map(|s| s.members.len()).collect();
    let (candidates, retries) = llm::motion_plan_candidates(client, scene, &sizes).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = candidates.iter().map(|c| score_candidate(c, sets)).collect();
    let best = scores
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &s)| match acc {
            Some((_, b)) if b >= s => acc,
            _ => Some((i, s)),
        });
    match best {
        Some((i, s)) if s >= 1.0 => {
            let picked = candidates[i]
                .groups
                .iter()
                .zip(sets)
                .map(|(g, set)| {
                    let act = Activity::from_name(&g.activity).unwrap_or(Activity::Walk);
                    let act = if set.interactive { Activity::HandshakePair } else { act };
                    (act, g.text.trim().to_string())
                })
                .collect();
            Ok((picked, retries, scores))
        }
        _ => Err(format!("no valid LLM candidate (scores {scores:?})")),
    }
}

/// Fraction of groups that a candidate fills with a known, feasible activity.
fn score_candidate(c: &llm::PlanCandidate, sets: &[MemberSet]) -> f64 {
    if c.groups.len() != sets.len() || sets.is_empty() {
        return 0.0;
    }
    let ok = c
        .groups
        .iter()
        .zip(sets)
        .filter(|(g, s)| match Activity::from_name(&g.activity) {
            Some(Activity::HandshakePair) => s.members.len() >= 2 && !g.text.trim().is_empty(),
            Some(_) => !g.text.trim().is_empty(),
            None => false,
        })
        .count();
    ok as f64 / sets.len() as f64
}

/// Builds a plan for `scene`. LLM failures fall back to the catalog and are
/// recorded in the provenance; only invalid parameters are errors.
pub fn plan_scene(
    scene: &str,
    params: &CrowdParams,
    backend: &Backend,
    cfg: &PlannerConfig,
    skel: &Skeleton,
    seed: u64,
) -> Result<ScenePlan> {
    params.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets = divide_groups(params, cfg.interaction_alpha, &mut rng)?;
    let g = sets.len();
    let candidates = scene_candidates(scene);
    let fallback: Vec<(Activity, String)> = sets
        .iter()
        .map(|s| {
            let act = if s.interactive {
                Activity::HandshakePair
            } else {
                let pool: Vec<Activity> = candidates
                    .iter()
                    .copied()
                    .filter(|a| *a != Activity::HandshakePair || s.members.len() >= 2)
                    .collect();
                let pool = if pool.is_empty() { vec![Activity::StandAndConverse] } else { pool };
                pool[rng.random_range(0..pool.len())]
            };
            (act, act.text().to_string())
        })
        .collect();
    let headings: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..TAU)).collect();

    let mut provenance = Provenance {
        source: PlanSource::Fallback,
        seed,
        fallback_reason: None,
        llm_retries: 0,
        candidate_scores: Vec::new(),
    };
    let activities = match backend {
        Backend::Fallback => fallback,
        Backend::Llm(client) => match llm_activities(client, scene, &sets) {
            Ok((acts, retries, scores)) => {
                provenance.source = PlanSource::Llm;
                provenance.llm_retries = retries;
                provenance.candidate_scores = scores;
                acts
            }
            Err(reason) => {
                warn!("LLM planning failed, using the fallback catalog: {reason}");
                provenance.fallback_reason = Some(reason);
                fallback
            }
        },
    };

    let hand = skel.joint_index("right_wrist").unwrap_or(skel.num_joints() - 1);
    let anchor_pts = anchors(g, params, cfg);
    let mut agents: Vec<Option<AgentPlan>> = vec![None; params.n];
    let mut groups = Vec::with_capacity(g);
    for (k, set) in sets.iter().enumerate() {
        let (act, text) = &activities[k];
        let trajs = group_trajectories(*act, anchor_pts[k], headings[k], set.members.len(), cfg);
        for (&m, keys) in set.members.iter().zip(trajs) {
            agents[m] = Some(AgentPlan {
                group: k,
                text: text.clone(),
                keyframes: keys,
            });
        }
        let interaction_joints = if set.interactive {
            hand_constraints(&set.members, hand, cfg)
        } else {
            Vec::new()
        };
        groups.push(Group {
            id: k,
            members: set.members.clone(),
            activity: *act,
            activity_text: text.clone(),
            anchor: anchor_pts[k],
            formation: act.formation(),
            interactive: set.interactive,
            interaction_joints,
        });
    }
    let mut plan = ScenePlan {
        schema: PLAN_SCHEMA.into(),
        scene: scene.into(),
        params: *params,
        frames: cfg.frames,
        fps: cfg.fps,
        joints: skel.num_joints(),
        pelvis_height: skel.rest_pelvis_height(),
        config: cfg.clone(),
        groups,
        agents: agents.into_iter().map(|a| a.expect("every agent is in a group")).collect(),
        events: Vec::new(),
        control: SpatialControl::empty(0, 0, 0),
        provenance,
    };
    plan.control = trajectories_to_control(&plan, cfg.interp)?;
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, s: f64) -> CrowdParams {
        CrowdParams {
            n,
            s,
            sigma: 0.5,
            alpha: 0.2,
        }
    }

    #[test]
    fn group_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sizes = |p: CrowdParams, rng: &mut ChaCha8Rng| {
            let mut s: Vec<usize> = divide_groups(&p, 0.7, rng).unwrap().iter().map(|g| g.members.len()).collect();
            s.sort_unstable_by(|a, b| b.cmp(a));
            s
        };
        assert_eq!(sizes(params(10, 5.0), &mut rng), vec![5, 5]);
        assert_eq!(sizes(params(7, 3.0), &mut rng), vec![3, 2, 2]);
        let a = divide_groups(&params(9, 2.0), 0.7, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = divide_groups(&params(9, 2.0), 0.7, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let mut hi = params(9, 3.0);
        hi.alpha = 0.75;
        assert!(divide_groups(&hi, 0.7, &mut rng).unwrap().iter().any(|g| g.interactive));
    }

    #[test]
    fn public_square_fallback() {
        let skel = Skeleton::hml22();
        let cfg = PlannerConfig::default();
        let plan = plan_scene("a public square", &params(4, 2.0), &Backend::Fallback, &cfg, &skel, 3).unwrap();
        assert_eq!(plan.groups.len(), 2);
        let (a, b) = (plan.groups[0].anchor, plan.groups[1].anchor);
        assert!((a[0] - b[0]).hypot(a[1] - b[1]) >= 1.0);
        let again = plan_scene("a public square", &params(4, 2.0), &Backend::Fallback, &cfg, &skel, 3).unwrap();
        assert_eq!(plan.to_json().unwrap(), again.to_json().unwrap());

        let one = plan_scene("a public square", &params(1, 1.0), &Backend::Fallback, &cfg, &skel, 0).unwrap();
        assert_eq!(one.groups.len(), 1);
        assert_eq!(one.control.controlled_count(), cfg.frames);
    }

    #[test]
    fn interactive_groups_write_hand_targets() {
        let skel = Skeleton::hml22();
        let p = CrowdParams {
            n: 4,
            s: 2.0,
            sigma: 0.5,
            alpha: 1.0,
        };
        let plan = plan_scene("an office lobby", &p, &Backend::Fallback, &PlannerConfig::default(), &skel, 1).unwrap();
        let c = &plan.groups.iter().find(|g| g.interactive).unwrap().interaction_joints[0];
        let f = c.frames[0];
        let ha = plan.control.get(c.agent_a, f, c.joint_a).unwrap();
        let hb = plan.control.get(c.agent_b, f, c.joint_b).unwrap();
        let d = ((ha[0] - hb[0]).powi(2) + (ha[1] - hb[1]).powi(2) + (ha[2] - hb[2]).powi(2)).sqrt();
        assert!((d - 0.2).abs() < 1e-12);
        // mask only where written
        let expected = p.n * plan.frames + 2 * plan.groups.iter().flat_map(|g| &g.interaction_joints).map(|c| c.frames.len()).sum::<usize>();
        assert_eq!(plan.control.controlled_count(), expected);
    }
}
