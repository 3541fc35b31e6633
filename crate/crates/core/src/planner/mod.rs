//! Crowd scene planning: group division, activity layout, event-driven
//! trajectory rewrites, and conversion of the plan into spatial control.

pub mod events;
pub mod llm;
mod scene;
pub mod trajectory;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::control::SpatialControl;
use crate::error::{Error, Result};
use crate::io::json::to_canonical_pretty;
use crate::io::write_atomic;

pub use events::{apply_event, select_pattern, EventPattern, EventSpec};
pub use scene::{divide_groups, plan_scene, Activity, Backend, MemberSet};
pub use trajectory::{trajectories_to_control, Interp, Keyframe};

pub const PLAN_SCHEMA: &str = "cmg_plan_v1";

/// Scene-level crowd parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrowdParams {
    /// Number of agents.
    pub n: usize,
    /// Average group size.
    pub s: f64,
    /// Crowd density in `[0, 1]`.
    pub sigma: f64,
    /// Interaction intensity in `[0, 1]`.
    pub alpha: f64,
}

impl CrowdParams {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::validation("crowd needs at least one agent"));
        }
        if !(self.s > 0.0 && self.s <= self.n as f64) {
            return Err(Error::validation(format!(
                "group size s must lie in (0, n = {}], got {}",
                self.n, self.s
            )));
        }
        for (name, v) in [("sigma", self.sigma), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Tunables shared by scene layout, events and densification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub frames: usize,
    pub fps: f64,
    /// Anchor spacing at density 0.5 (m); spacing is `base * (1.5 - sigma)`.
    pub group_spacing: f64,
    /// Speed limit for every pelvis path (m/s).
    pub v_max: f64,
    /// Tolerance for a passing agent to rejoin its path (m).
    pub eps_return: f64,
    /// Frames between generated keyframes.
    pub keyframe_stride: usize,
    pub interp: Interp,
    pub walk_speed: f64,
    /// Hand gap and height of paired hand constraints (m).
    pub hand_distance: f64,
    pub hand_height: f64,
    /// Interaction intensity at which paired hand constraints start.
    pub interaction_alpha: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            frames: 60,
            fps: 20.0,
            group_spacing: 6.0,
            v_max: 1.5,
            eps_return: 0.1,
            keyframe_stride: 10,
            interp: Interp::CatmullRom,
            walk_speed: 1.0,
            hand_distance: 0.2,
            hand_height: 1.0,
            interaction_alpha: 0.7,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.keyframe_stride == 0 {
            return Err(Error::validation("planner frames and keyframe stride must be positive"));
        }
        for (name, v) in [
            ("fps", self.fps),
            ("group_spacing", self.group_spacing),
            ("v_max", self.v_max),
            ("eps_return", self.eps_return),
            ("hand_height", self.hand_height),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("planner.{name} must be positive, got {v}")));
            }
        }
        if !(self.walk_speed >= 0.0 && self.walk_speed <= self.v_max) {
            return Err(Error::validation("planner.walk_speed must lie in [0, v_max]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formation {
    Cluster,
    Circle,
    Line,
    Pair,
}

/// Two joints of two agents held `distance` apart at `height`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionConstraint {
    pub agent_a: usize,
    pub joint_a: usize,
    pub agent_b: usize,
    pub joint_b: usize,
    pub distance: f64,
    pub height: f64,
    pub frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Group {
    pub id: usize,
    pub members: Vec<usize>,
    pub activity: Activity,
    pub activity_text: String,
    pub anchor: [f64; 2],
    pub formation: Formation,
    pub interactive: bool,
    pub interaction_joints: Vec<InteractionConstraint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPlan {
    pub group: usize,
    pub text: String,
    pub keyframes: Vec<Keyframe>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Llm,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source: PlanSource,
    pub seed: u64,
    /// Why the deterministic planner was used after an LLM attempt.
    pub fallback_reason: Option<String>,
    pub llm_retries: usize,
    pub candidate_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppliedEvent {
    pub description: String,
    pub spec: EventSpec,
    pub affected: Vec<usize>,
    pub source: PlanSource,
}

/// Sparse `(agent, frame, joint, x, y, z)` listing of the controlled entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SparseControl {
    agents: usize,
    frames: usize,
    joints: usize,
    entries: Vec<(usize, usize, usize, f64, f64, f64)>,
}

impl From<&SpatialControl> for SparseControl {
    fn from(c: &SpatialControl) -> Self {
        let mut entries = Vec::new();
        for a in 0..c.agents {
            for i in 0..c.frames {
                for j in 0..c.joints {
                    if let Some(p) = c.get(a, i, j) {
                        entries.push((a, i, j, p[0], p[1], p[2]));
                    }
                }
            }
        }
        SparseControl {
            agents: c.agents,
            frames: c.frames,
            joints: c.joints,
            entries,
        }
    }
}

impl TryFrom<SparseControl> for SpatialControl {
    type Error = Error;

    fn try_from(s: SparseControl) -> Result<Self> {
        let mut c = SpatialControl::empty(s.agents, s.frames, s.joints);
        for (a, i, j, x, y, z) in s.entries {
            if a >= s.agents || i >= s.frames || j >= s.joints {
                return Err(Error::Schema {
                    path: "$.control.entries".into(),
                    message: format!("entry ({a}, {i}, {j}) lies outside the control tensor"),
                });
            }
            c.set(a, i, j, [x, y, z]);
        }
        Ok(c)
    }
}

mod sparse {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(c: &SpatialControl, s: S) -> std::result::Result<S::Ok, S::Error> {
        SparseControl::from(c).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<SpatialControl, D::Error> {
        let sc = SparseControl::deserialize(d)?;
        SpatialControl::try_from(sc).map_err(serde::de::Error::custom)
    }
}

/// A complete crowd plan: groups, per-agent texts and trajectories, and the
/// spatial control derived from them (world coordinates, metres).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenePlan {
    pub schema: String,
    pub scene: String,
    pub params: CrowdParams,
    pub frames: usize,
    pub fps: f64,
    pub joints: usize,
    pub pelvis_height: f64,
    pub config: PlannerConfig,
    pub groups: Vec<Group>,
    pub agents: Vec<AgentPlan>,
    pub events: Vec<AppliedEvent>,
    #[serde(with = "sparse")]
    pub control: SpatialControl,
    pub provenance: Provenance,
}

impl ScenePlan {
    /// Structural checks: partition of agents into groups and finite control.
    pub fn validate(&self) -> Result<()> {
        let n = self.params.n;
        if self.agents.len() != n {
            return Err(Error::validation(format!("plan lists {} agents, params say {n}", self.agents.len())));
        }
        let mut seen = vec![false; n];
        for g in &self.groups {
            for &m in &g.members {
                if m >= n || std::mem::replace(&mut seen[m], true) {
                    return Err(Error::validation(format!("agent {m} is out of range or in two groups")));
                }
                if self.agents[m].group != g.id {
                    return Err(Error::validation(format!("agent {m} disagrees about its group")));
                }
            }
        }
        if let Some(a) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!("agent {a} belongs to no group")));
        }
        if self.control.agents != n || self.control.frames != self.frames || self.control.joints != self.joints {
            return Err(Error::shape(
                "ScenePlan.control",
                &[n, self.frames, self.joints],
                &[self.control.agents, self.control.frames, self.control.joints],
            ));
        }
        self.control.validate()
    }

    /// Pelvis ground position of an agent at a frame, as planned.
    pub fn pelvis(&self, agent: usize, frame: usize) -> Option<[f64; 2]> {
        self.control.get(agent, frame, 0).map(|p| [p[0], p[2]])
    }

    pub fn to_json(&self) -> Result<String> {
        to_canonical_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Schema {
            path: "$".into(),
            message: format!("invalid JSON: {e}"),
        })?;
        match value.get("schema") {
            None => {
                return Err(Error::Schema {
                    path: "$.schema".into(),
                    message: "missing field `schema`".into(),
                })
            }
            Some(Value::String(s)) if s == PLAN_SCHEMA => {}
            Some(other) => return Err(Error::UnsupportedVersion(format!("plan schema {other}"))),
        }
        let plan: ScenePlan = serde_path_to_error::deserialize(value).map_err(|e| {
            let mut path = e.path().to_string();
            let message = e.inner().to_string();
            if let Some(field) = message.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
                path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
            }
            let path = if path == "." { "$".to_string() } else { format!("$.{path}") };
            Error::Schema { path, message }
        })?;
        plan.validate()?;
        Ok(plan)
    }
}

pub fn write_plan(plan: &ScenePlan, path: &Path) -> Result<()> {
    let mut text = plan.to_json()?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_plan(path: &Path) -> Result<ScenePlan> {
    ScenePlan::from_json(&std::fs::read_to_string(path)?)
}
