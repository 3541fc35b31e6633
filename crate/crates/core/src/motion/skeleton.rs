use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest-pose offset from the parent, in meters.
    pub offset: [f64; 3],
}

/// Joint hierarchy, rest pose and the joints used for feet and heading.
///
/// Joints are stored in topological order: every parent index is smaller
/// than its child's, and joint 0 is the pelvis (root).
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    /// Left ankle, left toe, right ankle, right toe.
    feet: [usize; 4],
    /// Left/right joint pairs whose spans define the facing direction.
    facing: Vec<(usize, usize)>,
}

/// Vertical axis is +Y; the ground plane is XZ and the canonical heading +Z.
pub const UP: usize = 1;

// name, parent, offset
const HML22: [(&str, i32, [f64; 3]); 22] = [
    ("pelvis", -1, [0.0, 0.0, 0.0]),
    ("left_hip", 0, [0.06, -0.09, 0.0]),
    ("right_hip", 0, [-0.06, -0.09, 0.0]),
    ("spine1", 0, [0.0, 0.11, -0.02]),
    ("left_knee", 1, [0.0, -0.40, 0.0]),
    ("right_knee", 2, [0.0, -0.40, 0.0]),
    ("spine2", 3, [0.0, 0.13, 0.0]),
    ("left_ankle", 4, [0.0, -0.40, -0.03]),
    ("right_ankle", 5, [0.0, -0.40, -0.03]),
    ("spine3", 6, [0.0, 0.05, 0.02]),
    ("left_foot", 7, [0.0, -0.04, 0.12]),
    ("right_foot", 8, [0.0, -0.04, 0.12]),
    ("neck", 9, [0.0, 0.21, -0.02]),
    ("left_collar", 9, [0.07, 0.12, 0.0]),
    ("right_collar", 9, [-0.07, 0.12, 0.0]),
    ("head", 12, [0.0, 0.09, 0.05]),
    ("left_shoulder", 13, [0.10, 0.03, 0.0]),
    ("right_shoulder", 14, [-0.10, 0.03, 0.0]),
    ("left_elbow", 16, [0.26, 0.0, 0.0]),
    ("right_elbow", 17, [-0.26, 0.0, 0.0]),
    ("left_wrist", 18, [0.25, 0.0, 0.0]),
    ("right_wrist", 19, [-0.25, 0.0, 0.0]),
];

impl Default for Skeleton {
    fn default() -> Self {
        Self::hml22()
    }
}

impl Skeleton {
    /// 22-joint body in the HumanML3D topology, about 1.7 m tall.
    pub fn hml22() -> Self {
        let joints = HML22
            .iter()
            .map(|(name, parent, offset)| Joint {
                name: name.to_string(),
                parent: usize::try_from(*parent).ok(),
                offset: *offset,
            })
            .collect();
        Skeleton {
            joints,
            feet: [7, 10, 8, 11],
            facing: vec![(1, 2), (16, 17)],
        }
    }

    pub fn new(joints: Vec<Joint>, feet: [usize; 4], facing: Vec<(usize, usize)>) -> Result<Self> {
        let s = Skeleton { joints, feet, facing };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let n = self.joints.len();
        if n < 2 {
            return Err(Error::validation("skeleton needs at least two joints"));
        }
        if self.joints[0].parent.is_some() {
            return Err(Error::validation("joint 0 must be the root"));
        }
        if self.joints[0].offset != [0.0; 3] {
            return Err(Error::validation("root offset must be zero"));
        }
        for (i, j) in self.joints.iter().enumerate().skip(1) {
            match j.parent {
                Some(p) if p < i => {}
                _ => {
                    return Err(Error::validation(format!(
                        "joint {i} ({}) must have a parent listed before it",
                        j.name
                    )))
                }
            }
            if j.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("joint {i} has a non-finite offset")));
            }
        }
        if self.feet.iter().any(|&f| f >= n) {
            return Err(Error::validation("foot joint index out of range"));
        }
        if self.facing.is_empty() || self.facing.iter().any(|&(l, r)| l >= n || r >= n || l == r) {
            return Err(Error::validation("facing joints must be distinct valid pairs"));
        }
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.joints[j].parent
    }

    pub fn offset(&self, j: usize) -> [f64; 3] {
        self.joints[j].offset
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.clone()).collect()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    /// Left ankle, left toe, right ankle, right toe.
    pub fn foot_joints(&self) -> [usize; 4] {
        self.feet
    }

    /// Distinct foot joints in ascending order.
    pub fn unique_foot_joints(&self) -> Vec<usize> {
        let mut v = self.feet.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn facing_pairs(&self) -> &[(usize, usize)] {
        &self.facing
    }

    /// Width of one frame of the relative representation.
    pub fn repr_dim(&self) -> usize {
        repr_dim(self.num_joints())
    }

    /// Rest pose with the root at the origin, `J x 3`.
    pub fn rest_pose(&self) -> Vec<[f64; 3]> {
        let mut out: Vec<[f64; 3]> = Vec::with_capacity(self.joints.len());
        for j in &self.joints {
            let p = match j.parent {
                None => [0.0; 3],
                Some(p) => {
                    let b = out[p];
                    [b[0] + j.offset[0], b[1] + j.offset[1], b[2] + j.offset[2]]
                }
            };
            out.push(p);
        }
        out
    }

    /// Pelvis height that puts the lowest rest-pose joint on the ground.
    pub fn rest_pelvis_height(&self) -> f64 {
        -self
            .rest_pose()
            .iter()
            .map(|p| p[UP])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: SkeletonJson = serde_json::from_str(s)
            .map_err(|e| Error::Format(format!("skeleton json: {e}")))?;
        raw.into_skeleton()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let names = self.joint_names();
        let raw = SkeletonJson {
            joints: self
                .joints
                .iter()
                .map(|j| JointJson {
                    name: j.name.clone(),
                    parent: JointRef::Index(j.parent.map_or(-1, |p| p as i64)),
                    offset: j.offset,
                })
                .collect(),
            feet: FeetJson {
                left: vec![names[self.feet[0]].clone(), names[self.feet[1]].clone()],
                right: vec![names[self.feet[2]].clone(), names[self.feet[3]].clone()],
            },
            up_axis: "y".into(),
            facing: Some(
                self.facing
                    .iter()
                    .map(|&(l, r)| [names[l].clone(), names[r].clone()])
                    .collect(),
            ),
        };
        serde_json::to_string_pretty(&raw).expect("skeleton serializes")
    }
}

pub fn repr_dim(joints: usize) -> usize {
    1 + 2 + 1 + 3 * (joints - 1) + 3 * joints + 6 * (joints - 1) + 4
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonJson {
    joints: Vec<JointJson>,
    feet: FeetJson,
    #[serde(default = "default_up")]
    up_axis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    facing: Option<Vec<[String; 2]>>,
}

fn default_up() -> String {
    "y".into()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointJson {
    name: String,
    parent: JointRef,
    offset: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum JointRef {
    Index(i64),
    Name(String),
}

/// Each side lists `[ankle, toe]`; a single entry is used for both.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeetJson {
    left: Vec<String>,
    right: Vec<String>,
}

impl SkeletonJson {
    fn into_skeleton(self) -> Result<Skeleton> {
        if self.up_axis != "y" {
            return Err(Error::validation(format!(
                "unsupported up_axis {:?}: only \"y\" is supported",
                self.up_axis
            )));
        }
        let names: Vec<String> = self.joints.iter().map(|j| j.name.clone()).collect();
        let lookup = |n: &str| {
            names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| Error::validation(format!("unknown joint name {n:?}")))
        };
        let mut joints = Vec::with_capacity(self.joints.len());
        for j in &self.joints {
            let parent = match &j.parent {
                JointRef::Index(i) if *i < 0 => None,
                JointRef::Index(i) => Some(*i as usize),
                JointRef::Name(n) if n.is_empty() => None,
                JointRef::Name(n) => Some(lookup(n)?),
            };
            joints.push(Joint {
                name: j.name.clone(),
                parent,
                offset: j.offset,
            });
        }
        let side = |v: &[String]| -> Result<(usize, usize)> {
            match v {
                [a] => {
                    let a = lookup(a)?;
                    Ok((a, a))
                }
                [a, t] => Ok((lookup(a)?, lookup(t)?)),
                _ => Err(Error::validation("feet entries need one or two joints per side")),
            }
        };
        let (la, lt) = side(&self.feet.left)?;
        let (ra, rt) = side(&self.feet.right)?;
        let facing = match self.facing {
            Some(pairs) => pairs
                .iter()
                .map(|[l, r]| Ok((lookup(l)?, lookup(r)?)))
                .collect::<Result<Vec<_>>>()?,
            None => vec![(la, ra)],
        };
        Skeleton::new(joints, [la, lt, ra, rt], facing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_skeleton_shape() {
        let s = Skeleton::hml22();
        assert_eq!(s.num_joints(), 22);
        assert_eq!(s.repr_dim(), 263);
        let h = s.rest_pelvis_height();
        assert!((h - 0.93).abs() < 1e-12, "pelvis height {h}");
        let rest = s.rest_pose();
        // toes touch the ground, ankles sit just above
        assert!((rest[10][UP] + h).abs() < 1e-12);
        assert!((rest[7][UP] + h - 0.04).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let s = Skeleton::hml22();
        let back = Skeleton::from_json_str(&s.to_json_string()).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn json_with_names_and_single_foot_joints() {
        let src = r#"{
            "joints": [
                {"name": "root", "parent": -1, "offset": [0, 0, 0]},
                {"name": "lfoot", "parent": "root", "offset": [0.1, -0.9, 0]},
                {"name": "rfoot", "parent": "root", "offset": [-0.1, -0.9, 0]},
                {"name": "head", "parent": 0, "offset": [0, 0.7, 0]}
            ],
            "feet": {"left": ["lfoot"], "right": ["rfoot"]},
            "up_axis": "y"
        }"#;
        let s = Skeleton::from_json_str(src).unwrap();
        assert_eq!(s.foot_joints(), [1, 1, 2, 2]);
        assert_eq!(s.unique_foot_joints(), vec![1, 2]);
        assert_eq!(s.facing_pairs(), &[(1, 2)]);
        assert_eq!(s.repr_dim(), 1 + 2 + 1 + 9 + 12 + 18 + 4);
    }

    #[test]
    fn rejects_bad_skeletons() {
        let bad_parent = r#"{"joints": [
            {"name": "a", "parent": -1, "offset": [0,0,0]},
            {"name": "b", "parent": 2, "offset": [0,1,0]},
            {"name": "c", "parent": 0, "offset": [0,1,0]}],
            "feet": {"left": ["b"], "right": ["c"]}}"#;
        assert!(Skeleton::from_json_str(bad_parent).is_err());
        let z_up = r#"{"joints": [
            {"name": "a", "parent": -1, "offset": [0,0,0]},
            {"name": "b", "parent": 0, "offset": [0,1,0]}],
            "feet": {"left": ["b"], "right": ["a"]}, "up_axis": "z"}"#;
        assert!(Skeleton::from_json_str(z_up).is_err());
        let root_offset = r#"{"joints": [
            {"name": "a", "parent": -1, "offset": [0,1,0]},
            {"name": "b", "parent": 0, "offset": [0,1,0]}],
            "feet": {"left": ["b"], "right": ["a"]}}"#;
        assert!(Skeleton::from_json_str(root_offset).is_err());
    }
}
