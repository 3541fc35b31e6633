//! Spatial control signals: per-agent global joint targets plus a binary mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Targets `n x f x J x 3` and mask `n x f x J` for a whole crowd.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialControl {
    pub agents: usize,
    pub frames: usize,
    pub joints: usize,
    pub targets: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Control for a single agent: targets `f x J x 3`, mask `f x J`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentControl {
    pub frames: usize,
    pub joints: usize,
    pub targets: Vec<f64>,
    pub mask: Vec<f64>,
}

fn check_mask(mask: &[f64]) -> Result<()> {
    if let Some(v) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::validation(format!("control mask entries must be 0 or 1, found {v}")));
    }
    Ok(())
}

impl SpatialControl {
    pub fn empty(agents: usize, frames: usize, joints: usize) -> Self {
        SpatialControl {
            agents,
            frames,
            joints,
            targets: vec![0.0; agents * frames * joints * 3],
            mask: vec![0.0; agents * frames * joints],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.agents * self.frames * self.joints;
        if self.mask.len() != cells || self.targets.len() != cells * 3 {
            return Err(Error::shape(
                "SpatialControl",
                &[cells, cells * 3],
                &[self.mask.len(), self.targets.len()],
            ));
        }
        check_mask(&self.mask)?;
        for (k, &m) in self.mask.iter().enumerate() {
            if m == 1.0 && self.targets[3 * k..3 * k + 3].iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("controlled entry carries a non-finite target"));
            }
        }
        Ok(())
    }

    fn cell(&self, agent: usize, frame: usize, joint: usize) -> usize {
        assert!(agent < self.agents && frame < self.frames && joint < self.joints);
        (agent * self.frames + frame) * self.joints + joint
    }

    /// Writes a target and marks the entry as controlled.
    pub fn set(&mut self, agent: usize, frame: usize, joint: usize, p: [f64; 3]) {
        let c = self.cell(agent, frame, joint);
        self.targets[3 * c..3 * c + 3].copy_from_slice(&p);
        self.mask[c] = 1.0;
    }

    pub fn clear(&mut self, agent: usize, frame: usize, joint: usize) {
        let c = self.cell(agent, frame, joint);
        self.targets[3 * c..3 * c + 3].fill(0.0);
        self.mask[c] = 0.0;
    }

    pub fn get(&self, agent: usize, frame: usize, joint: usize) -> Option<[f64; 3]> {
        let c = self.cell(agent, frame, joint);
        (self.mask[c] == 1.0).then(|| [self.targets[3 * c], self.targets[3 * c + 1], self.targets[3 * c + 2]])
    }

    pub fn agent(&self, a: usize) -> AgentControl {
        let cells = self.frames * self.joints;
        AgentControl {
            frames: self.frames,
            joints: self.joints,
            targets: self.targets[a * cells * 3..(a + 1) * cells * 3].to_vec(),
            mask: self.mask[a * cells..(a + 1) * cells].to_vec(),
        }
    }

    pub fn controlled_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }
}

impl AgentControl {
    pub fn empty(frames: usize, joints: usize) -> Self {
        AgentControl {
            frames,
            joints,
            targets: vec![0.0; frames * joints * 3],
            mask: vec![0.0; frames * joints],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.frames * self.joints;
        if self.mask.len() != cells || self.targets.len() != cells * 3 {
            return Err(Error::shape(
                "AgentControl",
                &[cells, cells * 3],
                &[self.mask.len(), self.targets.len()],
            ));
        }
        check_mask(&self.mask)
    }

    pub fn set(&mut self, frame: usize, joint: usize, p: [f64; 3]) {
        let c = frame * self.joints + joint;
        self.targets[3 * c..3 * c + 3].copy_from_slice(&p);
        self.mask[c] = 1.0;
    }

    pub fn target(&self, frame: usize, joint: usize) -> [f64; 3] {
        let c = 3 * (frame * self.joints + joint);
        [self.targets[c], self.targets[c + 1], self.targets[c + 2]]
    }

    pub fn is_set(&self, frame: usize, joint: usize) -> bool {
        self.mask[frame * self.joints + joint] == 1.0
    }

    pub fn is_empty(&self) -> bool {
        self.mask.iter().all(|&m| m == 0.0)
    }

    pub fn controlled_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }

    /// Applies `f` to every controlled target, e.g. a change of frame.
    pub fn map_targets(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> AgentControl {
        let mut out = self.clone();
        for c in 0..self.frames * self.joints {
            if self.mask[c] == 1.0 {
                let p = f([self.targets[3 * c], self.targets[3 * c + 1], self.targets[3 * c + 2]]);
                out.targets[3 * c..3 * c + 3].copy_from_slice(&p);
            }
        }
        out
    }
}
