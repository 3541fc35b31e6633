//! Metrics computed directly on global joint positions.

use serde::{Deserialize, Serialize};

use crate::control::{AgentControl, SpatialControl};
use crate::error::{Error, Result};
use crate::motion::{GlobalMotion, Skeleton};

/// Fraction of frame transitions in which some foot is below `h` and slides
/// horizontally by more than `slide` metres.
pub fn foot_skating_ratio(glob: &GlobalMotion, skel: &Skeleton, h: f64, slide: f64) -> Result<f64> {
    if glob.joints != skel.num_joints() {
        return Err(Error::shape("foot_skating_ratio", &[skel.num_joints()], &[glob.joints]));
    }
    if glob.frames < 2 {
        return Ok(0.0);
    }
    let feet = skel.unique_foot_joints();
    let skating = (0..glob.frames - 1)
        .filter(|&i| {
            feet.iter().any(|&j| {
                let (a, b) = (glob.pos(i, j), glob.pos(i + 1, j));
                a[1] < h && (b[0] - a[0]).hypot(b[2] - a[2]) > slide
            })
        })
        .count();
    Ok(skating as f64 / (glob.frames - 1) as f64)
}

/// Control-following errors. The three values are `None` when no sequence
/// carried a controlled entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialErrorReport {
    /// Fraction of sequences with any controlled entry beyond the threshold.
    pub traj_err_ratio: Option<f64>,
    /// Fraction of controlled entries beyond the threshold, pooled.
    pub loc_err_ratio: Option<f64>,
    /// Mean distance over controlled entries, pooled.
    pub avg_err_m: Option<f64>,
    pub threshold_m: f64,
    /// Sequences that contributed (non-empty mask).
    pub sequences: usize,
    pub controlled_entries: usize,
}

impl SpatialErrorReport {
    pub fn defined(&self) -> bool {
        self.sequences > 0
    }
}

/// Errors of one batch of motions against their controls, with a strict
/// `distance > threshold` convention.
pub fn spatial_errors(globs: &[GlobalMotion], controls: &[AgentControl], threshold: f64) -> Result<SpatialErrorReport> {
    if globs.len() != controls.len() {
        return Err(Error::shape("spatial_errors", &[globs.len()], &[controls.len()]));
    }
    if !(threshold >= 0.0) {
        return Err(Error::validation("threshold must be non-negative"));
    }
    let (mut failed, mut sequences, mut entries, mut beyond) = (0usize, 0usize, 0usize, 0usize);
    let mut total = 0.0;
    for (g, c) in globs.iter().zip(controls) {
        c.validate()?;
        if g.frames != c.frames || g.joints != c.joints {
            return Err(Error::shape("spatial_errors", &[g.frames, g.joints], &[c.frames, c.joints]));
        }
        if c.is_empty() {
            continue;
        }
        sequences += 1;
        let mut any = false;
        for i in 0..c.frames {
            for j in 0..c.joints {
                if !c.is_set(i, j) {
                    continue;
                }
                let (p, t) = (g.pos(i, j), c.target(i, j));
                let d = ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt();
                entries += 1;
                total += d;
                if d > threshold {
                    beyond += 1;
                    any = true;
                }
            }
        }
        failed += usize::from(any);
    }
    let defined = sequences > 0;
    Ok(SpatialErrorReport {
        traj_err_ratio: defined.then(|| failed as f64 / sequences as f64),
        loc_err_ratio: defined.then(|| beyond as f64 / entries as f64),
        avg_err_m: defined.then(|| total / entries as f64),
        threshold_m: threshold,
        sequences,
        controlled_entries: entries,
    })
}

/// [`spatial_errors`] with one sequence per agent of a crowd control.
pub fn spatial_errors_batch(globs: &[GlobalMotion], control: &SpatialControl, threshold: f64) -> Result<SpatialErrorReport> {
    control.validate()?;
    let per_agent: Vec<AgentControl> = (0..control.agents).map(|a| control.agent(a)).collect();
    spatial_errors(globs, &per_agent, threshold)
}
