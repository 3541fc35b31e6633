//! End-to-end stages shared by the CLI and the examples: per-agent motion
//! generation from a scene plan, and metric evaluation of generated crowds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::MetricsConfig;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::metrics::{
    diversity, fid, foot_skating_ratio, r_precision, spatial_errors_batch, FeatureExtractor, KinematicFeatures,
    SpatialErrorReport, TextProjection,
};
use crate::model::{DenoiserWeights, HashedBowEmbedder, TextCondition, TextEmbedder};
use crate::motion::{relative_to_global, GlobalMotion, RootFrame, Skeleton};
use crate::planner::ScenePlan;
use crate::sampling::{sample, SampleConfig};

/// Displacement below which an agent counts as stationary (m).
const STILL: f64 = 0.1;

/// Ground frame in which agent `a` is generated: origin under its first
/// pelvis target, facing along its overall displacement, or towards its
/// group anchor when it barely moves.
pub fn agent_frame(plan: &ScenePlan, a: usize) -> RootFrame {
    let last = plan.frames.saturating_sub(1);
    let (Some(p0), Some(p1)) = (plan.pelvis(a, 0), plan.pelvis(a, last)) else {
        return RootFrame::default();
    };
    let mut d = [p1[0] - p0[0], p1[1] - p0[1]];
    if d[0].hypot(d[1]) < STILL {
        let anchor = plan.groups[plan.agents[a].group].anchor;
        d = [anchor[0] - p0[0], anchor[1] - p0[1]];
    }
    let heading = if d[0].hypot(d[1]) < 1e-6 { 0.0 } else { d[0].atan2(d[1]) };
    RootFrame { origin: p0, heading }
}

/// Per-agent text conditions for the embedder matching `w`.
pub fn agent_texts(plan: &ScenePlan, w: &DenoiserWeights) -> Vec<TextCondition> {
    let embedder = HashedBowEmbedder::new(w.config.text_dim);
    plan.agents.iter().map(|a| embedder.condition(&a.text)).collect()
}

/// Samples every agent of `plan` in parallel and returns world-space joint
/// positions. Agent `a` draws from its own ChaCha stream `a` of `seed`, so
/// results do not depend on the thread count.
pub fn generate_agents(
    plan: &ScenePlan,
    w: &DenoiserWeights,
    sched: &DiffusionSchedule,
    cfg: &SampleConfig,
    skel: &Skeleton,
    seed: u64,
) -> Result<Vec<GlobalMotion>> {
    if plan.frames != w.config.frames || plan.joints != w.config.joints {
        return Err(Error::validation(format!(
            "plan is {} frames x {} joints, weights expect {} x {}",
            plan.frames, plan.joints, w.config.frames, w.config.joints
        )));
    }
    let texts = agent_texts(plan, w);
    (0..plan.agents.len())
        .into_par_iter()
        .map(|a| {
            let frame = agent_frame(plan, a);
            let local = plan.control.agent(a).map_targets(|p| frame.to_local(p));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(a as u64);
            let rel = sample(w, sched, &texts[a], &local, skel, cfg, &mut rng)?;
            Ok(frame.motion_to_world(&relative_to_global(&rel, skel)?))
        })
        .collect()
}

/// Metric values for one crowd. Entries that cannot be computed for the
/// given inputs are `None`, with the reason in `notes`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub fid: Option<f64>,
    pub diversity: Option<f64>,
    pub r_precision_top1: Option<f64>,
    pub r_precision_top2: Option<f64>,
    pub r_precision_top3: Option<f64>,
    pub foot_skating_ratio: f64,
    pub traj_err_ratio: Option<f64>,
    pub loc_err_ratio: Option<f64>,
    pub avg_err_m: Option<f64>,
    pub threshold_m: f64,
    pub sequences: usize,
    pub feature_extractor: String,
    pub notes: Vec<String>,
}

/// Optional inputs of [`evaluate`].
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalInputs<'a> {
    /// Plan whose world-space control the motions should follow.
    pub plan: Option<&'a ScenePlan>,
    /// Real motions for FID.
    pub reference: Option<&'a [GlobalMotion]>,
    /// Text paired with each motion, for R-precision.
    pub texts: Option<&'a [TextCondition]>,
}

pub fn evaluate(
    motions: &[GlobalMotion],
    inputs: EvalInputs,
    cfg: &MetricsConfig,
    skel: &Skeleton,
    seed: u64,
) -> Result<MetricsReport> {
    if motions.is_empty() {
        return Err(Error::validation("nothing to evaluate"));
    }
    let extractor = KinematicFeatures;
    let feats = extractor.extract_all(motions, skel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut notes = Vec::new();

    let fid_value = match inputs.reference {
        Some(real) if real.len() >= 2 && motions.len() >= 2 => Some(fid(&extractor.extract_all(real, skel)?, &feats)?),
        Some(_) => {
            notes.push("fid needs at least two motions in each set".to_owned());
            None
        }
        None => {
            notes.push("fid skipped: no reference motions".to_owned());
            None
        }
    };
    let diversity_value = if motions.len() >= 2 {
        Some(diversity(&feats, cfg.diversity_pairs, &mut rng)?)
    } else {
        notes.push("diversity needs at least two motions".to_owned());
        None
    };
    let mut rp = [None; 3];
    match inputs.texts {
        Some(texts) if texts.len() != motions.len() => {
            return Err(Error::validation(format!("{} texts for {} motions", texts.len(), motions.len())));
        }
        Some(texts) if motions.len() >= cfg.r_precision_pool => {
            let in_dim = texts[0].embedding.len();
            let proj = TextProjection::new(in_dim, extractor.dim(), cfg.text_projection_seed);
            let acc = r_precision(&feats, &proj.project_all(texts)?, cfg.r_precision_pool, &[1, 2, 3], &mut rng)?;
            rp = [Some(acc[0]), Some(acc[1]), Some(acc[2])];
        }
        Some(_) => notes.push(format!(
            "r_precision needs at least {} motions (metrics.r_precision_pool)",
            cfg.r_precision_pool
        )),
        None => notes.push("r_precision skipped: no texts".to_owned()),
    }

    let skate = motions
        .iter()
        .map(|m| foot_skating_ratio(m, skel, cfg.foot_height, cfg.foot_slide))
        .collect::<Result<Vec<_>>>()?;
    let foot = skate.iter().sum::<f64>() / skate.len() as f64;

    let spatial = match inputs.plan {
        Some(plan) => spatial_errors_batch(motions, &plan.control, cfg.threshold_m)?,
        None => {
            notes.push("spatial errors skipped: no plan".to_owned());
            SpatialErrorReport {
                traj_err_ratio: None,
                loc_err_ratio: None,
                avg_err_m: None,
                threshold_m: cfg.threshold_m,
                sequences: 0,
                controlled_entries: 0,
            }
        }
    };
    Ok(MetricsReport {
        fid: fid_value,
        diversity: diversity_value,
        r_precision_top1: rp[0],
        r_precision_top2: rp[1],
        r_precision_top3: rp[2],
        foot_skating_ratio: foot,
        traj_err_ratio: spatial.traj_err_ratio,
        loc_err_ratio: spatial.loc_err_ratio,
        avg_err_m: spatial.avg_err_m,
        threshold_m: cfg.threshold_m,
        sequences: motions.len(),
        feature_extractor: extractor.id().to_owned(),
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, GaitParams};
    use crate::planner::{plan_scene, Backend, CrowdParams, PlannerConfig};

    #[test]
    fn agent_frame_faces_the_walk_direction() {
        let skel = Skeleton::hml22();
        let params = CrowdParams {
            n: 4,
            s: 2.0,
            sigma: 0.5,
            alpha: 0.1,
        };
        let plan = plan_scene("people walk through a street", &params, &Backend::Fallback, &PlannerConfig::default(), &skel, 3).unwrap();
        for a in 0..4 {
            let fr = agent_frame(&plan, a);
            let p0 = plan.pelvis(a, 0).unwrap();
            assert_eq!(fr.origin, p0);
            let p1 = plan.pelvis(a, plan.frames - 1).unwrap();
            let end = fr.to_local([p1[0], 0.0, p1[1]]);
            if (p1[0] - p0[0]).hypot(p1[1] - p0[1]) >= STILL {
                assert!(end[0].abs() < 1e-9 && end[2] > 0.0);
            }
        }
    }

    #[test]
    fn evaluate_reports_undefined_entries_as_none() {
        let skel = Skeleton::hml22();
        let m = synthesize(&GaitParams::default(), &skel).unwrap().global;
        let r = evaluate(&[m.clone(), m.clone()], EvalInputs::default(), &MetricsConfig::default(), &skel, 0).unwrap();
        assert_eq!(r.diversity, Some(0.0));
        assert!(r.fid.is_none() && r.avg_err_m.is_none() && r.r_precision_top1.is_none());
        assert_eq!(r.notes.len(), 3);
        let same = evaluate(
            &[m.clone(), m.clone()],
            EvalInputs {
                reference: Some(&[m.clone(), m.clone()]),
                ..EvalInputs::default()
            },
            &MetricsConfig::default(),
            &skel,
            0,
        )
        .unwrap();
        assert!(same.fid.unwrap() < 1e-8);
    }
}
