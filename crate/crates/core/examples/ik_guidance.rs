//! IK guidance on its own: pulls the pelvis of a procedural walk onto a path
//! that drifts sideways, and prints the discrepancy after each update.
//!
//! `cargo run --example ik_guidance`

use cmg::control::AgentControl;
use cmg::data::{synthesize, GaitParams};
use cmg::guidance::{ik_discrepancy, ik_guide_traced, GuidanceConfig, StepRule};
use cmg::motion::{global_to_relative, relative_to_global, Skeleton};

fn main() -> cmg::Result<()> {
    let skel = Skeleton::hml22();
    let walk = synthesize(&GaitParams::default(), &skel)?;
    let rel = global_to_relative(&walk.global, &skel)?;
    let glob = relative_to_global(&rel, &skel)?;

    let mut control = AgentControl::empty(rel.frames, skel.num_joints());
    for i in (0..rel.frames).step_by(10).chain([rel.frames - 1]) {
        let p = glob.pos(i, 0);
        control.set(i, 0, [p[0] + 0.01 * i as f64, p[1], p[2]]);
    }
    println!("initial discrepancy {:.4} m", ik_discrepancy(&rel, &control, &skel)?.value);

    for rule in [StepRule::Polyak, StepRule::Fixed] {
        let cfg = GuidanceConfig {
            step_rule: rule,
            inner_steps: 8,
            ..GuidanceConfig::default()
        };
        let trace = ik_guide_traced(&rel, &control, &skel, &cfg)?;
        let ds: Vec<String> = trace.discrepancies.iter().map(|d| format!("{d:.4}")).collect();
        println!("{rule:?}: {}", ds.join(" -> "));
    }
    Ok(())
}
