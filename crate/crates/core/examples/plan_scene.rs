//! Plans a crowd offline and prints its groups, then writes the plan JSON.
//!
//! `cargo run --example plan_scene -- "a farmers market on a sunday morning" [out.json]`

use std::path::PathBuf;

use cmg::motion::Skeleton;
use cmg::planner::{plan_scene, write_plan, Backend, CrowdParams, PlannerConfig};

fn main() -> cmg::Result<()> {
    let mut args = std::env::args().skip(1);
    let scene = args.next().unwrap_or_else(|| "a farmers market on a sunday morning".into());
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/examples/plan.json".into()));
    let params = CrowdParams {
        n: 10,
        s: 3.0,
        sigma: 0.6,
        alpha: 0.8,
    };
    let plan = plan_scene(&scene, &params, &Backend::Fallback, &PlannerConfig::default(), &Skeleton::hml22(), 1)?;

    println!("{scene}: {} agents in {} groups", plan.agents.len(), plan.groups.len());
    for g in &plan.groups {
        println!(
            "  group {} at ({:+.1}, {:+.1}) {:?} {:?}{}: agents {:?}",
            g.id,
            g.anchor[0],
            g.anchor[1],
            g.activity,
            g.formation,
            if g.interactive { ", hands joined" } else { "" },
            g.members
        );
    }
    let a = 0;
    let (p0, p1) = (plan.pelvis(a, 0).unwrap(), plan.pelvis(a, plan.frames - 1).unwrap());
    println!("agent {a} \"{}\" goes ({:+.2}, {:+.2}) -> ({:+.2}, {:+.2})", plan.agents[a].text, p0[0], p0[1], p1[0], p1[1]);
    println!("{} controlled entries", plan.control.controlled_count());

    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_plan(&plan, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
