//! Applies each response pattern to the same crowd and reports who reacts
//! and where they end up.
//!
//! `cargo run --example crowd_events`

use cmg::motion::Skeleton;
use cmg::planner::events::{obstacle_distance, select_pattern, EventPattern, EventSpec};
use cmg::planner::{apply_event, plan_scene, Backend, CrowdParams, PlannerConfig};

fn main() -> cmg::Result<()> {
    let cfg = PlannerConfig {
        frames: 200,
        ..PlannerConfig::default()
    };
    let params = CrowdParams {
        n: 8,
        s: 2.0,
        sigma: 0.8,
        alpha: 0.2,
    };
    let base = plan_scene("a plaza in front of a museum", &params, &Backend::Fallback, &cfg, &Skeleton::hml22(), 4)?;

    for description in ["a bus pulls up and people line up to board", "a juggler draws a crowd around him"] {
        println!("\"{description}\" -> {}", select_pattern(description));
    }

    for pattern in EventPattern::ALL {
        let mut spec = EventSpec::default_for(&base, pattern)?;
        spec.onset_frame = 20;
        spec.duration_frames = 160;
        let out = apply_event(&base, pattern.name(), Some(spec.clone()), &Backend::Fallback)?;
        let ev = out.events.last().unwrap();
        let last = out.frames - 1;
        let moved = ev
            .affected
            .iter()
            .map(|&a| {
                let (p, q) = (base.pelvis(a, last).unwrap(), out.pelvis(a, last).unwrap());
                (p[0] - q[0]).hypot(p[1] - q[1])
            })
            .fold(0.0, f64::max);
        print!("{pattern:<10} {} agents react, final positions move up to {moved:.2} m", ev.affected.len());
        if pattern == EventPattern::Avoiding {
            let r = spec.radius.unwrap_or(1.0);
            let clear = (0..out.agents.len())
                .map(|a| obstacle_distance(&spec, out.fps, out.pelvis(a, last).unwrap()))
                .fold(f64::INFINITY, f64::min);
            print!(", closest to the corridor {clear:.2} m (r = {r:.2})");
        }
        println!();
    }
    Ok(())
}
