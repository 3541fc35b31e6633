//! Trains the toy denoiser on procedural motion, then samples a walk with a
//! pelvis keyframe path, with and without IK guidance.
//!
//! `cargo run --release --example train_and_sample -- [steps]`

use std::time::Instant;

use cmg::control::AgentControl;
use cmg::data::synthetic_dataset;
use cmg::diffusion::build_schedule;
use cmg::metrics::spatial_errors;
use cmg::model::{train_toy, HashedBowEmbedder, ModelConfig, TextEmbedder, TrainConfig};
use cmg::motion::{relative_to_global, Skeleton};
use cmg::sampling::{sample, SampleConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cmg::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let skel = Skeleton::hml22();
    let embedder = HashedBowEmbedder::default();
    let data = synthetic_dataset(8, 60, 20.0, 0, &skel, &embedder)?;

    let cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (weights, report) = train_toy(&data, ModelConfig::default(), &cfg, &skel)?;
    let secs = start.elapsed().as_secs_f64();
    let (first, last) = (report.initial(20), report.last(20));
    println!("trained {steps} steps in {secs:.1}s ({:.3}s/step)", secs / steps as f64);
    println!("L_whole {:.4} -> {:.4}, L_foot {:.4} -> {:.4}", first.whole, last.whole, first.foot, last.foot);

    // pelvis keyframes every 10 frames taken from a training motion
    let gt = relative_to_global(&data[1].motion, &skel)?;
    let mut control = AgentControl::empty(60, 22);
    for i in (0..60).step_by(10) {
        control.set(i, 0, gt.pos(i, 0));
    }
    let sched = build_schedule(1000, 1e-4, 0.02)?;
    let text = embedder.condition("a person walks forward at a steady pace in a straight line");
    for guided in [false, true] {
        let sc = SampleConfig {
            guidance: if guided { SampleConfig::default().guidance } else { None },
            ..SampleConfig::default()
        };
        let motion = sample(&weights, &sched, &text, &control, &skel, &sc, &mut ChaCha8Rng::seed_from_u64(7))?;
        let glob = relative_to_global(&motion, &skel)?;
        let report = spatial_errors(&[glob], &[control.clone()], 0.5)?;
        println!("guidance {guided}: avg err {:.4} m", report.avg_err_m.unwrap_or(f64::NAN));
    }
    Ok(())
}
