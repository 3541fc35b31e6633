//! Metric report for procedural crowds: a reference set against itself and
//! against a jittered copy with sliding feet.
//!
//! `cargo run --example metrics_report`

use cmg::config::MetricsConfig;
use cmg::data::synthetic_motions;
use cmg::model::{HashedBowEmbedder, TextEmbedder};
use cmg::motion::{GlobalMotion, Skeleton};
use cmg::pipeline::{evaluate, EvalInputs};

fn main() -> cmg::Result<()> {
    let skel = Skeleton::hml22();
    let real = synthetic_motions(48, 60, 20.0, 0, &skel)?;
    let motions: Vec<GlobalMotion> = real.iter().map(|m| m.global.clone()).collect();
    let embedder = HashedBowEmbedder::new(64);
    let texts: Vec<_> = real.iter().map(|m| embedder.condition(&m.text)).collect();

    // drag every joint forward a little each frame
    let skating: Vec<GlobalMotion> = motions
        .iter()
        .map(|m| {
            let mut out = m.clone();
            for i in 0..m.frames {
                for j in 0..m.joints {
                    let p = m.pos(i, j);
                    out.set_pos(i, j, [p[0] + 0.01 * i as f64, p[1], p[2]]);
                }
            }
            out
        })
        .collect();

    let cfg = MetricsConfig::default();
    for (name, set) in [("reference", &motions), ("sliding", &skating)] {
        let inputs = EvalInputs {
            reference: Some(&motions),
            texts: Some(&texts),
            ..EvalInputs::default()
        };
        let r = evaluate(set, inputs, &cfg, &skel, 0)?;
        println!(
            "{name:<9} fid {:.4}  diversity {:.3}  R@1 {:.3}  R@3 {:.3}  foot skating {:.3}",
            r.fid.unwrap_or(f64::NAN),
            r.diversity.unwrap_or(f64::NAN),
            r.r_precision_top1.unwrap_or(f64::NAN),
            r.r_precision_top3.unwrap_or(f64::NAN),
            r.foot_skating_ratio
        );
    }
    Ok(())
}
