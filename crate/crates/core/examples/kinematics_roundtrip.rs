//! Converts a procedural walk between the global and relative motion
//! representations and writes it as CMG1 and CSV.
//!
//! `cargo run --example kinematics_roundtrip -- [out_dir]`

use std::path::PathBuf;

use cmg::data::{synthesize, GaitParams, Style};
use cmg::io::motion_file::{motion_to_csv, read_motion, write_motion, MotionFile};
use cmg::motion::{first_frame, global_to_relative, relative_to_global, Skeleton};

fn main() -> cmg::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/examples".into()));
    std::fs::create_dir_all(&out)?;
    let skel = Skeleton::hml22();
    let walk = synthesize(
        &GaitParams {
            style: Style::Walk,
            turn_rate: 0.4,
            ..GaitParams::default()
        },
        &skel,
    )?;
    println!("{}", walk.text);

    let rel = global_to_relative(&walk.global, &skel)?;
    println!("relative: {} frames x {} channels", rel.frames, rel.dim());
    let back = relative_to_global(&rel, &skel)?;
    // the relative form starts at the origin facing +z
    let aligned = first_frame(&walk.global, &skel).motion_to_local(&walk.global);
    println!("round-trip max joint error {:.2e} m", back.max_joint_error(&aligned));

    let file = MotionFile::from_global(&[walk.global], skel.joint_names())?;
    let path = out.join("walk.cmg");
    write_motion(&file, &path)?;
    std::fs::write(out.join("walk.csv"), motion_to_csv(&file))?;
    let reread = read_motion(&path)?;
    println!("wrote {} ({} agent, {} frames, {} joints)", path.display(), reread.header.n, reread.header.f, reread.header.joints);
    Ok(())
}
