use std::path::Path;
use std::process::{Command, Output};

use cmg::io::motion_file::{read_motion, ReprKind};
use serde_json::Value;

const SMALL: &[&str] = &[
    "--set=model.latent=8",
    "--set=model.blocks=1",
    "--set=model.time_dim=8",
    "--set=model.text_dim=16",
    "--set=planner.frames=20",
    "--set=train.steps=3",
    "--set=train.sequences=2",
    "--set=diffusion.infer_steps=4",
    "--set=guidance.last_n=2",
];

fn cmg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmg"))
        .current_dir(dir)
        .env_remove("CMG_LLM_ENDPOINT")
        .env_remove("CMG_LLM_API_KEY")
        .args(SMALL)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes_and_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cmg(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(cmg(dir.path(), &["--help"]).status.code(), Some(0));

    let out = cmg(dir.path(), &["--json-errors", "--set", "planner.v_max=-1", "plan", "--scene", "a park", "--offline"]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(v["error"]["exit_code"], 2);
    assert!(v["error"]["message"].as_str().unwrap().contains("v_max"));

    let out = cmg(dir.path(), &["--json-errors", "eval", "--motions", "missing.cmg"]);
    assert_eq!(out.status.code(), Some(3));
    let v: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(v["error"]["exit_code"], 3);

    let out = cmg(dir.path(), &["--json-errors", "plan", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let v: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(v["error"]["kind"], "usage");
}

#[test]
fn plan_train_generate_eval_convert() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&cmg(d, &["plan", "--scene", "friends chat in a park", "--n", "3", "--s", "2", "--offline", "--event", "a dog runs past", "--out", "plan.json"]));
    ok(&cmg(d, &["train-toy", "--out", "w.cmgw", "--history", "h.json"]));
    let hist: Value = serde_json::from_str(&std::fs::read_to_string(d.join("h.json")).unwrap()).unwrap();
    assert_eq!(hist.as_array().map(Vec::len), Some(3));

    ok(&cmg(d, &["--set=seed=4", "generate", "--plan", "plan.json", "--weights", "w.cmgw", "--out", "m.cmg"]));
    ok(&cmg(d, &["--set=seed=4", "generate", "--plan", "plan.json", "--weights", "w.cmgw", "--out", "m2.cmg"]));
    assert_eq!(std::fs::read(d.join("m.cmg")).unwrap(), std::fs::read(d.join("m2.cmg")).unwrap());
    let m = read_motion(&d.join("m.cmg")).unwrap();
    assert_eq!((m.header.n, m.header.f, m.header.joints), (3, 20, 22));

    ok(&cmg(d, &["eval", "--motions", "m.cmg", "--plan", "plan.json", "--out", "r.json"]));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert!(r["avg_err_m"].is_number() && r["r_precision_top1"].is_null());

    ok(&cmg(d, &["convert", "--input", "m.cmg", "--output", "m.csv"]));
    ok(&cmg(d, &["convert", "--input", "m.csv", "--output", "back.cmg"]));
    let back = read_motion(&d.join("back.cmg")).unwrap();
    let (a, b) = (m.global().unwrap(), back.global().unwrap());
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.max_joint_error(y) < 1e-4);
    }

    ok(&cmg(d, &["convert", "--input", "m.cmg", "--output", "rel.cmg", "--to", "relative"]));
    assert_eq!(read_motion(&d.join("rel.cmg")).unwrap().header.repr, ReprKind::Relative);
}
