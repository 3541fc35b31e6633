#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use cmg::motion::{Joint, Skeleton};
use cmg::model::{DenoiserWeights, ModelConfig};
use cmg::planner::events::{obstacle_distance, EventPattern, EventSpec};
use cmg::planner::{apply_event, plan_scene, Backend, CrowdParams, PlannerConfig, ScenePlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

/// Pelvis, two feet and a head.
pub fn skeleton4() -> Skeleton {
    let j = |name: &str, parent: Option<usize>, offset: [f64; 3]| Joint {
        name: name.into(),
        parent,
        offset,
    };
    Skeleton::new(
        vec![
            j("pelvis", None, [0.0; 3]),
            j("left_foot", Some(0), [0.12, -0.9, 0.02]),
            j("right_foot", Some(0), [-0.12, -0.9, 0.02]),
            j("head", Some(0), [0.0, 0.7, 0.05]),
        ],
        [1, 1, 2, 2],
        vec![(1, 2)],
    )
    .unwrap()
}

pub fn small_model(frames: usize, joints: usize, latent: usize, seed: u64) -> DenoiserWeights {
    let cfg = ModelConfig {
        frames,
        joints,
        latent,
        blocks: 2,
        text_dim: 8,
        time_dim: 8,
        ffn_mult: 2,
    };
    DenoiserWeights::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors; 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        0.0
    } else {
        diff / den
    }
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|k| {
            p[k] = x[k] + h;
            let a = f(&p);
            p[k] = x[k] - h;
            let b = f(&p);
            p[k] = x[k];
            (a - b) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub enum Reply {
    /// HTTP status and raw body.
    Body(u16, String),
    /// Sleep before answering.
    Slow(u64, u16, String),
}

/// Chat-completions envelope around `content`.
pub fn chat(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

/// Single-threaded HTTP server answering with scripted replies in order; the
/// last one repeats.
pub struct MockServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn start(script: Vec<Reply>) -> MockServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let k = counter.fetch_add(1, Ordering::SeqCst);
                let reply = script[k.min(script.len() - 1)].clone();
                read_request(&mut stream);
                let (status, body) = match reply {
                    Reply::Body(s, b) => (s, b),
                    Reply::Slow(ms, s, b) => {
                        thread::sleep(Duration::from_millis(ms));
                        (s, b)
                    }
                };
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(body.as_bytes());
                let _ = stream.flush();
            }
        });
        MockServer { url, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

fn read_request(stream: &mut std::net::TcpStream) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
    let mut reader = BufReader::new(stream);
    let mut len = 0usize;
    let mut chunked = false;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let l = line.trim_end().to_ascii_lowercase();
        if l.is_empty() {
            break;
        }
        if let Some(v) = l.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap_or(0);
        }
        if l.starts_with("transfer-encoding:") && l.contains("chunked") {
            chunked = true;
        }
    }
    if chunked {
        loop {
            let mut size = String::new();
            if reader.read_line(&mut size).unwrap_or(0) == 0 {
                return;
            }
            let n = usize::from_str_radix(size.trim(), 16).unwrap_or(0);
            let mut buf = vec![0; n + 2];
            if reader.read_exact(&mut buf).is_err() || n == 0 {
                return;
            }
        }
    } else {
        let mut buf = vec![0; len];
        let _ = reader.read_exact(&mut buf);
    }
}

/// One seeded planner scenario: a compact crowd and an event of `pattern`.
pub struct Scenario {
    pub base: ScenePlan,
    pub out: ScenePlan,
    pub spec: EventSpec,
}

pub const SCENARIO_FRAMES: usize = 240;

pub fn scenario(seed: u64, pattern: EventPattern) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = ["a busy city street", "a quiet park", "a crowded station hall", "a campus plaza"];
    let scene = scenes[rng.random_range(0..scenes.len())];
    let n = rng.random_range(3..=9);
    let params = CrowdParams {
        n,
        s: rng.random_range(1.0..(n as f64).min(4.0)),
        sigma: rng.random_range(0.6..1.0),
        alpha: rng.random_range(0.0..1.0),
    };
    let cfg = PlannerConfig {
        frames: SCENARIO_FRAMES,
        ..PlannerConfig::default()
    };
    let base = plan_scene(scene, &params, &Backend::Fallback, &cfg, &Skeleton::hml22(), seed).unwrap();
    let onset = rng.random_range(10..30);
    let duration = rng.random_range(150..=SCENARIO_FRAMES - onset - 10);
    let epicenter = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let ang = rng.random_range(0.0..std::f64::consts::TAU);
    let mut spec = EventSpec {
        pattern,
        epicenter,
        direction: None,
        radius: None,
        spacing: None,
        onset_frame: onset,
        duration_frames: duration,
        leader_agent: None,
        agents: None,
    };
    match pattern {
        EventPattern::Queuing => {
            spec.direction = Some([ang.cos(), ang.sin()]);
            spec.spacing = Some(rng.random_range(0.5..1.2));
        }
        EventPattern::Encircling => spec.radius = Some(rng.random_range(1.5..3.0)),
        EventPattern::Avoiding | EventPattern::Passing => {
            let speed = rng.random_range(0.3..0.8);
            let len = speed * duration as f64 / base.fps;
            // start so the obstacle sweeps through the crowd centre
            spec.epicenter = [epicenter[0] - ang.cos() * len / 2.0, epicenter[1] - ang.sin() * len / 2.0];
            spec.direction = Some([speed * ang.cos(), speed * ang.sin()]);
            spec.radius = Some(rng.random_range(0.5..1.2));
        }
        EventPattern::Following => spec.leader_agent = Some(rng.random_range(0..n)),
        EventPattern::Random => {}
    }
    let out = apply_event(&base, "scripted event", Some(spec.clone()), &Backend::Fallback).unwrap();
    Scenario { base, out, spec }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Checks the geometric contract of one scenario; returns the violations.
pub fn check_scenario(sc: &Scenario) -> Vec<String> {
    let mut bad = Vec::new();
    let (plan, spec) = (&sc.out, &sc.spec);
    let n = plan.agents.len();
    let f = plan.frames;
    let end = spec.onset_frame + spec.duration_frames;
    let pelvis = |a: usize, t: usize| plan.pelvis(a, t).expect("pelvis controlled at every frame");

    // partition
    let mut seen = vec![0usize; n];
    for g in &plan.groups {
        for &m in &g.members {
            seen[m] += 1;
        }
    }
    if seen.iter().any(|&c| c != 1) {
        bad.push(format!("groups do not partition agents: {seen:?}"));
    }
    // speed limit
    let max_step = plan.config.v_max / plan.fps;
    for a in 0..n {
        for t in 1..f {
            let s = dist(pelvis(a, t), pelvis(a, t - 1));
            if s > max_step * (1.0 + 1e-9) {
                bad.push(format!("agent {a} frame {t}: step {s:.6} > {max_step:.6}"));
                break;
            }
        }
    }
    let affected = &plan.events.last().expect("event recorded").affected;
    match spec.pattern {
        EventPattern::Queuing => {
            let d = spec.direction.unwrap();
            let l = d[0].hypot(d[1]);
            let d = [d[0] / l, d[1] / l];
            let mut along: Vec<f64> = Vec::new();
            for &a in affected {
                let p = pelvis(a, f - 1);
                let r = [p[0] - spec.epicenter[0], p[1] - spec.epicenter[1]];
                let perp = (-r[0] * d[1] + r[1] * d[0]).abs();
                if perp > 1e-6 {
                    bad.push(format!("queue agent {a} off the line by {perp:e}"));
                }
                along.push(r[0] * d[0] + r[1] * d[1]);
            }
            along.sort_by(f64::total_cmp);
            let sp = spec.spacing.unwrap();
            for (k, s) in along.iter().enumerate() {
                if (s - sp * k as f64).abs() > 1e-6 {
                    bad.push(format!("queue slot {k} at {s}, expected {}", sp * k as f64));
                }
            }
        }
        EventPattern::Encircling => {
            let r = spec.radius.unwrap();
            for &a in affected {
                let res = (dist(pelvis(a, f - 1), spec.epicenter) - r).abs();
                if res > 1e-6 {
                    bad.push(format!("ring agent {a} residual {res:e}"));
                }
            }
        }
        EventPattern::Avoiding => {
            let r = spec.radius.unwrap();
            for a in 0..n {
                for t in end..f {
                    let c = obstacle_distance(spec, plan.fps, pelvis(a, t));
                    if c < r - 1e-9 {
                        bad.push(format!("agent {a} frame {t}: clearance {c:.4} < {r:.4}"));
                        break;
                    }
                }
            }
        }
        EventPattern::Passing => {
            for &a in affected {
                for t in end..f {
                    let e = dist(pelvis(a, t), sc.base.pelvis(a, t).unwrap());
                    if e > plan.config.eps_return {
                        bad.push(format!("passing agent {a} frame {t}: {e:.4} m from its path"));
                        break;
                    }
                }
            }
        }
        EventPattern::Following | EventPattern::Random => {}
    }
    // nobody moves before the onset
    for a in 0..n {
        for t in 0..=spec.onset_frame {
            if pelvis(a, t) != sc.base.pelvis(a, t).unwrap() {
                bad.push(format!("agent {a} changed before onset at frame {t}"));
                break;
            }
        }
    }
    bad
}

/// Scenario seeds cycle through all six patterns.
pub fn pattern_for(seed: u64) -> EventPattern {
    EventPattern::ALL[(seed % 6) as usize]
}

/// Relative-representation sequence with random root motion and joints
/// jittered around the rest pose.
pub fn random_relative(rng: &mut ChaCha8Rng, skel: &Skeleton, frames: usize, lift: f64) -> cmg::motion::RelativeMotion {
    let layout = cmg::motion::ReprLayout::new(skel.num_joints());
    let rest = skel.rest_pose();
    let mut m = cmg::motion::RelativeMotion::zeros(frames, skel.num_joints(), 20.0);
    for i in 0..frames {
        let row = m.frame_mut(i);
        row[0] = rng.random_range(-1.0..1.0);
        row[1] = rng.random_range(-1.0..1.0);
        row[2] = rng.random_range(-1.0..1.0);
        row[3] = skel.rest_pelvis_height() + lift + rng.random_range(-0.02..0.02);
        for (j, r) in rest.iter().enumerate().skip(1) {
            let o = layout.local_pos(j);
            for k in 0..3 {
                row[o + k] = r[k] + rng.random_range(-0.08..0.08);
            }
        }
        for v in &mut row[layout.velocity(0)..] {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    m
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}
