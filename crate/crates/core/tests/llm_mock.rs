mod common;

use cmg::motion::Skeleton;
use cmg::planner::events::EventPattern;
use cmg::planner::llm::{derive_params, LlmClient, LlmConfig, LlmError};
use cmg::planner::{apply_event, plan_scene, Backend, CrowdParams, PlanSource, PlannerConfig};
use common::{chat, MockServer, Reply};

fn client(url: &str, retries: usize, timeout_ms: u64) -> LlmClient {
    let mut cfg = LlmConfig::new(url);
    cfg.max_retries = retries;
    cfg.timeout_ms = timeout_ms;
    cfg.backoff_ms = 1;
    LlmClient::new(cfg)
}

fn one_group() -> CrowdParams {
    CrowdParams {
        n: 4,
        s: 4.0,
        sigma: 0.5,
        alpha: 0.0,
    }
}

const PARAMS: &str = r#"{"s": 2.5, "sigma": 0.4, "alpha": 0.2}"#;

#[test]
fn retries_until_a_valid_reply() {
    let srv = MockServer::start(vec![
        Reply::Body(500, "overloaded".into()),
        Reply::Body(200, chat("sure, here you go")),
        Reply::Body(200, chat(&format!("```json\n{PARAMS}\n```"))),
    ]);
    let (p, retries) = derive_params(&client(&srv.url, 3, 2000), "a market", 6).unwrap();
    assert_eq!(retries, 2);
    assert_eq!(srv.hits(), 3);
    assert_eq!((p.n, p.s, p.sigma, p.alpha), (6, 2.5, 0.4, 0.2));
}

#[test]
fn out_of_range_values_count_as_schema_errors() {
    let srv = MockServer::start(vec![Reply::Body(200, chat(r#"{"s": 40, "sigma": 0.4, "alpha": 0.2}"#))]);
    match derive_params(&client(&srv.url, 1, 2000), "a market", 6) {
        Err(LlmError::Schema { attempts, raw, .. }) => {
            assert_eq!(attempts, 2);
            assert!(raw.contains("40"));
        }
        other => panic!("expected a schema error, got {other:?}"),
    }
    assert_eq!(srv.hits(), 2);
}

#[test]
fn unknown_fields_are_rejected() {
    let srv = MockServer::start(vec![Reply::Body(
        200,
        chat(r#"{"s": 2, "sigma": 0.4, "alpha": 0.2, "mood": "happy"}"#),
    )]);
    let err = derive_params(&client(&srv.url, 0, 2000), "a market", 6).unwrap_err();
    assert!(matches!(err, LlmError::Schema { attempts: 1, .. }), "{err:?}");
}

#[test]
fn slow_endpoint_times_out() {
    let srv = MockServer::start(vec![Reply::Slow(800, 200, chat(PARAMS))]);
    let err = derive_params(&client(&srv.url, 1, 150), "a market", 6).unwrap_err();
    assert!(matches!(err, LlmError::Timeout { attempts: 2 }), "{err:?}");
}

#[test]
fn http_errors_surface_status_and_body() {
    let srv = MockServer::start(vec![Reply::Body(503, "try later".into())]);
    match derive_params(&client(&srv.url, 2, 2000), "a market", 6) {
        Err(LlmError::Status { status, body, attempts }) => {
            assert_eq!((status, body.as_str(), attempts), (503, "try later", 3));
        }
        other => panic!("expected a status error, got {other:?}"),
    }
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let err = derive_params(&client(&format!("http://127.0.0.1:{port}/x"), 0, 2000), "a market", 6).unwrap_err();
    assert!(matches!(err, LlmError::Transport { attempts: 1, .. }), "{err:?}");
}

#[test]
fn scene_plan_uses_the_best_candidate() {
    let reply = r#"{"candidates": [
        {"groups": [{"activity": "moonwalk", "text": "?"}]},
        {"groups": [{"activity": "queue", "text": "a person waits for the tram"}]}
    ]}"#;
    let srv = MockServer::start(vec![Reply::Body(200, chat(reply))]);
    let c = client(&srv.url, 0, 2000);
    let plan = plan_scene("a tram stop", &one_group(), &Backend::Llm(&c), &PlannerConfig::default(), &Skeleton::hml22(), 5).unwrap();
    assert_eq!(plan.provenance.source, PlanSource::Llm);
    assert_eq!(plan.provenance.candidate_scores, vec![0.0, 1.0]);
    assert!(plan.agents.iter().all(|a| a.text == "a person waits for the tram"));
}

#[test]
fn scene_plan_falls_back_after_schema_failures() {
    let srv = MockServer::start(vec![Reply::Body(200, chat(r#"{"plans": "none"}"#))]);
    let c = client(&srv.url, 1, 2000);
    let skel = Skeleton::hml22();
    let cfg = PlannerConfig::default();
    let plan = plan_scene("a tram stop", &one_group(), &Backend::Llm(&c), &cfg, &skel, 5).unwrap();
    assert_eq!(srv.hits(), 2);
    assert_eq!(plan.provenance.source, PlanSource::Fallback);
    let reason = plan.provenance.fallback_reason.as_deref().unwrap();
    assert!(reason.contains("schema"), "{reason}");
    let offline = plan_scene("a tram stop", &one_group(), &Backend::Fallback, &cfg, &skel, 5).unwrap();
    assert_eq!(plan.agents, offline.agents);
    assert_eq!(plan.control, offline.control);
}

#[test]
fn event_spec_from_the_llm_is_applied() {
    let skel = Skeleton::hml22();
    let base = plan_scene("a tram stop", &one_group(), &Backend::Fallback, &PlannerConfig::default(), &skel, 2).unwrap();
    let spec = r#"{"pattern": "queuing", "epicenter": [1.0, 2.0], "direction": [0.0, 1.0], "spacing": 0.7,
                   "onset_frame": 10, "duration_frames": 150}"#;
    let srv = MockServer::start(vec![Reply::Body(200, chat(spec))]);
    let c = client(&srv.url, 0, 2000);
    let out = apply_event(&base, "the tram arrives", None, &Backend::Llm(&c)).unwrap();
    let ev = out.events.last().unwrap();
    assert_eq!(ev.source, PlanSource::Llm);
    assert_eq!(ev.spec.pattern, EventPattern::Queuing);
    assert_eq!(ev.affected.len(), 4);
}

#[test]
fn event_falls_back_to_keywords_when_the_llm_fails() {
    let skel = Skeleton::hml22();
    let base = plan_scene("a tram stop", &one_group(), &Backend::Fallback, &PlannerConfig::default(), &skel, 2).unwrap();
    let srv = MockServer::start(vec![Reply::Body(500, "down".into())]);
    let c = client(&srv.url, 0, 2000);
    let out = apply_event(&base, "people line up at the kiosk", None, &Backend::Llm(&c)).unwrap();
    let ev = out.events.last().unwrap();
    assert_eq!(ev.source, PlanSource::Fallback);
    assert_eq!(ev.spec.pattern, EventPattern::Queuing);
}
