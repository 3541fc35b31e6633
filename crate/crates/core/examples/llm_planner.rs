//! Plans a scene through a chat-completions endpoint when `CMG_LLM_ENDPOINT`
//! is set (key from `CMG_LLM_API_KEY`), and shows how failures fall back to
//! the offline catalog.
//!
//! `CMG_LLM_ENDPOINT=http://localhost:8080/v1/chat/completions cargo run --example llm_planner`

use cmg::motion::Skeleton;
use cmg::planner::llm::{derive_params, LlmClient, LlmConfig};
use cmg::planner::{apply_event, plan_scene, Backend, CrowdParams, PlannerConfig};

fn main() -> cmg::Result<()> {
    let scene = "commuters cross a train station concourse at rush hour";
    let cfg = LlmConfig::from_env().unwrap_or_else(|| {
        println!("CMG_LLM_ENDPOINT is not set; using an unreachable endpoint to show the fallback");
        let mut c = LlmConfig::new("http://127.0.0.1:9/v1/chat/completions");
        c.max_retries = 0;
        c.timeout_ms = 500;
        c
    });
    let client = LlmClient::new(cfg);

    let params = match derive_params(&client, scene, 12) {
        Ok((p, retries)) => {
            println!("LLM parameters after {retries} retries: {p:?}");
            p
        }
        Err(e) => {
            println!("parameter request failed: {e}");
            CrowdParams {
                n: 12,
                s: 3.0,
                sigma: 0.6,
                alpha: 0.2,
            }
        }
    };
    let plan = plan_scene(scene, &params, &Backend::Llm(&client), &PlannerConfig::default(), &Skeleton::hml22(), 0)?;
    let p = &plan.provenance;
    println!("activities from {:?}, retries {}, scores {:?}", p.source, p.llm_retries, p.candidate_scores);
    if let Some(reason) = &p.fallback_reason {
        println!("fallback reason: {reason}");
    }
    let out = apply_event(&plan, "a fire alarm goes off and everyone moves away from the exit", None, &Backend::Llm(&client))?;
    let ev = out.events.last().unwrap();
    println!("event read as {} ({:?}), {} agents react", ev.spec.pattern, ev.source, ev.affected.len());
    Ok(())
}
