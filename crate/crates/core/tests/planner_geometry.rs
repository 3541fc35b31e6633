mod common;

use cmg::planner::events::EventPattern;
use common::{check_scenario, pattern_for, scenario};

fn run(pattern: EventPattern) {
    let mut failures = Vec::new();
    for seed in (0..60).filter(|&s| pattern_for(s) == pattern) {
        let sc = scenario(seed, pattern);
        for v in check_scenario(&sc) {
            failures.push(format!("seed {seed}: {v}"));
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn queuing_agents_line_up_at_spaced_slots() {
    run(EventPattern::Queuing);
}

#[test]
fn encircling_agents_land_on_the_ring() {
    run(EventPattern::Encircling);
}

#[test]
fn avoiding_agents_keep_clearance() {
    run(EventPattern::Avoiding);
}

#[test]
fn passing_agents_rejoin_their_paths() {
    run(EventPattern::Passing);
}

#[test]
fn following_and_random_respect_the_speed_limit() {
    run(EventPattern::Following);
    run(EventPattern::Random);
}

#[test]
fn events_touch_some_agents() {
    for seed in 0..12 {
        let p = pattern_for(seed);
        let sc = scenario(seed, p);
        let ev = sc.out.events.last().unwrap();
        if matches!(p, EventPattern::Queuing | EventPattern::Encircling | EventPattern::Random | EventPattern::Following) {
            assert!(!ev.affected.is_empty(), "seed {seed} {p}");
        }
    }
}
