mod common;

use cmg::control::AgentControl;
use cmg::guidance::{ik_discrepancy, ik_discrepancy_grad};
use cmg::model::loss::loss_total_with_grad;
use cmg::model::{example_gradients, loss_total, ConMode, LossWeights, TextCondition};
use cmg::motion::{relative_to_global, RelativeMotion, Skeleton};
use common::{numeric_grad, random_relative, random_vec, rel_err, skeleton4, small_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64, skel: &Skeleton, frames: usize) -> (RelativeMotion, RelativeMotion, AgentControl) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = random_relative(&mut rng, skel, frames, 0.0);
    let gt = random_relative(&mut rng, skel, frames, 0.0);
    let g = relative_to_global(&gt, skel).unwrap();
    let mut c = AgentControl::empty(frames, skel.num_joints());
    for i in (0..frames).step_by(3) {
        c.set(i, 0, g.pos(i, 0));
    }
    c.set(frames - 1, skel.num_joints() - 1, g.pos(frames - 1, skel.num_joints() - 1));
    (pred, gt, c)
}

fn loss_check(lw: &LossWeights, skel: &Skeleton, frames: usize) -> f64 {
    let (pred, gt, c) = setup(21, skel, frames);
    let (_, analytic) = loss_total_with_grad(&pred, &gt, &c, skel, lw).unwrap();
    let numeric = numeric_grad(&pred.data, 1e-6, |x| {
        let mut m = pred.clone();
        m.data.copy_from_slice(x);
        loss_total(&m, &gt, &c, skel, lw).unwrap().total
    });
    rel_err(&analytic, &numeric)
}

#[test]
fn loss_gradient_matches_differences() {
    let err = loss_check(&LossWeights::default(), &skeleton4(), 8);
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn loss_gradient_with_literal_control_and_weights() {
    let lw = LossWeights {
        whole: 0.5,
        con: 2.0,
        foot: 3.0,
        con_mode: ConMode::Literal,
        ..LossWeights::default()
    };
    let err = loss_check(&lw, &skeleton4(), 8);
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn loss_gradient_on_the_full_skeleton() {
    let err = loss_check(&LossWeights::default(), &Skeleton::hml22(), 6);
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn ik_gradient_matches_differences() {
    for skel in [skeleton4(), Skeleton::hml22()] {
        let (pred, _, c) = setup(22, &skel, 8);
        let (d, analytic) = ik_discrepancy_grad(&pred, &c, &skel).unwrap();
        assert_eq!(d.controlled, c.controlled_count());
        let numeric = numeric_grad(&pred.data, 1e-6, |x| {
            let mut m = pred.clone();
            m.data.copy_from_slice(x);
            ik_discrepancy(&m, &c, &skel).unwrap().value
        });
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "{err:e}");
    }
}

#[test]
fn parameter_gradients_per_tensor() {
    let skel = skeleton4();
    let (_, gt, c) = setup(23, &skel, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let w = small_model(8, 4, 8, 25);
    let d = w.config.repr_dim();
    let x0 = random_vec(&mut rng, 8 * d, 1.0);
    let xt = random_vec(&mut rng, 8 * d, 1.0);
    let text = TextCondition {
        embedding: random_vec(&mut rng, 8, 1.0),
        null: false,
    };
    let lw = LossWeights::default();
    let (_, grads) = example_gradients(&w, &skel, &lw, gt.fps, &x0, &xt, 77, &text, &c).unwrap();
    for (k, (name, g)) in w.names().iter().zip(&grads).enumerate() {
        let base = w.tensors()[k].data().to_vec();
        let numeric = numeric_grad(&base, 1e-6, |x| {
            let mut p = w.clone();
            p.tensors_mut()[k].data_mut().copy_from_slice(x);
            example_gradients(&p, &skel, &lw, gt.fps, &x0, &xt, 77, &text, &c).unwrap().0.total
        });
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let err = rel_err(g.data(), &numeric);
        // tensors with a vanishing gradient only carry difference noise
        assert!(err < 1e-4 || scale < 1e-9, "{name}: {err:e}");
    }
}
