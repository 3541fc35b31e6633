//! Linear DDPM schedule, its strided sub-schedule, and the noise identity
//! used by the sampler.
//!
//! `cargo run --example schedule_and_noise`

use cmg::diffusion::{build_schedule, epsilon_from_x0, forward_noise, gaussian};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cmg::Result<()> {
    let sched = build_schedule(1000, 1e-4, 0.02)?;
    println!("{:>5} {:>10} {:>12}", "t", "beta", "alpha_bar");
    for t in [0, 1, 100, 250, 500, 750, 999] {
        println!("{t:>5} {:>10.6} {:>12.6e}", sched.betas()[t], sched.alpha_bars()[t]);
    }

    let sub = sched.respace(10)?;
    println!("\n10-step sampler visits {:?}", sub.timesteps());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x0 = gaussian(&mut rng, 8);
    let eps = gaussian(&mut rng, 8);
    for t in [10, 500, 999] {
        let noised = forward_noise(&x0, t, &eps, &sched)?;
        let back = epsilon_from_x0(&noised.x_t, &x0, t, &sched)?;
        let err = back.iter().zip(&eps).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let signal = sched.alpha_bars()[t].sqrt();
        println!("t={t:>3}: signal weight {signal:.4}, recovered noise off by {err:.1e}");
    }
    Ok(())
}
