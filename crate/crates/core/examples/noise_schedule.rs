//! Prints a few rows of the linear schedule and checks chained noising
//! against the closed-form marginal.

use dimr::diffusion::{q_sample, NoiseSchedule};
use dimr::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dimr::Result<()> {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    for t in [0, 99, 499, 999] {
        println!("t={t:<4} beta={:.5} alpha_bar={:.6}", sched.beta()[t], sched.alpha_bar()[t]);
    }

    let n = 20_000;
    let t = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut x = Tensor::<f64>::full(&[n], 1.0);
    for s in 0..=t {
        let step = NoiseSchedule::from_betas(vec![sched.beta()[s]])?;
        x = q_sample(&x, 0, &Tensor::randn(&[n], 1.0, &mut rng), &step)?;
    }
    let mean = x.data().iter().sum::<f64>() / n as f64;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let ab = sched.alpha_bar()[t];
    println!("after {} single steps: mean {mean:.4} (closed form {:.4}), var {var:.4} (closed form {:.4})", t + 1, ab.sqrt(), 1.0 - ab);
    Ok(())
}
