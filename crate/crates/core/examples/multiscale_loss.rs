//! Per-branch loss weights and the multi-scale loss on a fresh miniature
//! network, next to the variance reduction that motivates the weighting.

use dimr::analysis::pooled_noise_variance;
use dimr::diffusion::{q_sample_batch, NoiseSchedule};
use dimr::network::{Dimr, DimrConfig};
use dimr::params::ParamStore;
use dimr::training::{loss_weights, multiscale_loss};
use dimr::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dimr::Result<()> {
    for r in 1..=4 {
        println!("R={r}: weights {:?}", loss_weights(r)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [2, 4, 8] {
        let (before, after) = pooled_noise_variance(256, k, &mut rng)?;
        println!("avg-pool k={k}: variance {before:.4} -> {after:.5} (ratio {:.2}, k^2 = {})", before / after, k * k);
    }

    let cfg = DimrConfig::new(vec![2, 1, 1], vec![32, 16, 8], 16, 1, 2)?;
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
    let mut store = ParamStore::<f32>::default();
    let net = Dimr::new(cfg, sched.steps(), &mut store, &mut rng)?;
    let x0 = Tensor::<f32>::randn(&[4, 1, 16, 16], 0.5, &mut rng);
    let eps = Tensor::<f32>::randn(&[4, 1, 16, 16], 1.0, &mut rng);
    let ts = [10, 300, 600, 950];
    let xt = q_sample_batch(&x0, &ts, &eps, &sched)?;
    let g = Graph::no_grad(&store);
    let out = net.forward(&g, g.constant(xt), &ts, &[0, 1, 0, 1])?;
    for (r, e) in out.eps.iter().enumerate() {
        println!("branch {} predicts eps at {:?}", r + 1, e.shape());
    }
    let loss = multiscale_loss(&g, &eps, &out.eps)?;
    println!("multi-scale loss at init: {:.4}", loss.value().data()[0]);
    Ok(())
}
