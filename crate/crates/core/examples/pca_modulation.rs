//! PCA of TD-LN and adaLN-Zero modulation trajectories along one sampling
//! chain of a freshly initialized (randomized) miniature network.

use dimr::analysis::{collect_modulation, pca};
use dimr::conditioning::Conditioning;
use dimr::diffusion::NoiseSchedule;
use dimr::network::{Dimr, DimrConfig};
use dimr::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dimr::Result<()> {
    let sched = NoiseSchedule::linear(200, 1e-4, 0.02)?;
    for cond in [Conditioning::TdLn, Conditioning::AdaLnZero] {
        let cfg = DimrConfig::new(vec![2, 1], vec![16, 8], 8, 1, 2)?.with_conditioning(cond);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::default();
        let net = Dimr::new(cfg, sched.steps(), &mut store, &mut rng)?;
        store.randomize(0.3, &mut rng);
        let traces = collect_modulation(&net, &store, &sched, 0, 50, &mut rng)?;
        println!("== {}", cond.name());
        for tr in traces.iter().filter(|t| t.is_scale_or_shift()).take(6) {
            let r = pca(&tr.rows)?;
            let top: Vec<String> = r.ratios.iter().take(4).map(|q| format!("{q:.4}")).collect();
            println!("  {:<28} top ratios [{}]  top-2 {:.6}", tr.label(), top.join(", "), r.cumulative(2));
        }
    }
    Ok(())
}
