//! Parameter cost of the two conditioning schemes, and their behaviour at
//! initialization: adaLN-Zero blocks start as the identity, TD-LN modulation
//! moves along a line between two learned endpoints.

use dimr::blocks::{BlockCond, TransformerBlock, TransformerBlockCfg};
use dimr::conditioning::{normalized_steps, Conditioning, TdLn};
use dimr::network::{build_variant, count_params};
use dimr::params::{ParamBuilder, ParamStore};
use dimr::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dimr::Result<()> {
    for cond in [Conditioning::TdLn, Conditioning::AdaLnZero] {
        let cfg = build_variant("XL/2R")?.with_conditioning(cond);
        println!("XL/2R with {:<10} {:>7.1}M", cond.name(), count_params(&cfg)?.total() as f64 / 1e6);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut fresh = ParamStore::<f64>::default();
    let block = TransformerBlock::new(
        &mut ParamBuilder::new(&mut fresh, &mut rng).sub("blk"),
        TransformerBlockCfg::new(16, 2, 8.0 / 3.0)?,
        Conditioning::AdaLnZero,
    )?;
    // TD-LN endpoints start equal; spread them so gamma(t) actually moves
    let mut store = ParamStore::<f64>::default();
    let tdln = TdLn::new(&mut ParamBuilder::new(&mut store, &mut rng).sub("tdln"), 4)?;
    store.randomize(0.5, &mut rng);
    let x = Tensor::<f64>::randn(&[1, 6, 16], 1.0, &mut rng);
    let g = Graph::new(&fresh);
    let cond = BlockCond { t_hat: g.constant(normalized_steps(&[500], 1000)?), embed: Some(g.constant(Tensor::randn(&[1, 16], 1.0, &mut rng))) };
    let y = block.forward(&g, g.constant(x.clone()), &cond)?.value();
    println!("fresh adaLN-Zero block: max |y - x| = {:.1e}", y.max_abs_diff(&x));

    let g = Graph::new(&store);
    println!("TD-LN gamma(t) on 4 channels:");
    for t in [0, 250, 500, 750, 999] {
        let (gamma, _) = tdln.modulation(&g, g.constant(normalized_steps(&[t], 1000)?))?;
        let v: Vec<String> = gamma.value().to_f64_vec().iter().map(|x| format!("{x:+.3}")).collect();
        println!("  t={t:<4} [{}]", v.join(", "));
    }
    Ok(())
}
