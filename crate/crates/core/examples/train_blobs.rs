//! Trains the miniature network on the two-class blob data and writes a
//! checkpoint. `cargo run --release --example train_blobs -- [steps] [out]`

use std::path::PathBuf;

use dimr::training::{make_dataset, RunConfig, Trainer};

fn main() -> dimr::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "blobs-out".into()));

    let mut cfg = RunConfig::default();
    cfg.train.steps = steps;
    cfg.train.optim.warmup = cfg.train.optim.warmup.min(steps);
    let ds = make_dataset(&cfg)?;
    let mut trainer = Trainer::new(cfg)?;
    let trace = trainer.run(ds.as_ref(), |s| {
        if s.step % 50 == 0 {
            println!("step {:>5} loss {:.5}", s.step, s.loss);
        }
    })?;
    let window = (steps as usize / 10).clamp(1, 100);
    if let Some((head, tail)) = trace.head_tail_means(window) {
        println!("mean loss first/last {window} steps: {head:.4} / {tail:.4}");
    }
    std::fs::create_dir_all(&out).expect("create output directory");
    trainer.checkpoint().save(&out.join("checkpoint.dimr"))?;
    println!("checkpoint in {}", out.display());
    Ok(())
}
