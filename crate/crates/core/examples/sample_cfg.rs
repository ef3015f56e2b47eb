//! Classifier-free guided sampling from a checkpoint, sweeping the guidance
//! scale and reporting on which side of the diagonal each blob lands.
//!
//! `cargo run --release --example sample_cfg -- blobs-out/checkpoint.dimr`

use std::path::PathBuf;

use dimr::analysis::write_sample_grid;
use dimr::cli::bright_centroid;
use dimr::diffusion::{sample, GuidanceConfig};
use dimr::training::{Checkpoint, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dimr::Result<()> {
    let path = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "blobs-out/checkpoint.dimr".into()));
    let trainer = Trainer::from_checkpoint(Checkpoint::load(&path)?)?;
    let size = trainer.config().model.input_size;
    let classes = [0, 0, 0, 0, 1, 1, 1, 1];
    for w in [0.0, 1.0, 3.0] {
        let gc = GuidanceConfig::new(w, trainer.net().null_class())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = sample(&trainer.denoiser(), trainer.schedule(), &[classes.len(), 1, size, size], &classes, Some(gc), &mut rng, |_, _, _| {})?;
        let sides: String = x
            .data()
            .chunks(size * size)
            .map(|img| {
                let (r, c) = bright_centroid(img, 1, size);
                if r < c { '0' } else { '1' }
            })
            .collect();
        println!("w={w}: wanted {:?}, blob side {sides}", classes);
        let out = path.with_file_name(format!("cfg_w{w}.ppm"));
        write_sample_grid(&x, &out, 2, 4)?;
    }
    Ok(())
}
