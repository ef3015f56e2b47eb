//! Post-hoc studies: PCA of modulation trajectories, the noise-pooling SNR
//! measurement, and image emission.

pub mod image;
pub mod modulation;
pub mod pca;

pub use self::image::{render_bar_rows, write_image, write_sample_grid};
pub use modulation::{collect_modulation, recorded_steps, tdln_rank_property, ModulationTrace};
pub use pca::{pca, symmetric_eigen, PcaResult};

use rand::Rng;

use crate::error::Result;
use crate::numerics::{avg_pool2d_tensor, Tensor};

/// Variance of `[1, 1, side, side]` standard-normal noise before and after
/// `k×k` average pooling. Pooling i.i.d. noise divides the variance by `k²`.
pub fn pooled_noise_variance<R: Rng + ?Sized>(side: usize, k: usize, rng: &mut R) -> Result<(f64, f64)> {
    let x = Tensor::<f64>::randn(&[1, 1, side, side], 1.0, rng);
    let pooled = avg_pool2d_tensor(&x, k)?;
    Ok((sample_variance(x.data()), sample_variance(pooled.data())))
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pooling_divides_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for k in [2usize, 4] {
            let (before, after) = pooled_noise_variance(256, k, &mut rng).unwrap();
            let ratio = before / after;
            assert!((ratio / (k * k) as f64 - 1.0).abs() < 0.15, "k={k} ratio={ratio}");
        }
    }
}
