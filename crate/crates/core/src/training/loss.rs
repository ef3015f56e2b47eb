use crate::error::{Error, Result};
use crate::numerics::{avg_pool2d_tensor, Float, Graph, Tensor, Var};

/// `α_r = 4^{−(R−r)}` for `r = 1..=R`.
pub fn loss_weights(branches: usize) -> Result<Vec<f64>> {
    if branches == 0 {
        return Err(Error::Invalid("loss weights need R >= 1".into()));
    }
    Ok((1..=branches).map(|r| 0.25f64.powi((branches - r) as i32)).collect())
}

/// `Σ_r α_r · MSE(avg_pool(target, 2^{R−r}), eps_r)` with `eps` ordered from the
/// lowest resolution up.
pub fn multiscale_loss<'g, T: Float>(g: &'g Graph<T>, target: &Tensor<T>, eps: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let big_r = eps.len();
    let weights = loss_weights(big_r)?;
    if eps[big_r - 1].shape() != target.shape() {
        return Err(Error::shape(
            "multiscale_loss",
            format!("target {:?} vs final prediction {:?}", target.shape(), eps[big_r - 1].shape()),
        ));
    }
    let mut total: Option<Var<'g, T>> = None;
    for (i, (&e, &a)) in eps.iter().zip(&weights).enumerate() {
        let k = 1usize << (big_r - 1 - i);
        let pooled = if k == 1 { target.clone() } else { avg_pool2d_tensor(target, k)? };
        if pooled.shape() != e.shape().as_slice() {
            return Err(Error::shape(
                "multiscale_loss",
                format!("branch {} prediction {:?} vs pooled target {:?}", i + 1, e.shape(), pooled.shape()),
            ));
        }
        let term = e.mse(g.constant(pooled))?.scale(a);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one branch"))
}
