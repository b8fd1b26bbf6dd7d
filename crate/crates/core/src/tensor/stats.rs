use super::Tensor;
use crate::error::{contract, Result};

/// Stability guard added to the variance before the square root.
pub const STD_EPS: f64 = 1e-5;

/// Per-channel spatial mean and standard deviation of a `[C, H, W]` feature.
/// The deviation uses the population variance: `sqrt(var + 1e-5)`.
pub fn channel_stats(feature: &Tensor) -> Result<(Tensor, Tensor)> {
    let &[c, h, w] = feature.shape() else {
        return Err(contract(format!(
            "channel_stats expects [C,H,W], got {:?}",
            feature.shape()
        )));
    };
    let flat = feature.reshape(&[c, h * w])?;
    let mean = flat.mean_axis(1)?;
    let std = flat.var_axis(1)?.add_scalar(STD_EPS).sqrt();
    Ok((mean, std))
}
