//! Pseudo ground truth by histogram equalization, and the training losses.

mod equalize;
mod sinkhorn;

pub use equalize::{equalization_map, histogram_equalize, level_of, uniformity_gap, LEVELS};
pub use sinkhorn::{
    bin_centers, build_histogram, entropic_ot, entropic_self_ot, histogram_backward, sinkhorn_divergence,
    sinkhorn_loss, squared_cost, IntensityHistogram, OtSolution, SinkhornConfig, SinkhornDivergence, SinkhornReport,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean over the batch of the squared L2 pixel error, and its gradient.
pub fn reconstruction_loss<T: Scalar>(rendered: &[[T; 3]], reference: &[[T; 3]]) -> Result<(T, Vec<[T; 3]>)> {
    if rendered.len() != reference.len() {
        return Err(Error::Usage(format!(
            "{} rendered pixels vs {} reference pixels",
            rendered.len(),
            reference.len()
        )));
    }
    if rendered.is_empty() {
        return Err(Error::Usage("reconstruction loss of an empty batch".into()));
    }
    let inv_n = T::one() / T::lit(rendered.len() as f64);
    let two_inv_n = inv_n + inv_n;
    let mut sum = T::zero();
    let grad = rendered
        .iter()
        .zip(reference)
        .map(|(r, p)| {
            let mut g = [T::zero(); 3];
            for c in 0..3 {
                let d = r[c] - p[c];
                sum += d * d;
                g[c] = two_inv_n * d;
            }
            g
        })
        .collect();
    Ok((sum * inv_n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport<T> {
    pub l_recon: T,
    pub l_sinkhorn: T,
    pub alpha: T,
    pub total: T,
}

/// `total = l_recon + alpha * l_sinkhorn`.
pub fn total_loss<T: Scalar>(l_recon: T, l_sinkhorn: T, alpha: T) -> Result<LossReport<T>> {
    if !(alpha >= T::zero()) {
        return Err(Error::Config(format!("loss weight {alpha} must be nonnegative")));
    }
    Ok(LossReport {
        l_recon,
        l_sinkhorn,
        alpha,
        total: l_recon + alpha * l_sinkhorn,
    })
}
