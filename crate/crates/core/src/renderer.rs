//! Volume rendering along a ray, with and without per-channel illuminance
//! attenuation, plus the batch-averaged attenuation profile.
//!
//! Accumulation is front to back in a fixed order; with `phi == 1` the
//! attenuated path performs bit-for-bit the same arithmetic as the standard
//! one.

use crate::error::{Error, Result};
use crate::scalar::{logit, sigmoid, Scalar};

pub type Rgb<T> = [T; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelRadiance<T> {
    pub rgb: Rgb<T>,
    /// `sum_i T_i alpha_i`, without attenuation.
    pub opacity: T,
}

/// Per-sample opacity, transmittance and contribution weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderWeights<T> {
    pub transmittance: Vec<T>,
    pub alpha: Vec<T>,
    pub weight: Vec<T>,
}

fn check_lengths(n: usize, others: &[(&str, usize)]) -> Result<()> {
    if let Some((name, len)) = others.iter().find(|(_, l)| *l != n) {
        return Err(Error::Shape(format!("{name} has {len} entries, expected {n}")));
    }
    Ok(())
}

fn validate_densities<T: Scalar>(sigmas: &[T], deltas: &[T]) -> Result<()> {
    check_lengths(sigmas.len(), &[("deltas", deltas.len())])?;
    if let Some(s) = sigmas.iter().find(|s| !(**s >= T::zero()) || !s.is_finite()) {
        return Err(Error::InputDomain(format!("density {s} is negative or non-finite")));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d > T::zero())) {
        return Err(Error::InputDomain(format!("interval length {d} is not positive")));
    }
    Ok(())
}

fn validate_phis<T: Scalar>(phis: &[Rgb<T>]) -> Result<()> {
    if let Some(p) = phis.iter().flatten().find(|p| !(**p > T::zero() && **p <= T::one())) {
        return Err(Error::InputDomain(format!("attenuation {p} outside (0, 1]")));
    }
    Ok(())
}

#[inline]
fn alpha<T: Scalar>(sigma: T, delta: T) -> T {
    T::one() - (-(sigma * delta)).exp()
}

/// `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn transmittance<T: Scalar>(sigmas: &[T], deltas: &[T]) -> Result<Vec<T>> {
    validate_densities(sigmas, deltas)?;
    Ok(transmittance_unchecked(sigmas, deltas))
}

fn transmittance_unchecked<T: Scalar>(sigmas: &[T], deltas: &[T]) -> Vec<T> {
    let mut depth = T::zero();
    sigmas
        .iter()
        .zip(deltas)
        .map(|(&s, &d)| {
            let t = (-depth).exp();
            depth += s * d;
            t
        })
        .collect()
}

/// `T_i * prod_{j<i} phi_j`, per channel.
pub fn attenuated_transmittance<T: Scalar>(sigmas: &[T], deltas: &[T], phis: &[Rgb<T>]) -> Result<Vec<Rgb<T>>> {
    validate_densities(sigmas, deltas)?;
    check_lengths(sigmas.len(), &[("phis", phis.len())])?;
    validate_phis(phis)?;
    let trans = transmittance_unchecked(sigmas, deltas);
    let mut prod = [T::one(); 3];
    Ok(trans
        .iter()
        .zip(phis)
        .map(|(&t, phi)| {
            let out = [t * prod[0], t * prod[1], t * prod[2]];
            for c in 0..3 {
                prod[c] *= phi[c];
            }
            out
        })
        .collect())
}

pub fn render_weights<T: Scalar>(sigmas: &[T], deltas: &[T]) -> Result<RenderWeights<T>> {
    let transmittance = transmittance(sigmas, deltas)?;
    let alpha: Vec<T> = sigmas.iter().zip(deltas).map(|(&s, &d)| alpha(s, d)).collect();
    let weight = transmittance.iter().zip(&alpha).map(|(&t, &a)| t * a).collect();
    Ok(RenderWeights {
        transmittance,
        alpha,
        weight,
    })
}

/// `C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i`.
pub fn render_standard<T: Scalar>(sigmas: &[T], deltas: &[T], colors: &[Rgb<T>]) -> Result<PixelRadiance<T>> {
    validate_densities(sigmas, deltas)?;
    check_lengths(sigmas.len(), &[("colors", colors.len())])?;
    Ok(accumulate(sigmas, deltas, colors, None))
}

/// Restored view: the standard render with attenuation removed.
pub fn restore_render<T: Scalar>(sigmas: &[T], deltas: &[T], colors: &[Rgb<T>]) -> Result<PixelRadiance<T>> {
    render_standard(sigmas, deltas, colors)
}

/// `C_lambda = sum_i T_lambda,i (1 - exp(-sigma_i delta_i)) c_lambda,i`.
pub fn render_attenuated<T: Scalar>(
    sigmas: &[T],
    deltas: &[T],
    colors: &[Rgb<T>],
    phis: &[Rgb<T>],
) -> Result<PixelRadiance<T>> {
    validate_densities(sigmas, deltas)?;
    check_lengths(sigmas.len(), &[("colors", colors.len()), ("phis", phis.len())])?;
    validate_phis(phis)?;
    Ok(accumulate(sigmas, deltas, colors, Some(phis)))
}

fn accumulate<T: Scalar>(sigmas: &[T], deltas: &[T], colors: &[Rgb<T>], phis: Option<&[Rgb<T>]>) -> PixelRadiance<T> {
    let mut depth = T::zero();
    let mut prod = [T::one(); 3];
    let mut rgb = [T::zero(); 3];
    let mut opacity = T::zero();
    for i in 0..sigmas.len() {
        let t = (-depth).exp();
        let a = alpha(sigmas[i], deltas[i]);
        opacity += t * a;
        for c in 0..3 {
            let w = t * prod[c] * a;
            rgb[c] += w * colors[i][c];
        }
        if let Some(phis) = phis {
            for c in 0..3 {
                prod[c] *= phis[i][c];
            }
        }
        depth += sigmas[i] * deltas[i];
    }
    PixelRadiance { rgb, opacity }
}

/// Gradients of one rendered pixel with respect to its samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrad<T> {
    pub sigma: Vec<T>,
    pub color: Vec<Rgb<T>>,
    /// Empty for the standard path.
    pub phi: Vec<Rgb<T>>,
}

/// Chain-rules `upstream = dL/d rgb` into per-sample gradients. Pass `phis`
/// for the attenuated path, `None` for the standard one. Forward quantities
/// are recomputed from the inputs, which is O(n).
pub fn render_backward<T: Scalar>(
    sigmas: &[T],
    deltas: &[T],
    colors: &[Rgb<T>],
    phis: Option<&[Rgb<T>]>,
    upstream: Rgb<T>,
) -> Result<RenderGrad<T>> {
    validate_densities(sigmas, deltas)?;
    check_lengths(sigmas.len(), &[("colors", colors.len())])?;
    if let Some(p) = phis {
        check_lengths(sigmas.len(), &[("phis", p.len())])?;
        validate_phis(p)?;
    }
    let n = sigmas.len();
    let trans = transmittance_unchecked(sigmas, deltas);
    let mut weights = vec![[T::zero(); 3]; n];
    let mut att_trans = vec![[T::zero(); 3]; n];
    let mut prod = [T::one(); 3];
    for i in 0..n {
        let a = alpha(sigmas[i], deltas[i]);
        for c in 0..3 {
            att_trans[i][c] = trans[i] * prod[c];
            weights[i][c] = att_trans[i][c] * a;
        }
        if let Some(p) = phis {
            for c in 0..3 {
                prod[c] *= p[i][c];
            }
        }
    }

    let mut grad = RenderGrad {
        sigma: vec![T::zero(); n],
        color: vec![[T::zero(); 3]; n],
        phi: if phis.is_some() {
            vec![[T::zero(); 3]; n]
        } else {
            Vec::new()
        },
    };
    // suffix[c] = sum_{i>k} w_i c_i accumulated back to front.
    let mut suffix = [T::zero(); 3];
    for k in (0..n).rev() {
        let decay = (-(sigmas[k] * deltas[k])).exp();
        let mut ds = T::zero();
        for c in 0..3 {
            grad.color[k][c] = upstream[c] * weights[k][c];
            ds += upstream[c] * (att_trans[k][c] * decay * colors[k][c] - suffix[c]);
        }
        grad.sigma[k] = ds * deltas[k];
        if let Some(p) = phis {
            for c in 0..3 {
                grad.phi[k][c] = upstream[c] * suffix[c] / p[k][c];
            }
        }
        for c in 0..3 {
            suffix[c] += weights[k][c] * colors[k][c];
        }
    }
    Ok(grad)
}

/// Attenuation profile over sample indices shared by every ray of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedAttenuation<T> {
    pub profile: Vec<Rgb<T>>,
}

/// Intermediates of [`batch_average_smooth`] needed by its backward pass.
#[derive(Debug, Clone)]
pub struct SmoothingTape<T> {
    n_rays: usize,
    floor: T,
    /// Unit-interval value of the batch mean, after clamping.
    unit: Vec<Rgb<T>>,
    clamped: Vec<[bool; 3]>,
    logits: Vec<Rgb<T>>,
    smoothed_unit: Vec<Rgb<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingGrad<T> {
    /// Gradient for each ray's sample `i`; identical for all rays of the batch.
    pub per_sample: Vec<Rgb<T>>,
    pub kernel: Vec<T>,
}

/// Averages attenuation over the rays of a batch at each sample index, maps
/// the mean into logit space, convolves each channel along the sample axis
/// (edge-replicated), and squashes back into `(floor, 1)`.
///
/// `phi_batch` is ray-major with `n_samples` entries per ray.
pub fn batch_average_smooth<T: Scalar>(
    phi_batch: &[Rgb<T>],
    n_samples: usize,
    kernel: &[T],
    floor: T,
) -> Result<(SmoothedAttenuation<T>, SmoothingTape<T>)> {
    if n_samples == 0 || phi_batch.is_empty() {
        return Err(Error::Usage("attenuation smoothing needs a nonempty batch".into()));
    }
    if !phi_batch.len().is_multiple_of(n_samples) {
        return Err(Error::Shape(format!(
            "{} attenuation entries is not a multiple of {n_samples} samples",
            phi_batch.len()
        )));
    }
    if kernel.len().is_multiple_of(2) {
        return Err(Error::Config("smoothing kernel length must be odd".into()));
    }
    let n_rays = phi_batch.len() / n_samples;
    let inv_b = T::one() / T::lit(n_rays as f64);
    let span = T::one() - floor;
    let eps = T::lit(64.0) * T::epsilon();

    let mut mean = vec![[T::zero(); 3]; n_samples];
    for ray in phi_batch.chunks_exact(n_samples) {
        for (m, p) in mean.iter_mut().zip(ray) {
            for c in 0..3 {
                m[c] += p[c];
            }
        }
    }
    let mut unit = vec![[T::zero(); 3]; n_samples];
    let mut clamped = vec![[false; 3]; n_samples];
    let mut logits = vec![[T::zero(); 3]; n_samples];
    for i in 0..n_samples {
        for c in 0..3 {
            let s = (mean[i][c] * inv_b - floor) / span;
            let sc = s.max(eps).min(T::one() - eps);
            clamped[i][c] = sc != s;
            unit[i][c] = sc;
            logits[i][c] = logit(sc);
        }
    }
    let half = (kernel.len() / 2) as isize;
    let last = n_samples as isize - 1;
    let mut smoothed_unit = vec![[T::zero(); 3]; n_samples];
    let mut profile = vec![[T::zero(); 3]; n_samples];
    for i in 0..n_samples {
        let mut acc = [T::zero(); 3];
        for (k, &w) in kernel.iter().enumerate() {
            let j = (i as isize + k as isize - half).clamp(0, last) as usize;
            for c in 0..3 {
                acc[c] += w * logits[j][c];
            }
        }
        for c in 0..3 {
            let s = sigmoid(acc[c]);
            smoothed_unit[i][c] = s;
            profile[i][c] = floor + span * s;
        }
    }
    let tape = SmoothingTape {
        n_rays,
        floor,
        unit,
        clamped,
        logits,
        smoothed_unit,
    };
    Ok((SmoothedAttenuation { profile }, tape))
}

/// Backward of [`batch_average_smooth`] given `dL/d profile`.
pub fn smooth_backward<T: Scalar>(
    tape: &SmoothingTape<T>,
    kernel: &[T],
    upstream: &[Rgb<T>],
) -> Result<SmoothingGrad<T>> {
    let n = tape.logits.len();
    check_lengths(n, &[("profile gradient", upstream.len())])?;
    let span = T::one() - tape.floor;
    let half = (kernel.len() / 2) as isize;
    let last = n as isize - 1;
    let mut d_kernel = vec![T::zero(); kernel.len()];
    let mut d_logits = vec![[T::zero(); 3]; n];
    for i in 0..n {
        let mut dv = [T::zero(); 3];
        for c in 0..3 {
            let s = tape.smoothed_unit[i][c];
            dv[c] = upstream[i][c] * span * s * (T::one() - s);
        }
        for (k, &w) in kernel.iter().enumerate() {
            let j = (i as isize + k as isize - half).clamp(0, last) as usize;
            for c in 0..3 {
                d_kernel[k] += dv[c] * tape.logits[j][c];
                d_logits[j][c] += w * dv[c];
            }
        }
    }
    let inv_b = T::one() / T::lit(tape.n_rays as f64);
    let per_sample = (0..n)
        .map(|i| {
            let mut g = [T::zero(); 3];
            for c in 0..3 {
                if !tape.clamped[i][c] {
                    let s = tape.unit[i][c];
                    g[c] = d_logits[i][c] / (s * (T::one() - s)) / span * inv_b;
                }
            }
            g
        })
        .collect();
    Ok(SmoothingGrad {
        per_sample,
        kernel: d_kernel,
    })
}
