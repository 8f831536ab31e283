//! Per-channel histogram equalization.

use crate::error::{Error, Result};
use crate::raster::Image;

pub const LEVELS: usize = 256;

/// Quantization level of a value in [0, 1].
#[inline]
pub fn level_of(v: f32) -> usize {
    (v * 255.0).round() as usize
}

/// Level-to-value lookup table for one channel's level histogram, or `None`
/// for a constant channel.
pub fn equalization_map(counts: &[u64; LEVELS]) -> Option<[f32; LEVELS]> {
    let n: u64 = counts.iter().sum();
    let mut cdf = [0u64; LEVELS];
    let mut acc = 0;
    for (c, &k) in cdf.iter_mut().zip(counts) {
        acc += k;
        *c = acc;
    }
    let cdf_min = counts.iter().zip(&cdf).find(|(&k, _)| k > 0).map(|(_, &c)| c)?;
    if cdf_min == n {
        return None;
    }
    let denom = (n - cdf_min) as f64;
    let mut lut = [0.0f32; LEVELS];
    for (l, &c) in lut.iter_mut().zip(&cdf) {
        *l = (c.saturating_sub(cdf_min) as f64 / denom) as f32;
    }
    Some(lut)
}

/// Maps each channel's level `v` to `(cdf(v) - cdf_min) / (n - cdf_min)`.
/// Constant channels are returned unchanged.
pub fn histogram_equalize(image: &Image) -> Result<Image> {
    if let Some(v) = image.data.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InputDomain(format!("pixel value {v} outside [0, 1]")));
    }
    let mut out = image.clone();
    for c in 0..3 {
        let mut counts = [0u64; LEVELS];
        for p in &image.data {
            counts[level_of(p[c])] += 1;
        }
        if let Some(lut) = equalization_map(&counts) {
            for (o, p) in out.data.iter_mut().zip(&image.data) {
                o[c] = lut[level_of(p[c])];
            }
        }
    }
    Ok(out)
}

/// Sup-norm distance, over occupied values, between one channel's
/// empirical CDF and the uniform CDF, with the CDF anchored at the lowest
/// occupied value the same way equalization anchors it:
/// `max_k |(cdf_k - cdf_min) / (n - cdf_min) - x_k|`. A constant channel is
/// a point mass at `x` and scores `max(x, 1 - x)`.
pub fn uniformity_gap(image: &Image, channel: usize) -> f64 {
    let mut values: Vec<f64> = image.data.iter().map(|p| p[channel] as f64).collect();
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let n_min = values.iter().take_while(|&&v| v == values[0]).count();
    if n_min == n {
        return values[0].max(1.0 - values[0]);
    }
    let mut gap = 0.0f64;
    let mut i = 0;
    while i < n {
        let x = values[i];
        while i < n && values[i] == x {
            i += 1;
        }
        let anchored = (i - n_min) as f64 / (n - n_min) as f64;
        gap = gap.max((anchored - x).abs());
    }
    gap
}
