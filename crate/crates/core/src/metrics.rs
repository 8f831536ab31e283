//! Full-reference image quality metrics and the warp-based multi-view
//! consistency harness with analytic flow from known geometry.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::raster::{DepthMap, Image};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_mask(a: &Image, mask: Option<&[bool]>) -> Result<()> {
    match mask {
        Some(m) if m.len() != a.data.len() => Err(Error::Shape(format!(
            "mask of {} entries for {} pixels",
            m.len(),
            a.data.len()
        ))),
        _ => Ok(()),
    }
}

fn selected<'a>(
    a: &'a Image,
    b: &'a Image,
    mask: Option<&'a [bool]>,
) -> impl Iterator<Item = (&'a [f32; 3], &'a [f32; 3])> {
    a.data
        .iter()
        .zip(&b.data)
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, p)| p)
}

/// Mean squared error over the selected pixels and channels, and the number
/// of pixels used.
fn masked_mse(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<(f64, usize)> {
    a.same_shape(b)?;
    check_mask(a, mask)?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (p, q) in selected(a, b, mask) {
        for c in 0..3 {
            let d = p[c] as f64 - q[c] as f64;
            sum += d * d;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Degenerate("no pixels selected".into()));
    }
    Ok((sum / (3 * n) as f64, n))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Peak signal-to-noise ratio in dB with unit peak.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    masked_psnr(a, b, None)
}

pub fn masked_psnr(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    masked_mse(a, b, mask).map(|(mse, _)| psnr_from_mse(mse))
}

/// `||a - b|| / ||b||` over all channels; normalized by the reference `b`.
pub fn nrmse(a: &Image, b: &Image) -> Result<f64> {
    masked_nrmse(a, b, None)
}

pub fn masked_nrmse(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<f64> {
    a.same_shape(b)?;
    check_mask(a, mask)?;
    let (mut err, mut norm) = (0.0f64, 0.0f64);
    for (p, q) in selected(a, b, mask) {
        for c in 0..3 {
            let d = p[c] as f64 - q[c] as f64;
            err += d * d;
            norm += (q[c] as f64).powi(2);
        }
    }
    if norm == 0.0 {
        return Err(Error::Degenerate("reference image has zero norm".into()));
    }
    Ok((err / norm).sqrt())
}

fn gray(img: &Image) -> Vec<f64> {
    img.data
        .iter()
        .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
        .collect()
}

fn gaussian_window() -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let g: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of the channel-mean grayscale images over all windows that fit
/// inside the image (11x11 Gaussian, sigma 1.5, unit dynamic range).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    masked_ssim(a, b, None)?.ok_or_else(|| Error::Degenerate("no SSIM window".into()))
}

/// With a mask, each window's statistics use only valid pixels (weights
/// renormalized) and only windows centered on a valid pixel are averaged.
/// Without one this is the standard fully-valid-window SSIM. Returns `None`
/// when no window qualifies.
pub fn masked_ssim(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<Option<f64>> {
    a.same_shape(b)?;
    check_mask(a, mask)?;
    let win = 2 * SSIM_RADIUS + 1;
    if a.width < win || a.height < win {
        return Err(Error::Shape(format!(
            "{}x{} image is smaller than the {win}x{win} SSIM window",
            a.width, a.height
        )));
    }
    let (ga, gb) = (gray(a), gray(b));
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let w = a.width;
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let (mut total, mut count) = (0.0f64, 0usize);
    for cy in SSIM_RADIUS..a.height - SSIM_RADIUS {
        for cx in SSIM_RADIUS..w - SSIM_RADIUS {
            if !valid(cy * w + cx) {
                continue;
            }
            let (mut sw, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                let row = (cy + dy - SSIM_RADIUS) * w;
                for (dx, gx) in g.iter().enumerate() {
                    let i = row + cx + dx - SSIM_RADIUS;
                    if !valid(i) {
                        continue;
                    }
                    let wt = gy * gx;
                    let (x, y) = (ga[i], gb[i]);
                    sw += wt;
                    sa += wt * x;
                    sb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (ma, mb) = (sa / sw, sb / sw);
            let va = saa / sw - ma * ma;
            let vb = sbb / sw - mb * mb;
            let cov = sab / sw - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Quality of `a` against reference `b`. LPIPS is not computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub nrmse: f64,
    /// Pixels that entered the PSNR / NRMSE sums.
    pub pixels: usize,
    /// `pixels` over the image size.
    pub coverage: f64,
}

impl MetricReport {
    pub fn compute(a: &Image, b: &Image, mask: Option<&[bool]>) -> Result<MetricReport> {
        let (mse, pixels) = masked_mse(a, b, mask)?;
        Ok(MetricReport {
            psnr: psnr_from_mse(mse),
            ssim: masked_ssim(a, b, mask)?,
            nrmse: masked_nrmse(a, b, mask)?,
            pixels,
            coverage: pixels as f64 / a.data.len() as f64,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Per-pixel displacement on the grid of the view being reconstructed,
/// pointing to where that pixel's surface point appears in the other view.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub flow: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            flow: vec![[0.0; 2]; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn coverage(&self) -> f64 {
        self.valid.iter().filter(|v| **v).count() as f64 / self.valid.len().max(1) as f64
    }
}

/// Bilinear lookup of a scalar grid; `None` outside the grid or when any
/// contributing sample has no value.
fn bilinear(width: usize, height: usize, x: f64, y: f64, fetch: impl Fn(usize) -> Option<f64>) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let mut acc = 0.0;
    for (xi, yi, wt) in [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ] {
        if wt == 0.0 {
            continue;
        }
        acc += wt * fetch(yi * width + xi)?;
    }
    Some(acc)
}

/// Flow from view A's pixel grid into view B, computed by unprojecting each
/// valid pixel of A at its stored ray distance and projecting into B.
/// Pixels are masked when A has no surface there, when the point lands
/// outside B or behind it, or, if B's depth is supplied, when B sees a
/// different surface (ray distances disagree by more than 1% relative).
pub fn analytic_flow(
    pose_a: &CameraPose,
    pose_b: &CameraPose,
    depth_a: &DepthMap,
    depth_b: Option<&DepthMap>,
) -> FlowField {
    let (w, h) = (depth_a.width, depth_a.height);
    let kb = pose_b.intrinsics;
    let mut out = FlowField {
        width: w,
        height: h,
        flow: vec![[0.0; 2]; w * h],
        valid: vec![false; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let Some(d) = depth_a.get(x, y) else { continue };
            let point = pose_a.center() + pose_a.pixel_direction(x as f64, y as f64) * d as f64;
            let Some((u, v, _)) = pose_b.project(&point) else {
                continue;
            };
            // Snap f32 depth round-off at the border so edge pixels stay in frame.
            let (Some(u), Some(v)) = (snap_to_range(u, kb.width), snap_to_range(v, kb.height)) else {
                continue;
            };
            if let Some(db) = depth_b {
                let seen = bilinear(db.width, db.height, u, v, |j| db.valid[j].then_some(db.depth[j] as f64));
                let range = (point - pose_b.center()).norm();
                match seen {
                    Some(s) if (s - range).abs() <= 0.01 * range => {}
                    _ => continue,
                }
            }
            out.flow[i] = [u - x as f64, v - y as f64];
            out.valid[i] = true;
        }
    }
    out
}

fn snap_to_range(c: f64, n: usize) -> Option<f64> {
    const SLACK: f64 = 1e-4;
    let hi = (n - 1) as f64;
    (c >= -SLACK && c <= hi + SLACK).then(|| c.clamp(0.0, hi))
}

/// Builds an image on the flow's grid by sampling `source` bilinearly at
/// `x + flow(x)`. The returned mask is flow validity intersected with the
/// source bounds; masked pixels are black.
pub fn warp(source: &Image, flow: &FlowField) -> (Image, Vec<bool>) {
    let mut out = Image::filled(flow.width, flow.height, [0.0; 3]);
    let mut mask = vec![false; flow.width * flow.height];
    for y in 0..flow.height {
        for x in 0..flow.width {
            let i = y * flow.width + x;
            if !flow.valid[i] {
                continue;
            }
            let (sx, sy) = (x as f64 + flow.flow[i][0], y as f64 + flow.flow[i][1]);
            let mut rgb = [0.0f32; 3];
            let mut ok = true;
            for (c, slot) in rgb.iter_mut().enumerate() {
                match bilinear(source.width, source.height, sx, sy, |j| Some(source.data[j][c] as f64)) {
                    Some(v) => *slot = v as f32,
                    None => ok = false,
                }
            }
            if ok {
                out.data[i] = rgb;
                mask[i] = true;
            }
        }
    }
    (out, mask)
}

/// Warps view A into view B's frame and scores it against view B on the
/// pixels where the warp is defined.
pub fn consistency_of_images(
    image_a: &Image,
    image_b: &Image,
    pose_a: &CameraPose,
    pose_b: &CameraPose,
    depth_a: &DepthMap,
    depth_b: &DepthMap,
) -> Result<MetricReport> {
    image_a.same_shape(image_b)?;
    // The flow lives on B's grid and points into A.
    let flow = analytic_flow(pose_b, pose_a, depth_b, Some(depth_a));
    let (warped, mask) = warp(image_a, &flow);
    MetricReport::compute(&warped, image_b, Some(&mask))
}

/// Renders both views with `render` and measures their agreement after
/// warping A into B.
pub fn consistency_eval(
    mut render: impl FnMut(&CameraPose) -> Result<Image>,
    pose_a: &CameraPose,
    pose_b: &CameraPose,
    depth_a: &DepthMap,
    depth_b: &DepthMap,
) -> Result<MetricReport> {
    let a = render(pose_a)?;
    let b = render(pose_b)?;
    consistency_of_images(&a, &b, pose_a, pose_b, depth_a, depth_b)
}

/// Round-trip reprojection error in pixels for every valid flow entry:
/// A -> B along the flow, then back into A using B's depth.
pub fn round_trip_error(flow: &FlowField, pose_a: &CameraPose, pose_b: &CameraPose, depth_b: &DepthMap) -> Vec<f64> {
    let mut errs = Vec::new();
    for y in 0..flow.height {
        for x in 0..flow.width {
            let i = y * flow.width + x;
            if !flow.valid[i] {
                continue;
            }
            let (u, v) = (x as f64 + flow.flow[i][0], y as f64 + flow.flow[i][1]);
            let Some(d) = bilinear(depth_b.width, depth_b.height, u, v, |j| {
                depth_b.valid[j].then_some(depth_b.depth[j] as f64)
            }) else {
                errs.push(f64::INFINITY);
                continue;
            };
            let p: Vector3<f64> = pose_b.center() + pose_b.pixel_direction(u, v) * d;
            match pose_a.project(&p) {
                Some((ua, va, _)) => errs.push(((ua - x as f64).powi(2) + (va - y as f64).powi(2)).sqrt()),
                None => errs.push(f64::INFINITY),
            }
        }
    }
    errs
}
