//! A field together with everything needed to render it, image rendering in
//! both modes, and the binary checkpoint format.
//!
//! Checkpoint layout, all little-endian:
//!
//! ```text
//! b"WHNF"                 magic
//! u32                     format version (1)
//! u32                     scalar width in bytes (4 or 8)
//! u32 x 8                 pos_dim dir_dim trunk_depth trunk_width skip_layer
//!                         color_hidden phi_hidden kernel_len  (skip 0xFFFFFFFF = none)
//! f64 x 2                 phi_floor phi_init
//! u32 u32 u8 f64          pos_freqs dir_freqs include_input position_scale
//! u32 f64 f64             samples_per_ray t_near t_far
//! u8 u8                   smoothing attenuation
//! u32                     tensor count
//! (u64 len, len scalars)  each tensor in FieldParams::tensors order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{field_forward, FieldArch, FieldParams};
use crate::geometry::{generate_rays, Bounds, CameraPose, EncodingConfig, Ray, SampleBatch};
use crate::raster::Image;
use crate::renderer::{batch_average_smooth, render_attenuated, render_standard, Rgb};
use crate::scalar::Scalar;
use rand_chacha::ChaCha8Rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WHNF";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything about a model that is not a trainable weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: FieldArch,
    pub encoding: EncodingConfig,
    pub samples_per_ray: usize,
    pub bounds: Bounds,
    /// Render the attenuated path with the batch-averaged profile.
    pub smoothing: bool,
    /// When false the attenuation head is ignored and held at 1.
    pub attenuation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// Underwater appearance, with attenuation.
    Degraded,
    /// Attenuation removed.
    Restored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: FieldParams<T>,
}

/// Rays evaluated per field call when rendering whole images.
const RENDER_CHUNK: usize = 1024;

impl<T: Scalar> Model<T> {
    /// Deterministic (midpoint-sampled) pixel colors for a set of rays. With
    /// smoothing on, the degraded mode shares one attenuation profile across
    /// all the given rays.
    pub fn render_rays(&self, rays: &[Ray], mode: RenderMode) -> Result<Vec<Rgb<T>>> {
        let n = self.spec.samples_per_ray;
        let mut sigma = Vec::with_capacity(rays.len() * n);
        let mut color = Vec::with_capacity(rays.len() * n);
        let mut phi = Vec::with_capacity(rays.len() * n);
        let mut deltas = Vec::with_capacity(rays.len() * n);
        for chunk in rays.chunks(RENDER_CHUNK) {
            let batch = SampleBatch::<T>::build(chunk, n, None::<&mut ChaCha8Rng>, &self.spec.encoding)?;
            let out = field_forward(&self.params, batch.encoded_pos.view(), batch.encoded_dir.view())?;
            sigma.extend(out.sigma.iter().copied());
            color.extend(out.color.rows().into_iter().map(|r| [r[0], r[1], r[2]]));
            phi.extend(out.phi.rows().into_iter().map(|r| [r[0], r[1], r[2]]));
            deltas.extend_from_slice(&batch.deltas);
        }
        let attenuate = mode == RenderMode::Degraded && self.spec.attenuation;
        let profile = if attenuate && self.spec.smoothing && !rays.is_empty() {
            let kernel = self.params.kernel.as_slice().expect("standard layout");
            let floor = T::lit(self.spec.arch.phi_floor);
            Some(batch_average_smooth(&phi, n, kernel, floor)?.0.profile)
        } else {
            None
        };
        (0..rays.len())
            .map(|r| {
                let span = r * n..(r + 1) * n;
                let (s, d, c) = (&sigma[span.clone()], &deltas[span.clone()], &color[span.clone()]);
                let px = if !attenuate {
                    render_standard(s, d, c)?
                } else {
                    let phis = profile.as_deref().unwrap_or(&phi[span]);
                    render_attenuated(s, d, c, phis)?
                };
                Ok(px.rgb)
            })
            .collect()
    }

    pub fn render_image(&self, pose: &CameraPose, mode: RenderMode) -> Result<Image> {
        let k = pose.intrinsics;
        let pixels: Vec<(usize, usize)> = (0..k.height).flat_map(|v| (0..k.width).map(move |u| (u, v))).collect();
        let rays = generate_rays(pose, &pixels, self.spec.bounds)?;
        let rgb = self.render_rays(&rays, mode)?;
        let data = rgb
            .iter()
            .map(|p| p.map(|v| v.to_f32().unwrap_or(f32::NAN).clamp(0.0, 1.0)))
            .collect();
        Image::new(k.width, k.height, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, T::BYTES as u32);
        let a = &self.spec.arch;
        for v in [a.pos_dim, a.dir_dim, a.trunk_depth, a.trunk_width] {
            put_u32(&mut out, v as u32);
        }
        put_u32(&mut out, a.skip_layer.map_or(u32::MAX, |s| s as u32));
        for v in [a.color_hidden, a.phi_hidden, a.kernel_len] {
            put_u32(&mut out, v as u32);
        }
        put_f64(&mut out, a.phi_floor);
        put_f64(&mut out, a.phi_init);
        let e = &self.spec.encoding;
        put_u32(&mut out, e.pos_freqs as u32);
        put_u32(&mut out, e.dir_freqs as u32);
        out.push(e.include_input as u8);
        put_f64(&mut out, e.position_scale);
        put_u32(&mut out, self.spec.samples_per_ray as u32);
        put_f64(&mut out, self.spec.bounds.t_near);
        put_f64(&mut out, self.spec.bounds.t_far);
        out.push(self.spec.smoothing as u8);
        out.push(self.spec.attenuation as u8);
        let tensors = self.params.tensors();
        put_u32(&mut out, tensors.len() as u32);
        for t in tensors {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for &v in t {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Parses a checkpoint of either scalar width; values are converted to
    /// `T`, which is exact when the widths match or when widening.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Model<T>> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let width = r.u32()? as usize;
        if width != 4 && width != 8 {
            return Err(Error::format(path, format!("unsupported scalar width {width}")));
        }
        let mut dims = [0usize; 8];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let arch = FieldArch {
            pos_dim: dims[0],
            dir_dim: dims[1],
            trunk_depth: dims[2],
            trunk_width: dims[3],
            skip_layer: (dims[4] != u32::MAX as usize).then_some(dims[4]),
            color_hidden: dims[5],
            phi_hidden: dims[6],
            kernel_len: dims[7],
            phi_floor: r.f64()?,
            phi_init: r.f64()?,
        };
        let encoding = EncodingConfig {
            pos_freqs: r.u32()? as usize,
            dir_freqs: r.u32()? as usize,
            include_input: r.flag()?,
            position_scale: r.f64()?,
        };
        let samples_per_ray = r.u32()? as usize;
        let bounds = Bounds {
            t_near: r.f64()?,
            t_far: r.f64()?,
        };
        let smoothing = r.flag()?;
        let attenuation = r.flag()?;
        let mut params = FieldParams::<T>::zeros(arch).map_err(|e| Error::format(path, e.to_string()))?;
        let count = r.u32()? as usize;
        let mut tensors = params.tensors_mut();
        if count != tensors.len() {
            return Err(Error::format(
                path,
                format!("{count} tensors, architecture has {}", tensors.len()),
            ));
        }
        for (k, t) in tensors.iter_mut().enumerate() {
            let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
            if len != t.len() {
                return Err(Error::format(
                    path,
                    format!("tensor {k} has {len} values, expected {}", t.len()),
                ));
            }
            for v in t.iter_mut() {
                let raw = r.take(width)?;
                *v = if width == 4 {
                    T::lit(f32::read_le(raw) as f64)
                } else {
                    T::lit(f64::read_le(raw))
                };
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Model {
            spec: ModelSpec {
                arch,
                encoding,
                samples_per_ray,
                bounds,
                smoothing,
                attenuation,
            },
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Model<T>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::read_le(self.take(8)?))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::format(self.path, format!("bad flag byte {b}"))),
        }
    }
}
