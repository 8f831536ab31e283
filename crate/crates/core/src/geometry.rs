//! Pinhole cameras, ray generation, stratified sampling and frequency encoding.
//!
//! Conventions: camera frame is x right, y down, z forward. Pixel `(u, v)`
//! has its center at image coordinate `(u, v)`, so the principal point maps
//! to the optical axis. Rotations are world-from-camera.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be nonzero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    pub intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, intrinsics: Intrinsics) -> Result<Self> {
        intrinsics.validate()?;
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho_err > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "rotation is not a proper rotation (orthogonality error {ortho_err:.3e}, det {det:.6})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
            intrinsics,
        })
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, intrinsics: Intrinsics) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("up is parallel to the viewing direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye, intrinsics)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn center(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (world - self.translation)
    }

    /// Image coordinates and camera-frame depth of a world point, if it is
    /// in front of the camera.
    pub fn project(&self, world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let p = self.to_camera(world);
        if p.z <= 1e-12 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy, p.z))
    }

    /// Unit world-space direction through image coordinate `(u, v)`.
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        (self.rotation * cam).normalize()
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn to_row_major(&self) -> [[f64; 4]; 3] {
        let mut m = [[0.0; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = self.rotation[(r, c)];
            }
            row[3] = self.translation[r];
        }
        m
    }

    pub fn from_row_major(m: &[[f64; 4]; 3], intrinsics: Intrinsics) -> Result<Self> {
        let rotation = Matrix3::from_fn(|r, c| m[r][c]);
        let translation = Vector3::new(m[0][3], m[1][3], m[2][3]);
        Self::new(rotation, translation, intrinsics)
    }
}

/// Serialized form of a pose: row-major world-from-camera `[R | t]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseRecord {
    pub world_from_camera: [[f64; 4]; 3],
    pub intrinsics: Intrinsics,
}

impl TryFrom<PoseRecord> for CameraPose {
    type Error = Error;

    fn try_from(r: PoseRecord) -> Result<Self> {
        CameraPose::from_row_major(&r.world_from_camera, r.intrinsics)
    }
}

impl From<CameraPose> for PoseRecord {
    fn from(p: CameraPose) -> Self {
        PoseRecord {
            world_from_camera: p.to_row_major(),
            intrinsics: p.intrinsics,
        }
    }
}

/// Near and far integration bounds along every ray of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub t_near: f64,
    pub t_far: f64,
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_near >= 0.0 && self.t_near < self.t_far && self.t_far.is_finite()) {
            return Err(Error::Config(format!(
                "invalid ray bounds [{}, {}]",
                self.t_near, self.t_far
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// One ray per pixel, through the pixel center.
pub fn generate_rays(pose: &CameraPose, pixels: &[(usize, usize)], bounds: Bounds) -> Result<Vec<Ray>> {
    bounds.validate()?;
    let k = &pose.intrinsics;
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= k.width || v >= k.height {
                return Err(Error::InputDomain(format!(
                    "pixel ({u}, {v}) outside {}x{} image",
                    k.width, k.height
                )));
            }
            Ok(Ray {
                origin: pose.center(),
                direction: pose.pixel_direction(u as f64, v as f64),
                t_near: bounds.t_near,
                t_far: bounds.t_far,
            })
        })
        .collect()
}

/// Sample parameters along a single ray.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub deltas: Vec<f64>,
}

/// Splits `[t_near, t_far]` into `n` equal bins and draws one sample per bin.
/// Without a random source every sample sits at its bin midpoint.
pub fn stratified_sample<R: Rng + ?Sized>(ray: &Ray, n: usize, rng: Option<&mut R>) -> Result<RaySamples> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 samples per ray, got {n}")));
    }
    let width = (ray.t_far - ray.t_near) / n as f64;
    let t: Vec<f64> = match rng {
        Some(rng) => (0..n)
            .map(|i| {
                let u: f64 = rng.sample(Open01);
                ray.t_near + (i as f64 + u) * width
            })
            .collect(),
        None => (0..n).map(|i| ray.t_near + (i as f64 + 0.5) * width).collect(),
    };
    let mut deltas: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(ray.t_far - t[n - 1]);
    Ok(RaySamples { t, deltas })
}

/// Appends `[sin(2^k pi x), cos(2^k pi x)]` for `k = 0..num_freqs`, after an
/// optional copy of `x`.
pub fn positional_encode<T: Scalar>(x: &[T], num_freqs: usize, include_input: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(encoded_len(x.len(), num_freqs, include_input));
    encode_into(x, num_freqs, include_input, &mut out);
    out
}

pub fn encoded_len(dim: usize, num_freqs: usize, include_input: bool) -> usize {
    dim * (include_input as usize + 2 * num_freqs)
}

fn encode_into<T: Scalar>(x: &[T], num_freqs: usize, include_input: bool, out: &mut Vec<T>) {
    if include_input {
        out.extend_from_slice(x);
    }
    let pi = T::lit(std::f64::consts::PI);
    let mut scale = pi;
    for _ in 0..num_freqs {
        out.extend(x.iter().map(|&v| (scale * v).sin()));
        out.extend(x.iter().map(|&v| (scale * v).cos()));
        scale = scale + scale;
    }
}

/// Encoder settings for sample positions and view directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub include_input: bool,
    /// Multiplier applied to world positions before encoding, so that every
    /// sampled point lands in [-1, 1]^3.
    pub position_scale: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            pos_freqs: 10,
            dir_freqs: 4,
            include_input: true,
            position_scale: 1.0,
        }
    }
}

impl EncodingConfig {
    pub fn pos_dim(&self) -> usize {
        encoded_len(3, self.pos_freqs, self.include_input)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(3, self.dir_freqs, self.include_input)
    }
}

/// Samples and encoded features for a batch of rays, flattened ray-major.
#[derive(Debug, Clone)]
pub struct SampleBatch<T> {
    pub n_rays: usize,
    pub n_samples: usize,
    pub t: Vec<f64>,
    pub deltas: Vec<T>,
    pub points: Vec<Vector3<f64>>,
    /// `(n_rays * n_samples) x pos_dim`
    pub encoded_pos: Array2<T>,
    /// `(n_rays * n_samples) x dir_dim`, one direction repeated per sample.
    pub encoded_dir: Array2<T>,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn build<R: Rng + ?Sized>(
        rays: &[Ray],
        n_samples: usize,
        mut rng: Option<&mut R>,
        enc: &EncodingConfig,
    ) -> Result<Self> {
        let n_rays = rays.len();
        let total = n_rays * n_samples;
        let mut t = Vec::with_capacity(total);
        let mut deltas = Vec::with_capacity(total);
        let mut points = Vec::with_capacity(total);
        let mut pos = Vec::with_capacity(total * enc.pos_dim());
        let mut dir = Vec::with_capacity(total * enc.dir_dim());
        let mut dir_row = Vec::with_capacity(enc.dir_dim());
        for ray in rays {
            let s = stratified_sample(ray, n_samples, rng.as_deref_mut())?;
            dir_row.clear();
            let d = [
                T::lit(ray.direction.x),
                T::lit(ray.direction.y),
                T::lit(ray.direction.z),
            ];
            encode_into(&d, enc.dir_freqs, enc.include_input, &mut dir_row);
            for (&ti, &di) in s.t.iter().zip(&s.deltas) {
                let p = ray.at(ti);
                let scaled = [
                    T::lit(p.x * enc.position_scale),
                    T::lit(p.y * enc.position_scale),
                    T::lit(p.z * enc.position_scale),
                ];
                encode_into(&scaled, enc.pos_freqs, enc.include_input, &mut pos);
                dir.extend_from_slice(&dir_row);
                t.push(ti);
                deltas.push(T::lit(di));
                points.push(p);
            }
        }
        let encoded_pos =
            Array2::from_shape_vec((total, enc.pos_dim()), pos).map_err(|e| Error::Shape(e.to_string()))?;
        let encoded_dir =
            Array2::from_shape_vec((total, enc.dir_dim()), dir).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            n_rays,
            n_samples,
            t,
            deltas,
            points,
            encoded_pos,
            encoded_dir,
        })
    }

    pub fn ray_deltas(&self, ray: usize) -> &[T] {
        &self.deltas[ray * self.n_samples..(ray + 1) * self.n_samples]
    }
}

/// Largest absolute coordinate reached by any ray segment `[t_near, t_far]`
/// cast from the given poses.
pub fn sampled_extent(poses: &[CameraPose], bounds: Bounds) -> f64 {
    let mut extent = 0.0f64;
    for pose in poses {
        let k = pose.intrinsics;
        for v in 0..k.height {
            for u in 0..k.width {
                let d = pose.pixel_direction(u as f64, v as f64);
                for t in [bounds.t_near, bounds.t_far] {
                    let p = pose.center() + d * t;
                    extent = extent.max(p.amax());
                }
            }
        }
    }
    extent
}
