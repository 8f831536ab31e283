//! Synthetic underwater imagery: procedural scenes with exact depth, the
//! attenuation-plus-backscatter formation model, and dataset persistence.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{generate_rays, Bounds, CameraPose, Intrinsics, Ray};
use crate::photometry::histogram_equalize;
pub use crate::raster::{DepthMap, Image};

/// Per-channel water coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaterParams {
    /// Direct-signal attenuation, 1 / world unit.
    pub beta_d: [f64; 3],
    /// Backscatter, 1 / world unit.
    pub beta_b: [f64; 3],
    /// Ambient light, in [0, 1].
    pub b_inf: [f64; 3],
}

impl WaterParams {
    /// Coefficients used for the synthetic LLFF-Water scenes.
    pub const PAPER: WaterParams = WaterParams {
        beta_d: [0.22, 0.1, 0.15],
        beta_b: [0.22, 0.1, 0.15],
        b_inf: [0.013, 0.04, 0.01],
    };

    pub fn validate(&self) -> Result<()> {
        let all = self.beta_d.iter().chain(&self.beta_b).chain(&self.b_inf);
        if all.clone().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(
                "water coefficients must be finite and nonnegative".into(),
            ));
        }
        if self.b_inf.iter().any(|&b| b > 1.0) {
            return Err(Error::Config("ambient light must not exceed 1".into()));
        }
        Ok(())
    }

    /// `I = J exp(-beta_d d) + B (1 - exp(-beta_b d))` for a single pixel.
    pub fn form(&self, clean: [f64; 3], depth: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let direct = clean[c] * (-self.beta_d[c] * depth).exp();
            let veil = self.b_inf[c] * (1.0 - (-self.beta_b[c] * depth).exp());
            out[c] = (direct + veil).clamp(0.0, 1.0);
        }
        out
    }
}

/// Degrades a clean image with the formation model, using the stored depth
/// of every pixel (background pixels carry the far bound).
pub fn degrade(clean: &Image, depth: &DepthMap, params: &WaterParams) -> Result<Image> {
    params.validate()?;
    if clean.width != depth.width || clean.height != depth.height {
        return Err(Error::Shape(format!(
            "image {}x{} vs depth {}x{}",
            clean.width, clean.height, depth.width, depth.height
        )));
    }
    if let Some(d) = depth.depth.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::InputDomain(format!("negative depth {d}")));
    }
    let data = clean
        .data
        .iter()
        .zip(&depth.depth)
        .map(|(j, &d)| {
            let i = params.form(j.map(f64::from), d as f64);
            i.map(|v| v as f32)
        })
        .collect();
    Image::new(clean.width, clean.height, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    Cuboid {
        min: [f64; 3],
        max: [f64; 3],
        albedo: [f64; 3],
    },
}

/// Nearest positive hit distance and surface normal.
fn intersect(prim: &Primitive, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    const EPS: f64 = 1e-9;
    match prim {
        Primitive::Sphere { center, radius, .. } => {
            let c = Vector3::from(*center);
            let oc = origin - c;
            let b = oc.dot(dir);
            let disc = b * b - (oc.norm_squared() - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [-b - sq, -b + sq].into_iter().find(|&t| t > EPS)?;
            let normal = (origin + dir * t - c) / *radius;
            Some((t, normal))
        }
        Primitive::Cuboid { min, max, .. } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut axis0, mut axis1) = (0, 0);
            for a in 0..3 {
                if dir[a].abs() < 1e-15 {
                    if origin[a] < min[a] || origin[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / dir[a];
                let (mut near, mut far) = ((min[a] - origin[a]) * inv, (max[a] - origin[a]) * inv);
                if near > far {
                    std::mem::swap(&mut near, &mut far);
                }
                if near > t0 {
                    t0 = near;
                    axis0 = a;
                }
                if far < t1 {
                    t1 = far;
                    axis1 = a;
                }
            }
            if t0 > t1 {
                return None;
            }
            let (t, axis) = if t0 > EPS {
                (t0, axis0)
            } else if t1 > EPS {
                (t1, axis1)
            } else {
                return None;
            };
            let mut normal = Vector3::zeros();
            normal[axis] = -dir[axis].signum();
            Some((t, normal))
        }
    }
}

impl Primitive {
    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Cuboid { albedo, .. } => *albedo,
        }
    }

    pub fn inside_unit_cube(&self) -> bool {
        let inside = |p: [f64; 3]| p.iter().all(|v| (-1.0..=1.0).contains(v));
        match self {
            Primitive::Sphere { center, radius, .. } => {
                inside(center.map(|c| c - radius)) && inside(center.map(|c| c + radius)) && *radius > 0.0
            }
            Primitive::Cuboid { min, max, .. } => inside(*min) && inside(*max) && (0..3).all(|a| min[a] < max[a]),
        }
    }

    /// Distance of a point from the surface.
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => ((p - Vector3::from(*center)).norm() - radius).abs(),
            Primitive::Cuboid { min, max, .. } => {
                let mut outside = 0.0f64;
                let mut inside = f64::INFINITY;
                for a in 0..3 {
                    let d = (min[a] - p[a]).max(p[a] - max[a]);
                    if d > 0.0 {
                        outside += d * d;
                    }
                    inside = inside.min(-d);
                }
                if outside > 0.0 {
                    outside.sqrt()
                } else {
                    inside
                }
            }
        }
    }
}

pub const MIN_TRAIN_VIEWS: usize = 4;

/// Procedural scene: opaque diffuse primitives inside [-1, 1]^3 lit by a
/// fixed world-space directional light, plus the camera trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub bounds: Bounds,
    pub poses: Vec<CameraPose>,
    /// Indices of poses withheld from training.
    pub held_out: Vec<usize>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        if let Some(i) = self.primitives.iter().position(|p| !p.inside_unit_cube()) {
            return Err(Error::Config(format!(
                "primitive {i} leaves the [-1, 1]^3 scene bounds"
            )));
        }
        if let Some(&i) = self.held_out.iter().find(|&&i| i >= self.poses.len()) {
            return Err(Error::Config(format!("held-out pose {i} does not exist")));
        }
        if self.poses.is_empty() {
            return Err(Error::Config("scene has no poses".into()));
        }
        if Vector3::from(self.light_dir).norm() < 1e-12 {
            return Err(Error::Config("light direction must be nonzero".into()));
        }
        Ok(())
    }

    /// [`SceneSpec::validate`] plus the minimum training-view count.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if self.train_indices().len() < MIN_TRAIN_VIEWS {
            return Err(Error::Config(format!("need at least {MIN_TRAIN_VIEWS} training poses")));
        }
        Ok(())
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.poses.len()).filter(|i| !self.held_out.contains(i)).collect()
    }

    /// Nearest hit along a ray: distance and primitive index.
    pub fn trace(&self, ray: &Ray) -> Option<(f64, usize, Vector3<f64>)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(k, p)| intersect(p, &ray.origin, &ray.direction).map(|(t, n)| (t, k, n)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Default desk-scale scene: a backdrop, a floor and five colored
    /// objects, seen by `n_train + n_test` cameras on an arc of radius 3.
    pub fn desk_default(size: usize, n_train: usize, n_test: usize) -> Result<SceneSpec> {
        let sphere = |c: [f64; 3], r: f64, a: [f64; 3]| Primitive::Sphere {
            center: c,
            radius: r,
            albedo: a,
        };
        let cuboid = |min: [f64; 3], max: [f64; 3], a: [f64; 3]| Primitive::Cuboid { min, max, albedo: a };
        let primitives = vec![
            cuboid([-1.0, -1.0, -1.0], [1.0, 1.0, -0.85], [0.78, 0.74, 0.66]),
            cuboid([-1.0, -1.0, -0.85], [1.0, -0.8, 1.0], [0.52, 0.46, 0.36]),
            sphere([-0.45, -0.45, 0.05], 0.35, [0.92, 0.16, 0.12]),
            cuboid([0.15, -0.8, -0.5], [0.65, -0.2, 0.0], [0.16, 0.78, 0.28]),
            sphere([0.4, 0.05, 0.4], 0.25, [0.14, 0.32, 0.92]),
            sphere([-0.25, 0.3, -0.45], 0.3, [0.96, 0.86, 0.22]),
            sphere([0.55, 0.5, -0.55], 0.2, [0.07, 0.07, 0.09]),
        ];
        let f = size as f64 * 100.0 / 64.0;
        let c = (size as f64 - 1.0) / 2.0;
        let intrinsics = Intrinsics {
            fx: f,
            fy: f,
            cx: c,
            cy: c,
            width: size,
            height: size,
        };
        let total = n_train + n_test;
        let target = Vector3::new(0.0, -0.15, 0.0);
        let max_angle = 35f64.to_radians();
        let poses = (0..total)
            .map(|k| {
                let s = if total > 1 { k as f64 / (total - 1) as f64 } else { 0.5 };
                let theta = -max_angle + 2.0 * max_angle * s;
                let eye = Vector3::new(3.0 * theta.sin(), 0.7, 3.0 * theta.cos());
                CameraPose::look_at(eye, target, Vector3::y(), intrinsics)
            })
            .collect::<Result<Vec<_>>>()?;
        // Spread held-out views evenly through the arc, never at its ends.
        let held_out = (0..n_test)
            .map(|j| ((j as f64 + 0.5) * total as f64 / n_test as f64).floor() as usize)
            .map(|i| i.clamp(1, total.saturating_sub(2)))
            .collect();
        let scene = SceneSpec {
            primitives,
            background: [0.1, 0.2, 0.3],
            light_dir: [0.35, 0.8, 0.5],
            ambient: 0.3,
            bounds: Bounds {
                t_near: 1.0,
                t_far: 5.0,
            },
            poses,
            held_out,
        };
        scene.validate_for_training()?;
        Ok(scene)
    }
}

/// Clean rendering by analytic ray casting: nearest-hit Lambertian shading
/// and exact hit distance. Misses get the background color and the far
/// bound as an invalid depth.
pub fn render_clean(scene: &SceneSpec, pose: &CameraPose) -> Result<(Image, DepthMap)> {
    scene.validate()?;
    let k = pose.intrinsics;
    let pixels: Vec<(usize, usize)> = (0..k.height).flat_map(|v| (0..k.width).map(move |u| (u, v))).collect();
    let rays = generate_rays(pose, &pixels, scene.bounds)?;
    let light = Vector3::from(scene.light_dir).normalize();
    let mut data = Vec::with_capacity(rays.len());
    let mut depth = Vec::with_capacity(rays.len());
    let mut valid = Vec::with_capacity(rays.len());
    for ray in &rays {
        match scene.trace(ray) {
            Some((t, idx, normal)) => {
                let shade = scene.ambient + (1.0 - scene.ambient) * normal.dot(&light).max(0.0);
                let albedo = scene.primitives[idx].albedo();
                data.push(albedo.map(|a| (a * shade).clamp(0.0, 1.0) as f32));
                depth.push(t as f32);
                valid.push(true);
            }
            None => {
                data.push(scene.background.map(|b| b as f32));
                depth.push(scene.bounds.t_far as f32);
                valid.push(false);
            }
        }
    }
    Ok((
        Image::new(k.width, k.height, data)?,
        DepthMap::new(k.width, k.height, depth, valid)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub index: usize,
    pub pose: CameraPose,
    pub clean: String,
    pub degraded: String,
    pub equalized: String,
    pub depth: String,
}

/// `manifest.json` at the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub bounds: Bounds,
    pub water: WaterParams,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub views: Vec<ViewRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// One view with all four image kinds in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub pose: CameraPose,
    pub clean: Image,
    pub degraded: Image,
    pub equalized: Image,
    pub depth: DepthMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub views: Vec<View>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let views = manifest
            .views
            .iter()
            .map(|v| {
                Ok(View {
                    pose: v.pose.clone(),
                    clean: Image::load_png(&root.join(&v.clean))?,
                    degraded: Image::load_png(&root.join(&v.degraded))?,
                    equalized: Image::load_png(&root.join(&v.equalized))?,
                    depth: DepthMap::load_pfm(&root.join(&v.depth))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            views,
        })
    }

    pub fn train_views(&self) -> impl Iterator<Item = &View> {
        self.manifest.train.iter().map(|&i| &self.views[i])
    }
}

/// Renders, degrades and equalizes every pose of the scene and writes the
/// images, depth maps and manifest to `out_dir`. Images are quantized to
/// 8 bits before the next stage consumes them, so every stored artifact can
/// be recomputed exactly from the ones it was derived from.
pub fn make_dataset(scene: &SceneSpec, water: &WaterParams, out_dir: &Path, seed: u64) -> Result<Dataset> {
    scene.validate()?;
    water.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    let mut views = Vec::new();
    for (index, pose) in scene.poses.iter().enumerate() {
        let (clean, depth) = render_clean(scene, pose)?;
        let clean = clean.quantized();
        let degraded = degrade(&clean, &depth, water)?.quantized();
        let equalized = histogram_equalize(&degraded)?.quantized();
        let record = ViewRecord {
            index,
            pose: pose.clone(),
            clean: format!("clean_{index:03}.png"),
            degraded: format!("degraded_{index:03}.png"),
            equalized: format!("he_{index:03}.png"),
            depth: format!("depth_{index:03}.pfm"),
        };
        clean.save_png(&out_dir.join(&record.clean))?;
        degraded.save_png(&out_dir.join(&record.degraded))?;
        equalized.save_png(&out_dir.join(&record.equalized))?;
        depth.save_pfm(&out_dir.join(&record.depth))?;
        records.push(record);
        views.push(View {
            pose: pose.clone(),
            clean,
            degraded,
            equalized,
            depth,
        });
    }
    let first = &scene.poses[0];
    let manifest = Manifest {
        format_version: 1,
        seed,
        width: first.intrinsics.width,
        height: first.intrinsics.height,
        bounds: scene.bounds,
        water: *water,
        train: scene.train_indices(),
        test: scene.held_out.clone(),
        views: records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(Dataset {
        root: out_dir.to_path_buf(),
        manifest,
        views,
    })
}
