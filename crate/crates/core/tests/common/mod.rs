//! Independent oracles and finite-difference checkers shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code, clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use waterhe::field::{Field, FieldArch, FieldOutputGrad, FieldParams};
use waterhe::geometry::{Bounds, EncodingConfig, Ray};
use waterhe::model::ModelSpec;
use waterhe::photometry::{reconstruction_loss, sinkhorn_loss, SinkhornConfig};
use waterhe::renderer::{
    attenuated_transmittance, batch_average_smooth, render_attenuated, render_backward, render_standard,
    smooth_backward, transmittance, Rgb,
};
use waterhe::trainer::{loss_and_grad, RayBatch, TrainConfig};
use waterhe::waterform::{make_dataset, Dataset, SceneSpec, WaterParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference directional derivative of `f` at `x` along `dir`
/// compared with `analytic`; returns the relative error.
pub fn directional_error(f: impl Fn(&[f64]) -> f64, x: &[f64], dir: &[f64], analytic: f64, h: f64) -> f64 {
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * d).collect() };
    let fd = (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h);
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8)
}

pub fn random_dir(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.into_iter().map(|a| a / norm).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn flatten(p: &FieldParams<f64>) -> Vec<f64> {
    p.tensors().concat()
}

pub fn unflatten(template: &FieldParams<f64>, flat: &[f64]) -> FieldParams<f64> {
    let mut p = template.clone();
    let mut off = 0;
    for t in p.tensors_mut() {
        t.copy_from_slice(&flat[off..off + t.len()]);
        off += t.len();
    }
    p
}

pub fn tiny_arch(rng: &mut ChaCha8Rng) -> FieldArch {
    let depth = rng.random_range(2..5);
    FieldArch {
        pos_dim: rng.random_range(3..9),
        dir_dim: rng.random_range(2..6),
        trunk_depth: depth,
        trunk_width: rng.random_range(4..10),
        skip_layer: (depth > 2).then(|| rng.random_range(1..depth)),
        color_hidden: rng.random_range(3..7),
        phi_hidden: rng.random_range(3..7),
        kernel_len: 3,
        phi_floor: 0.3,
        phi_init: 0.95,
    }
}

/// Field parameters with random (nonzero) biases and heads so that every
/// output actually depends on every tensor.
pub fn random_params(arch: FieldArch, rng: &mut ChaCha8Rng) -> FieldParams<f64> {
    let mut p = FieldParams::<f64>::init(arch, rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

/// Directional finite-difference check of the field network against its
/// backward pass, for one random configuration. `None` when the sampled
/// point sits too close to a ReLU kink to be checked reliably.
pub fn field_gradient_error(seed: u64) -> Option<f64> {
    let mut rng = rng(seed);
    let arch = tiny_arch(&mut rng);
    let n = rng.random_range(1..6);
    let params = random_params(arch, &mut rng);
    let pos = Array2::from_shape_fn((n, arch.pos_dim), |_| rng.random_range(-1.0..1.0));
    let dir = Array2::from_shape_fn((n, arch.dir_dim), |_| rng.random_range(-1.0..1.0));
    let w = FieldOutputGrad {
        sigma: ndarray::Array1::from_shape_fn(n, |_| rng.random_range(-1.0..1.0)),
        color: Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)),
        phi: Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)),
    };
    let objective = |flat: &[f64]| -> f64 {
        let mut f = Field::new(unflatten(&params, flat));
        let out = f.forward(pos.view(), dir.view()).unwrap();
        (&out.sigma * &w.sigma).sum() + (&out.color * &w.color).sum() + (&out.phi * &w.phi).sum()
    };
    let mut field = Field::new(params.clone());
    field.forward(pos.view(), dir.view()).unwrap();
    if field.min_relu_margin().unwrap() < 1e-4 {
        return None;
    }
    let grads = field.backward(&w).unwrap();
    let x = flatten(&params);
    let d = random_dir(&mut rng, x.len());
    Some(directional_error(objective, &x, &d, dot(&flatten(&grads), &d), 1e-6))
}

pub struct RayInputs {
    pub sigma: Vec<f64>,
    pub delta: Vec<f64>,
    pub color: Vec<Rgb<f64>>,
    pub phi: Vec<Rgb<f64>>,
}

pub fn random_ray_inputs(rng: &mut ChaCha8Rng, n: usize) -> RayInputs {
    RayInputs {
        sigma: (0..n).map(|_| rng.random_range(0.05..3.0)).collect(),
        delta: (0..n).map(|_| rng.random_range(0.01..0.5)).collect(),
        color: (0..n).map(|_| [(); 3].map(|_| rng.random_range(0.0..1.0))).collect(),
        phi: (0..n).map(|_| [(); 3].map(|_| rng.random_range(0.4..0.97))).collect(),
    }
}

fn pack(r: &RayInputs, with_phi: bool) -> Vec<f64> {
    let mut x = r.sigma.clone();
    x.extend(r.color.iter().flatten());
    if with_phi {
        x.extend(r.phi.iter().flatten());
    }
    x
}

fn unpack(x: &[f64], n: usize, delta: &[f64], with_phi: bool) -> RayInputs {
    let rgb = |s: &[f64]| -> Vec<Rgb<f64>> { s.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() };
    RayInputs {
        sigma: x[..n].to_vec(),
        delta: delta.to_vec(),
        color: rgb(&x[n..4 * n]),
        phi: if with_phi { rgb(&x[4 * n..7 * n]) } else { Vec::new() },
    }
}

/// Finite-difference check of one render path (standard or attenuated)
/// with respect to densities, colors and, when attenuated, attenuation.
pub fn render_gradient_error(seed: u64, attenuated: bool) -> f64 {
    let mut rng = rng(seed);
    let n = rng.random_range(1..24);
    let r = random_ray_inputs(&mut rng, n);
    let g: Rgb<f64> = [(); 3].map(|_| rng.random_range(-1.0..1.0));
    let render = |x: &[f64]| -> f64 {
        let u = unpack(x, n, &r.delta, attenuated);
        let px = if attenuated {
            render_attenuated(&u.sigma, &u.delta, &u.color, &u.phi).unwrap()
        } else {
            render_standard(&u.sigma, &u.delta, &u.color).unwrap()
        };
        (0..3).map(|c| g[c] * px.rgb[c]).sum()
    };
    let phis = attenuated.then_some(&r.phi[..]);
    let grad = render_backward(&r.sigma, &r.delta, &r.color, phis, g).unwrap();
    let mut analytic = grad.sigma.clone();
    analytic.extend(grad.color.iter().flatten());
    if attenuated {
        analytic.extend(grad.phi.iter().flatten());
    }
    let x = pack(&r, attenuated);
    let d = random_dir(&mut rng, x.len());
    directional_error(render, &x, &d, dot(&analytic, &d), 1e-6)
}

/// Finite-difference check of the attenuated render driven by the
/// batch-averaged, convolved attenuation profile: the objective is a random
/// weighting of every ray's pixel, differentiated with respect to the raw
/// per-ray attenuation values and the smoothing kernel.
pub fn smoothing_gradient_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let n_rays = rng.random_range(1..6);
    let n = rng.random_range(2..12);
    let klen = [1, 3, 5][rng.random_range(0..3)];
    let floor = 0.3;
    let rays: Vec<RayInputs> = (0..n_rays).map(|_| random_ray_inputs(&mut rng, n)).collect();
    let phi: Vec<Rgb<f64>> = rays.iter().flat_map(|r| r.phi.clone()).collect();
    let kernel: Vec<f64> = (0..klen).map(|_| rng.random_range(0.05..0.6)).collect();
    let g: Vec<Rgb<f64>> = (0..n_rays)
        .map(|_| [(); 3].map(|_| rng.random_range(-1.0..1.0)))
        .collect();

    let objective = |x: &[f64]| -> f64 {
        let phi: Vec<Rgb<f64>> = x[..3 * n * n_rays].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let kernel = &x[3 * n * n_rays..];
        let (s, _) = batch_average_smooth(&phi, n, kernel, floor).unwrap();
        rays.iter()
            .zip(&g)
            .map(|(r, g)| {
                let px = render_attenuated(&r.sigma, &r.delta, &r.color, &s.profile).unwrap();
                (0..3).map(|c| g[c] * px.rgb[c]).sum::<f64>()
            })
            .sum()
    };

    let (s, tape) = batch_average_smooth(&phi, n, &kernel, floor).unwrap();
    let mut d_profile = vec![[0.0; 3]; n];
    for (r, g) in rays.iter().zip(&g) {
        let grad = render_backward(&r.sigma, &r.delta, &r.color, Some(&s.profile), *g).unwrap();
        for i in 0..n {
            for c in 0..3 {
                d_profile[i][c] += grad.phi[i][c];
            }
        }
    }
    let sg = smooth_backward(&tape, &kernel, &d_profile).unwrap();
    let mut analytic: Vec<f64> = Vec::new();
    for _ in 0..n_rays {
        analytic.extend(sg.per_sample.iter().flatten());
    }
    analytic.extend(&sg.kernel);
    let mut x: Vec<f64> = phi.iter().flatten().copied().collect();
    x.extend(&kernel);
    let d = random_dir(&mut rng, x.len());
    directional_error(objective, &x, &d, dot(&analytic, &d), 1e-6)
}

pub fn recon_gradient_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let n = rng.random_range(1..40);
    let px = |rng: &mut ChaCha8Rng| -> Vec<Rgb<f64>> {
        (0..n).map(|_| [(); 3].map(|_| rng.random_range(0.0..1.0))).collect()
    };
    let (a, b) = (px(&mut rng), px(&mut rng));
    let to_px = |x: &[f64]| -> Vec<Rgb<f64>> { x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() };
    let objective = |x: &[f64]| reconstruction_loss(&to_px(x), &b).unwrap().0;
    let (_, grad) = reconstruction_loss(&a, &b).unwrap();
    let x: Vec<f64> = a.iter().flatten().copied().collect();
    let analytic: Vec<f64> = grad.iter().flatten().copied().collect();
    let d = random_dir(&mut rng, x.len());
    directional_error(objective, &x, &d, dot(&analytic, &d), 1e-6)
}

/// Sinkhorn settings converged tightly enough for finite differences.
pub fn tight_sinkhorn() -> SinkhornConfig {
    SinkhornConfig {
        epsilon: 0.05,
        max_iters: 200_000,
        tol: 1e-14,
    }
}

/// Finite-difference check of the divergence between soft histograms with
/// respect to the pixel values of the first set. Pixels are kept away from
/// bin centers, where the soft histogram has kinks.
pub fn sinkhorn_gradient_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let bins = rng.random_range(4..17);
    let n = rng.random_range(5..40);
    let spacing = 1.0 / (bins - 1) as f64;
    let away_from_centers = |rng: &mut ChaCha8Rng| loop {
        let v: f64 = rng.random_range(0.0..1.0);
        let frac = (v / spacing).fract();
        if frac > 0.01 && frac < 0.99 {
            return v;
        }
    };
    let a: Vec<Rgb<f64>> = (0..n).map(|_| [(); 3].map(|_| away_from_centers(&mut rng))).collect();
    let b: Vec<Rgb<f64>> = (0..n + 3)
        .map(|_| [(); 3].map(|_| rng.random_range(0.0..1.0)))
        .collect();
    let cfg = tight_sinkhorn();
    let to_px = |x: &[f64]| -> Vec<Rgb<f64>> { x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect() };
    let objective = |x: &[f64]| sinkhorn_loss(&to_px(x), &b, bins, &cfg).unwrap().0;
    let (_, grad, report) = sinkhorn_loss(&a, &b, bins, &cfg).unwrap();
    assert!(report.converged, "tight Sinkhorn did not converge: {report:?}");
    let x: Vec<f64> = a.iter().flatten().copied().collect();
    let analytic: Vec<f64> = grad.iter().flatten().copied().collect();
    let d = random_dir(&mut rng, x.len());
    directional_error(objective, &x, &d, dot(&analytic, &d), 1e-6)
}

/// Finite-difference check of a whole training objective (attenuated and
/// restored renders, smoothing, reconstruction and Sinkhorn terms) with
/// respect to every network weight, on a tiny random model and batch.
pub fn training_loss_gradient_error(seed: u64, smoothing: bool) -> Option<f64> {
    let mut rng = rng(seed);
    let enc = EncodingConfig {
        pos_freqs: 2,
        dir_freqs: 1,
        include_input: true,
        position_scale: 0.3,
    };
    let mut arch = tiny_arch(&mut rng);
    arch.pos_dim = enc.pos_dim();
    arch.dir_dim = enc.dir_dim();
    let spec = ModelSpec {
        arch,
        encoding: enc,
        samples_per_ray: rng.random_range(3..8),
        bounds: Bounds {
            t_near: 0.5,
            t_far: 3.0,
        },
        smoothing,
        attenuation: true,
    };
    let cfg = TrainConfig {
        alpha: rng.random_range(0.1..2.0),
        histogram_bins: 8,
        sinkhorn: tight_sinkhorn(),
        ..TrainConfig::default()
    };
    let n_rays = rng.random_range(2..6);
    let rays: Vec<Ray> = (0..n_rays)
        .map(|_| Ray {
            origin: Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 2.0),
            direction: Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), -1.0).normalize(),
            t_near: 0.5,
            t_far: 3.0,
        })
        .collect();
    let px = |rng: &mut ChaCha8Rng| -> Vec<Rgb<f64>> {
        (0..n_rays)
            .map(|_| [(); 3].map(|_| rng.random_range(0.0..1.0)))
            .collect()
    };
    let batch = RayBatch {
        reference: px(&mut rng),
        equalized: px(&mut rng),
        rays,
    };
    let params = random_params(arch, &mut rng);
    let eval = |p: FieldParams<f64>| {
        let mut field = Field::new(p);
        let r = loss_and_grad(&mut field, &spec, &batch, &cfg, None::<&mut ChaCha8Rng>).unwrap();
        (r, field)
    };
    let (res, _) = eval(params.clone());
    assert!(res.sinkhorn_converged);
    // Reject configurations near a ReLU kink.
    let mut probe = Field::new(params.clone());
    let samples =
        waterhe::geometry::SampleBatch::<f64>::build(&batch.rays, spec.samples_per_ray, None::<&mut ChaCha8Rng>, &enc)
            .unwrap();
    probe
        .forward(samples.encoded_pos.view(), samples.encoded_dir.view())
        .unwrap();
    if probe.min_relu_margin().unwrap() < 1e-4 {
        return None;
    }
    let objective = |flat: &[f64]| eval(unflatten(&params, flat)).0.loss.total;
    let x = flatten(&params);
    let d = random_dir(&mut rng, x.len());
    Some(directional_error(
        objective,
        &x,
        &d,
        dot(&flatten(&res.grads), &d),
        1e-6,
    ))
}

/// Exact optimal transport cost between two histograms on the same sorted
/// support under squared distance, via the monotone (quantile) coupling.
pub fn exact_ot_1d(p: &[f64], q: &[f64], centers: &[f64]) -> f64 {
    let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
    let (mut i, mut j) = (0, 0);
    let (mut ri, mut rj) = (p[0] / sp, q[0] / sq);
    let mut cost = 0.0;
    loop {
        let m = ri.min(rj);
        cost += m * (centers[i] - centers[j]).powi(2);
        ri -= m;
        rj -= m;
        if ri <= 1e-15 {
            i += 1;
            if i == p.len() {
                break;
            }
            ri += p[i] / sp;
        }
        if rj <= 1e-15 {
            j += 1;
            if j == q.len() {
                break;
            }
            rj += q[j] / sq;
        }
    }
    cost
}

/// Default procedural scene at reduced resolution, written to `dir`.
pub fn small_dataset(dir: &Path, size: usize, train: usize, test: usize) -> Dataset {
    let scene = SceneSpec::desk_default(size, train, test).unwrap();
    make_dataset(&scene, &WaterParams::PAPER, dir, 0).unwrap()
}

/// A configuration that trains in well under a second per step on tiny
/// datasets.
pub fn tiny_train_config(iters: usize) -> TrainConfig {
    TrainConfig {
        rays_per_batch: 32,
        samples_per_ray: 12,
        total_iters: iters,
        pos_freqs: 4,
        dir_freqs: 2,
        trunk_depth: 3,
        trunk_width: 16,
        skip_layer: Some(2),
        color_hidden: 8,
        phi_hidden: 8,
        histogram_bins: 16,
        ..TrainConfig::desk()
    }
}

pub struct OtTrial {
    /// `|S(p, q) - W(p, q)| / W(p, q)`, worst channel.
    pub rel_err: f64,
    /// `|S(p, q) - W(p, q)| / (epsilon ln bins)`, worst channel. The
    /// divergence is within `epsilon * max(H(p), H(q))` of the exact cost,
    /// so this never exceeds one for a converged solve.
    pub bias_ratio: f64,
    /// Largest `|S(p, p)|` over both histograms.
    pub self_divergence: f64,
    /// `|S(p, q) - S(q, p)|`.
    pub asymmetry: f64,
    pub converged: bool,
}

/// Uniform draw from the probability simplex.
pub fn random_masses(rng: &mut ChaCha8Rng, bins: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..bins).map(|_| -rng.random_range(1e-12f64..1.0).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Simplex draw with roughly a fifth of the bins empty.
pub fn sparse_masses(rng: &mut ChaCha8Rng, bins: usize) -> Vec<f64> {
    let mut m = random_masses(rng, bins);
    for v in m.iter_mut() {
        if rng.random_bool(0.2) {
            *v = 0.0;
        }
    }
    let s: f64 = m.iter().sum();
    if s == 0.0 {
        return vec![1.0 / bins as f64; bins];
    }
    m.into_iter().map(|v| v / s).collect()
}

pub const OT_EPSILON: f64 = 1e-3;

/// One random 8-bin histogram pair compared with the exact 1-D transport
/// cost at a small entropic regularization.
pub fn sinkhorn_ot_trial(seed: u64) -> OtTrial {
    use waterhe::photometry::{bin_centers, sinkhorn_divergence, IntensityHistogram};
    let mut rng = rng(seed);
    let bins = 8;
    let hist = |rng: &mut ChaCha8Rng| IntensityHistogram::<f64> {
        bins,
        masses: [
            random_masses(rng, bins),
            random_masses(rng, bins),
            random_masses(rng, bins),
        ],
    };
    let (p, q) = (hist(&mut rng), hist(&mut rng));
    let cfg = SinkhornConfig {
        epsilon: OT_EPSILON,
        max_iters: 500_000,
        tol: 1e-10,
    };
    let pq = sinkhorn_divergence(&p, &q, &cfg).unwrap();
    let qp = sinkhorn_divergence(&q, &p, &cfg).unwrap();
    let pp = sinkhorn_divergence(&p, &p, &cfg).unwrap();
    let qq = sinkhorn_divergence(&q, &q, &cfg).unwrap();
    let centers = bin_centers(bins);
    let (mut rel_err, mut bias_ratio) = (0.0f64, 0.0f64);
    for c in 0..3 {
        let exact = exact_ot_1d(&p.masses[c], &q.masses[c], &centers);
        let gap = (pq.per_channel[c] - exact).abs();
        rel_err = rel_err.max(gap / exact);
        bias_ratio = bias_ratio.max(gap / (OT_EPSILON * (bins as f64).ln()));
    }
    OtTrial {
        rel_err,
        bias_ratio,
        self_divergence: pp.value.abs().max(qq.value.abs()),
        asymmetry: (pq.value - qp.value).abs(),
        converged: pq.report.converged && pp.report.converged && qq.report.converged,
    }
}

/// Random image whose channels vary in how many distinct levels they use,
/// from a handful (many ties) to the full range.
pub fn random_image(rng: &mut ChaCha8Rng, max_side: usize) -> waterhe::raster::Image {
    let (w, h) = (rng.random_range(1..=max_side), rng.random_range(1..=max_side));
    let palettes: Vec<Vec<u8>> = (0..3)
        .map(|_| {
            let k = [1, 2, 5, 40, 256][rng.random_range(0..5)];
            (0..k).map(|_| rng.random::<u8>()).collect()
        })
        .collect();
    let data = (0..w * h)
        .map(|_| [0, 1, 2].map(|c| palettes[c][rng.random_range(0..palettes[c].len())] as f32 / 255.0))
        .collect();
    waterhe::raster::Image::new(w, h, data).unwrap()
}

pub struct HeCheck {
    pub monotone_map: bool,
    pub ranks_preserved: bool,
    pub uniformity_not_worse: bool,
    pub matches_oracle: bool,
}

/// Rank-based equalization written independently of the library: a pixel
/// at level `l` maps to the fraction of non-minimal pixels at or below `l`.
pub fn equalize_oracle(values: &[u8]) -> Vec<f64> {
    let min = *values.iter().min().unwrap();
    let n_min = values.iter().filter(|&&v| v == min).count();
    let n = values.len();
    if n_min == n {
        return values.iter().map(|&v| v as f64 / 255.0).collect();
    }
    values
        .iter()
        .map(|&v| (values.iter().filter(|&&u| u <= v).count() - n_min) as f64 / (n - n_min) as f64)
        .collect()
}

/// Kolmogorov distance between the empirical distribution of `values` and
/// the continuous uniform distribution on [0, 1].
pub fn ks_to_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut gap = 1.0 - v[v.len() - 1];
    let mut i = 0;
    while i < v.len() {
        let x = v[i];
        gap = gap.max((i as f64 / n - x).abs());
        while i < v.len() && v[i] == x {
            i += 1;
        }
        gap = gap.max((i as f64 / n - x).abs());
    }
    gap.max(v[0])
}

pub fn he_check(img: &waterhe::raster::Image) -> HeCheck {
    use waterhe::photometry::{equalization_map, histogram_equalize, level_of, uniformity_gap, LEVELS};
    let out = histogram_equalize(img).unwrap();
    let mut check = HeCheck {
        monotone_map: true,
        ranks_preserved: true,
        uniformity_not_worse: true,
        matches_oracle: true,
    };
    for c in 0..3 {
        let levels: Vec<u8> = img.data.iter().map(|p| level_of(p[c]) as u8).collect();
        let mut counts = [0u64; LEVELS];
        levels.iter().for_each(|&l| counts[l as usize] += 1);
        if let Some(lut) = equalization_map(&counts) {
            check.monotone_map &= lut.windows(2).all(|w| w[0] <= w[1]);
        }
        let eq: Vec<f32> = out.data.iter().map(|p| p[c]).collect();
        for i in 0..levels.len() {
            for j in 0..levels.len() {
                if levels[i] < levels[j] && !(eq[i] < eq[j]) || levels[i] == levels[j] && eq[i] != eq[j] {
                    check.ranks_preserved = false;
                }
            }
        }
        check.uniformity_not_worse &= uniformity_gap(&out, c) <= uniformity_gap(img, c) + 1e-6;
        let oracle = equalize_oracle(&levels);
        check.matches_oracle &= eq.iter().zip(&oracle).all(|(a, b)| (*a as f64 - b).abs() < 1e-6);
    }
    check
}

pub struct FormationLimits {
    /// Images degraded at zero depth that did not come back bit-identical.
    pub zero_depth_mismatches: usize,
    /// Largest `|I - B_inf|` at depths where every `beta * d >= 20`.
    pub far_error: f64,
}

/// Formation-model limits with the given coefficients on random images.
pub fn formation_limits(water: &WaterParams, trials: u64) -> FormationLimits {
    use waterhe::waterform::{degrade, DepthMap};
    let mut out = FormationLimits {
        zero_depth_mismatches: 0,
        far_error: 0.0,
    };
    let beta_min = water
        .beta_d
        .iter()
        .chain(&water.beta_b)
        .copied()
        .fold(f64::INFINITY, f64::min);
    for seed in 0..trials {
        let mut r = rng(seed);
        let img = random_image(&mut r, 12);
        let (w, h) = (img.width, img.height);
        // Zero range is not a valid measured depth, but degrade reads it regardless.
        let zero = DepthMap::new(w, h, vec![0.0; w * h], vec![false; w * h]).unwrap();
        if degrade(&img, &zero, water).unwrap() != img {
            out.zero_depth_mismatches += 1;
        }
        let far: Vec<f32> = (0..w * h)
            .map(|_| (20.0 / beta_min * r.random_range(1.0..3.0)) as f32)
            .collect();
        let far = DepthMap::new(w, h, far, vec![true; w * h]).unwrap();
        for p in degrade(&img, &far, water).unwrap().data {
            for c in 0..3 {
                out.far_error = out.far_error.max((p[c] as f64 - water.b_inf[c]).abs());
            }
        }
        for _ in 0..20 {
            let j = [(); 3].map(|_| r.random_range(0.0..1.0));
            let d = 20.0 / beta_min * r.random_range(1.0..10.0);
            let i = water.form(j, d);
            for c in 0..3 {
                out.far_error = out.far_error.max((i[c] - water.b_inf[c]).abs());
            }
        }
    }
    out
}

/// Whether compositing with unit attenuation reproduces the standard render
/// bit for bit on one random ray.
pub fn unit_attenuation_matches_standard(seed: u64) -> bool {
    let mut r = rng(seed);
    let n = r.random_range(1..=192);
    let mut inputs = random_ray_inputs(&mut r, n);
    // Include empty space and near-opaque samples.
    for s in inputs.sigma.iter_mut() {
        *s = match r.random_range(0..4) {
            0 => 0.0,
            1 => r.random_range(10.0..1e3),
            _ => *s,
        };
    }
    let ones = vec![[1.0; 3]; n];
    let a = render_attenuated(&inputs.sigma, &inputs.delta, &inputs.color, &ones).unwrap();
    let s = render_standard(&inputs.sigma, &inputs.delta, &inputs.color).unwrap();
    let a32 = render_attenuated(
        &to_f32(&inputs.sigma),
        &to_f32(&inputs.delta),
        &rgb_f32(&inputs.color),
        &vec![[1.0f32; 3]; n],
    )
    .unwrap();
    let s32 = render_standard(&to_f32(&inputs.sigma), &to_f32(&inputs.delta), &rgb_f32(&inputs.color)).unwrap();
    a == s && a32 == s32
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn rgb_f32(v: &[Rgb<f64>]) -> Vec<Rgb<f32>> {
    v.iter().map(|c| c.map(|x| x as f32)).collect()
}

/// Largest relative gap between the attenuated transmittance and
/// `T_i * phi^i` (zero-based `i`) for one ray with constant attenuation.
pub fn constant_attenuation_power_law_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=192);
    let inputs = random_ray_inputs(&mut r, n);
    let sigma: Vec<f64> = inputs.sigma.iter().map(|s| s * 0.05).collect();
    let phi = [(); 3].map(|_| r.random_range(0.9..1.0));
    let att = attenuated_transmittance(&sigma, &inputs.delta, &vec![phi; n]).unwrap();
    let plain = transmittance(&sigma, &inputs.delta).unwrap();
    let mut worst = 0.0f64;
    for i in 0..n {
        for c in 0..3 {
            let expect = plain[i] * phi[c].powi(i as i32);
            worst = worst.max((att[i][c] - expect).abs() / expect.abs());
        }
    }
    worst
}
