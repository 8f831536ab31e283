//! The optimization loop: ray batching, dual-path rendering, loss assembly,
//! Adam updates, the learning-rate schedule and checkpointing.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, FieldArch, FieldOutputGrad, FieldParams};
use crate::geometry::{generate_rays, sampled_extent, EncodingConfig, Ray, SampleBatch};
use crate::model::{Model, ModelSpec};
use crate::photometry::{reconstruction_loss, sinkhorn_loss, total_loss, LossReport, SinkhornConfig};
use crate::renderer::{
    batch_average_smooth, render_attenuated, render_backward, render_standard, smooth_backward, Rgb,
};
use crate::scalar::Scalar;
use crate::waterform::{Dataset, MIN_TRAIN_VIEWS};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Keeps large freed buffers on the heap instead of returning them to the
/// OS. Each training step allocates several multi-megabyte activation
/// arrays; with glibc's defaults every one is an mmap/munmap pair, which
/// costs about a fifth of the step time. No-op on other allocators.
pub fn retain_large_allocations() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rays_per_batch: usize,
    pub samples_per_ray: usize,
    pub total_iters: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Weight of the color-distribution loss.
    pub alpha: f64,
    pub seed: u64,
    /// Batch-averaged attenuation smoothing; off is the ablation variant.
    pub smoothing_enabled: bool,
    /// Hold the attenuation at 1, which reduces training to a plain
    /// radiance field.
    pub freeze_attenuation: bool,
    /// Checkpoint every this many iterations; 0 writes only the initial and
    /// final checkpoints.
    pub checkpoint_every: usize,
    pub histogram_bins: usize,
    pub sinkhorn: SinkhornConfig,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub trunk_depth: usize,
    pub trunk_width: usize,
    pub skip_layer: Option<usize>,
    pub color_hidden: usize,
    pub phi_hidden: usize,
    pub kernel_len: usize,
    pub phi_floor: f64,
    pub phi_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = FieldArch::default();
        let enc = EncodingConfig::default();
        Self {
            rays_per_batch: 4096,
            samples_per_ray: 128,
            total_iters: 250_000,
            lr_start: 5e-4,
            lr_end: 5e-6,
            alpha: 5e-4,
            seed: 0,
            smoothing_enabled: true,
            freeze_attenuation: false,
            checkpoint_every: 0,
            histogram_bins: 64,
            sinkhorn: SinkhornConfig::default(),
            pos_freqs: enc.pos_freqs,
            dir_freqs: enc.dir_freqs,
            trunk_depth: arch.trunk_depth,
            trunk_width: arch.trunk_width,
            skip_layer: arch.skip_layer,
            color_hidden: arch.color_hidden,
            phi_hidden: arch.phi_hidden,
            kernel_len: arch.kernel_len,
            phi_floor: arch.phi_floor,
            phi_init: arch.phi_init,
        }
    }
}

impl TrainConfig {
    /// 64x64 synthetic scenes on a single CPU core: a narrower trunk and
    /// smaller batches than the full-scale default, 5k iterations.
    pub fn desk() -> Self {
        Self {
            rays_per_batch: 256,
            samples_per_ray: 64,
            total_iters: 5000,
            trunk_depth: 4,
            trunk_width: 64,
            skip_layer: Some(2),
            color_hidden: 32,
            phi_hidden: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start >= lr_end > 0 (got {} and {})",
                self.lr_start, self.lr_end
            )));
        }
        if self.rays_per_batch == 0 {
            return Err(Error::Config("rays_per_batch must be at least 1".into()));
        }
        if self.samples_per_ray < 2 {
            return Err(Error::Config("samples_per_ray must be at least 2".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be nonnegative", self.alpha)));
        }
        if self.histogram_bins < 2 {
            return Err(Error::Config("histogram_bins must be at least 2".into()));
        }
        if !(self.sinkhorn.epsilon > 0.0) {
            return Err(Error::Config("sinkhorn epsilon must be positive".into()));
        }
        self.arch(&self.encoding(1.0)).validate()
    }

    pub fn encoding(&self, position_scale: f64) -> EncodingConfig {
        EncodingConfig {
            pos_freqs: self.pos_freqs,
            dir_freqs: self.dir_freqs,
            include_input: true,
            position_scale,
        }
    }

    pub fn arch(&self, enc: &EncodingConfig) -> FieldArch {
        FieldArch {
            pos_dim: enc.pos_dim(),
            dir_dim: enc.dir_dim(),
            trunk_depth: self.trunk_depth,
            trunk_width: self.trunk_width,
            skip_layer: self.skip_layer,
            color_hidden: self.color_hidden,
            phi_hidden: self.phi_hidden,
            kernel_len: self.kernel_len,
            phi_floor: self.phi_floor,
            phi_init: self.phi_init,
        }
    }
}

/// `lr_start * (lr_end / lr_start)^(iter / total)`; both endpoints exact.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if cfg.total_iters == 0 || iter == 0 {
        return cfg.lr_start;
    }
    if iter >= cfg.total_iters {
        return cfg.lr_end;
    }
    let frac = iter as f64 / cfg.total_iters as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: FieldParams<T>,
    pub v: FieldParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &FieldParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// state is touched.
pub fn adam_step<T: Scalar>(
    params: &mut FieldParams<T>,
    grads: &FieldParams<T>,
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if params.arch != grads.arch || params.arch != state.m.arch {
        return Err(Error::Shape("gradient layout does not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step += 1;
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let one = T::one();
    let c1 = one - b1.powi(state.step as i32);
    let c2 = one - b2.powi(state.step as i32);
    let eps = T::lit(ADAM_EPS);
    let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
    let moments = state.m.tensors_mut().into_iter().zip(state.v.tensors_mut());
    for ((p, g), (m, v)) in tensors.zip(moments) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rays with their degraded input pixels and the co-located
/// histogram-equalized pixels.
#[derive(Debug, Clone)]
pub struct RayBatch<T> {
    pub rays: Vec<Ray>,
    pub reference: Vec<Rgb<T>>,
    pub equalized: Vec<Rgb<T>>,
}

/// Uniform sampling over every training pixel with a seeded shuffle,
/// reshuffled at each epoch.
#[derive(Debug, Clone)]
pub struct RayBatcher {
    rays: Vec<Ray>,
    reference: Vec<[f32; 3]>,
    equalized: Vec<[f32; 3]>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl RayBatcher {
    pub fn new(dataset: &Dataset, seed: u64) -> Result<Self> {
        let mut rays = Vec::new();
        let mut reference = Vec::new();
        let mut equalized = Vec::new();
        for view in dataset.train_views() {
            let k = view.pose.intrinsics;
            let pixels: Vec<(usize, usize)> = (0..k.height).flat_map(|v| (0..k.width).map(move |u| (u, v))).collect();
            rays.extend(generate_rays(&view.pose, &pixels, dataset.manifest.bounds)?);
            reference.extend_from_slice(&view.degraded.data);
            equalized.extend_from_slice(&view.equalized.data);
        }
        if rays.is_empty() {
            return Err(Error::Config("dataset has no training pixels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..rays.len()).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            rays,
            reference,
            equalized,
            order,
            cursor: 0,
            rng,
        })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn next_batch<T: Scalar>(&mut self, size: usize) -> RayBatch<T> {
        let to_t = |p: &[f32; 3]| p.map(|v| T::lit(v as f64));
        let mut batch = RayBatch {
            rays: Vec::with_capacity(size),
            reference: Vec::with_capacity(size),
            equalized: Vec::with_capacity(size),
        };
        for _ in 0..size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            batch.rays.push(self.rays[i]);
            batch.reference.push(to_t(&self.reference[i]));
            batch.equalized.push(to_t(&self.equalized[i]));
        }
        batch
    }
}

/// Losses of one step and the gradient on every parameter.
#[derive(Debug, Clone)]
pub struct StepResult<T> {
    pub loss: LossReport<T>,
    pub grads: FieldParams<T>,
    pub sinkhorn_converged: bool,
}

/// Loss and gradient for one batch, without updating anything.
pub fn loss_and_grad<T: Scalar, R: rand::Rng + ?Sized>(
    field: &mut Field<T>,
    spec: &ModelSpec,
    batch: &RayBatch<T>,
    cfg: &TrainConfig,
    rng: Option<&mut R>,
) -> Result<StepResult<T>> {
    let n = spec.samples_per_ray;
    let n_rays = batch.rays.len();
    if batch.reference.len() != n_rays || batch.equalized.len() != n_rays {
        return Err(Error::Shape("batch pixels do not match its rays".into()));
    }
    let samples = SampleBatch::<T>::build(&batch.rays, n, rng, &spec.encoding)?;
    let out = field.forward(samples.encoded_pos.view(), samples.encoded_dir.view())?;
    let sigma = out.sigma.as_slice().expect("standard layout");
    let row3 = |a: &ndarray::Array2<T>| -> Vec<Rgb<T>> { a.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect() };
    let color = row3(&out.color);
    let phi = row3(&out.phi);

    let kernel = field.params.kernel.as_slice().expect("standard layout").to_vec();
    let floor = T::lit(spec.arch.phi_floor);
    let smoothed = if spec.attenuation && spec.smoothing {
        Some(batch_average_smooth(&phi, n, &kernel, floor)?)
    } else {
        None
    };
    let ray_phis = |r: usize| -> Option<&[Rgb<T>]> {
        if !spec.attenuation {
            None
        } else if let Some((s, _)) = &smoothed {
            Some(&s.profile)
        } else {
            Some(&phi[r * n..(r + 1) * n])
        }
    };

    let mut attenuated = Vec::with_capacity(n_rays);
    let mut restored = Vec::with_capacity(n_rays);
    for r in 0..n_rays {
        let span = r * n..(r + 1) * n;
        let (s, d, c) = (&sigma[span.clone()], samples.ray_deltas(r), &color[span]);
        let att = match ray_phis(r) {
            Some(p) => render_attenuated(s, d, c, p)?,
            None => render_standard(s, d, c)?,
        };
        attenuated.push(att.rgb);
        restored.push(render_standard(s, d, c)?.rgb);
    }

    let (l_recon, g_recon) = reconstruction_loss(&attenuated, &batch.reference)?;
    let (l_sink, g_sink, report) = sinkhorn_loss(&restored, &batch.equalized, cfg.histogram_bins, &cfg.sinkhorn)?;
    let alpha = T::lit(cfg.alpha);
    let loss = total_loss(l_recon, l_sink, alpha)?;

    let mut upstream = FieldOutputGrad::<T>::zeros(n_rays * n);
    let mut d_profile = vec![[T::zero(); 3]; n];
    for r in 0..n_rays {
        let span = r * n..(r + 1) * n;
        let (s, d, c) = (&sigma[span.clone()], samples.ray_deltas(r), &color[span.clone()]);
        let phis = ray_phis(r);
        let ga = render_backward(s, d, c, phis, g_recon[r])?;
        for (k, i) in span.clone().enumerate() {
            upstream.sigma[i] += ga.sigma[k];
            for ch in 0..3 {
                upstream.color[[i, ch]] += ga.color[k][ch];
            }
        }
        if phis.is_some() {
            for (k, i) in span.clone().enumerate() {
                for ch in 0..3 {
                    if smoothed.is_some() {
                        d_profile[k][ch] += ga.phi[k][ch];
                    } else {
                        upstream.phi[[i, ch]] += ga.phi[k][ch];
                    }
                }
            }
        }
        if cfg.alpha > 0.0 {
            let up = g_sink[r].map(|g| alpha * g);
            let gs = render_backward(s, d, c, None, up)?;
            for (k, i) in span.enumerate() {
                upstream.sigma[i] += gs.sigma[k];
                for ch in 0..3 {
                    upstream.color[[i, ch]] += gs.color[k][ch];
                }
            }
        }
    }
    let mut kernel_grad = vec![T::zero(); kernel.len()];
    if let Some((_, tape)) = &smoothed {
        let sg = smooth_backward(tape, &kernel, &d_profile)?;
        for r in 0..n_rays {
            for k in 0..n {
                for ch in 0..3 {
                    upstream.phi[[r * n + k, ch]] += sg.per_sample[k][ch];
                }
            }
        }
        kernel_grad = sg.kernel;
    }
    let mut grads = field.backward(&upstream)?;
    for (g, k) in grads.kernel.iter_mut().zip(kernel_grad) {
        *g += k;
    }
    Ok(StepResult {
        loss,
        grads,
        sinkhorn_converged: report.converged,
    })
}

#[derive(Debug, Clone)]
pub enum StepOutcome<T> {
    Applied(LossReport<T>),
    /// Batch dropped because the loss or gradient was not finite; the
    /// parameters were not touched.
    Skipped {
        loss: Option<LossReport<T>>,
        reason: String,
    },
}

/// Model, optimizer state and data stream of a training run.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub spec: ModelSpec,
    pub field: Field<T>,
    pub adam: AdamState<T>,
    batcher: RayBatcher,
    sample_rng: ChaCha8Rng,
    pub iter: usize,
}

/// Distinct random streams derived from the run seed by xor.
pub const INIT_STREAM: u64 = 0x5eed_0001;
pub const BATCH_STREAM: u64 = 0x5eed_0002;
pub const SAMPLE_STREAM: u64 = 0x5eed_0003;

impl<T: Scalar> Trainer<T> {
    pub fn new(dataset: &Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.manifest.train.len() < MIN_TRAIN_VIEWS {
            return Err(Error::Config(format!(
                "dataset has {} training views, need at least {MIN_TRAIN_VIEWS}",
                dataset.manifest.train.len()
            )));
        }
        let bounds = dataset.manifest.bounds;
        let poses: Vec<_> = dataset.train_views().map(|v| v.pose.clone()).collect();
        let extent = sampled_extent(&poses, bounds);
        let encoding = cfg.encoding(1.0 / extent.max(1e-12));
        let arch = cfg.arch(&encoding);
        let spec = ModelSpec {
            arch,
            encoding,
            samples_per_ray: cfg.samples_per_ray,
            bounds,
            smoothing: cfg.smoothing_enabled,
            attenuation: !cfg.freeze_attenuation,
        };
        let params = FieldParams::init(arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM))?;
        Ok(Self {
            adam: AdamState::new(&params),
            field: Field::new(params),
            batcher: RayBatcher::new(dataset, cfg.seed ^ BATCH_STREAM)?,
            sample_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SAMPLE_STREAM),
            spec,
            cfg,
            iter: 0,
        })
    }

    pub fn model(&self) -> Model<T> {
        Model {
            spec: self.spec,
            params: self.field.params.clone(),
        }
    }

    /// Draws the next batch, computes the losses and applies one Adam step.
    pub fn step(&mut self) -> Result<StepOutcome<T>> {
        let batch = self.batcher.next_batch::<T>(self.cfg.rays_per_batch);
        let lr = T::lit(lr_at(self.iter, &self.cfg));
        self.iter += 1;
        let result = match loss_and_grad(
            &mut self.field,
            &self.spec,
            &batch,
            &self.cfg,
            Some(&mut self.sample_rng),
        ) {
            Ok(r) => r,
            Err(Error::InputDomain(reason)) | Err(Error::NonFinite(reason)) => {
                return Ok(StepOutcome::Skipped { loss: None, reason });
            }
            Err(e) => return Err(e),
        };
        if !result.loss.total.is_finite() {
            return Ok(StepOutcome::Skipped {
                loss: Some(result.loss),
                reason: "non-finite loss".into(),
            });
        }
        match adam_step(&mut self.field.params, &result.grads, &mut self.adam, lr) {
            Ok(()) => Ok(StepOutcome::Applied(result.loss)),
            Err(Error::NonFinite(what)) => Ok(StepOutcome::Skipped {
                loss: Some(result.loss),
                reason: format!("non-finite {what}"),
            }),
            Err(e) => Err(e),
        }
    }
}

pub fn checkpoint_name(iter: usize) -> String {
    format!("ckpt_{iter:06}.whnf")
}

pub const LOG_FILE: &str = "train.log";

/// Paths written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

fn log_header(cfg: &TrainConfig, spec: &ModelSpec) -> String {
    let mut s = String::new();
    let cfg_json = serde_json::to_string(cfg).expect("config serializes");
    let spec_json = serde_json::to_string(spec).expect("spec serializes");
    writeln!(s, "# config {cfg_json}").unwrap();
    writeln!(s, "# model {spec_json}").unwrap();
    writeln!(s, "# alpha {}", cfg.alpha).unwrap();
    writeln!(s, "iter\tlr\tl_recon\tl_sinkhorn\ttotal").unwrap();
    s
}

/// Runs `total_iters` steps, appending one line per iteration to
/// `out_dir/train.log` and writing checkpoints named by iteration.
pub fn train<T: Scalar>(dataset: &Dataset, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    let mut trainer = Trainer::<T>::new(dataset, cfg.clone())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    log.write_all(log_header(cfg, &trainer.spec).as_bytes())
        .map_err(|e| Error::io(&log_path, e))?;

    let mut checkpoints = Vec::new();
    let mut save = |trainer: &Trainer<T>, iter: usize| -> Result<PathBuf> {
        let path = out_dir.join(checkpoint_name(iter));
        trainer.model().save(&path)?;
        checkpoints.push(path.clone());
        Ok(path)
    };
    let mut last = save(&trainer, 0)?;
    for it in 0..cfg.total_iters {
        let lr = lr_at(it, cfg);
        let line = match trainer.step().map_err(|e| e.context(format!("iteration {it}")))? {
            StepOutcome::Applied(l) => format!("{it}\t{lr}\t{}\t{}\t{}\n", l.l_recon, l.l_sinkhorn, l.total),
            StepOutcome::Skipped { reason, .. } => format!("# skipped {it}: {reason}\n"),
        };
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        let done = it + 1;
        if done == cfg.total_iters || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
            last = save(&trainer, done)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainOutput {
        log: log_path,
        checkpoints,
        final_checkpoint: last,
    })
}

/// One parsed record of a training log. Parse with the scalar type the run
/// used to recover the logged values exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord<T> {
    pub iter: usize,
    pub lr: f64,
    pub l_recon: T,
    pub l_sinkhorn: T,
    pub total: T,
}

pub fn parse_log<T: std::str::FromStr>(text: &str) -> Result<Vec<LogRecord<T>>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("iter"))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let bad = || Error::Format {
                path: PathBuf::from(LOG_FILE),
                reason: format!("bad log line {l:?}"),
            };
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<T>().map_err(|_| bad());
            Ok(LogRecord {
                iter: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                l_recon: num(f[2])?,
                l_sinkhorn: num(f[3])?,
                total: num(f[4])?,
            })
        })
        .collect()
}
