//! The radiance field: a ReLU trunk over encoded positions, a density
//! projection, a view-dependent color head and a position-only
//! illuminance-attenuation head.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{logit, sigmoid, softplus, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldArch {
    pub pos_dim: usize,
    pub dir_dim: usize,
    pub trunk_depth: usize,
    pub trunk_width: usize,
    /// Trunk layer whose input is `[previous activation, encoded position]`.
    pub skip_layer: Option<usize>,
    pub color_hidden: usize,
    pub phi_hidden: usize,
    /// Length of the 1-D kernel that smooths batch-averaged attenuation.
    pub kernel_len: usize,
    /// Lower bound of the attenuation range `(phi_floor, 1)`.
    pub phi_floor: f64,
    /// Attenuation produced by a freshly initialized field.
    pub phi_init: f64,
}

impl Default for FieldArch {
    fn default() -> Self {
        Self {
            pos_dim: 63,
            dir_dim: 27,
            trunk_depth: 8,
            trunk_width: 256,
            skip_layer: Some(4),
            color_hidden: 128,
            phi_hidden: 64,
            kernel_len: 5,
            phi_floor: 0.3,
            phi_init: 0.95,
        }
    }
}

impl FieldArch {
    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("pos_dim", self.pos_dim),
            ("dir_dim", self.dir_dim),
            ("trunk_depth", self.trunk_depth),
            ("trunk_width", self.trunk_width),
            ("color_hidden", self.color_hidden),
            ("phi_hidden", self.phi_hidden),
            ("kernel_len", self.kernel_len),
        ];
        if let Some((name, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.trunk_depth {
                return Err(Error::Config(format!(
                    "skip layer {s} must lie in 1..{}",
                    self.trunk_depth
                )));
            }
        }
        if self.kernel_len.is_multiple_of(2) {
            return Err(Error::Config("smoothing kernel length must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.phi_floor) {
            return Err(Error::Config(format!("phi_floor {} not in [0, 1)", self.phi_floor)));
        }
        if !(self.phi_init > self.phi_floor && self.phi_init < 1.0) {
            return Err(Error::Config(format!(
                "phi_init {} not in ({}, 1)",
                self.phi_init, self.phi_floor
            )));
        }
        Ok(())
    }

    fn trunk_input_dim(&self, layer: usize) -> usize {
        match (layer, self.skip_layer) {
            (0, _) => self.pos_dim,
            (l, Some(s)) if l == s => self.trunk_width + self.pos_dim,
            _ => self.trunk_width,
        }
    }
}

/// Affine layer computing `x W + b` on row-major batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, bound: f64, rng: &mut R) -> Self {
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || T::lit(rng.random_range(-bound..bound)));
        Self {
            weight,
            bias: Array1::zeros(fan_out),
        }
    }

    fn apply(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut z = x.dot(&self.weight);
        z += &self.bias;
        z
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the layer input.
    fn backward(&self, input: &Array2<T>, dz: &Array2<T>, grad: &mut Dense<T>) -> Array2<T> {
        grad.weight += &input.t().dot(dz);
        grad.bias += &dz.sum_axis(Axis(0));
        dz.dot(&self.weight.t())
    }
}

/// All trainable weights, in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams<T> {
    pub arch: FieldArch,
    pub trunk: Vec<Dense<T>>,
    pub density: Dense<T>,
    pub color_hidden: Dense<T>,
    pub color_out: Dense<T>,
    pub phi_hidden: Dense<T>,
    pub phi_out: Dense<T>,
    pub kernel: Array1<T>,
}

/// Gradients share the parameter layout.
pub type GradientBundle<T> = FieldParams<T>;

impl<T: Scalar> FieldParams<T> {
    pub fn zeros(arch: FieldArch) -> Result<Self> {
        arch.validate()?;
        let w = arch.trunk_width;
        Ok(Self {
            trunk: (0..arch.trunk_depth)
                .map(|l| Dense::zeros(arch.trunk_input_dim(l), w))
                .collect(),
            density: Dense::zeros(w, 1),
            color_hidden: Dense::zeros(w + arch.dir_dim, arch.color_hidden),
            color_out: Dense::zeros(arch.color_hidden, 3),
            phi_hidden: Dense::zeros(w, arch.phi_hidden),
            phi_out: Dense::zeros(arch.phi_hidden, 3),
            kernel: Array1::zeros(arch.kernel_len),
            arch,
        })
    }

    /// Fan-in scaled uniform weights, zero biases, box smoothing kernel, and
    /// an attenuation bias that yields `phi_init` everywhere.
    pub fn init<R: Rng + ?Sized>(arch: FieldArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let w = arch.trunk_width;
        let relu_bound = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        let linear_bound = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let trunk = (0..arch.trunk_depth)
            .map(|l| {
                let fan_in = arch.trunk_input_dim(l);
                Dense::uniform(fan_in, w, relu_bound(fan_in), rng)
            })
            .collect();
        let density = Dense::uniform(w, 1, linear_bound(w), rng);
        let color_hidden = Dense::uniform(w + arch.dir_dim, arch.color_hidden, relu_bound(w + arch.dir_dim), rng);
        let color_out = Dense::uniform(arch.color_hidden, 3, linear_bound(arch.color_hidden), rng);
        let phi_hidden = Dense::uniform(w, arch.phi_hidden, relu_bound(w), rng);
        let mut phi_out = Dense::uniform(arch.phi_hidden, 3, 0.1 * linear_bound(arch.phi_hidden), rng);
        let s0 = (arch.phi_init - arch.phi_floor) / (1.0 - arch.phi_floor);
        phi_out.bias.fill(T::lit(logit(s0)));
        let kernel = Array1::from_elem(arch.kernel_len, T::lit(1.0 / arch.kernel_len as f64));
        Ok(Self {
            arch,
            trunk,
            density,
            color_hidden,
            color_out,
            phi_hidden,
            phi_out,
            kernel,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch).expect("arch already validated")
    }

    fn layers(&self) -> impl Iterator<Item = &Dense<T>> {
        self.trunk.iter().chain([
            &self.density,
            &self.color_hidden,
            &self.color_out,
            &self.phi_hidden,
            &self.phi_out,
        ])
    }

    /// Flat views of every tensor in declared order: each layer's weight then
    /// bias, trunk first, then the heads, then the smoothing kernel.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for d in self.layers() {
            out.push(d.weight.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        out.push(self.kernel.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let Self {
            trunk,
            density,
            color_hidden,
            color_out,
            phi_hidden,
            phi_out,
            kernel,
            ..
        } = self;
        let mut out: Vec<&mut [T]> = Vec::new();
        for d in trunk
            .iter_mut()
            .chain([density, color_hidden, color_out, phi_hidden, phi_out])
        {
            out.push(d.weight.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(kernel.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> FieldParams<U> {
        let mut out = FieldParams::<U>::zeros(self.arch).expect("arch already validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::lit(s.to_f64().expect("finite"));
            }
        }
        out
    }
}

/// Per-sample field values for a batch of `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput<T> {
    /// `n`, nonnegative.
    pub sigma: Array1<T>,
    /// `n x 3`, in [0, 1].
    pub color: Array2<T>,
    /// `n x 3`, in `(phi_floor, 1)`.
    pub phi: Array2<T>,
}

/// Upstream gradients with respect to each [`FieldOutput`] entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutputGrad<T> {
    pub sigma: Array1<T>,
    pub color: Array2<T>,
    pub phi: Array2<T>,
}

impl<T: Scalar> FieldOutputGrad<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            sigma: Array1::zeros(n),
            color: Array2::zeros((n, 3)),
            phi: Array2::zeros((n, 3)),
        }
    }
}

#[derive(Debug, Clone)]
struct ForwardCache<T> {
    layer_inputs: Vec<Array2<T>>,
    trunk_pre: Vec<Array2<T>>,
    trunk_out: Array2<T>,
    sigma_raw: Array1<T>,
    color_in: Array2<T>,
    color_pre: Array2<T>,
    color_act: Array2<T>,
    color: Array2<T>,
    phi_pre: Array2<T>,
    phi_act: Array2<T>,
    phi_unit: Array2<T>,
}

fn relu<T: Scalar>(z: &Array2<T>) -> Array2<T> {
    z.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

fn relu_backward<T: Scalar>(mut upstream: Array2<T>, pre: &Array2<T>) -> Array2<T> {
    ndarray::Zip::from(&mut upstream).and(pre).for_each(|g, &z| {
        if z <= T::zero() {
            *g = T::zero();
        }
    });
    upstream
}

/// Stateless forward pass.
pub fn field_forward<T: Scalar>(
    params: &FieldParams<T>,
    encoded_pos: ArrayView2<T>,
    encoded_dir: ArrayView2<T>,
) -> Result<FieldOutput<T>> {
    forward_with_cache(params, encoded_pos, encoded_dir).map(|(out, _)| out)
}

fn forward_with_cache<T: Scalar>(
    params: &FieldParams<T>,
    pos: ArrayView2<T>,
    dir: ArrayView2<T>,
) -> Result<(FieldOutput<T>, ForwardCache<T>)> {
    let arch = &params.arch;
    if pos.ncols() != arch.pos_dim || dir.ncols() != arch.dir_dim || pos.nrows() != dir.nrows() {
        return Err(Error::Config(format!(
            "field expects {}+{} input features, got {}x{} and {}x{}",
            arch.pos_dim,
            arch.dir_dim,
            pos.nrows(),
            pos.ncols(),
            dir.nrows(),
            dir.ncols()
        )));
    }
    let mut layer_inputs = Vec::with_capacity(arch.trunk_depth);
    let mut trunk_pre = Vec::with_capacity(arch.trunk_depth);
    let mut h = pos.to_owned();
    for (l, layer) in params.trunk.iter().enumerate() {
        let input = if Some(l) == arch.skip_layer {
            concatenate![Axis(1), h, pos]
        } else {
            h
        };
        let z = layer.apply(&input.view());
        h = relu(&z);
        layer_inputs.push(input);
        trunk_pre.push(z);
    }

    let sigma_raw = params.density.apply(&h.view()).column(0).to_owned();
    let sigma = sigma_raw.mapv(softplus);

    let color_in = concatenate![Axis(1), h, dir];
    let color_pre = params.color_hidden.apply(&color_in.view());
    let color_act = relu(&color_pre);
    let color = params.color_out.apply(&color_act.view()).mapv(sigmoid);

    let phi_pre = params.phi_hidden.apply(&h.view());
    let phi_act = relu(&phi_pre);
    let phi_unit = params.phi_out.apply(&phi_act.view()).mapv(sigmoid);
    let floor = T::lit(arch.phi_floor);
    let phi = phi_unit.mapv(|s| floor + (T::one() - floor) * s);

    let out = FieldOutput {
        sigma,
        color: color.clone(),
        phi,
    };
    let cache = ForwardCache {
        layer_inputs,
        trunk_pre,
        trunk_out: h,
        sigma_raw,
        color_in,
        color_pre,
        color_act,
        color,
        phi_pre,
        phi_act,
        phi_unit,
    };
    Ok((out, cache))
}

fn backward_from_cache<T: Scalar>(
    params: &FieldParams<T>,
    cache: &ForwardCache<T>,
    upstream: &FieldOutputGrad<T>,
) -> Result<GradientBundle<T>> {
    let n = cache.trunk_out.nrows();
    if upstream.sigma.len() != n || upstream.color.dim() != (n, 3) || upstream.phi.dim() != (n, 3) {
        return Err(Error::Shape(format!(
            "upstream gradient does not match {n} cached samples"
        )));
    }
    let arch = &params.arch;
    let width = arch.trunk_width;
    let mut grad = params.zeros_like();

    // Density: softplus' = sigmoid.
    let d_sigma_raw = ndarray::Zip::from(&upstream.sigma)
        .and(&cache.sigma_raw)
        .map_collect(|&g, &r| g * sigmoid(r))
        .insert_axis(Axis(1));
    let mut dh = params
        .density
        .backward(&cache.trunk_out, &d_sigma_raw, &mut grad.density);

    let d_color_raw = ndarray::Zip::from(&upstream.color)
        .and(&cache.color)
        .map_collect(|&g, &c| g * c * (T::one() - c));
    let d_color_act = params
        .color_out
        .backward(&cache.color_act, &d_color_raw, &mut grad.color_out);
    let d_color_pre = relu_backward(d_color_act, &cache.color_pre);
    let d_color_in = params
        .color_hidden
        .backward(&cache.color_in, &d_color_pre, &mut grad.color_hidden);
    dh += &d_color_in.slice(s![.., ..width]);

    let span = T::one() - T::lit(arch.phi_floor);
    let d_phi_raw = ndarray::Zip::from(&upstream.phi)
        .and(&cache.phi_unit)
        .map_collect(|&g, &s| g * span * s * (T::one() - s));
    let d_phi_act = params.phi_out.backward(&cache.phi_act, &d_phi_raw, &mut grad.phi_out);
    let d_phi_pre = relu_backward(d_phi_act, &cache.phi_pre);
    dh += &params
        .phi_hidden
        .backward(&cache.trunk_out, &d_phi_pre, &mut grad.phi_hidden);

    for l in (0..arch.trunk_depth).rev() {
        let dz = relu_backward(dh, &cache.trunk_pre[l]);
        if l == 0 {
            let input = &cache.layer_inputs[0];
            grad.trunk[0].weight += &input.t().dot(&dz);
            grad.trunk[0].bias += &dz.sum_axis(Axis(0));
            break;
        }
        let d_input = params.trunk[l].backward(&cache.layer_inputs[l], &dz, &mut grad.trunk[l]);
        dh = if Some(l) == arch.skip_layer {
            d_input.slice(s![.., ..width]).to_owned()
        } else {
            d_input
        };
    }
    Ok(grad)
}

/// Parameters plus the activation cache of the most recent forward pass.
#[derive(Debug, Clone)]
pub struct Field<T> {
    pub params: FieldParams<T>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Scalar> Field<T> {
    pub fn new(params: FieldParams<T>) -> Self {
        Self { params, cache: None }
    }

    pub fn forward(&mut self, encoded_pos: ArrayView2<T>, encoded_dir: ArrayView2<T>) -> Result<FieldOutput<T>> {
        let (out, cache) = forward_with_cache(&self.params, encoded_pos, encoded_dir)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Consumes the cached activations of the last [`Field::forward`].
    pub fn backward(&mut self, upstream: &FieldOutputGrad<T>) -> Result<GradientBundle<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("field backward called without a cached forward pass".into()))?;
        backward_from_cache(&self.params, &cache, upstream)
    }

    /// Smallest `|pre-activation|` of any ReLU in the cached pass; gradient
    /// checks use it to stay away from kinks.
    pub fn min_relu_margin(&self) -> Option<T> {
        let cache = self.cache.as_ref()?;
        let all = cache
            .trunk_pre
            .iter()
            .chain([&cache.color_pre, &cache.phi_pre])
            .flat_map(|a| a.iter())
            .map(|v| v.abs());
        all.reduce(|a, b| if b < a { b } else { a })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> FieldArch {
        FieldArch {
            pos_dim: 5,
            dir_dim: 3,
            trunk_depth: 3,
            trunk_width: 6,
            skip_layer: Some(2),
            color_hidden: 4,
            phi_hidden: 3,
            kernel_len: 3,
            phi_floor: 0.3,
            phi_init: 0.95,
        }
    }

    fn random_inputs(n: usize, arch: &FieldArch, rng: &mut ChaCha8Rng) -> (Array2<f64>, Array2<f64>) {
        let pos = Array2::from_shape_simple_fn((n, arch.pos_dim), || rng.random_range(-1.0..1.0));
        let dir = Array2::from_shape_simple_fn((n, arch.dir_dim), || rng.random_range(-1.0..1.0));
        (pos, dir)
    }

    #[test]
    fn zero_params_give_constant_output() {
        let arch = small_arch();
        let params = FieldParams::<f64>::zeros(arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pos, dir) = random_inputs(7, &arch, &mut rng);
        let out = field_forward(&params, pos.view(), dir.view()).unwrap();
        for i in 0..7 {
            assert!((out.sigma[i] - std::f64::consts::LN_2).abs() < 1e-15);
            for c in 0..3 {
                assert_eq!(out.color[(i, c)], 0.5);
                assert!((out.phi[(i, c)] - 0.65).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn init_attenuation_near_configured_value() {
        let arch = FieldArch::default();
        let params = FieldParams::<f32>::init(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos = Array2::from_shape_simple_fn((32, 63), || rng.random_range(-1.0f32..1.0));
        let dir = Array2::from_shape_simple_fn((32, 27), || rng.random_range(-1.0f32..1.0));
        let out = field_forward(&params, pos.view(), dir.view()).unwrap();
        assert!(out.phi.iter().all(|&p| (p - 0.95).abs() < 0.03), "{:?}", out.phi);
        let k = params.kernel.sum();
        assert!((k - 1.0).abs() < 1e-6);
    }

    #[test]
    fn density_and_attenuation_ignore_direction() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = FieldParams::<f64>::init(arch, &mut rng).unwrap();
        let (pos, dir_a) = random_inputs(5, &arch, &mut rng);
        let (_, dir_b) = random_inputs(5, &arch, &mut rng);
        let a = field_forward(&params, pos.view(), dir_a.view()).unwrap();
        let b = field_forward(&params, pos.view(), dir_b.view()).unwrap();
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.phi, b.phi);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let arch = small_arch();
        let params = FieldParams::<f64>::zeros(arch).unwrap();
        let pos = Array2::zeros((2, 4));
        let dir = Array2::zeros((2, 3));
        assert!(matches!(
            field_forward(&params, pos.view(), dir.view()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let mut field = Field::new(FieldParams::<f64>::zeros(small_arch()).unwrap());
        let up = FieldOutputGrad::zeros(1);
        assert!(matches!(field.backward(&up), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut field = Field::new(FieldParams::<f64>::init(arch, &mut rng).unwrap());
        let (pos, dir) = random_inputs(4, &arch, &mut rng);
        field.forward(pos.view(), dir.view()).unwrap();
        let grad = field.backward(&FieldOutputGrad::zeros(4)).unwrap();
        assert!(grad.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn density_weight_gradient_is_input_activation() {
        // d sigma_raw / d W_density[k] = h_k, and softplus'(raw) = sigmoid(raw).
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut field = Field::new(FieldParams::<f64>::init(arch, &mut rng).unwrap());
        let (pos, dir) = random_inputs(1, &arch, &mut rng);
        field.forward(pos.view(), dir.view()).unwrap();
        let cache = field.cache.clone().unwrap();
        let mut up = FieldOutputGrad::zeros(1);
        up.sigma[0] = 1.0;
        let grad = field.backward(&up).unwrap();
        let slope = sigmoid(cache.sigma_raw[0]);
        for k in 0..arch.trunk_width {
            let expected = cache.trunk_out[(0, k)] * slope;
            assert!((grad.density.weight[(k, 0)] - expected).abs() < 1e-15);
        }
        assert!((grad.density.bias[0] - slope).abs() < 1e-15);
    }

    #[test]
    fn tensor_views_cover_all_parameters() {
        let arch = FieldArch::default();
        let params = FieldParams::<f32>::zeros(arch).unwrap();
        // 8 trunk layers, skip at 4; density; color 283->128->3; phi 256->64->3; kernel 5.
        let trunk = 63 * 256 + 256 + 6 * (256 * 256 + 256) + (319 * 256 + 256);
        let heads = 257 + (283 * 128 + 128) + (128 * 3 + 3) + (256 * 64 + 64) + (64 * 3 + 3);
        assert_eq!(params.num_params(), trunk + heads + 5);
        assert_eq!(params.tensors().len(), 2 * 13 + 1);
    }

    #[test]
    fn cast_round_trip_is_exact_for_f32_values() {
        let params = FieldParams::<f32>::init(small_arch(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(params.cast::<f64>().cast::<f32>(), params);
    }
}
