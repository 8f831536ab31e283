//! Soft intensity histograms and the debiased Sinkhorn divergence between
//! them, with gradients back to the pixel values.
//!
//! The solver works in `f64` on small histograms regardless of the caller's
//! scalar type. It runs log-stabilized Sinkhorn scaling with epsilon
//! annealing: potentials are absorbed into the kernel whenever the scaling
//! vectors drift, and epsilon is halved from the cost diameter down to the
//! target before the final iterations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-channel masses over `bins` centers spanning [0, 1] (centers at
/// `k / (bins - 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityHistogram<T> {
    pub bins: usize,
    pub masses: [Vec<T>; 3],
}

impl<T: Scalar> IntensityHistogram<T> {
    pub fn centers(&self) -> Vec<f64> {
        bin_centers(self.bins)
    }
}

pub fn bin_centers(bins: usize) -> Vec<f64> {
    (0..bins).map(|k| k as f64 / (bins - 1) as f64).collect()
}

#[inline]
fn soft_bin<T: Scalar>(v: T, bins: usize) -> (usize, T, bool) {
    let top = T::lit((bins - 1) as f64);
    let clamped = v < T::zero() || v > T::one();
    let pos = v.max(T::zero()).min(T::one()) * top;
    let lo = pos.floor().to_usize().unwrap_or(0).min(bins - 2);
    (lo, pos - T::lit(lo as f64), clamped)
}

/// Each value splits its mass linearly between its two nearest centers.
pub fn build_histogram<T: Scalar>(pixels: &[[T; 3]], bins: usize) -> Result<IntensityHistogram<T>> {
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    if pixels.is_empty() {
        return Err(Error::Usage("cannot build a histogram of zero pixels".into()));
    }
    let w = T::one() / T::lit(pixels.len() as f64);
    let mut masses = [vec![T::zero(); bins], vec![T::zero(); bins], vec![T::zero(); bins]];
    for p in pixels {
        for c in 0..3 {
            let (lo, frac, _) = soft_bin(p[c], bins);
            masses[c][lo] += (T::one() - frac) * w;
            masses[c][lo + 1] += frac * w;
        }
    }
    Ok(IntensityHistogram { bins, masses })
}

/// Pulls `dL/d mass` back to `dL/d pixel`. Values clamped into [0, 1]
/// receive zero gradient.
pub fn histogram_backward<T: Scalar>(pixels: &[[T; 3]], bins: usize, upstream: &[Vec<T>; 3]) -> Vec<[T; 3]> {
    let scale = T::lit((bins - 1) as f64) / T::lit(pixels.len() as f64);
    pixels
        .iter()
        .map(|p| {
            let mut g = [T::zero(); 3];
            for c in 0..3 {
                let (lo, _, clamped) = soft_bin(p[c], bins);
                if !clamped {
                    g[c] = scale * (upstream[c][lo + 1] - upstream[c][lo]);
                }
            }
            g
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    /// L1 marginal violation at which iteration stops.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SinkhornReport {
    pub converged: bool,
    pub iterations: usize,
    pub marginal_error: f64,
}

impl SinkhornReport {
    fn merge(self, other: SinkhornReport) -> SinkhornReport {
        SinkhornReport {
            converged: self.converged && other.converged,
            iterations: self.iterations.max(other.iterations),
            marginal_error: self.marginal_error.max(other.marginal_error),
        }
    }
}

/// Dual solution of entropic OT with `KL(pi | a x b)` regularization.
#[derive(Debug, Clone)]
pub struct OtSolution {
    /// `<a, f> + <b, g>`.
    pub value: f64,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub report: SinkhornReport,
}

fn lse_update(weights: &[f64], potential: &[f64], cost_col: impl Fn(usize) -> f64, len: usize, eps: f64) -> f64 {
    // -eps * log sum_k w_k exp((h_k - C_k) / eps)
    let mut best = f64::NEG_INFINITY;
    for k in 0..len {
        if weights[k] > 0.0 {
            best = best.max(weights[k].ln() + (potential[k] - cost_col(k)) / eps);
        }
    }
    let mut acc = 0.0;
    for k in 0..len {
        if weights[k] > 0.0 {
            acc += (weights[k].ln() + (potential[k] - cost_col(k)) / eps - best).exp();
        }
    }
    -eps * (best + acc.ln())
}

struct Stabilized<'a> {
    a: &'a [f64],
    b: &'a [f64],
    cost: &'a [f64],
    n: usize,
    m: usize,
    f: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    kernel: Vec<f64>,
    eps: f64,
    omega: f64,
}

const SCALE_LIMIT: f64 = 1e100;

/// Near-block-diagonal plans make plain Sinkhorn crawl; over-relaxation
/// cuts iteration counts several times. Plain updates resume if the
/// marginal error grows over a window.
const OVER_RELAXATION: f64 = 1.5;
const RELAX_WINDOW: usize = 64;

/// `old^(1 - omega) * new^omega`: over-relaxed scaling update.
fn relax(old: f64, new: f64, omega: f64) -> f64 {
    if omega == 1.0 {
        new
    } else {
        old.powf(1.0 - omega) * new.powf(omega)
    }
}
const UNDERFLOW: f64 = 1e-250;

impl<'a> Stabilized<'a> {
    fn rebuild(&mut self) {
        for i in 0..self.n {
            for j in 0..self.m {
                self.kernel[i * self.m + j] = ((self.f[i] + self.g[j] - self.cost[i * self.m + j]) / self.eps).exp();
            }
        }
        self.u.fill(1.0);
        self.v.fill(1.0);
    }

    fn absorb(&mut self) {
        for (f, u) in self.f.iter_mut().zip(&self.u) {
            *f += self.eps * u.ln();
        }
        for (g, v) in self.g.iter_mut().zip(&self.v) {
            *g += self.eps * v.ln();
        }
        self.rebuild();
    }

    /// `K^T (a u)`.
    fn column_sums(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.m];
        for i in 0..self.n {
            let s = self.a[i] * self.u[i];
            if s != 0.0 {
                let row = &self.kernel[i * self.m..(i + 1) * self.m];
                for (wj, k) in w.iter_mut().zip(row) {
                    *wj += k * s;
                }
            }
        }
        w
    }

    /// `K (b v)`.
    fn row_sums(&self) -> Vec<f64> {
        let bv: Vec<f64> = self.b.iter().zip(&self.v).map(|(b, v)| b * v).collect();
        (0..self.n)
            .map(|i| {
                let row = &self.kernel[i * self.m..(i + 1) * self.m];
                row.iter().zip(&bv).map(|(k, x)| k * x).sum()
            })
            .collect()
    }

    fn column_marginal_error(&self, w: &[f64]) -> f64 {
        self.b
            .iter()
            .zip(&self.v)
            .zip(w)
            .map(|((b, v), w)| (b * v * w - b).abs())
            .sum()
    }

    fn update_v(&mut self, w: &[f64]) {
        if w.iter().any(|&x| !(x > UNDERFLOW) || !x.is_finite()) {
            self.exact_g();
            return;
        }
        let omega = self.omega;
        for (v, w) in self.v.iter_mut().zip(w) {
            *v = relax(*v, 1.0 / w, omega);
        }
    }

    fn update_u(&mut self) {
        let z = self.row_sums();
        if z.iter().any(|&x| !(x > UNDERFLOW) || !x.is_finite()) {
            self.exact_f();
            return;
        }
        let omega = self.omega;
        for (u, z) in self.u.iter_mut().zip(&z) {
            *u = relax(*u, 1.0 / z, omega);
        }
        if self
            .u
            .iter()
            .chain(&self.v)
            .any(|&s| !(s < SCALE_LIMIT && s > 1.0 / SCALE_LIMIT))
        {
            self.absorb();
        }
    }

    fn current_f(&self) -> Vec<f64> {
        self.f.iter().zip(&self.u).map(|(f, u)| f + self.eps * u.ln()).collect()
    }

    fn current_g(&self) -> Vec<f64> {
        self.g.iter().zip(&self.v).map(|(g, v)| g + self.eps * v.ln()).collect()
    }

    fn exact_g(&mut self) {
        let f = self.current_f();
        let g: Vec<f64> = (0..self.m)
            .map(|j| lse_update(self.a, &f, |i| self.cost[i * self.m + j], self.n, self.eps))
            .collect();
        self.f = f;
        self.g = g;
        self.rebuild();
    }

    fn exact_f(&mut self) {
        let g = self.current_g();
        let f: Vec<f64> = (0..self.n)
            .map(|i| lse_update(self.b, &g, |j| self.cost[i * self.m + j], self.m, self.eps))
            .collect();
        self.f = f;
        self.g = g;
        self.rebuild();
    }

    fn set_eps(&mut self, eps: f64) {
        self.absorb_into_potentials();
        self.eps = eps;
        self.rebuild();
    }

    fn absorb_into_potentials(&mut self) {
        let f = self.current_f();
        let g = self.current_g();
        self.f = f;
        self.g = g;
    }
}

/// Solves entropic OT between `a` (length n) and `b` (length m) under the
/// row-major `n x m` cost. Non-convergence is reported, not fatal.
pub fn entropic_ot(a: &[f64], b: &[f64], cost: &[f64], cfg: &SinkhornConfig) -> Result<OtSolution> {
    let (n, m) = (a.len(), b.len());
    if cost.len() != n * m {
        return Err(Error::Shape(format!("cost has {} entries for {n}x{m}", cost.len())));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon {} must be positive", cfg.epsilon)));
    }
    if a.iter().chain(b).any(|&x| !(x >= 0.0)) {
        return Err(Error::InputDomain("OT marginals must be nonnegative".into()));
    }
    let diameter = cost.iter().copied().fold(0.0, f64::max);
    let mut schedule = Vec::new();
    let mut e = diameter;
    while e > cfg.epsilon {
        schedule.push(e);
        e *= 0.5;
    }
    schedule.push(cfg.epsilon);

    let mut st = Stabilized {
        a,
        b,
        cost,
        n,
        m,
        f: vec![0.0; n],
        g: vec![0.0; m],
        u: vec![1.0; n],
        v: vec![1.0; m],
        kernel: vec![0.0; n * m],
        eps: schedule[0],
        omega: 1.0,
    };
    st.rebuild();
    let mut iterations = 0;
    for &eps in &schedule[..schedule.len() - 1] {
        st.set_eps(eps);
        let w = st.column_sums();
        st.update_v(&w);
        st.update_u();
        iterations += 1;
    }
    st.set_eps(cfg.epsilon);
    st.omega = OVER_RELAXATION;
    let mut marginal_error;
    let mut converged = false;
    let mut window_start = f64::INFINITY;
    loop {
        let w = st.column_sums();
        marginal_error = st.column_marginal_error(&w);
        if marginal_error < cfg.tol {
            converged = true;
            break;
        }
        if iterations % RELAX_WINDOW == 0 {
            if marginal_error > 2.0 * window_start {
                st.omega = 1.0;
            }
            window_start = marginal_error;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        st.update_v(&w);
        st.update_u();
        iterations += 1;
    }
    let f = st.current_f();
    let g = st.current_g();
    let dot = |w: &[f64], p: &[f64]| -> f64 { w.iter().zip(p).filter(|(w, _)| **w > 0.0).map(|(w, p)| w * p).sum() };
    let value = dot(a, &f) + dot(b, &g);
    Ok(OtSolution {
        value,
        f,
        g,
        report: SinkhornReport {
            converged,
            iterations,
            marginal_error,
        },
    })
}

/// Entropic OT of `a` with itself. The problem is symmetric, so a single
/// potential is iterated with the averaged update `f <- (f + T(f)) / 2`,
/// which avoids the slow alternation plain Sinkhorn shows on
/// near-diagonal plans.
pub fn entropic_self_ot(a: &[f64], cost: &[f64], cfg: &SinkhornConfig) -> Result<OtSolution> {
    let n = a.len();
    if cost.len() != n * n {
        return Err(Error::Shape(format!("cost has {} entries for {n}x{n}", cost.len())));
    }
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon {} must be positive", cfg.epsilon)));
    }
    if a.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InputDomain("OT marginals must be nonnegative".into()));
    }
    let diameter = cost.iter().copied().fold(0.0, f64::max);
    let transform =
        |f: &[f64], eps: f64| -> Vec<f64> { (0..n).map(|i| lse_update(a, f, |k| cost[i * n + k], n, eps)).collect() };
    let row_error = |f: &[f64], eps: f64| -> f64 {
        (0..n)
            .filter(|&i| a[i] > 0.0)
            .map(|i| {
                let row: f64 = (0..n)
                    .filter(|&k| a[k] > 0.0)
                    .map(|k| a[k] * ((f[i] + f[k] - cost[i * n + k]) / eps).exp())
                    .sum();
                (a[i] * row - a[i]).abs()
            })
            .sum()
    };
    let mut f = vec![0.0; n];
    let mut eps = diameter.max(cfg.epsilon);
    let mut iterations = 0;
    while eps > cfg.epsilon {
        let t = transform(&f, eps);
        f.iter_mut().zip(&t).for_each(|(f, t)| *f = 0.5 * (*f + t));
        iterations += 1;
        eps = (eps * 0.5).max(cfg.epsilon);
    }
    let mut marginal_error;
    let mut converged = false;
    loop {
        marginal_error = row_error(&f, cfg.epsilon);
        if marginal_error < cfg.tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        let t = transform(&f, cfg.epsilon);
        f.iter_mut().zip(&t).for_each(|(f, t)| *f = 0.5 * (*f + t));
        iterations += 1;
    }
    let value = 2.0
        * a.iter()
            .zip(&f)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, f)| w * f)
            .sum::<f64>();
    Ok(OtSolution {
        value,
        g: f.clone(),
        f,
        report: SinkhornReport {
            converged,
            iterations,
            marginal_error,
        },
    })
}

pub fn squared_cost(centers: &[f64]) -> Vec<f64> {
    let n = centers.len();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d = centers[i] - centers[j];
            c[i * n + j] = d * d;
        }
    }
    c
}

#[derive(Debug, Clone)]
pub struct SinkhornDivergence<T> {
    /// Sum over channels.
    pub value: T,
    pub per_channel: [f64; 3],
    /// `dS / d p_mass`, per channel.
    pub grad_p: [Vec<T>; 3],
    pub report: SinkhornReport,
}

/// Entropic OT value and the potential belonging to `p`, solved in a fixed
/// canonical argument order so that the result is exactly symmetric.
fn ot_pair(p: &[f64], q: &[f64], cost: &[f64], cfg: &SinkhornConfig) -> Result<(f64, Vec<f64>, SinkhornReport)> {
    let Some((x, y)) = p.iter().zip(q).find(|(a, b)| a != b) else {
        let sol = entropic_self_ot(p, cost, cfg)?;
        return Ok((sol.value, sol.f, sol.report));
    };
    if x > y {
        let sol = entropic_ot(q, p, cost, cfg)?;
        Ok((sol.value, sol.g, sol.report))
    } else {
        let sol = entropic_ot(p, q, cost, cfg)?;
        Ok((sol.value, sol.f, sol.report))
    }
}

/// `S(p, q) = OT(p, q) - OT(p, p) / 2 - OT(q, q) / 2`, summed over channels,
/// with squared-distance cost between bin centers.
pub fn sinkhorn_divergence<T: Scalar>(
    p: &IntensityHistogram<T>,
    q: &IntensityHistogram<T>,
    cfg: &SinkhornConfig,
) -> Result<SinkhornDivergence<T>> {
    if p.bins != q.bins {
        return Err(Error::Shape(format!("histograms have {} and {} bins", p.bins, q.bins)));
    }
    let cost = squared_cost(&bin_centers(p.bins));
    let to64 = |v: &[T]| -> Vec<f64> { v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect() };
    let mut per_channel = [0.0; 3];
    let mut grad_p: [Vec<T>; 3] = Default::default();
    let mut report = SinkhornReport {
        converged: true,
        ..Default::default()
    };
    for c in 0..3 {
        let pc = to64(&p.masses[c]);
        let qc = to64(&q.masses[c]);
        let (pq, f_pq, r1) = ot_pair(&pc, &qc, &cost, cfg)?;
        let pp = entropic_self_ot(&pc, &cost, cfg)?;
        let qq = entropic_self_ot(&qc, &cost, cfg)?;
        per_channel[c] = pq - 0.5 * pp.value - 0.5 * qq.value;
        grad_p[c] = f_pq
            .iter()
            .zip(pp.f.iter().zip(&pp.g))
            .map(|(a, (f, g))| T::lit(a - 0.5 * (f + g)))
            .collect();
        report = report.merge(r1).merge(pp.report).merge(qq.report);
    }
    let value = T::lit(per_channel.iter().sum());
    Ok(SinkhornDivergence {
        value,
        per_channel,
        grad_p,
        report,
    })
}

/// Divergence between the soft histograms of two pixel sets, and its
/// gradient with respect to the first set.
pub fn sinkhorn_loss<T: Scalar>(
    pixels: &[[T; 3]],
    target: &[[T; 3]],
    bins: usize,
    cfg: &SinkhornConfig,
) -> Result<(T, Vec<[T; 3]>, SinkhornReport)> {
    let p = build_histogram(pixels, bins)?;
    let q = build_histogram(target, bins)?;
    let div = sinkhorn_divergence(&p, &q, cfg)?;
    let grad = histogram_backward(pixels, bins, &div.grad_p);
    Ok((div.value, grad, div.report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(masses: [Vec<f64>; 3]) -> IntensityHistogram<f64> {
        IntensityHistogram {
            bins: masses[0].len(),
            masses,
        }
    }

    #[test]
    fn hard_histogram_on_centers() {
        let px = [[0.0, 0.5, 1.0], [0.0, 1.0, 1.0]];
        let h = build_histogram(&px, 3).unwrap();
        assert_eq!(h.masses[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(h.masses[1], vec![0.0, 0.5, 0.5]);
        assert_eq!(h.masses[2], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn midpoint_splits_mass() {
        let h = build_histogram(&[[0.125f64, 0.875, 0.5]], 5).unwrap();
        assert_eq!(h.masses[0], vec![0.5, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(h.masses[1], vec![0.0, 0.0, 0.0, 0.5, 0.5]);
        assert_eq!(h.masses[2], vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn histogram_errors() {
        let empty: [[f64; 3]; 0] = [];
        assert!(matches!(build_histogram(&empty, 8), Err(Error::Usage(_))));
        assert!(matches!(build_histogram(&[[0.5f64; 3]], 1), Err(Error::Config(_))));
    }

    #[test]
    fn identical_histograms_have_zero_divergence() {
        let m = vec![0.1, 0.2, 0.0, 0.3, 0.25, 0.15];
        let h = hist([m.clone(), m.clone(), m]);
        let d = sinkhorn_divergence(&h, &h, &SinkhornConfig::default()).unwrap();
        assert!(d.value.abs() <= 1e-9, "{}", d.value);
    }

    #[test]
    fn opposite_point_masses_cost_unit_gap() {
        let mut a = vec![0.0; 16];
        let mut b = vec![0.0; 16];
        a[0] = 1.0;
        b[15] = 1.0;
        let p = hist([a.clone(), a.clone(), a]);
        let q = hist([b.clone(), b.clone(), b]);
        let d = sinkhorn_divergence(&p, &q, &SinkhornConfig::default()).unwrap();
        for v in d.per_channel {
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn nonconvergence_is_reported_not_fatal() {
        let a = vec![0.5, 0.0, 0.0, 0.5];
        let b = vec![0.0, 0.5, 0.5, 0.0];
        let cfg = SinkhornConfig {
            epsilon: 1e-4,
            max_iters: 3,
            tol: 1e-15,
        };
        let sol = entropic_ot(&a, &b, &squared_cost(&bin_centers(4)), &cfg).unwrap();
        assert!(!sol.report.converged);
        assert!(sol.value.is_finite());
    }

    #[test]
    fn invalid_epsilon_rejected() {
        let cfg = SinkhornConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(entropic_ot(&[1.0], &[1.0], &[0.0], &cfg).is_err());
    }
}
