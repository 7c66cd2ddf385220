//! Graph network solver trained through a Gumbel-Sinkhorn relaxation.
//!
//! Each epoch runs a three-layer GINE network over the computational graph,
//! perturbs the node logits with Gumbel noise, projects them onto the
//! transportation polytope with log-space Sinkhorn iterations and minimizes
//! the soft energy `vec(S)ᵀ Q vec(S)`. Gradients are computed by hand,
//! unrolling every executed Sinkhorn iteration. Thresholding `S ≥ 0.5` gives
//! a candidate hard allocation whose feasibility is checked every epoch.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use libm::erf;

use crate::classical::shot_rng;
use crate::energy::{energy_hard, energy_soft_grad, EnergySource, SoftAllocation};
use crate::error::{Error, Result};
use crate::graphs::CompGraph;
use crate::model::{counts_with_void, validate_allocation, Allocation, Verdict};
use crate::par;
use crate::result::{EpochRecord, SolveResult};

pub const N_LAYERS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GntConfig {
    pub tau: f64,
    /// Linear anneal of `tau` towards this value over the run.
    pub tau_final: Option<f64>,
    pub epochs: usize,
    pub sink_max_iter: usize,
    pub sink_tol: f64,
    pub d0: usize,
    pub dh: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub gumbel_on: bool,
    pub n_shots: usize,
    /// Divide edge features by their largest magnitude.
    pub normalize_edges: bool,
    pub trace_points: usize,
}

impl Default for GntConfig {
    fn default() -> Self {
        GntConfig {
            tau: 0.3,
            tau_final: None,
            epochs: 100_000,
            sink_max_iter: 200,
            sink_tol: 1e-3,
            d0: 64,
            dh: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            gumbel_on: true,
            n_shots: 5,
            normalize_edges: true,
            trace_points: 1000,
        }
    }
}

impl GntConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameters(m.into()));
        if !(self.tau > 0.0) || self.tau_final.is_some_and(|t| !(t > 0.0)) {
            return bad("tau must be positive");
        }
        if !(self.sink_tol > 0.0) || self.sink_max_iter == 0 {
            return bad("sinkhorn needs positive tolerance and iterations");
        }
        if self.d0 == 0 || self.dh == 0 {
            return bad("hidden sizes must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    fn tau_at(&self, epoch: usize) -> f64 {
        match self.tau_final {
            Some(tf) if self.epochs > 1 => self.tau + (tf - self.tau) * epoch as f64 / (self.epochs - 1) as f64,
            _ => self.tau,
        }
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2)) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerLayout {
    alpha: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    dout: usize,
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub n: usize,
    pub w: usize,
    pub d0: usize,
    pub dh: usize,
    pub fw: usize,
    we: usize,
    be: usize,
    layers: Vec<LayerLayout>,
    pub total: usize,
}

impl Layout {
    pub fn new(n: usize, k: usize, d0: usize, dh: usize) -> Self {
        let w = k + 1;
        let fw = w * w;
        let mut off = n * d0;
        let we = off;
        off += d0 * fw;
        let be = off;
        off += d0;
        let mut layers = Vec::with_capacity(N_LAYERS);
        for l in 0..N_LAYERS {
            let dout = if l + 1 == N_LAYERS { w } else { d0 };
            let alpha = off;
            let w1 = alpha + 1;
            let b1 = w1 + dh * d0;
            let w2 = b1 + dh;
            let b2 = w2 + dout * dh;
            off = b2 + dout;
            layers.push(LayerLayout { alpha, w1, b1, w2, b2, dout });
        }
        Layout { n, w, d0, dh, fw, we, be, layers, total: off }
    }
}

/// Parameters of the network in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GntModel {
    pub layout: Layout,
    pub params: Vec<f64>,
}

impl GntModel {
    /// Embeddings from `N(0, 1)`, affine maps from `U(±1/√fan_in)`, `α = 0`.
    pub fn new<R: Rng + ?Sized>(n: usize, k: usize, d0: usize, dh: usize, rng: &mut R) -> Self {
        let layout = Layout::new(n, k, d0, dh);
        let mut params = vec![0.0; layout.total];
        for p in &mut params[..n * d0] {
            *p = StandardNormal.sample(rng);
        }
        let mut uniform = |range: std::ops::Range<usize>, fan_in: usize, params: &mut [f64]| {
            let b = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.random_range(-b..b);
            }
        };
        uniform(layout.we..layout.be + d0, layout.fw, &mut params);
        for l in &layout.layers {
            uniform(l.w1..l.w2, d0, &mut params);
            uniform(l.w2..l.b2 + l.dout, dh, &mut params);
        }
        GntModel { layout, params }
    }

    pub fn zeros(n: usize, k: usize, d0: usize, dh: usize) -> Self {
        let layout = Layout::new(n, k, d0, dh);
        let params = vec![0.0; layout.total];
        GntModel { layout, params }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }
}

/// Directed message list with raw edge features.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedGraph {
    pub n: usize,
    pub fw: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    /// `src.len() × fw`
    pub feat: Vec<f64>,
    pub scale: f64,
}

/// Expands undirected edges into both directions. The message `v → u`
/// carries the transposed block.
pub fn prepare_graph(graph: &CompGraph, normalize: bool) -> Result<PreparedGraph> {
    let f = graph
        .features
        .as_ref()
        .ok_or_else(|| Error::Config("graph has no edge features attached".into()))?;
    let w = (f.width as f64).sqrt().round() as usize;
    if w * w != f.width {
        return Err(Error::DimensionMismatch { expected: w * w, got: f.width });
    }
    let m = graph.edges.len();
    let mut src = Vec::with_capacity(2 * m);
    let mut dst = Vec::with_capacity(2 * m);
    let mut feat = Vec::with_capacity(2 * m * f.width);
    for (e, &(u, v)) in graph.edges.iter().enumerate() {
        let block = f.edge(e);
        src.push(u);
        dst.push(v);
        feat.extend_from_slice(block);
        src.push(v);
        dst.push(u);
        for t1 in 0..w {
            for t2 in 0..w {
                feat.push(block[t2 * w + t1]);
            }
        }
    }
    let peak = feat.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let scale = if normalize && peak > 0.0 { 1.0 / peak } else { 1.0 };
    feat.iter_mut().for_each(|x| *x *= scale);
    Ok(PreparedGraph { n: graph.n_nodes, fw: f.width, src, dst, feat, scale })
}

/// Pre-activations with their standard normal CDF, so the backward pass
/// needs no second `erf`.
#[derive(Clone, Debug)]
struct Activation {
    x: Vec<f64>,
    cdf: Vec<f64>,
}

impl Activation {
    fn new(x: Vec<f64>) -> Self {
        let cdf = x.iter().map(|&v| normal_cdf(v)).collect();
        Activation { x, cdf }
    }

    fn output(&self) -> Vec<f64> {
        self.x.iter().zip(&self.cdf).map(|(x, c)| x * c).collect()
    }

    /// `d ⊙ GeLU'(x)`
    fn backprop(&self, d: &[f64]) -> Vec<f64> {
        let norm = 1.0 / (2.0 * PI).sqrt();
        d.iter()
            .zip(&self.x)
            .zip(&self.cdf)
            .map(|((d, &x), c)| d * (c + x * (-0.5 * x * x).exp() * norm))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct LayerCache {
    h_in: Vec<f64>,
    pre: Activation,
    z: Vec<f64>,
    u1: Activation,
    a1: Vec<f64>,
    u2: Activation,
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

#[inline]
fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// Row-major `m × k` or, transposed, `k × m` operand.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    trans: bool,
}

fn nt(data: &[f64]) -> Mat<'_> {
    Mat { data, trans: false }
}

fn tr(data: &[f64]) -> Mat<'_> {
    Mat { data, trans: true }
}

/// `C (m × n) = A·B + beta·C` with `A: m × k` and `B: k × n` after transposition.
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a.trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Rows of `out` start at `bias`, then `out += X·Wᵀ`.
fn affine_rows(rows: usize, w: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let (dout, din) = (bias.len(), w.len() / bias.len());
    for r in out.chunks_exact_mut(dout) {
        r.copy_from_slice(bias);
    }
    gemm(rows, din, dout, nt(x), tr(w), 1.0, out);
}

fn add_col_sums(m: &[f64], width: usize, out: &mut [f64]) {
    for row in m.chunks_exact(width) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
}

/// Node logits `H` (`n × (k+1)`, row-major).
pub fn gine_forward(g: &PreparedGraph, model: &GntModel) -> Result<(Vec<f64>, ForwardCache)> {
    let lay = &model.layout;
    if g.n != lay.n || g.fw != lay.fw {
        return Err(Error::DimensionMismatch { expected: lay.n, got: g.n });
    }
    let (n, d0, dh) = (lay.n, lay.d0, lay.dh);
    let p = &model.params;
    let n_msg = g.src.len();
    let mut e_proj = vec![0.0; n_msg * d0];
    affine_rows(n_msg, &p[lay.we..lay.be], &p[lay.be..lay.be + d0], &g.feat, &mut e_proj);
    let mut h = p[..n * d0].to_vec();
    let mut layers = Vec::with_capacity(N_LAYERS);
    for l in &lay.layers {
        let alpha = p[l.alpha];
        let mut pre = e_proj.clone();
        for (e, &s) in g.src.iter().enumerate() {
            for (x, hv) in pre[e * d0..(e + 1) * d0].iter_mut().zip(&h[s * d0..(s + 1) * d0]) {
                *x += hv;
            }
        }
        let pre = Activation::new(pre);
        let msg = pre.output();
        let mut z: Vec<f64> = h.iter().map(|x| (1.0 + alpha) * x).collect();
        for (e, &d) in g.dst.iter().enumerate() {
            for (zv, m) in z[d * d0..(d + 1) * d0].iter_mut().zip(&msg[e * d0..(e + 1) * d0]) {
                *zv += m;
            }
        }
        let mut u1 = vec![0.0; n * dh];
        affine_rows(n, &p[l.w1..l.b1], &p[l.b1..l.w2], &z, &mut u1);
        let u1 = Activation::new(u1);
        let a1 = u1.output();
        let mut u2 = vec![0.0; n * l.dout];
        affine_rows(n, &p[l.w2..l.b2], &p[l.b2..l.b2 + l.dout], &a1, &mut u2);
        let u2 = Activation::new(u2);
        let out = u2.output();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite activation".into()));
        }
        layers.push(LayerCache { h_in: std::mem::replace(&mut h, out), pre, z, u1, a1, u2 });
    }
    Ok((h, ForwardCache { layers }))
}

/// Gradient of a scalar with respect to every parameter, given `∂/∂H`.
pub fn gine_backward(g: &PreparedGraph, model: &GntModel, cache: &ForwardCache, d_h: &[f64]) -> Vec<f64> {
    let lay = &model.layout;
    let (n, d0, dh) = (lay.n, lay.d0, lay.dh);
    let p = &model.params;
    let n_msg = g.src.len();
    let mut grad = vec![0.0; lay.total];
    let mut d_e = vec![0.0; n_msg * d0];
    let mut d_out = d_h.to_vec();
    for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
        let dout = l.dout;
        let du2 = c.u2.backprop(&d_out);
        gemm(dout, n, dh, tr(&du2), nt(&c.a1), 1.0, &mut grad[l.w2..l.b2]);
        add_col_sums(&du2, dout, &mut grad[l.b2..l.b2 + dout]);
        let mut da1 = vec![0.0; n * dh];
        gemm(n, dout, dh, nt(&du2), nt(&p[l.w2..l.b2]), 0.0, &mut da1);
        let du1 = c.u1.backprop(&da1);
        gemm(dh, n, d0, tr(&du1), nt(&c.z), 1.0, &mut grad[l.w1..l.b1]);
        add_col_sums(&du1, dh, &mut grad[l.b1..l.w2]);
        let mut dz = vec![0.0; n * d0];
        gemm(n, dh, d0, nt(&du1), nt(&p[l.w1..l.b1]), 0.0, &mut dz);
        let alpha = p[l.alpha];
        let mut dh_in: Vec<f64> = dz.iter().map(|x| (1.0 + alpha) * x).collect();
        grad[l.alpha] += dz.iter().zip(&c.h_in).map(|(a, b)| a * b).sum::<f64>();
        let mut d_msg = vec![0.0; n_msg * d0];
        for (e, &d) in g.dst.iter().enumerate() {
            d_msg[e * d0..(e + 1) * d0].copy_from_slice(&dz[d * d0..(d + 1) * d0]);
        }
        let d_pre = c.pre.backprop(&d_msg);
        for (e, &s) in g.src.iter().enumerate() {
            let row = &d_pre[e * d0..(e + 1) * d0];
            for (x, m) in dh_in[s * d0..(s + 1) * d0].iter_mut().zip(row) {
                *x += m;
            }
        }
        for (x, m) in d_e.iter_mut().zip(&d_pre) {
            *x += m;
        }
        d_out = dh_in;
    }
    grad[..n * d0].copy_from_slice(&d_out);
    gemm(d0, n_msg, g.fw, tr(&d_e), nt(&g.feat), 1.0, &mut grad[lay.we..lay.be]);
    add_col_sums(&d_e, d0, &mut grad[lay.be..lay.be + d0]);
    grad
}

/// Inverse-CDF Gumbel(0, 1) draw from a uniform `u`, clamped into (0, 1).
#[inline]
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

pub fn gumbel_sample<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| gumbel_from_uniform(rng.random())).collect()
}

/// Executed Sinkhorn iterations, kept for differentiation.
#[derive(Clone, Debug)]
pub struct SinkhornRun {
    pub s: SoftAllocation,
    pub iters: usize,
    pub converged: bool,
    /// Log-matrix after each half step (rows, then columns).
    steps: Vec<Vec<f64>>,
    counts: Vec<f64>,
    active: Vec<bool>,
}

fn lse(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Alternating log-space row and column normalization of `x0`
/// (`n × w`, row-major) towards unit rows and column sums `counts_with_void`.
/// Columns with a zero target are held at zero mass.
pub fn sinkhorn_log(x0: &[f64], n: usize, counts_with_void: &[usize], max_iter: usize, tol: f64) -> Result<SinkhornRun> {
    let w = counts_with_void.len();
    if x0.len() != n * w {
        return Err(Error::DimensionMismatch { expected: n * w, got: x0.len() });
    }
    if counts_with_void.iter().sum::<usize>() != n {
        return Err(Error::InfeasibleStoichiometry { total: counts_with_void.iter().sum(), positions: n });
    }
    if max_iter == 0 {
        return Err(Error::InvalidParameters("sinkhorn needs at least one iteration".into()));
    }
    let counts: Vec<f64> = counts_with_void.iter().map(|&c| c as f64).collect();
    let active: Vec<bool> = counts_with_void.iter().map(|&c| c > 0).collect();
    let mut x = x0.to_vec();
    for r in 0..n {
        for j in 0..w {
            if !active[j] {
                x[r * w + j] = f64::NEG_INFINITY;
            }
        }
    }
    let mut steps = Vec::with_capacity(2 * max_iter);
    let mut converged = false;
    let mut iters = 0;
    while iters < max_iter {
        iters += 1;
        for r in 0..n {
            let row = &mut x[r * w..(r + 1) * w];
            let l = lse(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= l);
        }
        steps.push(x.clone());
        for j in 0..w {
            if !active[j] {
                continue;
            }
            let l = lse((0..n).map(|r| x[r * w + j]));
            let shift = counts[j].ln() - l;
            for r in 0..n {
                x[r * w + j] += shift;
            }
        }
        if x.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numerical("non-finite value in sinkhorn".into()));
        }
        steps.push(x.clone());
        let s = SoftAllocation { n, width: w, data: x.iter().map(|v| v.exp()).collect() };
        let (re, ce) = s.marginal_errors(counts_with_void);
        if re < tol && ce < tol {
            converged = true;
            break;
        }
    }
    let s = SoftAllocation { n, width: w, data: x.iter().map(|v| v.exp()).collect() };
    Ok(SinkhornRun { s, iters, converged, steps, counts, active })
}

impl SinkhornRun {
    /// Pulls `∂L/∂S` back to `∂L/∂X₀` through every recorded step.
    pub fn backward(&self, d_s: &[f64]) -> Vec<f64> {
        let (n, w) = (self.s.n, self.s.width);
        let mut d: Vec<f64> = d_s.iter().zip(&self.s.data).map(|(a, b)| a * b).collect();
        for (i, y) in self.steps.iter().enumerate().rev() {
            if i % 2 == 0 {
                for r in 0..n {
                    let rs: f64 = (0..w).filter(|&j| self.active[j]).map(|j| d[r * w + j]).sum();
                    for j in 0..w {
                        d[r * w + j] -= y[r * w + j].exp() * rs;
                    }
                }
            } else {
                for j in 0..w {
                    if !self.active[j] {
                        continue;
                    }
                    let cs: f64 = (0..n).map(|r| d[r * w + j]).sum();
                    for r in 0..n {
                        d[r * w + j] -= y[r * w + j].exp() / self.counts[j] * cs;
                    }
                }
            }
        }
        for r in 0..n {
            for j in 0..w {
                if !self.active[j] {
                    d[r * w + j] = 0.0;
                }
            }
        }
        d
    }
}

/// `Σ = [S ≥ 0.5]`, accepted only if it is a feasible allocation for `counts`.
pub fn threshold_allocation(s: &SoftAllocation, counts: &[usize]) -> std::result::Result<Allocation, Verdict> {
    if s.width != counts.len() + 1 {
        return Err(Verdict::WrongLength { expected: counts.len() + 1, got: s.width });
    }
    let m: Vec<f64> = s.data.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    let x = Allocation::from_one_hot(&m, s.n, counts.len())?;
    match validate_allocation(&x, counts, s.n) {
        Verdict::Ok => Ok(x),
        v => Err(v),
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// One forward/backward evaluation of the training objective.
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub sinkhorn: SinkhornRun,
}

/// Loss `vec(S)ᵀQvec(S)` for fixed noise, and its parameter gradient.
pub fn evaluate<S: EnergySource + ?Sized>(
    src: &S,
    g: &PreparedGraph,
    model: &GntModel,
    counts_with_void: &[usize],
    noise: &[f64],
    tau: f64,
    max_iter: usize,
    tol: f64,
) -> Result<Evaluation> {
    let (h, cache) = gine_forward(g, model)?;
    let x0: Vec<f64> = h.iter().zip(noise).map(|(a, b)| (a + b) / tau).collect();
    let run = sinkhorn_log(&x0, g.n, counts_with_void, max_iter, tol)?;
    let (loss, d_s) = energy_soft_grad(&run.s, src)?;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite soft energy".into()));
    }
    let d_x0 = run.backward(&d_s);
    let d_h: Vec<f64> = d_x0.iter().map(|d| d / tau).collect();
    let grad = gine_backward(g, model, &cache, &d_h);
    Ok(Evaluation { loss, grad, sinkhorn: run })
}

/// Trains a fresh model and returns the best feasible allocation seen.
pub fn gnt_train<S, R>(src: &S, graph: &CompGraph, counts: &[usize], cfg: &GntConfig, rng: &mut R) -> Result<SolveResult>
where
    S: EnergySource + ?Sized,
    R: Rng + ?Sized,
{
    let start = Instant::now();
    cfg.validate()?;
    let n = src.n_positions();
    if counts.len() != src.n_species() {
        return Err(Error::DimensionMismatch { expected: src.n_species(), got: counts.len() });
    }
    if graph.n_nodes != n {
        return Err(Error::DimensionMismatch { expected: n, got: graph.n_nodes });
    }
    let cwv = counts_with_void(n, counts)?;
    let g = prepare_graph(graph, cfg.normalize_edges)?;
    let mut model = GntModel::new(n, counts.len(), cfg.d0, cfg.dh, rng);
    let mut adam = Adam::new(model.n_params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let every = (cfg.epochs / cfg.trace_points.max(1)).max(1);
    let mut best: Option<(f64, Allocation, usize)> = None;
    let mut epochs = Vec::new();
    let width = counts.len() + 1;
    for epoch in 0..cfg.epochs {
        let noise = if cfg.gumbel_on { gumbel_sample(n * width, rng) } else { vec![0.0; n * width] };
        let tau = cfg.tau_at(epoch);
        let ev = evaluate(src, &g, &model, &cwv, &noise, tau, cfg.sink_max_iter, cfg.sink_tol)?;
        adam.step(&mut model.params, &ev.grad);
        let mut improved = false;
        let hard = threshold_allocation(&ev.sinkhorn.s, counts).ok();
        if let Some(x) = &hard {
            let e = energy_hard(x, src)?;
            if best.as_ref().is_none_or(|b| e < b.0) {
                best = Some((e, x.clone(), epoch));
                improved = true;
            }
        }
        if improved || epoch % every == 0 || epoch + 1 == cfg.epochs {
            epochs.push(EpochRecord {
                epoch,
                soft_loss: ev.loss,
                best_energy: best.as_ref().map(|b| b.0),
                feasible: hard.is_some(),
                sinkhorn_iters: ev.sinkhorn.iters,
            });
        }
    }
    let wall_time_s = start.elapsed().as_secs_f64();
    Ok(match best {
        Some((e, x, ep)) => SolveResult {
            best_energy: Some(e),
            best_allocation: Some(x),
            step_of_best: ep,
            feasible: true,
            trace: Vec::new(),
            epochs,
            wall_time_s,
            swap_fallbacks: 0,
        },
        None => {
            log::warn!("no feasible allocation in {} epochs", cfg.epochs);
            SolveResult {
                best_energy: None,
                best_allocation: None,
                step_of_best: 0,
                feasible: false,
                trace: Vec::new(),
                epochs,
                wall_time_s,
                swap_fallbacks: 0,
            }
        }
    })
}

/// Independent training runs in parallel.
pub fn gnt_shots<S: EnergySource + ?Sized>(
    src: &S,
    graph: &CompGraph,
    counts: &[usize],
    cfg: &GntConfig,
    seed: u64,
) -> Result<Vec<SolveResult>> {
    par::map_range(cfg.n_shots, |i| gnt_train(src, graph, counts, cfg, &mut shot_rng(seed, i)))
        .into_iter()
        .collect()
}

/// Fixed-noise objective for finite-difference checks.
pub struct GradCheck<'a, S: ?Sized> {
    pub src: &'a S,
    pub graph: &'a PreparedGraph,
    pub counts_with_void: Vec<usize>,
    pub noise: Vec<f64>,
    pub tau: f64,
    /// Exactly this many Sinkhorn iterations, so the objective is smooth.
    pub sink_iters: usize,
}

impl<S: EnergySource + ?Sized> GradCheck<'_, S> {
    pub fn loss_grad(&self, model: &GntModel) -> Result<(f64, Vec<f64>)> {
        let ev = evaluate(
            self.src,
            self.graph,
            model,
            &self.counts_with_void,
            &self.noise,
            self.tau,
            self.sink_iters,
            f64::MIN_POSITIVE,
        )?;
        Ok((ev.loss, ev.grad))
    }
}

/// Largest `|a − f| / max(|a|, |f|, 1e-6)` over all parameters, comparing
/// the analytic gradient `a` with central differences `f` at step `eps`.
pub fn grad_check<S: EnergySource + ?Sized>(model: &GntModel, inst: &GradCheck<'_, S>, eps: f64) -> Result<f64> {
    let (_, grad) = inst.loss_grad(model)?;
    let mut worst = 0.0f64;
    let mut m = model.clone();
    for i in 0..model.n_params() {
        let orig = m.params[i];
        m.params[i] = orig + eps;
        let (lp, _) = inst.loss_grad(&m)?;
        m.params[i] = orig - eps;
        let (lm, _) = inst.loss_grad(&m)?;
        m.params[i] = orig;
        let fd = (lp - lm) / (2.0 * eps);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

const CKPT_MAGIC: &[u8; 4] = b"GNTC";
const CKPT_VERSION: u32 = 1;

/// Header (magic, version, n, k+1, d0, dh, step, count) then parameters and
/// optimizer moments as little-endian f64.
pub fn write_checkpoint<W: Write>(mut w: W, model: &GntModel, adam: &Adam) -> Result<()> {
    let l = &model.layout;
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    for v in [l.n, l.w, l.d0, l.dh] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&adam.t.to_le_bytes())?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for block in [&model.params, &adam.m, &adam.v] {
        let bytes: Vec<u8> = block.iter().flat_map(|x| x.to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R, cfg: &GntConfig) -> Result<(GntModel, Adam)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != CKPT_VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let mut b8 = [0u8; 8];
    let mut next = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b8)?;
        Ok(u64::from_le_bytes(b8))
    };
    let (n, w, d0, dh) = (next(&mut r)? as usize, next(&mut r)? as usize, next(&mut r)? as usize, next(&mut r)? as usize);
    if w == 0 {
        return Err(Error::Format("zero species width".into()));
    }
    let t = next(&mut r)?;
    let count = next(&mut r)? as usize;
    let layout = Layout::new(n, w - 1, d0, dh);
    if layout.total != count {
        return Err(Error::Format(format!("parameter count {count} does not match layout {}", layout.total)));
    }
    let read_block = |r: &mut R| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let params = read_block(&mut r)?;
    let m = read_block(&mut r)?;
    let v = read_block(&mut r)?;
    let adam = Adam { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, t, m, v };
    Ok((GntModel { layout, params }, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{energy_soft, synth_q, QTable, SynthDistribution};
    use crate::graphs::{attach_edge_features, complete_graph, CompGraph, GraphKind, GraphMeta};
    use crate::oracle::{vertex_argmax, VERTEX_BUDGET};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_q(n: usize, k: usize, seed: u64) -> QTable {
        synth_q(n, k, seed, SynthDistribution::Uniform { low: -1.0, high: 1.0 }).unwrap()
    }

    fn small_instance(seed: u64) -> (QTable, PreparedGraph, GntModel) {
        let q = uniform_q(6, 2, seed);
        let g = attach_edge_features(complete_graph(6).unwrap(), &q).unwrap();
        let pg = prepare_graph(&g, true).unwrap();
        let model = GntModel::new(6, 2, 4, 4, &mut ChaCha8Rng::seed_from_u64(seed));
        (q, pg, model)
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12, "{}", gelu(1.0));
        for x in [-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layout_dimensions() {
        let l = Layout::new(6, 2, 4, 5);
        assert_eq!(l.layers[0].dout, 4);
        assert_eq!(l.layers[2].dout, 3);
        let per_layer = |dout: usize| 1 + 5 * 4 + 5 + dout * 5 + dout;
        assert_eq!(l.total, 6 * 4 + 4 * 9 + 4 + 2 * per_layer(4) + per_layer(3));
    }

    #[test]
    fn no_edges_uses_self_path_only() {
        let q = uniform_q(4, 1, 1);
        let empty = CompGraph::from_pairs(
            4,
            std::iter::empty(),
            GraphMeta { kind: GraphKind::Custom, params: Default::default(), warnings: vec![] },
        )
        .unwrap();
        let g = prepare_graph(&attach_edge_features(empty, &q).unwrap(), true).unwrap();
        let mut model = GntModel::new(4, 1, 3, 3, &mut ChaCha8Rng::seed_from_u64(2));
        let (h1, _) = gine_forward(&g, &model).unwrap();
        // edge projection cannot matter without edges
        for x in &mut model.params[model.layout.we..model.layout.be + 3] {
            *x = 7.0;
        }
        let (h2, _) = gine_forward(&g, &model).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn zero_model_gives_bias_rows() {
        let (_, g, _) = small_instance(1);
        let model = GntModel::zeros(6, 2, 4, 4);
        let (h, _) = gine_forward(&g, &model).unwrap();
        assert!(h.iter().all(|&x| x == 0.0));
        let mut m = model.clone();
        let last = m.layout.layers[2];
        m.params[last.b2] = 1.0;
        let (h, _) = gine_forward(&g, &m).unwrap();
        for r in 0..6 {
            assert_eq!(&h[r * 3..r * 3 + 3], &[gelu(1.0), 0.0, 0.0]);
        }
    }

    #[test]
    fn gumbel_moments() {
        assert!(gumbel_from_uniform((-1f64).exp()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let xs = gumbel_sample(n, &mut rng);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let gamma = 0.5772156649015329;
        let pi2_6 = PI * PI / 6.0;
        assert!((mean - gamma).abs() < 3.0 * (pi2_6 / n as f64).sqrt());
        // Var of the sample variance: (μ₄ − σ⁴)/n with excess kurtosis 12/5
        let sd_var = ((2.0 + 12.0 / 5.0) * pi2_6 * pi2_6 / n as f64).sqrt();
        assert!((var - pi2_6).abs() < 3.0 * sd_var);
    }

    #[test]
    fn sinkhorn_uniform_case() {
        let run = sinkhorn_log(&[0.0; 4], 2, &[1, 1], 100, 1e-9).unwrap();
        assert!(run.converged);
        for v in &run.s.data {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_permutation_limit() {
        let h = [3.0, 1.0, 0.0, 0.5, 2.5, 0.2, 0.1, 0.3, 2.0];
        let x0: Vec<f64> = h.iter().map(|x| x / 0.01).collect();
        let run = sinkhorn_log(&x0, 3, &[1, 1, 1], 500, 1e-3).unwrap();
        let x = threshold_allocation(&run.s, &[1, 1]).unwrap();
        assert_eq!(x.assign, vertex_argmax(&h, 3, &[1, 1, 1], VERTEX_BUDGET).unwrap().assign);
    }

    #[test]
    fn sinkhorn_marginals_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h: Vec<f64> = (0..18).map(|_| rng.random_range(-2.0..2.0)).collect();
        let run = sinkhorn_log(&h, 6, &[2, 1, 3], 200, 1e-3).unwrap();
        assert!(run.converged);
        let (re, ce) = run.s.marginal_errors(&[2, 1, 3]);
        assert!(re < 1e-3 && ce < 1e-3);
    }

    #[test]
    fn sinkhorn_zero_column_is_masked() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = sinkhorn_log(&h, 4, &[2, 2, 0], 200, 1e-6).unwrap();
        assert!(run.converged);
        assert!((0..4).all(|r| run.s.get(r, 2) == 0.0));
        let d = run.backward(&[1.0; 12]);
        assert!(d.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn sinkhorn_backward_linear_functional() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gmat: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cwv = [1, 2, 2];
        let f = |x: &[f64]| {
            let r = sinkhorn_log(x, 5, &cwv, 30, f64::MIN_POSITIVE).unwrap();
            r.s.data.iter().zip(&gmat).map(|(a, b)| a * b).sum::<f64>()
        };
        let run = sinkhorn_log(&x0, 5, &cwv, 30, f64::MIN_POSITIVE).unwrap();
        let d = run.backward(&gmat);
        for i in 0..15 {
            let mut p = x0.clone();
            p[i] += 1e-6;
            let mut m = x0.clone();
            m[i] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - d[i]).abs() < 1e-8, "{i}: {fd} vs {}", d[i]);
        }
    }

    #[test]
    fn threshold_cases() {
        let s = SoftAllocation::new(1, 3, vec![0.7, 0.2, 0.1]).unwrap();
        assert_eq!(threshold_allocation(&s, &[1, 0]).unwrap().assign, vec![0]);
        let s = SoftAllocation::new(2, 2, vec![0.5, 0.5, 0.0, 1.0]).unwrap();
        assert!(threshold_allocation(&s, &[1]).is_err());
        let s = SoftAllocation::new(2, 2, vec![0.5, 0.4, 0.0, 1.0]).unwrap();
        assert_eq!(threshold_allocation(&s, &[1]).unwrap().assign, vec![0, 1]);
        let s = SoftAllocation::new(3, 3, vec![0.34, 0.33, 0.33].repeat(3)).unwrap();
        assert!(threshold_allocation(&s, &[1, 1]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (q, g, model) = small_instance(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inst = GradCheck {
            src: &q,
            graph: &g,
            counts_with_void: vec![2, 1, 3],
            noise: gumbel_sample(18, &mut rng),
            tau: 0.5,
            sink_iters: 20,
        };
        let err = grad_check(&model, &inst, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn loss_matches_independent_soft_energy() {
        let (q, g, model) = small_instance(9);
        let noise = vec![0.0; 18];
        let ev = evaluate(&q, &g, &model, &[2, 1, 3], &noise, 0.3, 200, 1e-3).unwrap();
        assert!((ev.loss - energy_soft(&ev.sinkhorn.s, &q).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn training_on_zero_table() {
        let q = QTable::zeros(6, 2);
        let g = attach_edge_features(complete_graph(6).unwrap(), &q).unwrap();
        let cfg = GntConfig { epochs: 50, d0: 4, dh: 4, ..Default::default() };
        let r = gnt_train(&q, &g, &[2, 1], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        if r.feasible {
            assert_eq!(r.best_energy, Some(0.0));
        }
    }

    #[test]
    fn training_trace_and_determinism() {
        let q = uniform_q(6, 2, 3);
        let g = attach_edge_features(complete_graph(6).unwrap(), &q).unwrap();
        let cfg = GntConfig { epochs: 200, d0: 8, dh: 8, n_shots: 2, trace_points: 20, ..Default::default() };
        let a = gnt_shots(&q, &g, &[2, 1], &cfg, 5).unwrap();
        let b = gnt_shots(&q, &g, &[2, 1], &cfg, 5).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.same_outcome(y)));
        for r in &a {
            let bests: Vec<f64> = r.epochs.iter().filter_map(|e| e.best_energy).collect();
            assert!(bests.windows(2).all(|w| w[1] <= w[0]));
            if let (Some(e), Some(x)) = (r.best_energy, &r.best_allocation) {
                assert!((e - energy_hard(x, &q).unwrap()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (_, _, model) = small_instance(2);
        let mut adam = Adam::new(model.n_params(), 1e-3, 0.9, 0.999, 1e-8);
        adam.step(&mut model.params.clone(), &vec![0.1; model.n_params()]);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &model, &adam).unwrap();
        let (m2, a2) = read_checkpoint(&buf[..], &GntConfig::default()).unwrap();
        assert_eq!(m2, model);
        assert_eq!(a2, adam);
        buf[0] = b'X';
        assert!(read_checkpoint(&buf[..], &GntConfig::default()).is_err());
    }
}
