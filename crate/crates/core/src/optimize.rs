//! Image and bending losses, Adam, and the digital-twin optimization loop.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{Architecture, DeformationField, Displacement, Domain, GradientAccumulator, Gradients};
use crate::geometry::{BezierCurve, Point3, RefitOperator};
use crate::splat::{
    build_kernels, project_backward, project_with_cache, rasterize_backward, rasterize_impl, Camera,
    CurveKernels, ImageF, KernelBasis, RenderConfig,
};
use crate::wireframe::{printed_curves, DigitalTwin, PartialState, PrintedSamples, WireframeGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_bend: f64,
    /// Exponent `p` of the distance weight `γ(x) = dist(x)^p`.
    pub p_exponent: f64,
    /// Finite-difference step in mm; 1% of the model bbox diagonal if unset.
    pub fd_step: Option<f64>,
    pub bend_samples: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_bend: 1e-7,
            p_exponent: 2.0,
            fd_step: None,
            bend_samples: 4096,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_bend >= 0.0) || !self.w_bend.is_finite() {
            return Err(invalid("w_bend must be finite and non-negative"));
        }
        if !(self.p_exponent >= 0.0) || !self.p_exponent.is_finite() {
            return Err(invalid("p must be finite and non-negative"));
        }
        if let Some(h) = self.fd_step {
            if !(h > 0.0) || !h.is_finite() {
                return Err(invalid("finite-difference step must be positive"));
            }
        }
        if self.bend_samples == 0 {
            return Err(invalid("bend_samples must be at least 1"));
        }
        Ok(())
    }
}

/// One row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub iteration: usize,
    pub l_img: f64,
    pub l_bend: f64,
    pub l_total: f64,
    pub lr: f64,
}

/// `l_img + w_bend · l_bend`.
pub fn total_loss(l_img: f64, l_bend: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        iteration: 0,
        l_img,
        l_bend,
        l_total: l_img + weights.w_bend * l_bend,
        lr: 0.0,
    }
}

/// Sum of absolute pixel differences over all views, with its gradient
/// with respect to every rendered pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLoss {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

fn check_view(r: &ImageF, c: &ImageF) -> Result<()> {
    if r.width != c.width || r.height != c.height {
        return Err(invalid(format!(
            "rendered {}×{} against captured {}×{}",
            r.width, r.height, c.width, c.height
        )));
    }
    Ok(())
}

fn view_l1(r: &ImageF, c: &ImageF) -> (f64, Vec<f64>) {
    let mut sum = 0.0;
    let grad = r
        .data
        .iter()
        .zip(&c.data)
        .map(|(a, b)| {
            let d = a - b;
            sum += d.abs();
            if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    (sum, grad)
}

pub fn loss_img(rendered: &[ImageF], captured: &[ImageF]) -> Result<ImageLoss> {
    if rendered.len() != captured.len() {
        return Err(invalid(format!(
            "{} rendered views against {} captured",
            rendered.len(),
            captured.len()
        )));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(rendered.len());
    for (r, c) in rendered.iter().zip(captured) {
        check_view(r, c)?;
        let (v, g) = view_l1(r, c);
        value += v;
        grads.push(g);
    }
    Ok(ImageLoss { value, grads })
}

/// `dist(x, printed)^p`; identically 1 for `p = 0`.
pub fn gamma(x: &Point3, printed: &PrintedSamples, p: f64) -> f64 {
    printed.min_dist(x).powf(p)
}

/// RNG for the bending samples of one iteration.
pub fn bend_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

fn stencil(x: &Point3, h: f64) -> [Point3; 7] {
    let e = |i: usize| {
        let mut v = Point3::zeros();
        v[i] = h;
        v
    };
    [x + e(0), x - e(0), x + e(1), x - e(1), x + e(2), x - e(2), *x]
}

fn fd_laplacian(vals: &[Point3], h: f64) -> Point3 {
    (vals[0] + vals[1] + vals[2] + vals[3] + vals[4] + vals[5] - vals[6] * 6.0) / (h * h)
}

fn check_step(domain: &Domain, h: f64) -> Result<()> {
    let extent = (0..3).map(|a| domain.max[a] - domain.min[a]).fold(f64::INFINITY, f64::min);
    if !(h > 0.0) || h > extent {
        return Err(invalid(format!(
            "finite-difference step {h} must be positive and within the domain extent {extent}"
        )));
    }
    Ok(())
}

const BEND_CHUNK: usize = 128;

/// Monte Carlo estimate of `∫_Ω γ(x) ‖Δd(x)‖² dx` for any displacement
/// function (value only).
pub fn loss_bend_value<D: Displacement + ?Sized, R: Rng>(
    field: &D,
    printed: &PrintedSamples,
    weights: &LossWeights,
    domain: &Domain,
    h: f64,
    rng: &mut R,
) -> Result<f64> {
    weights.validate()?;
    check_step(domain, h)?;
    let xs: Vec<Point3> = (0..weights.bend_samples).map(|_| domain.sample(rng)).collect();
    let mut acc = 0.0;
    for chunk in xs.chunks(BEND_CHUNK) {
        let pts: Vec<Point3> = chunk.iter().flat_map(|x| stencil(x, h)).collect();
        let d = field.displacements(&pts);
        for (x, vals) in chunk.iter().zip(d.chunks(7)) {
            acc += gamma(x, printed, weights.p_exponent) * fd_laplacian(vals, h).norm_squared();
        }
    }
    Ok(domain.volume() * acc / weights.bend_samples as f64)
}

/// The bending estimate for the neural field. When `grad` is given, the
/// gradient of `scale · L_bend` with respect to θ is added to it.
pub fn loss_bend<R: Rng>(
    field: &DeformationField,
    printed: &PrintedSamples,
    weights: &LossWeights,
    domain: &Domain,
    h: f64,
    rng: &mut R,
    grad: Option<(&mut GradientAccumulator, f64)>,
) -> Result<f64> {
    let Some((acc, scale)) = grad else {
        return loss_bend_value(field, printed, weights, domain, h, rng);
    };
    weights.validate()?;
    check_step(domain, h)?;
    let n = weights.bend_samples;
    let xs: Vec<Point3> = (0..n).map(|_| domain.sample(rng)).collect();
    let norm = domain.volume() / n as f64;
    let mut total = 0.0;
    for chunk in xs.chunks(BEND_CHUNK) {
        let gammas: Vec<f64> = chunk.iter().map(|x| gamma(x, printed, weights.p_exponent)).collect();
        let pts: Vec<Point3> = chunk.iter().flat_map(|x| stencil(x, h)).collect();
        acc.record_seeded(field, &pts, |out| {
            let mut cot = Vec::with_capacity(out.len());
            for (g, vals) in gammas.iter().zip(out.chunks(7)) {
                let lap = fd_laplacian(vals, h);
                total += g * lap.norm_squared();
                let c = lap * (2.0 * g * norm * scale / (h * h));
                cot.extend([c, c, c, c, c, c, c * -6.0]);
            }
            cot
        });
    }
    Ok(norm * total)
}

/// Mean magnitude of the finite-difference Laplacian of `field` over
/// `n` uniform samples of `domain`.
pub fn mean_laplacian_magnitude<D: Displacement + ?Sized>(
    field: &D,
    domain: &Domain,
    h: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    check_step(domain, h)?;
    if n == 0 {
        return Err(invalid("need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<Point3> = (0..n).map(|_| domain.sample(&mut rng)).collect();
    let mut sum = 0.0;
    for chunk in xs.chunks(BEND_CHUNK) {
        let pts: Vec<Point3> = chunk.iter().flat_map(|x| stencil(x, h)).collect();
        for vals in field.displacements(&pts).chunks(7) {
            sum += fd_laplacian(vals, h).norm();
        }
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr0: f64,
    pub lr_min: f64,
    /// Per-iteration learning-rate factor.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr0: 1.6e-4,
            lr_min: 1.6e-5,
            decay: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// `max(lr0 · decay^i, lr_min)` for zero-based iteration `i`.
    pub fn lr(&self, i: usize) -> f64 {
        (self.lr0 * self.decay.powi(i.min(i32::MAX as usize) as i32)).max(self.lr_min)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.lr_min >= 0.0
            && self.lr_min <= self.lr0
            && self.decay > 0.0
            && self.decay <= 1.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(invalid("Adam settings out of range"));
        }
        Ok(())
    }
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(len: usize, cfg: &AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// One bias-corrected Adam update with learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(invalid(format!(
                "Adam state for {} parameters given {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let bad: Vec<usize> = (0..grads.len()).filter(|&i| !grads[i].is_finite()).collect();
        if let Some(&first) = bad.first() {
            return Err(Error::Numeric(format!(
                "{} of {} gradients are not finite (first at index {first}: {})",
                bad.len(),
                grads.len(),
                grads[first]
            )));
        }
        self.step += 1;
        let t = self.step.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinConfig {
    pub max_iters: usize,
    /// Stop when the total loss changed by less than `rel_tol` (relative)
    /// over the last `window` iterations.
    pub window: usize,
    pub rel_tol: f64,
    pub seed: u64,
    pub kernels_per_edge: usize,
    pub samples_per_edge: usize,
    pub bbox_enlarge: f64,
    /// Initial kernel cross-section (nominal strut radius, mm).
    pub tau_init: f64,
    pub alpha_init: f64,
    /// Adam learning rates of the log-thickness and logit-opacity.
    pub lr_tau: f64,
    pub lr_alpha: f64,
    pub adam: AdamConfig,
    pub architecture: Architecture,
    pub render: RenderConfig,
    /// Evaluate the bending term for the trace even when its weight is 0.
    pub report_bend: bool,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            max_iters: 300,
            window: 20,
            rel_tol: 1e-4,
            seed: 0,
            kernels_per_edge: 32,
            samples_per_edge: 64,
            bbox_enlarge: 1.1,
            tau_init: 0.5,
            alpha_init: 0.99,
            lr_tau: 0.005,
            lr_alpha: 0.05,
            adam: AdamConfig::default(),
            architecture: Architecture::default(),
            render: RenderConfig::default(),
            report_bend: true,
        }
    }
}

impl TwinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be at least 1"));
        }
        if self.window == 0 {
            return Err(invalid("convergence window must be at least 1"));
        }
        if self.kernels_per_edge == 0 {
            return Err(invalid("kernels_per_edge must be at least 1"));
        }
        if !(self.bbox_enlarge >= 1.0) {
            return Err(invalid("bbox enlargement must be >= 1"));
        }
        if !(self.tau_init > 0.0) || !self.tau_init.is_finite() {
            return Err(invalid("tau_init must be positive"));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return Err(invalid("alpha_init must lie strictly between 0 and 1"));
        }
        if !(self.lr_tau >= 0.0 && self.lr_alpha >= 0.0) {
            return Err(invalid("kernel learning rates must be non-negative"));
        }
        self.adam.validate()
    }
}

/// Fixed sample layout of the printed edges: the printed vertices first,
/// then the interior samples `u = j/m`, `0 < j < m`, of each printed edge.
///
/// Deforming the layout evaluates the displacement once per row; each
/// edge's displaced samples start and end at its deformed vertices, so
/// shared vertices stay shared.
#[derive(Debug, Clone)]
pub struct PrintedLayout {
    edges: Vec<usize>,
    vertices: Vec<usize>,
    ends: Vec<[usize; 2]>,
    points: Vec<Point3>,
    m: usize,
    refit: RefitOperator,
}

impl PrintedLayout {
    pub fn new(graph: &WireframeGraph, partial: &PartialState, m: usize) -> Result<Self> {
        if partial.is_empty() {
            return Err(invalid("the printed state is empty"));
        }
        let degree = graph.degree().ok_or_else(|| invalid("graph has no edges"))?;
        let refit = RefitOperator::uniform(degree, m)?;
        let vertices: Vec<usize> = partial.printed_vertices.iter().cloned().collect();
        let row: BTreeMap<usize, usize> = vertices.iter().enumerate().map(|(r, &v)| (v, r)).collect();
        let mut points: Vec<Point3> = vertices.iter().map(|&v| graph.vertices[v]).collect();
        let edges: Vec<usize> = partial.printed_edges.iter().cloned().collect();
        let mut ends = Vec::with_capacity(edges.len());
        for &k in &edges {
            let e = graph
                .edges
                .get(k)
                .ok_or_else(|| invalid(format!("edge {k} out of range")))?;
            if e.curve.degree() != degree {
                return Err(invalid("all edges must share one degree"));
            }
            ends.push([row[&e.v[0]], row[&e.v[1]]]);
            let s = e.curve.sample(m)?;
            points.extend_from_slice(&s.points[1..m]);
        }
        Ok(Self {
            edges,
            vertices,
            ends,
            points,
            m,
            refit,
        })
    }

    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    pub fn vertices(&self) -> &[usize] {
        &self.vertices
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    fn interior_row(&self, slot: usize, j: usize) -> usize {
        self.vertices.len() + slot * (self.m - 1) + (j - 1)
    }

    /// Refit curves (in edge order) and deformed vertices (in vertex order)
    /// from one displacement per row.
    pub fn fit(&self, disp: &[Point3]) -> Result<(Vec<BezierCurve>, Vec<Point3>)> {
        if disp.len() != self.points.len() {
            return Err(invalid("one displacement per layout row is required"));
        }
        let moved: Vec<Point3> = self.points.iter().zip(disp).map(|(p, d)| p + d).collect();
        let mut curves = Vec::with_capacity(self.edges.len());
        let mut buf = vec![Point3::zeros(); self.m + 1];
        for (slot, ends) in self.ends.iter().enumerate() {
            buf[0] = moved[ends[0]];
            buf[self.m] = moved[ends[1]];
            for j in 1..self.m {
                buf[j] = moved[self.interior_row(slot, j)];
            }
            curves.push(self.refit.fit(&buf)?);
        }
        Ok((curves, moved[..self.vertices.len()].to_vec()))
    }

    pub fn deform<D: Displacement + ?Sized>(&self, field: &D) -> Result<(Vec<BezierCurve>, Vec<Point3>)> {
        self.fit(&field.displacements(&self.points))
    }

    /// Pulls control-point gradients (per edge) back onto the rows.
    fn adjoint(&self, d_ctrl: &[Vec<Point3>]) -> Vec<Point3> {
        let mut out = vec![Point3::zeros(); self.points.len()];
        for (slot, g) in d_ctrl.iter().enumerate() {
            let d = self.refit.adjoint(g);
            out[self.ends[slot][0]] += d[0];
            out[self.ends[slot][1]] += d[self.m];
            for j in 1..self.m {
                out[self.interior_row(slot, j)] += d[j];
            }
        }
        out
    }

    /// Assembles a twin from fitted curves, vertices and kernel values.
    pub fn twin(&self, curves: Vec<BezierCurve>, vertices: Vec<Point3>, tau: &[f64], alpha: &[f64]) -> DigitalTwin {
        let k = tau.len() / self.edges.len().max(1);
        let mut twin = DigitalTwin::default();
        for (slot, (e, c)) in self.edges.iter().zip(curves).enumerate() {
            twin.deformed_edges.insert(*e, c);
            let params = (0..k).map(|j| (tau[slot * k + j], alpha[slot * k + j])).collect();
            twin.kernel_params.insert(*e, params);
        }
        for (v, p) in self.vertices.iter().zip(vertices) {
            twin.deformed_vertices.insert(*v, p);
        }
        twin
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Trainable quantities: θ plus per-kernel `log τ` and `logit α`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinState {
    pub field: DeformationField,
    pub log_tau: Vec<f64>,
    pub logit_alpha: Vec<f64>,
}

impl TwinState {
    pub fn tau(&self) -> Vec<f64> {
        self.log_tau.iter().map(|s| s.exp()).collect()
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.logit_alpha.iter().map(|&a| sigmoid(a)).collect()
    }

    pub fn set_tau(&mut self, i: usize, tau: f64) {
        self.log_tau[i] = tau.ln();
    }

    pub fn set_alpha(&mut self, i: usize, alpha: f64) {
        self.logit_alpha[i] = logit(alpha);
    }
}

/// Result of evaluating the objective at one state.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// With respect to θ, τ and α (not their reparametrizations).
    pub gradients: Option<Gradients>,
    pub curves: Vec<BezierCurve>,
    pub vertices: Vec<Point3>,
    pub renders: Vec<ImageF>,
}

struct ViewPass {
    loss: f64,
    render: ImageF,
    d_mean: Vec<Vector3<f64>>,
    d_cov: Vec<Matrix3<f64>>,
    d_alpha: Vec<f64>,
}

/// The twin objective for one printed state and one set of views.
pub struct TwinProblem<'a> {
    layout: PrintedLayout,
    cameras: &'a [Camera],
    captured: &'a [ImageF],
    cfg: TwinConfig,
    weights: LossWeights,
    basis: KernelBasis,
    printed: PrintedSamples,
    domain: Domain,
    fd_step: f64,
}

impl<'a> TwinProblem<'a> {
    pub fn new(
        graph: &WireframeGraph,
        partial: &PartialState,
        cameras: &'a [Camera],
        captured: &'a [ImageF],
        cfg: &TwinConfig,
        weights: &LossWeights,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if cameras.len() != captured.len() {
            return Err(invalid(format!(
                "{} cameras but {} captured images",
                cameras.len(),
                captured.len()
            )));
        }
        for (c, im) in cameras.iter().zip(captured) {
            if c.width != im.width || c.height != im.height {
                return Err(invalid("captured image size does not match its camera"));
            }
        }
        if partial.is_empty() {
            return Err(Error::UndefinedDistance);
        }
        let layout = PrintedLayout::new(graph, partial, cfg.samples_per_edge)?;
        let degree = graph.degree().unwrap_or(crate::geometry::DEFAULT_DEGREE);
        let basis = KernelBasis::new(degree, cfg.kernels_per_edge);
        let printed = PrintedSamples::new(&printed_curves(partial, graph, None), crate::geometry::DEFAULT_SAMPLES)?;
        let model_points = graph.all_points(cfg.samples_per_edge)?;
        let bbox = Domain::enclosing(&model_points, 1.0)?;
        let domain = Domain::enclosing(&model_points, cfg.bbox_enlarge)?;
        let fd_step = weights.fd_step.unwrap_or(0.01 * bbox.diagonal());
        check_step(&domain, fd_step)?;
        Ok(Self {
            layout,
            cameras,
            captured,
            cfg: cfg.clone(),
            weights: *weights,
            basis,
            printed,
            domain,
            fd_step,
        })
    }

    pub fn layout(&self) -> &PrintedLayout {
        &self.layout
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn fd_step(&self) -> f64 {
        self.fd_step
    }

    pub fn num_kernels(&self) -> usize {
        self.layout.edges.len() * self.cfg.kernels_per_edge
    }

    /// Zero-initialized field with the configured initial kernels.
    pub fn initial_state(&self) -> Result<TwinState> {
        let field = DeformationField::zero_init(self.cfg.seed, &self.cfg.architecture, self.domain)?;
        let n = self.num_kernels();
        Ok(TwinState {
            field,
            log_tau: vec![self.cfg.tau_init.ln(); n],
            logit_alpha: vec![logit(self.cfg.alpha_init); n],
        })
    }

    fn items<'b>(&self, curves: &'b [BezierCurve], tau: &'b [f64], alpha: &'b [f64]) -> Vec<CurveKernels<'b>> {
        let k = self.cfg.kernels_per_edge;
        curves
            .iter()
            .enumerate()
            .map(|(slot, c)| CurveKernels {
                edge: self.layout.edges[slot],
                curve: c,
                tau: &tau[slot * k..(slot + 1) * k],
                alpha: &alpha[slot * k..(slot + 1) * k],
            })
            .collect()
    }

    /// Loss at `state`; gradients when `want_grad`. `iteration` (1-based)
    /// selects the bending samples and the reported learning rate.
    pub fn evaluate(&self, state: &TwinState, iteration: usize, want_grad: bool) -> Result<Evaluation> {
        if !state.field.params.is_finite() {
            return Err(Error::Numeric("field parameters are not finite".into()));
        }
        let n_k = self.num_kernels();
        let tau = state.tau();
        let alpha = state.alpha();
        let mut acc = want_grad.then(|| GradientAccumulator::new(&state.field, n_k));

        let (disp, batch) = match acc.as_mut() {
            Some(a) => {
                let (d, id) = a.record(&state.field, &self.layout.points);
                (d, Some(id))
            }
            None => (state.field.eval_batch(&self.layout.points), None),
        };
        let (curves, vertices) = self.layout.fit(&disp)?;
        let items = self.items(&curves, &tau, &alpha);
        let (kernels, anchors) = build_kernels(&items, &self.basis)?;
        let covs: Vec<Matrix3<f64>> = kernels.iter().map(|k| k.covariance()).collect();

        let rcfg = self.cfg.render;
        let passes: Vec<ViewPass> = self
            .cameras
            .par_iter()
            .zip(self.captured.par_iter())
            .map(|(cam, target)| {
                let mut splats = Vec::with_capacity(n_k);
                let mut caches = Vec::with_capacity(n_k);
                for (i, k) in kernels.iter().enumerate() {
                    if let Some((s, c)) = project_with_cache(cam, &k.mean, &covs[i], k.alpha, i, &rcfg) {
                        splats.push(s);
                        caches.push(c);
                    }
                }
                let (render, _, tape) = rasterize_impl(cam, &splats, &rcfg, want_grad);
                let (loss, sign) = view_l1(&render, target);
                let mut pass = ViewPass {
                    loss,
                    render,
                    d_mean: Vec::new(),
                    d_cov: Vec::new(),
                    d_alpha: Vec::new(),
                };
                if want_grad {
                    pass.d_mean = vec![Vector3::zeros(); n_k];
                    pass.d_cov = vec![Matrix3::zeros(); n_k];
                    pass.d_alpha = vec![0.0; n_k];
                    let grads = rasterize_backward(cam, &splats, &tape, &sign);
                    for ((s, c), g) in splats.iter().zip(&caches).zip(&grads) {
                        if g.alpha == 0.0 && g.mean2d == Vector2::zeros() && g.cov2d == Matrix2::zeros() {
                            continue;
                        }
                        let (dm, dc) = project_backward(cam, c, &g.mean2d, &g.cov2d);
                        pass.d_mean[s.source] += dm;
                        pass.d_cov[s.source] += dc;
                        pass.d_alpha[s.source] += g.alpha;
                    }
                }
                pass
            })
            .collect();

        let mut l_img = 0.0;
        let mut d_mean = vec![Vector3::zeros(); if want_grad { n_k } else { 0 }];
        let mut d_cov = vec![Matrix3::zeros(); d_mean.len()];
        let mut d_alpha = vec![0.0; d_mean.len()];
        let mut renders = Vec::with_capacity(passes.len());
        for p in passes {
            l_img += p.loss;
            for i in 0..p.d_mean.len() {
                d_mean[i] += p.d_mean[i];
                d_cov[i] += p.d_cov[i];
                d_alpha[i] += p.d_alpha[i];
            }
            renders.push(p.render);
        }

        let mut d_tau = vec![0.0; d_mean.len()];
        if let (Some(a), Some(id)) = (acc.as_mut(), batch) {
            let d_ctrl = self.kernel_backward(&kernels, &anchors, &d_mean, &d_cov, &mut d_tau);
            a.seed(id, self.layout.adjoint(&d_ctrl))?;
            a.add_tau(&d_tau);
            a.add_alpha(&d_alpha);
        }

        let evaluate_bend = self.weights.w_bend > 0.0 || self.cfg.report_bend;
        let l_bend = if evaluate_bend {
            let mut rng = bend_rng(self.cfg.seed, iteration as u64);
            let grad = match acc.as_mut() {
                Some(a) if self.weights.w_bend > 0.0 => Some((a, self.weights.w_bend)),
                _ => None,
            };
            loss_bend(&state.field, &self.printed, &self.weights, &self.domain, self.fd_step, &mut rng, grad)?
        } else {
            0.0
        };

        let mut breakdown = total_loss(l_img, l_bend, &self.weights);
        breakdown.iteration = iteration;
        breakdown.lr = self.cfg.adam.lr(iteration.saturating_sub(1));
        if !breakdown.l_total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {iteration}: l_img={l_img}, l_bend={l_bend}"
            )));
        }
        let gradients = match acc {
            Some(mut a) => {
                a.finish(breakdown.l_total);
                Some(a.backward(&state.field)?)
            }
            None => None,
        };
        Ok(Evaluation {
            breakdown,
            gradients,
            curves,
            vertices,
            renders,
        })
    }

    /// Back through `Σ = τ² I + (σ_t² − τ²) t tᵀ`, `σ_t = ‖chord‖` and
    /// `t = c'/‖c'‖` to the control points of each edge.
    fn kernel_backward(
        &self,
        kernels: &[crate::splat::AnchoredKernel],
        anchors: &[crate::splat::AnchorCache],
        d_mean: &[Vector3<f64>],
        d_cov: &[Matrix3<f64>],
        d_tau: &mut [f64],
    ) -> Vec<Vec<Point3>> {
        let k = self.cfg.kernels_per_edge;
        let n = self.basis.mean[0].len();
        let mut out = Vec::with_capacity(anchors.len());
        for (slot, cache) in anchors.iter().enumerate() {
            let mut d_ctrl = vec![Point3::zeros(); n];
            let mut d_deriv = vec![Point3::zeros(); k];
            for j in 0..k {
                let idx = slot * k + j;
                let kern = &kernels[idx];
                let g = (d_cov[idx] + d_cov[idx].transpose()) * 0.5;
                let t = kern.frame.t;
                let gt = g * t;
                let tgt = t.dot(&gt);
                let tau = kern.sigma_n;
                let st = kern.sigma_t;
                d_tau[idx] += 2.0 * tau * (g.trace() - tgt);
                let d_st = 2.0 * st * tgt;
                let d_t = gt * (2.0 * (st * st - tau * tau));
                let src = cache.tangent_source[j];
                let vn = cache.deriv[src].norm();
                d_deriv[src] += (d_t - t * t.dot(&d_t)) / vn;
                let chord = cache.chord[j];
                let cn = chord.norm();
                let d_chord = if cn > 0.0 { chord * (d_st / cn) } else { Point3::zeros() };
                for i in 0..n {
                    d_ctrl[i] += d_mean[idx] * self.basis.mean[j][i] + d_chord * self.basis.chord[j][i];
                }
            }
            for (j, dd) in d_deriv.iter().enumerate() {
                for i in 0..n {
                    d_ctrl[i] += dd * self.basis.deriv[j][i];
                }
            }
            out.push(d_ctrl);
        }
        out
    }

    /// Renders `state` into every view.
    pub fn render(&self, state: &TwinState) -> Result<Vec<ImageF>> {
        Ok(self.evaluate_forward(state)?.renders)
    }

    fn evaluate_forward(&self, state: &TwinState) -> Result<Evaluation> {
        self.evaluate(state, 0, false)
    }

    pub fn twin(&self, state: &TwinState) -> Result<DigitalTwin> {
        let disp = state.field.eval_batch(&self.layout.points);
        let (curves, vertices) = self.layout.fit(&disp)?;
        Ok(self.layout.twin(curves, vertices, &state.tau(), &state.alpha()))
    }
}

/// Output of [`construct_twin`].
#[derive(Debug, Clone)]
pub struct TwinResult {
    pub twin: DigitalTwin,
    pub state: TwinState,
    pub trace: Vec<LossBreakdown>,
    pub converged: bool,
}

impl TwinResult {
    pub fn field(&self) -> &DeformationField {
        &self.state.field
    }
}

/// Fits the deformation field and kernels so that renders of the printed
/// edges match `captured`.
pub fn construct_twin(
    graph: &WireframeGraph,
    partial: &PartialState,
    cameras: &[Camera],
    captured: &[ImageF],
    cfg: &TwinConfig,
    weights: &LossWeights,
) -> Result<TwinResult> {
    let problem = TwinProblem::new(graph, partial, cameras, captured, cfg, weights)?;
    let mut state = problem.initial_state()?;
    optimize_state(&problem, &mut state, cfg)
}

/// Runs the optimization loop from `state`.
pub fn optimize_state(problem: &TwinProblem<'_>, state: &mut TwinState, cfg: &TwinConfig) -> Result<TwinResult> {
    let mut adam_theta = AdamState::new(state.field.params.len(), &cfg.adam);
    let mut adam_tau = AdamState::new(state.log_tau.len(), &cfg.adam);
    let mut adam_alpha = AdamState::new(state.logit_alpha.len(), &cfg.adam);
    let mut trace: Vec<LossBreakdown> = Vec::with_capacity(cfg.max_iters);
    let mut converged = false;
    for i in 0..cfg.max_iters {
        let eval = problem.evaluate(state, i + 1, true).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("{msg} (after {} iterations)", trace.len())),
            other => other,
        })?;
        trace.push(eval.breakdown);
        if trace.len() > cfg.window {
            let now = trace[trace.len() - 1].l_total;
            let then = trace[trace.len() - 1 - cfg.window].l_total;
            let rel = (now - then).abs() / then.abs().max(f64::MIN_POSITIVE);
            if rel < cfg.rel_tol {
                converged = true;
                break;
            }
        }
        let g = eval.gradients.expect("gradients requested");
        adam_theta.step(state.field.params.as_mut_slice(), &g.theta, cfg.adam.lr(i))?;
        let tau = state.tau();
        let g_s: Vec<f64> = g.tau.iter().zip(&tau).map(|(g, t)| g * t).collect();
        adam_tau.step(&mut state.log_tau, &g_s, cfg.lr_tau)?;
        let alpha = state.alpha();
        let g_a: Vec<f64> = g.alpha.iter().zip(&alpha).map(|(g, a)| g * a * (1.0 - a)).collect();
        adam_alpha.step(&mut state.logit_alpha, &g_a, cfg.lr_alpha)?;
    }
    Ok(TwinResult {
        twin: problem.twin(state)?,
        state: state.clone(),
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::MlpParams;

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((total_loss(5.0, 2e6, &w).l_total - 5.2).abs() < 1e-12);
        let zero = LossWeights { w_bend: 0.0, ..w };
        assert_eq!(total_loss(3.0, 7.0, &zero).l_total, 3.0);
        assert_eq!(total_loss(0.0, 0.0, &w).l_total, 0.0);
    }

    #[test]
    fn image_loss_examples() {
        let a = ImageF::from_data(2, 2, vec![0.5, 0.25, 0.0, 1.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(loss_img(&[a.clone()], &[a.clone()]).unwrap().value, 0.0);
        b.data[1] = 0.5;
        let l = loss_img(&[a.clone()], &[b.clone()]).unwrap();
        assert_eq!(l.value, 0.25);
        assert_eq!(l.grads[0], vec![0.0, -1.0, 0.0, 0.0]);
        // Finite-difference check of the sign gradient at a nonzero residual.
        let h = 1e-7;
        let mut p = a.clone();
        p.data[1] += h;
        let fd = (loss_img(&[p], &[b.clone()]).unwrap().value - l.value) / h;
        assert!((fd - l.grads[0][1]).abs() < 1e-6);
        let c = ImageF::black(3, 2);
        assert!(loss_img(&[a.clone()], &[c]).is_err());
        assert!(loss_img(&[a], &[]).is_err());
    }

    #[test]
    fn gamma_examples() {
        let seg = BezierCurve::straight(Point3::zeros(), Point3::new(1.0, 0.0, 0.0), 3).unwrap();
        let printed = PrintedSamples::new(&[&seg], 64).unwrap();
        let x = Point3::new(0.5, 3.0, 0.0);
        assert!((gamma(&x, &printed, 2.0) - 9.0).abs() < 1e-12);
        assert_eq!(gamma(&x, &printed, 0.0), 1.0);
        let on = seg.eval(0.25).unwrap();
        assert_eq!(gamma(&on, &printed, 0.0), 1.0);
        for p in [0.5, 1.0, 2.0, 3.0] {
            assert!(gamma(&on, &printed, p) < 1e-12);
            assert!(gamma(&x, &printed, p + 0.5) > gamma(&x, &printed, p));
        }
    }

    fn box_domain() -> Domain {
        Domain {
            min: [0.0, 0.0, 0.0],
            max: [2.0, 1.0, 1.5],
        }
    }

    fn far_samples() -> PrintedSamples {
        let seg = BezierCurve::straight(Point3::zeros(), Point3::new(1.0, 0.0, 0.0), 3).unwrap();
        PrintedSamples::new(&[&seg], 64).unwrap()
    }

    #[test]
    fn bend_of_affine_and_zero_fields_vanishes() {
        let w = LossWeights {
            p_exponent: 0.0,
            bend_samples: 500,
            ..LossWeights::default()
        };
        let a = Matrix3::new(0.3, -0.2, 0.1, 0.0, 0.5, 0.4, -0.7, 0.2, 0.1);
        let affine = move |x: &Point3| a * x + Point3::new(1.0, 2.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = box_domain();
        let l = loss_bend_value(&affine, &far_samples(), &w, &d, 0.05, &mut rng).unwrap();
        assert!(l <= 1e-10 * d.volume(), "{l}");
        let zero = |_: &Point3| Point3::zeros();
        assert_eq!(loss_bend_value(&zero, &far_samples(), &w, &d, 0.05, &mut rng).unwrap(), 0.0);
        assert!(loss_bend_value(&zero, &far_samples(), &w, &d, 5.0, &mut rng).is_err());
    }

    #[test]
    fn bend_of_quadratic_field_matches_analytic_laplacian() {
        let w = LossWeights {
            p_exponent: 0.0,
            bend_samples: 64,
            ..LossWeights::default()
        };
        let quad = |x: &Point3| Point3::new(x.x * x.x, 0.0, 0.0);
        let d = box_domain();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = loss_bend_value(&quad, &far_samples(), &w, &d, 0.01, &mut rng).unwrap();
        // The FD Laplacian of a quadratic is exact, so there is no Monte
        // Carlo error either.
        assert!((l - 4.0 * d.volume()).abs() < 1e-6 * d.volume());
    }

    fn small_arch() -> Architecture {
        Architecture {
            encoding: crate::field::EncodingConfig {
                num_bands: 3,
                include_input: true,
            },
            hidden_layers: 3,
            hidden_width: 16,
            skip_layer: 2,
        }
    }

    fn randomized_field(seed: u64, domain: Domain) -> DeformationField {
        let mut params: MlpParams = crate::field::zero_init(seed, &small_arch()).unwrap();
        let out = params.output_layer();
        let range = params.weight_range(out).start..params.bias_range(out).end;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in &mut params.as_mut_slice()[range] {
            *v = rng.gen_range(-0.3..0.3);
        }
        DeformationField::new(params, domain)
    }

    #[test]
    fn bend_gradient_matches_finite_differences() {
        let d = box_domain();
        let field = randomized_field(3, d);
        let w = LossWeights {
            p_exponent: 1.0,
            bend_samples: 40,
            ..LossWeights::default()
        };
        let printed = far_samples();
        let h = 0.05;
        let mut acc = GradientAccumulator::new(&field, 0);
        let l = loss_bend(&field, &printed, &w, &d, h, &mut bend_rng(9, 1), Some((&mut acc, 1.0))).unwrap();
        let l_value = loss_bend(&field, &printed, &w, &d, h, &mut bend_rng(9, 1), None).unwrap();
        assert!((l - l_value).abs() <= 1e-9 * l.abs());
        acc.finish(l);
        let g = acc.backward(&field).unwrap();
        let n = field.params.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let i = rng.gen_range(0..n);
            let eps = 1e-6;
            let mut fp = field.clone();
            fp.params.as_mut_slice()[i] += eps;
            let mut fm = field.clone();
            fm.params.as_mut_slice()[i] -= eps;
            let lp = loss_bend(&fp, &printed, &w, &d, h, &mut bend_rng(9, 1), None).unwrap();
            let lm = loss_bend(&fm, &printed, &w, &d, h, &mut bend_rng(9, 1), None).unwrap();
            let fd = (lp - lm) / (2.0 * eps);
            let scale = fd.abs().max(g.theta[i].abs()).max(1e-6 * l);
            assert!((fd - g.theta[i]).abs() / scale < 1e-4, "param {i}: {} vs {fd}", g.theta[i]);
        }
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(3, &cfg);
        let mut p = vec![1.0, 2.0, 3.0];
        s.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(s.step, 1);

        let mut s = AdamState::new(3, &cfg);
        let mut p = vec![0.0; 3];
        s.step(&mut p, &[0.5, -2.0, 10.0], cfg.lr0).unwrap();
        for (v, sign) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - sign * cfg.lr0).abs() < 1e-7 * cfg.lr0);
        }
        assert!(matches!(
            s.step(&mut p, &[f64::NAN, 0.0, 0.0], 0.1),
            Err(Error::Numeric(_))
        ));
        assert!(s.step(&mut p, &[0.0; 2], 0.1).is_err());

        let run = || {
            let mut s = AdamState::new(4, &cfg);
            let mut p = vec![0.3; 4];
            for i in 0..50 {
                let g: Vec<f64> = p.iter().enumerate().map(|(k, v)| v * (k as f64 + 1.0) - 0.1 * i as f64).collect();
                s.step(&mut p, &g, cfg.lr(i)).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lr_schedule() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.lr(0), 1.6e-4);
        assert!((cfg.lr(10) - 1.6e-4 * 0.99f64.powi(10)).abs() < 1e-18);
        assert_eq!(cfg.lr(1000), 1.6e-5);
        for i in 0..400 {
            assert!(cfg.lr(i + 1) <= cfg.lr(i));
        }
    }

    #[test]
    fn sigmoid_logit_inverse() {
        for p in [0.01, 0.3, 0.5, 0.99] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-14);
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
