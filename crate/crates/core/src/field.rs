//! Neural deformation field: a positional-encoded MLP mapping a point to a
//! displacement, with batched reverse-mode gradients.
//!
//! Architecture: encoding → 8 hidden ReLU layers of width 256 → linear
//! layer with 3 outputs. The encoding is concatenated to the input of the
//! fifth hidden layer, so with 15 frequency bands that layer is
//! `256 + 93 = 349` wide. The output layer starts at exactly zero, which
//! makes a fresh field the identity deformation.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::Point3;

/// Sinusoidal positional encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub num_bands: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            num_bands: 15,
            include_input: true,
        }
    }
}

impl EncodingConfig {
    pub fn dim(&self) -> usize {
        let input = if self.include_input { 3 } else { 0 };
        input + 6 * self.num_bands
    }
}

/// Encodes a point already normalized to `[-1, 1]³`:
/// `[x, sin(2^0 π x), cos(2^0 π x), …, sin(2^(L-1) π x), cos(2^(L-1) π x)]`
/// where each sin/cos block covers the three coordinates.
pub fn encode(x: &Point3, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim());
    encode_into(x, cfg, &mut out);
    out
}

fn encode_into(x: &Point3, cfg: &EncodingConfig, out: &mut Vec<f64>) {
    if cfg.include_input {
        out.extend_from_slice(x.as_slice());
    }
    let mut freq = PI;
    for _ in 0..cfg.num_bands {
        for c in 0..3 {
            out.push((freq * x[c]).sin());
        }
        for c in 0..3 {
            out.push((freq * x[c]).cos());
        }
        freq *= 2.0;
    }
}

/// `d encode / d x̂`, shape `dim × 3`, row-major.
fn encode_jacobian(x: &Point3, cfg: &EncodingConfig) -> Vec<[f64; 3]> {
    let mut rows = Vec::with_capacity(cfg.dim());
    if cfg.include_input {
        rows.push([1.0, 0.0, 0.0]);
        rows.push([0.0, 1.0, 0.0]);
        rows.push([0.0, 0.0, 1.0]);
    }
    let mut freq = PI;
    for _ in 0..cfg.num_bands {
        for c in 0..3 {
            let mut r = [0.0; 3];
            r[c] = freq * (freq * x[c]).cos();
            rows.push(r);
        }
        for c in 0..3 {
            let mut r = [0.0; 3];
            r[c] = -freq * (freq * x[c]).sin();
            rows.push(r);
        }
        freq *= 2.0;
    }
    rows
}

/// Axis-aligned computational domain Ω. Field inputs are normalized to
/// `[-1, 1]` per axis with respect to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Domain {
    /// Bounding box of `points` scaled by `enlarge` about its center. Flat
    /// axes are padded to a tenth of the largest extent first.
    pub fn enclosing(points: &[Point3], enlarge: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(invalid("cannot bound an empty point set"));
        }
        if !(enlarge >= 1.0) {
            return Err(invalid(format!("enlargement {enlarge} must be >= 1")));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for q in points {
            lo = lo.inf(q);
            hi = hi.sup(q);
        }
        let extent = hi - lo;
        let largest = extent.max();
        if !(largest > 0.0) || !largest.is_finite() {
            return Err(invalid("degenerate bounding box"));
        }
        let center = (lo + hi) * 0.5;
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        for a in 0..3 {
            let half = extent[a].max(0.1 * largest) * 0.5 * enlarge;
            min[a] = center[a] - half;
            max[a] = center[a] + half;
        }
        Ok(Self { min, max })
    }

    pub fn center(&self) -> Point3 {
        Point3::from_fn(|a, _| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn half_extent(&self) -> Point3 {
        Point3::from_fn(|a, _| 0.5 * (self.max[a] - self.min[a]))
    }

    pub fn diagonal(&self) -> f64 {
        2.0 * self.half_extent().norm()
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.max[a] - self.min[a]).product()
    }

    pub fn contains(&self, x: &Point3) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] <= self.max[a])
    }

    pub fn normalize(&self, x: &Point3) -> Point3 {
        (x - self.center()).component_div(&self.half_extent())
    }

    /// Uniform sample inside the box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Point3 {
        Point3::from_fn(|a, _| rng.gen_range(self.min[a]..self.max[a]))
    }
}

/// Layer layout of the MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoding: EncodingConfig,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Index of the hidden layer whose input is `[previous layer, encoding]`.
    pub skip_layer: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoding: EncodingConfig::default(),
            hidden_layers: 8,
            hidden_width: 256,
            skip_layer: 4,
        }
    }
}

impl Architecture {
    /// `(inputs, outputs)` of each linear layer, the last one being the
    /// output layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let enc = self.encoding.dim();
        let w = self.hidden_width;
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        for l in 0..self.hidden_layers {
            let inp = if l == 0 {
                enc
            } else if l == self.skip_layer {
                w + enc
            } else {
                w
            };
            shapes.push((inp, w));
        }
        shapes.push((if self.hidden_layers == 0 { enc } else { w }, 3));
        shapes
    }

    fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(invalid("the field needs at least one hidden layer"));
        }
        if self.skip_layer == 0 || self.skip_layer >= self.hidden_layers {
            return Err(invalid(format!(
                "skip layer {} must be in 1..{}",
                self.skip_layer, self.hidden_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    inp: usize,
    out: usize,
    w: usize,
    b: usize,
}

/// MLP parameters θ, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    arch: Architecture,
    layers: Vec<Layer>,
    data: Vec<f64>,
    seed: u64,
}

impl MlpParams {
    fn zeros(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut off = 0;
        for (inp, out) in arch.layer_shapes() {
            layers.push(Layer {
                inp,
                out,
                w: off,
                b: off + inp * out,
            });
            off += inp * out + out;
        }
        Ok(Self {
            arch,
            layers,
            data: vec![0.0; off],
            seed,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Flat index range of a layer's weights (row-major, `out × in`).
    pub fn weight_range(&self, layer: usize) -> std::ops::Range<usize> {
        let l = self.layers[layer];
        l.w..l.b
    }

    pub fn bias_range(&self, layer: usize) -> std::ops::Range<usize> {
        let l = self.layers[layer];
        l.b..l.b + l.out
    }

    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn w(&self, l: &Layer) -> &[f64] {
        &self.data[l.w..l.b]
    }

    fn b(&self, l: &Layer) -> &[f64] {
        &self.data[l.b..l.b + l.out]
    }
}

/// Hidden layers get He-style uniform weights `U(±√(6/fan_in))` from
/// `seed` and zero biases; the output layer is exactly zero.
pub fn zero_init(seed: u64, arch: &Architecture) -> Result<MlpParams> {
    let mut params = MlpParams::zeros(arch.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_layer = params.output_layer();
    for l in 0..out_layer {
        let layer = params.layers[l];
        let bound = (6.0 / layer.inp as f64).sqrt();
        for v in &mut params.data[layer.w..layer.b] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    Ok(params)
}

/// `C = alpha · op(A) op(B) + beta · C` through the packed GEMM.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie inside the given
    // slices, which the asserts and callers' shape bookkeeping guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Activations kept by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct FieldTape {
    batch: usize,
    /// Input matrix of every linear layer, row-major `batch × inp`.
    inputs: Vec<Vec<f64>>,
}

impl FieldTape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// The deformation field `d_θ`: MLP parameters plus the domain that
/// normalizes its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub params: MlpParams,
    pub domain: Domain,
}

/// Anything that maps a point to a displacement.
pub trait Displacement {
    fn displacement(&self, x: &Point3) -> Point3;

    fn displacements(&self, xs: &[Point3]) -> Vec<Point3> {
        xs.iter().map(|x| self.displacement(x)).collect()
    }
}

impl<F: Fn(&Point3) -> Point3> Displacement for F {
    fn displacement(&self, x: &Point3) -> Point3 {
        self(x)
    }
}

impl Displacement for DeformationField {
    fn displacement(&self, x: &Point3) -> Point3 {
        self.forward_batch(std::slice::from_ref(x), false).0[0]
    }

    fn displacements(&self, xs: &[Point3]) -> Vec<Point3> {
        self.eval_batch(xs)
    }
}

const EVAL_CHUNK: usize = 1024;

impl DeformationField {
    pub fn new(params: MlpParams, domain: Domain) -> Self {
        Self { params, domain }
    }

    pub fn zero_init(seed: u64, arch: &Architecture, domain: Domain) -> Result<Self> {
        Ok(Self::new(zero_init(seed, arch)?, domain))
    }

    fn encode_batch(&self, points: &[Point3]) -> Vec<f64> {
        let cfg = self.params.arch.encoding;
        let mut enc = Vec::with_capacity(points.len() * cfg.dim());
        for x in points {
            encode_into(&self.domain.normalize(x), &cfg, &mut enc);
        }
        enc
    }

    /// Batched evaluation without keeping activations.
    pub fn eval_batch(&self, points: &[Point3]) -> Vec<Point3> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            out.extend(self.forward_batch(chunk, false).0);
        }
        out
    }

    /// Forward pass over a batch; returns the tape when `record` is set.
    pub fn forward_batch(&self, points: &[Point3], record: bool) -> (Vec<Point3>, Option<FieldTape>) {
        let batch = points.len();
        let p = &self.params;
        let enc_dim = p.arch.encoding.dim();
        let enc = self.encode_batch(points);
        let mut inputs: Vec<Vec<f64>> = Vec::new();
        let mut x = enc.clone();
        let last = p.output_layer();
        for (li, layer) in p.layers.iter().enumerate() {
            if li == p.arch.skip_layer {
                let prev = layer.inp - enc_dim;
                let mut cat = Vec::with_capacity(batch * layer.inp);
                for r in 0..batch {
                    cat.extend_from_slice(&x[r * prev..(r + 1) * prev]);
                    cat.extend_from_slice(&enc[r * enc_dim..(r + 1) * enc_dim]);
                }
                x = cat;
            }
            let mut z = vec![0.0; batch * layer.out];
            gemm(
                batch,
                layer.inp,
                layer.out,
                &x,
                layer.inp,
                1,
                p.w(layer),
                1,
                layer.inp,
                0.0,
                &mut z,
            );
            let bias = p.b(layer);
            for row in z.chunks_mut(layer.out) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                    if li != last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            if record {
                inputs.push(std::mem::replace(&mut x, z));
            } else {
                x = z;
            }
        }
        let out = x.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
        let tape = record.then_some(FieldTape { batch, inputs });
        (out, tape)
    }

    /// Accumulates `Σ_r cot_r · ∂d(x_r)/∂θ` into `grad` (same layout as the
    /// parameters).
    pub fn backward(&self, tape: &FieldTape, cotangents: &[Point3], grad: &mut [f64]) {
        let p = &self.params;
        assert_eq!(cotangents.len(), tape.batch, "cotangent count");
        assert_eq!(grad.len(), p.data.len(), "gradient layout");
        let batch = tape.batch;
        if batch == 0 {
            return;
        }
        let enc_dim = p.arch.encoding.dim();
        let mut g: Vec<f64> = cotangents.iter().flat_map(|c| [c.x, c.y, c.z]).collect();
        for li in (0..p.layers.len()).rev() {
            let layer = p.layers[li];
            let x = &tape.inputs[li];
            gemm(
                layer.out,
                batch,
                layer.inp,
                &g,
                1,
                layer.out,
                x,
                layer.inp,
                1,
                1.0,
                &mut grad[layer.w..layer.b],
            );
            let gb = &mut grad[layer.b..layer.b + layer.out];
            for row in g.chunks(layer.out) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            if li == 0 {
                break;
            }
            let mut dx = vec![0.0; batch * layer.inp];
            gemm(
                batch,
                layer.out,
                layer.inp,
                &g,
                layer.out,
                1,
                p.w(&layer),
                layer.inp,
                1,
                0.0,
                &mut dx,
            );
            // The previous layer's ReLU output occupies the leading columns
            // of this layer's input.
            let prev = if li == p.arch.skip_layer {
                layer.inp - enc_dim
            } else {
                layer.inp
            };
            let mut next = Vec::with_capacity(batch * prev);
            for r in 0..batch {
                let row_dx = &dx[r * layer.inp..r * layer.inp + prev];
                let row_x = &x[r * layer.inp..r * layer.inp + prev];
                next.extend(
                    row_dx
                        .iter()
                        .zip(row_x)
                        .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }),
                );
            }
            g = next;
        }
    }

    /// Jacobian `∂d/∂x` (rows: output components) by forward-mode
    /// propagation through the network.
    pub fn input_jacobian(&self, x: &Point3) -> Matrix3<f64> {
        let p = &self.params;
        let cfg = p.arch.encoding;
        let xn = self.domain.normalize(x);
        let inv_half = self.domain.half_extent().map(|h| 1.0 / h);
        let enc = encode(&xn, &cfg);
        let enc_t: Vec<[f64; 3]> = encode_jacobian(&xn, &cfg)
            .into_iter()
            .map(|r| [r[0] * inv_half.x, r[1] * inv_half.y, r[2] * inv_half.z])
            .collect();
        let mut val = enc.clone();
        let mut tan = enc_t.clone();
        let last = p.output_layer();
        for (li, layer) in p.layers.iter().enumerate() {
            if li == p.arch.skip_layer {
                val.extend_from_slice(&enc);
                tan.extend_from_slice(&enc_t);
            }
            let w = p.w(layer);
            let b = p.b(layer);
            let mut nv = vec![0.0; layer.out];
            let mut nt = vec![[0.0; 3]; layer.out];
            for o in 0..layer.out {
                let row = &w[o * layer.inp..(o + 1) * layer.inp];
                let mut z = b[o];
                let mut dz = [0.0; 3];
                for (i, wi) in row.iter().enumerate() {
                    z += wi * val[i];
                    for c in 0..3 {
                        dz[c] += wi * tan[i][c];
                    }
                }
                if li != last && z <= 0.0 {
                    z = 0.0;
                    dz = [0.0; 3];
                }
                nv[o] = z;
                nt[o] = dz;
            }
            val = nv;
            tan = nt;
        }
        Matrix3::from_fn(|r, c| tan[r][c])
    }

    pub fn write_checkpoint(&self, stem: &Path) -> Result<()> {
        let mut bin = std::fs::File::create(stem.with_extension("bin"))?;
        let mut bytes = Vec::with_capacity(self.params.data.len() * 8);
        for v in &self.params.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bin.write_all(&bytes)?;
        let sidecar = CheckpointMeta {
            architecture: self.params.arch.clone(),
            layers: self
                .params
                .layers
                .iter()
                .map(|l| LayerShape {
                    inputs: l.inp,
                    outputs: l.out,
                })
                .collect(),
            seed: self.params.seed,
            domain: self.domain,
            len: self.params.data.len(),
        };
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn read_checkpoint(stem: &Path) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let mut params = MlpParams::zeros(meta.architecture, meta.seed)?;
        let shapes_match = params.layers.len() == meta.layers.len()
            && params
                .layers
                .iter()
                .zip(&meta.layers)
                .all(|(l, s)| l.inp == s.inputs && l.out == s.outputs);
        if !shapes_match || params.data.len() != meta.len {
            return Err(Error::Validation(
                "checkpoint layer shapes do not match its architecture".into(),
            ));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
        if bytes.len() != meta.len * 8 {
            return Err(Error::Validation(format!(
                "checkpoint holds {} bytes, expected {}",
                bytes.len(),
                meta.len * 8
            )));
        }
        for (v, chunk) in params.data.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        Ok(Self::new(params, meta.domain))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    architecture: Architecture,
    layers: Vec<LayerShape>,
    seed: u64,
    domain: Domain,
    len: usize,
}

/// Single-point evaluation of `d_θ(x)`.
pub fn field_eval(field: &DeformationField, x: &Point3) -> Result<Point3> {
    if !field.params.is_finite() {
        return Err(Error::Numeric("field parameters are not finite".into()));
    }
    Ok(field.displacement(x))
}

/// Gradients of one scalar with respect to θ and the per-kernel thickness
/// and opacity parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub theta: Vec<f64>,
    pub tau: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Records field evaluations of one forward pass so that the gradient of
/// the final scalar can be obtained by reverse traversal.
///
/// Field batches are recorded with [`record`](Self::record); once the
/// downstream stages know `∂loss/∂d` for a batch they [`seed`](Self::seed)
/// it. Kernel-parameter gradients, which do not pass through the field, are
/// added directly. [`finish`](Self::finish) closes the forward pass.
#[derive(Debug)]
pub struct GradientAccumulator {
    theta: Vec<f64>,
    tau: Vec<f64>,
    alpha: Vec<f64>,
    pending: Vec<(FieldTape, Option<Vec<Point3>>)>,
    loss: Option<f64>,
}

/// Handle of a recorded batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchId(usize);

impl GradientAccumulator {
    pub fn new(field: &DeformationField, kernels: usize) -> Self {
        Self {
            theta: vec![0.0; field.params.len()],
            tau: vec![0.0; kernels],
            alpha: vec![0.0; kernels],
            pending: Vec::new(),
            loss: None,
        }
    }

    pub fn record(&mut self, field: &DeformationField, points: &[Point3]) -> (Vec<Point3>, BatchId) {
        let (out, tape) = field.forward_batch(points, true);
        self.pending.push((tape.expect("recorded tape"), None));
        (out, BatchId(self.pending.len() - 1))
    }

    pub fn seed(&mut self, id: BatchId, cotangents: Vec<Point3>) -> Result<()> {
        let (tape, slot) = self
            .pending
            .get_mut(id.0)
            .ok_or_else(|| Error::Usage(format!("unknown batch {}", id.0)))?;
        if cotangents.len() != tape.batch {
            return Err(invalid(format!(
                "{} cotangents for a batch of {}",
                cotangents.len(),
                tape.batch
            )));
        }
        *slot = Some(cotangents);
        Ok(())
    }

    /// Forward and immediate backward for a batch whose cotangents depend
    /// only on its own outputs. Keeps memory bounded for large batches.
    pub fn record_seeded<F>(
        &mut self,
        field: &DeformationField,
        points: &[Point3],
        cotangents: F,
    ) -> Vec<Point3>
    where
        F: FnOnce(&[Point3]) -> Vec<Point3>,
    {
        let (out, tape) = field.forward_batch(points, true);
        let cot = cotangents(&out);
        field.backward(&tape.expect("recorded tape"), &cot, &mut self.theta);
        out
    }

    pub fn add_tau(&mut self, grads: &[f64]) {
        for (a, g) in self.tau.iter_mut().zip(grads) {
            *a += g;
        }
    }

    pub fn add_alpha(&mut self, grads: &[f64]) {
        for (a, g) in self.alpha.iter_mut().zip(grads) {
            *a += g;
        }
    }

    pub fn finish(&mut self, loss: f64) {
        self.loss = Some(loss);
    }

    pub fn loss(&self) -> Option<f64> {
        self.loss
    }

    /// Reverse traversal of every recorded batch.
    pub fn backward(mut self, field: &DeformationField) -> Result<Gradients> {
        if self.loss.is_none() {
            return Err(Error::Usage(
                "backward requested before the forward pass finished".into(),
            ));
        }
        for (i, (tape, cot)) in self.pending.iter().enumerate().rev() {
            let cot = cot
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("batch {i} was never seeded")))?;
            field.backward(tape, cot, &mut self.theta);
        }
        Ok(Gradients {
            theta: self.theta,
            tau: self.tau,
            alpha: self.alpha,
        })
    }
}

/// Gradient of the recorded scalar.
pub fn grad_of_scalar(recording: GradientAccumulator, field: &DeformationField) -> Result<Gradients> {
    recording.backward(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_domain() -> Domain {
        Domain {
            min: [-1.0; 3],
            max: [1.0; 3],
        }
    }

    fn small_arch() -> Architecture {
        Architecture {
            encoding: EncodingConfig {
                num_bands: 3,
                include_input: true,
            },
            hidden_layers: 4,
            hidden_width: 16,
            skip_layer: 2,
        }
    }

    fn random_field(arch: &Architecture, seed: u64) -> DeformationField {
        let mut f = DeformationField::zero_init(seed, arch, unit_domain()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let r = f.params.weight_range(f.params.output_layer());
        for v in &mut f.params.as_mut_slice()[r] {
            *v = rng.gen_range(-0.3..0.3);
        }
        for l in 0..f.params.num_layers() {
            let r = f.params.bias_range(l);
            for v in &mut f.params.as_mut_slice()[r] {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        f
    }

    fn random_points(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn encoding_examples() {
        let cfg = EncodingConfig {
            num_bands: 2,
            include_input: true,
        };
        let e = encode(&Point3::zeros(), &cfg);
        assert_eq!(e.len(), 15);
        assert_eq!(&e[..3], &[0.0; 3]);
        for band in 0..2 {
            let base = 3 + band * 6;
            assert_eq!(&e[base..base + 3], &[0.0; 3]);
            assert_eq!(&e[base + 3..base + 6], &[1.0; 3]);
        }
        let x = Point3::new(0.1, -0.2, 0.3);
        let plain = EncodingConfig {
            num_bands: 0,
            include_input: true,
        };
        assert_eq!(encode(&x, &plain), vec![0.1, -0.2, 0.3]);
        assert_eq!(EncodingConfig::default().dim(), 93);
        let widths = Architecture::default().layer_shapes();
        assert_eq!(widths[4], (349, 256));
        assert_eq!(widths.len(), 9);
        assert_eq!(widths[8], (256, 3));
    }

    #[test]
    fn fresh_field_is_identity() {
        let arch = Architecture::default();
        let f = DeformationField::zero_init(7, &arch, unit_domain()).unwrap();
        for d in f.eval_batch(&random_points(100, 1)) {
            assert_eq!(d, Point3::zeros());
        }
        let g = DeformationField::zero_init(7, &arch, unit_domain()).unwrap();
        assert_eq!(f.params, g.params);
        let h = DeformationField::zero_init(8, &arch, unit_domain()).unwrap();
        assert_ne!(f.params.as_slice(), h.params.as_slice());
        assert_eq!(field_eval(&h, &Point3::new(0.3, 0.2, 0.1)).unwrap(), Point3::zeros());
    }

    #[test]
    fn final_bias_passes_through() {
        let mut f = DeformationField::zero_init(3, &Architecture::default(), unit_domain()).unwrap();
        let r = f.params.bias_range(f.params.output_layer());
        f.params.as_mut_slice()[r].copy_from_slice(&[1.0, 2.0, 3.0]);
        for x in random_points(10, 2) {
            assert_eq!(field_eval(&f, &x).unwrap(), Point3::new(1.0, 2.0, 3.0));
        }
        f.params.as_mut_slice()[0] = f64::NAN;
        assert!(matches!(field_eval(&f, &Point3::zeros()), Err(Error::Numeric(_))));
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        // Band frequencies reach 2^14·π, so the step has to stay well below
        // the spacing of ReLU kinks along the probe direction.
        let f = random_field(&Architecture::default(), 11);
        let h = 1e-9;
        for x in random_points(5, 3) {
            let jac = f.input_jacobian(&(x * 0.8));
            for c in 0..3 {
                let mut e = Point3::zeros();
                e[c] = h;
                let fd = (f.displacement(&(x * 0.8 + e)) - f.displacement(&(x * 0.8 - e))) / (2.0 * h);
                for r in 0..3 {
                    let a = jac[(r, c)];
                    let tol = 1e-4 * a.abs().max(fd[r].abs()).max(1e-3);
                    assert!((a - fd[r]).abs() <= tol, "J[{r},{c}] {a} vs {}", fd[r]);
                }
            }
        }
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let arch = small_arch();
        let mut f = random_field(&arch, 5);
        let pts = random_points(7, 9);
        let cot: Vec<Point3> = random_points(7, 10);
        let loss = |f: &DeformationField| -> f64 {
            f.eval_batch(&pts).iter().zip(&cot).map(|(d, c)| d.dot(c)).sum()
        };
        let mut acc = GradientAccumulator::new(&f, 0);
        let (_, id) = acc.record(&f, &pts);
        acc.seed(id, cot.clone()).unwrap();
        acc.finish(loss(&f));
        let g = acc.backward(&f).unwrap();
        let h = 1e-6;
        for i in (0..f.params.len()).step_by(7) {
            let orig = f.params.as_slice()[i];
            f.params.as_mut_slice()[i] = orig + h;
            let lp = loss(&f);
            f.params.as_mut_slice()[i] = orig - h;
            let lm = loss(&f);
            f.params.as_mut_slice()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((g.theta[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "param {i}: {} vs {fd}", g.theta[i]);
        }
    }

    #[test]
    fn gradient_examples() {
        // ‖d‖² at the identity: d = 0 so every gradient vanishes.
        let f = DeformationField::zero_init(1, &small_arch(), unit_domain()).unwrap();
        let pts = random_points(4, 4);
        let mut acc = GradientAccumulator::new(&f, 0);
        let (out, id) = acc.record(&f, &pts);
        acc.seed(id, out.iter().map(|d| d * 2.0).collect()).unwrap();
        acc.finish(0.0);
        assert!(acc.backward(&f).unwrap().theta.iter().all(|g| *g == 0.0));

        // With silent hidden units the output is the final bias, and the
        // gradient of its component sum is one on each bias entry only.
        let mut f = f.clone();
        for v in f.params.as_mut_slice() {
            *v = 0.0;
        }
        let mut acc = GradientAccumulator::new(&f, 0);
        let (_, id) = acc.record(&f, &pts[..1]);
        acc.seed(id, vec![Point3::new(1.0, 1.0, 1.0)]).unwrap();
        acc.finish(0.0);
        let g = acc.backward(&f).unwrap();
        let bias = f.params.bias_range(f.params.output_layer());
        for (i, v) in g.theta.iter().enumerate() {
            let expect = if bias.contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(*v, expect, "param {i}");
        }
    }

    #[test]
    fn backward_requires_finished_forward() {
        let f = DeformationField::zero_init(1, &small_arch(), unit_domain()).unwrap();
        let mut acc = GradientAccumulator::new(&f, 0);
        let (_, id) = acc.record(&f, &random_points(2, 1));
        assert!(matches!(
            GradientAccumulator::new(&f, 0).backward(&f),
            Err(Error::Usage(_))
        ));
        acc.finish(0.0);
        assert!(matches!(acc.backward(&f), Err(Error::Usage(_))));
        let mut acc = GradientAccumulator::new(&f, 0);
        let (_, id2) = acc.record(&f, &random_points(2, 1));
        assert_eq!(id, id2);
        assert!(acc.seed(id2, vec![Point3::zeros()]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = random_field(&small_arch(), 3);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("field");
        f.write_checkpoint(&stem).unwrap();
        let g = DeformationField::read_checkpoint(&stem).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn domain_normalization() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(10.0, 20.0, 0.0)];
        let d = Domain::enclosing(&pts, 1.1).unwrap();
        assert!((d.max[0] - d.min[0] - 11.0).abs() < 1e-12);
        assert!((d.max[2] - d.min[2] - 2.2).abs() < 1e-12);
        let n = d.normalize(&pts[1]);
        assert!(n.x < 1.0 && n.x > 0.9);
        assert!(Domain::enclosing(&[Point3::zeros(); 2], 1.1).is_err());
    }
}
