//! Curve-anchored Gaussian kernels and a differentiable grayscale splatting
//! renderer.
//!
//! Kernels sit on the curve at `u_j = (j + 0.5) / K`. Their covariance is
//! built in the curve's Bishop frame with the tangential scale set to the
//! chord spanned by the kernel's parameter cell and a learnable isotropic
//! cross-section `τ`. Every kernel emits intensity 1 on a black background;
//! brightness is carried by opacity and overlap.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{
    bernstein_row, bishop_frames, combine, derivative_row, unit_tangents, BezierCurve,
    BishopFrame, Point3,
};

/// Pinhole camera with a rigid world-to-camera transform. Camera space
/// looks down `+z` with `x` right and `y` down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraJson {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    world_to_cam: [f64; 16],
}

impl TryFrom<CameraJson> for Camera {
    type Error = Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        let m = Matrix4::from_row_slice(&j.world_to_cam);
        Camera::new(j.width, j.height, [j.fx, j.fy, j.cx, j.cy], m)
    }
}

impl From<Camera> for CameraJson {
    fn from(c: Camera) -> Self {
        let m = c.world_to_cam();
        let mut world_to_cam = [0.0; 16];
        for r in 0..4 {
            for k in 0..4 {
                world_to_cam[r * 4 + k] = m[(r, k)];
            }
        }
        CameraJson {
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_cam,
        }
    }
}

impl Camera {
    /// `intrinsics = [fx, fy, cx, cy]`.
    pub fn new(
        width: usize,
        height: usize,
        intrinsics: [f64; 4],
        world_to_cam: Matrix4<f64>,
    ) -> Result<Self> {
        let [fx, fy, cx, cy] = intrinsics;
        if width == 0 || height == 0 {
            return Err(invalid("image size must be positive"));
        }
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(invalid("focal lengths must be positive and finite"));
        }
        let rotation: Matrix3<f64> = world_to_cam.fixed_view::<3, 3>(0, 0).into();
        let translation: Vector3<f64> = world_to_cam.fixed_view::<3, 1>(0, 3).into();
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9) || !((det - 1.0).abs() <= 1e-9) {
            return Err(invalid("camera rotation is not a proper rotation"));
        }
        let bottom = world_to_cam.fixed_view::<1, 4>(3, 0);
        if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
            return Err(invalid("world_to_cam must be a rigid transform"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("camera translation is not finite"));
        }
        Ok(Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Camera at `eye` looking at `target`, with `up` mapping to image up.
    pub fn look_at(
        eye: Point3,
        target: Point3,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        intrinsics: [f64; 4],
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(invalid("eye and target coincide"));
        }
        let forward = forward.normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(invalid("up vector is parallel to the viewing direction"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(width, height, intrinsics, m)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn world_to_cam(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_camera(&self, p: &Point3) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pixel coordinates of a world point in front of the camera.
    pub fn project(&self, p: &Point3) -> Option<Vector2<f64>> {
        let c = self.to_camera(p);
        (c.z > 0.0).then(|| Vector2::new(self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    /// Same camera at a different resolution, intrinsics scaled to match.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let w = (self.width as f64 * factor).round() as usize;
        let h = (self.height as f64 * factor).round() as usize;
        Self::new(
            w,
            h,
            [self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor],
            self.world_to_cam(),
        )
    }
}

/// Grayscale float image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageF {
    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(invalid(format!(
                "{} values for a {width}×{height} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("image intensities must lie in [0, 1]"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// 8-bit quantization with round-half-up.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect()
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_bytes());
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Validation(format!("malformed PGM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("expected P5 magic"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("header number"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let body = &bytes[pos + 1..];
        if body.len() != w * h {
            return Err(bad("pixel count does not match header"));
        }
        Ok(Self {
            width: w,
            height: h,
            data: body.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm(&std::fs::read(path)?)
    }
}

/// Renderer tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    /// Added to the projected covariance diagonal (px²).
    pub cov2d_epsilon: f64,
    /// Kernels at or behind this camera depth are culled.
    pub near_plane: f64,
    /// Support radius in standard deviations.
    pub support_sigmas: f64,
    /// A pixel stops accumulating once its transmittance drops below this.
    pub min_transmittance: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            cov2d_epsilon: 0.3,
            near_plane: 1e-3,
            support_sigmas: 3.0,
            min_transmittance: 1e-4,
        }
    }
}

/// One Gaussian anchored to a curve.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredKernel {
    pub edge: usize,
    pub slot: usize,
    pub u: f64,
    pub mean: Point3,
    pub frame: BishopFrame,
    pub sigma_t: f64,
    pub sigma_n: f64,
    pub sigma_b: f64,
    pub alpha: f64,
}

impl AnchoredKernel {
    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_unchecked(&self.frame, self.sigma_t, self.sigma_n, self.sigma_b)
    }
}

/// Kernel parameters `u_j = (j + 0.5) / K`.
pub fn kernel_params(k: usize) -> Vec<f64> {
    (0..k).map(|j| (j as f64 + 0.5) / k as f64).collect()
}

/// Data the kernel construction needs again when differentiating.
#[derive(Debug, Clone)]
pub(crate) struct AnchorCache {
    /// Unnormalized derivative at each kernel parameter.
    pub deriv: Vec<Point3>,
    /// Index of the kernel whose derivative supplied each tangent.
    pub tangent_source: Vec<usize>,
    /// `c(u_j + 1/2K) − c(u_j − 1/2K)`.
    pub chord: Vec<Point3>,
}

/// Per-`K` Bernstein rows for means, derivatives and chords.
#[derive(Debug, Clone)]
pub(crate) struct KernelBasis {
    pub params: Vec<f64>,
    pub mean: Vec<Vec<f64>>,
    pub deriv: Vec<Vec<f64>>,
    pub chord: Vec<Vec<f64>>,
}

impl KernelBasis {
    pub fn new(degree: usize, k: usize) -> Self {
        let params = kernel_params(k);
        let mean = params.iter().map(|&u| bernstein_row(degree, u)).collect();
        let deriv = params.iter().map(|&u| derivative_row(degree, u)).collect();
        let half = 0.5 / k as f64;
        let chord = params
            .iter()
            .map(|&u| {
                let hi = bernstein_row(degree, (u + half).min(1.0));
                let lo = bernstein_row(degree, (u - half).max(0.0));
                hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
            })
            .collect();
        Self {
            params,
            mean,
            deriv,
            chord,
        }
    }
}

pub(crate) fn anchor_with_cache(
    curve: &BezierCurve,
    edge: usize,
    basis: &KernelBasis,
    tau: &[f64],
    alpha: &[f64],
) -> Result<(Vec<AnchoredKernel>, AnchorCache)> {
    let k = basis.params.len();
    if tau.len() != k || alpha.len() != k {
        return Err(invalid(format!(
            "{k} kernels need {k} thickness and opacity values"
        )));
    }
    let ctrl = curve.ctrl();
    let frames = bishop_frames(curve, &basis.params)?;
    let (_, tangent_source) = unit_tangents(curve, &basis.params)?;
    let deriv: Vec<Point3> = basis.deriv.iter().map(|r| combine(r, ctrl)).collect();
    let chord: Vec<Point3> = basis.chord.iter().map(|r| combine(r, ctrl)).collect();
    let kernels = (0..k)
        .map(|j| AnchoredKernel {
            edge,
            slot: j,
            u: basis.params[j],
            mean: combine(&basis.mean[j], ctrl),
            frame: frames[j],
            sigma_t: chord[j].norm(),
            sigma_n: tau[j],
            sigma_b: tau[j],
            alpha: alpha[j],
        })
        .collect();
    Ok((
        kernels,
        AnchorCache {
            deriv,
            tangent_source,
            chord,
        },
    ))
}

/// `K` kernels along `curve` with the given thicknesses and opacities.
pub fn anchor_kernels(
    curve: &BezierCurve,
    edge: usize,
    k: usize,
    tau: &[f64],
    alpha: &[f64],
) -> Result<Vec<AnchoredKernel>> {
    if k == 0 {
        return Err(invalid("at least one kernel per curve is required"));
    }
    let basis = KernelBasis::new(curve.degree(), k);
    Ok(anchor_with_cache(curve, edge, &basis, tau, alpha)?.0)
}

fn covariance_unchecked(frame: &BishopFrame, st: f64, sn: f64, sb: f64) -> Matrix3<f64> {
    let f = frame.matrix();
    let s = Matrix3::from_diagonal(&Vector3::new(st, sn, sb));
    let fs = f * s;
    fs * fs.transpose()
}

/// `Σ = (F S)(F S)ᵀ` with `F = [t n b]` and `S = diag(σ_t, σ_n, σ_b)`.
pub fn covariance(frame: &BishopFrame, sigma_t: f64, sigma_n: f64, sigma_b: f64) -> Result<Matrix3<f64>> {
    if !(sigma_t > 0.0 && sigma_n > 0.0 && sigma_b > 0.0) {
        return Err(invalid("kernel scales must be positive"));
    }
    if !(frame.orthonormality_error() <= 1e-9) {
        return Err(invalid("frame is not orthonormal and right-handed"));
    }
    Ok(covariance_unchecked(frame, sigma_t, sigma_n, sigma_b))
}

/// A kernel projected into one view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub alpha: f64,
    /// Index of the source kernel in the list given to the projector.
    pub source: usize,
}

/// Intermediate values of a projection kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjectionCache {
    cam_mean: Vector3<f64>,
    jw: Matrix2x3<f64>,
    cov3: Matrix3<f64>,
}

fn jacobian_at(cam: &Camera, c: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / c.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * c.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * c.y * iz * iz,
    )
}

pub(crate) fn project_with_cache(
    cam: &Camera,
    mean: &Point3,
    cov3: &Matrix3<f64>,
    alpha: f64,
    source: usize,
    cfg: &RenderConfig,
) -> Option<(Splat2D, ProjectionCache)> {
    let c = cam.to_camera(mean);
    if c.z <= cfg.near_plane {
        return None;
    }
    let mean2d = Vector2::new(cam.fx * c.x / c.z + cam.cx, cam.fy * c.y / c.z + cam.cy);
    let jw = jacobian_at(cam, &c) * cam.rotation;
    let mut cov2d = jw * cov3 * jw.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5;
    cov2d[(0, 0)] += cfg.cov2d_epsilon;
    cov2d[(1, 1)] += cfg.cov2d_epsilon;
    let splat = Splat2D {
        mean2d,
        cov2d,
        depth: c.z,
        alpha,
        source,
    };
    let (x0, x1, y0, y1) = pixel_bounds(cam, &splat, cfg)?;
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some((
        splat,
        ProjectionCache {
            cam_mean: c,
            jw,
            cov3: *cov3,
        },
    ))
}

/// Projects a kernel, or `None` when it is culled (behind the near plane
/// or with its support entirely outside the image).
pub fn project_kernel(cam: &Camera, kernel: &AnchoredKernel, cfg: &RenderConfig) -> Option<Splat2D> {
    project_with_cache(cam, &kernel.mean, &kernel.covariance(), kernel.alpha, 0, cfg).map(|(s, _)| s)
}

/// Gradient of the loss with respect to the world-space mean and
/// covariance of a kernel, given gradients on its projection.
pub(crate) fn project_backward(
    cam: &Camera,
    cache: &ProjectionCache,
    d_mean2d: &Vector2<f64>,
    d_cov2d: &Matrix2<f64>,
) -> (Vector3<f64>, Matrix3<f64>) {
    let g = (d_cov2d + d_cov2d.transpose()) * 0.5;
    let t = cache.jw;
    let d_cov3 = t.transpose() * g * t;
    // Σ2 = J W Σ Wᵀ Jᵀ, so ∂L/∂J = 2 G J (W Σ Wᵀ).
    let cov_cam = cam.rotation * cache.cov3 * cam.rotation.transpose();
    let j = jacobian_at(cam, &cache.cam_mean);
    let d_j = g * j * cov_cam * 2.0;

    let c = cache.cam_mean;
    let iz = 1.0 / c.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let mut d_c = Vector3::zeros();
    // mean2d
    d_c.x += d_mean2d.x * fx * iz;
    d_c.y += d_mean2d.y * fy * iz;
    d_c.z += -d_mean2d.x * fx * c.x * iz2 - d_mean2d.y * fy * c.y * iz2;
    // Jacobian entries J00 = fx/z, J02 = -fx x/z², J11 = fy/z, J12 = -fy y/z².
    d_c.z += d_j[(0, 0)] * (-fx * iz2);
    d_c.x += d_j[(0, 2)] * (-fx * iz2);
    d_c.z += d_j[(0, 2)] * (2.0 * fx * c.x * iz3);
    d_c.z += d_j[(1, 1)] * (-fy * iz2);
    d_c.y += d_j[(1, 2)] * (-fy * iz2);
    d_c.z += d_j[(1, 2)] * (2.0 * fy * c.y * iz3);
    (cam.rotation.transpose() * d_c, d_cov3)
}

/// Inclusive pixel range covered by the splat's support, or `None` when
/// the covariance is not positive definite.
fn pixel_bounds(cam: &Camera, s: &Splat2D, cfg: &RenderConfig) -> Option<(i64, i64, i64, i64)> {
    let a = s.cov2d[(0, 0)];
    let b = s.cov2d[(0, 1)];
    let d = s.cov2d[(1, 1)];
    let det = a * d - b * b;
    if !(det > 0.0 && a > 0.0) || !det.is_finite() {
        return None;
    }
    // Axis-aligned half-extents of the support ellipse.
    let rx = cfg.support_sigmas * a.sqrt();
    let ry = cfg.support_sigmas * d.sqrt();
    let x0 = ((s.mean2d.x - rx - 0.5).ceil() as i64).max(0);
    let x1 = ((s.mean2d.x + rx - 0.5).floor() as i64).min(cam.width as i64 - 1);
    let y0 = ((s.mean2d.y - ry - 0.5).ceil() as i64).max(0);
    let y1 = ((s.mean2d.y + ry - 0.5).floor() as i64).min(cam.height as i64 - 1);
    Some((x0, x1, y0, y1))
}

/// Per splat, the pixels it actually contributed to in one render.
#[derive(Debug, Clone, Default)]
pub(crate) struct RasterTape {
    /// Splat indices in compositing (front-to-back) order.
    pub order: Vec<usize>,
    /// `(pixel, gaussian value, transmittance before)` per splat.
    pub entries: Vec<Vec<(u32, f64, f64)>>,
}

/// Diagnostics of a render.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RasterStats {
    pub skipped_non_spd: usize,
}

fn depth_order(splats: &[Splat2D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a]
            .depth
            .partial_cmp(&splats[b].depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

pub(crate) fn rasterize_impl(
    cam: &Camera,
    splats: &[Splat2D],
    cfg: &RenderConfig,
    record: bool,
) -> (ImageF, RasterStats, RasterTape) {
    let (w, h) = (cam.width, cam.height);
    let mut image = vec![0.0; w * h];
    let mut trans = vec![1.0; w * h];
    let mut stats = RasterStats::default();
    let order = depth_order(splats);
    let mut tape = RasterTape {
        order: order.clone(),
        entries: if record { vec![Vec::new(); splats.len()] } else { Vec::new() },
    };
    let cutoff = cfg.support_sigmas * cfg.support_sigmas;
    for &si in &order {
        let s = &splats[si];
        let Some((x0, x1, y0, y1)) = pixel_bounds(cam, s, cfg) else {
            stats.skipped_non_spd += 1;
            continue;
        };
        let conic = s.cov2d.try_inverse().expect("positive definite");
        for py in y0..=y1 {
            for px in x0..=x1 {
                let pix = py as usize * w + px as usize;
                let t = trans[pix];
                if t < cfg.min_transmittance {
                    continue;
                }
                let dx = px as f64 + 0.5 - s.mean2d.x;
                let dy = py as f64 + 0.5 - s.mean2d.y;
                let q = conic[(0, 0)] * dx * dx + 2.0 * conic[(0, 1)] * dx * dy + conic[(1, 1)] * dy * dy;
                if q > cutoff {
                    continue;
                }
                let g = (-0.5 * q).exp();
                let wgt = s.alpha * g;
                image[pix] += wgt * t;
                trans[pix] = t * (1.0 - wgt);
                if record {
                    tape.entries[si].push((pix as u32, g, t));
                }
            }
        }
    }
    for v in &mut image {
        *v = v.clamp(0.0, 1.0);
    }
    (
        ImageF {
            width: w,
            height: h,
            data: image,
        },
        stats,
        tape,
    )
}

/// Front-to-back alpha compositing of the splats, sorted by depth.
pub fn rasterize(cam: &Camera, splats: &[Splat2D], cfg: &RenderConfig) -> (ImageF, RasterStats) {
    let (img, stats, _) = rasterize_impl(cam, splats, cfg, false);
    (img, stats)
}

/// Gradients with respect to one splat.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SplatGrad {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub alpha: f64,
}

pub(crate) fn rasterize_backward(
    cam: &Camera,
    splats: &[Splat2D],
    tape: &RasterTape,
    d_image: &[f64],
) -> Vec<SplatGrad> {
    let mut suffix = vec![1.0; cam.width * cam.height];
    let mut grads = vec![
        SplatGrad {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::zeros(),
            alpha: 0.0,
        };
        splats.len()
    ];
    for &si in tape.order.iter().rev() {
        let s = &splats[si];
        let entries = &tape.entries[si];
        if entries.is_empty() {
            continue;
        }
        let conic = s.cov2d.try_inverse().expect("positive definite");
        let mut d_conic = Matrix2::zeros();
        let mut d_mean = Vector2::zeros();
        let mut d_alpha = 0.0;
        for &(pix, g, t_before) in entries {
            let pix = pix as usize;
            let wgt = s.alpha * g;
            // ∂I/∂w_i = Π_{j≠i} (1 − w_j) over the splats this pixel used.
            let d_w = d_image[pix] * t_before * suffix[pix];
            suffix[pix] *= 1.0 - wgt;
            if d_w == 0.0 {
                continue;
            }
            d_alpha += d_w * g;
            let d_q = -0.5 * d_w * wgt;
            let px = pix % cam.width;
            let py = pix / cam.width;
            let delta = Vector2::new(px as f64 + 0.5 - s.mean2d.x, py as f64 + 0.5 - s.mean2d.y);
            d_mean -= conic * delta * (2.0 * d_q);
            d_conic += delta * delta.transpose() * d_q;
        }
        grads[si] = SplatGrad {
            mean2d: d_mean,
            cov2d: -(conic * d_conic * conic),
            alpha: d_alpha,
        };
    }
    grads
}

/// A curve with the thickness and opacity of each of its kernels.
#[derive(Debug, Clone, Copy)]
pub struct CurveKernels<'a> {
    pub edge: usize,
    pub curve: &'a BezierCurve,
    pub tau: &'a [f64],
    pub alpha: &'a [f64],
}

pub(crate) fn build_kernels(
    items: &[CurveKernels<'_>],
    basis: &KernelBasis,
) -> Result<(Vec<AnchoredKernel>, Vec<AnchorCache>)> {
    let mut kernels = Vec::new();
    let mut caches = Vec::with_capacity(items.len());
    for it in items {
        let (ks, cache) = anchor_with_cache(it.curve, it.edge, basis, it.tau, it.alpha)?;
        kernels.extend(ks);
        caches.push(cache);
    }
    Ok((kernels, caches))
}

pub(crate) fn project_all(
    cam: &Camera,
    kernels: &[AnchoredKernel],
    cfg: &RenderConfig,
) -> (Vec<Splat2D>, Vec<ProjectionCache>) {
    let mut splats = Vec::with_capacity(kernels.len());
    let mut caches = Vec::with_capacity(kernels.len());
    for (i, k) in kernels.iter().enumerate() {
        if let Some((s, c)) = project_with_cache(cam, &k.mean, &k.covariance(), k.alpha, i, cfg) {
            splats.push(s);
            caches.push(c);
        }
    }
    (splats, caches)
}

/// Renders `K` kernels per curve into one view.
pub fn render_view(
    items: &[CurveKernels<'_>],
    k: usize,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Result<ImageF> {
    if k == 0 {
        return Err(invalid("at least one kernel per curve is required"));
    }
    let Some(first) = items.first() else {
        return Ok(ImageF::black(cam.width, cam.height));
    };
    let basis = KernelBasis::new(first.curve.degree(), k);
    if items.iter().any(|it| it.curve.degree() != first.curve.degree()) {
        return Err(invalid("all curves must share one degree"));
    }
    let (kernels, _) = build_kernels(items, &basis)?;
    let (splats, _) = project_all(cam, &kernels, cfg);
    Ok(rasterize_impl(cam, &splats, cfg, false).0)
}
