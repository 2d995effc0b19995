//! Bézier curves, rotation-minimizing (Bishop) frames and the
//! endpoint-constrained least-squares refit that turns a displaced point set
//! back into a curve.

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Error, Result};

pub type Point3 = Vector3<f64>;

/// Default curve degree.
pub const DEFAULT_DEGREE: usize = 3;

/// Default number of sample intervals per edge used for refitting and for
/// dense distance queries.
pub const DEFAULT_SAMPLES: usize = 64;

const TANGENT_EPS: f64 = 1e-9;
const PIVOT_RATIO: f64 = 1e-12;

fn binomial(n: usize, i: usize) -> f64 {
    let i = i.min(n - i);
    (0..i).fold(1.0, |acc, k| acc * (n - k) as f64 / (k + 1) as f64)
}

pub(crate) fn bernstein_unchecked(n: usize, i: usize, u: f64) -> f64 {
    binomial(n, i) * u.powi(i as i32) * (1.0 - u).powi((n - i) as i32)
}

/// Bernstein basis polynomial `C(n,i) u^i (1-u)^(n-i)`.
pub fn bernstein(n: usize, i: usize, u: f64) -> Result<f64> {
    if i > n {
        return Err(invalid(format!("basis index {i} exceeds degree {n}")));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(invalid(format!("parameter {u} outside [0, 1]")));
    }
    Ok(bernstein_unchecked(n, i, u))
}

/// All `n + 1` basis values at `u`.
pub(crate) fn bernstein_row(n: usize, u: f64) -> Vec<f64> {
    (0..=n).map(|i| bernstein_unchecked(n, i, u)).collect()
}

/// Coefficients `w_i` such that `c'(u) = Σ w_i q_i`.
pub(crate) fn derivative_row(n: usize, u: f64) -> Vec<f64> {
    let mut row = vec![0.0; n + 1];
    for i in 0..n {
        let b = n as f64 * bernstein_unchecked(n - 1, i, u);
        row[i] -= b;
        row[i + 1] += b;
    }
    row
}

pub(crate) fn combine(row: &[f64], ctrl: &[Point3]) -> Point3 {
    row.iter()
        .zip(ctrl)
        .fold(Point3::zeros(), |acc, (w, q)| acc + *w * q)
}

fn check_unit(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(invalid(format!("parameter {u} outside [0, 1]")))
    }
}

/// A polynomial Bézier curve `c(u) = Σ B^n_i(u) q_i`, `u ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BezierCurve {
    ctrl: Vec<Point3>,
}

impl BezierCurve {
    pub fn new(ctrl: Vec<Point3>) -> Result<Self> {
        if ctrl.len() < 2 {
            return Err(invalid(format!(
                "a curve needs at least two control points, got {}",
                ctrl.len()
            )));
        }
        if ctrl.iter().any(|q| !q.iter().all(|c| c.is_finite())) {
            return Err(invalid("non-finite control point"));
        }
        Ok(Self { ctrl })
    }

    /// Straight segment of the given degree with uniformly spaced control
    /// points, which gives it a linear (constant speed) parametrization.
    pub fn straight(a: Point3, b: Point3, degree: usize) -> Result<Self> {
        if degree == 0 {
            return Err(invalid("degree must be at least 1"));
        }
        let ctrl = (0..=degree)
            .map(|i| {
                let s = i as f64 / degree as f64;
                if i == 0 {
                    a
                } else if i == degree {
                    b
                } else {
                    a + (b - a) * s
                }
            })
            .collect();
        Self::new(ctrl)
    }

    pub fn degree(&self) -> usize {
        self.ctrl.len() - 1
    }

    pub fn ctrl(&self) -> &[Point3] {
        &self.ctrl
    }

    pub fn start(&self) -> Point3 {
        self.ctrl[0]
    }

    pub fn end(&self) -> Point3 {
        self.ctrl[self.degree()]
    }

    pub fn reversed(&self) -> Self {
        let mut ctrl = self.ctrl.clone();
        ctrl.reverse();
        Self { ctrl }
    }

    pub fn eval(&self, u: f64) -> Result<Point3> {
        check_unit(u)?;
        Ok(self.point_at(u))
    }

    pub(crate) fn point_at(&self, u: f64) -> Point3 {
        combine(&bernstein_row(self.degree(), u), &self.ctrl)
    }

    pub fn derivative(&self, u: f64) -> Result<Point3> {
        check_unit(u)?;
        Ok(self.derivative_at(u))
    }

    pub(crate) fn derivative_at(&self, u: f64) -> Point3 {
        combine(&derivative_row(self.degree(), u), &self.ctrl)
    }

    /// Samples at `u_j = j / m`, `j = 0..=m`.
    pub fn sample(&self, m: usize) -> Result<CurveSamples> {
        if m < self.degree() {
            return Err(invalid(format!(
                "{m} sample intervals cannot determine a degree-{} curve",
                self.degree()
            )));
        }
        let params = uniform_params(m);
        let points = params.iter().map(|&u| self.point_at(u)).collect();
        Ok(CurveSamples { params, points })
    }

    /// Polyline length from `m` uniform parameter intervals.
    pub fn approx_length(&self, m: usize) -> f64 {
        let params = uniform_params(m.max(1));
        params
            .windows(2)
            .map(|w| (self.point_at(w[1]) - self.point_at(w[0])).norm())
            .sum()
    }
}

pub(crate) fn uniform_params(m: usize) -> Vec<f64> {
    (0..=m).map(|j| j as f64 / m as f64).collect()
}

/// Points of a curve at known parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSamples {
    pub params: Vec<f64>,
    pub points: Vec<Point3>,
}

pub fn sample_curve(curve: &BezierCurve, m: usize) -> Result<CurveSamples> {
    curve.sample(m)
}

/// Tangent, normal and binormal of a rotation-minimizing frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BishopFrame {
    pub t: Point3,
    pub n: Point3,
    pub b: Point3,
}

impl BishopFrame {
    /// Columns `[t n b]`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.t, self.n, self.b])
    }

    /// Largest deviation from an orthonormal, right-handed frame.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.matrix();
        let gram = m.transpose() * m - Matrix3::identity();
        let det = (m.determinant() - 1.0).abs();
        gram.abs().max().max(det)
    }

    /// Rotation angle carrying this frame onto `other`.
    pub fn rotation_angle_to(&self, other: &BishopFrame) -> f64 {
        let r = other.matrix() * self.matrix().transpose();
        ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

/// Initial normal: the global axis least aligned with `t`, projected onto
/// the plane orthogonal to `t`.
fn initial_normal(t: &Point3) -> Point3 {
    let mut best = 0;
    for a in 1..3 {
        if t[a].abs() < t[best].abs() {
            best = a;
        }
    }
    let mut e = Point3::zeros();
    e[best] = 1.0;
    (e - t * t.dot(&e)).normalize()
}

fn orthonormal_frame(t: Point3, n_guess: Point3) -> BishopFrame {
    let mut n = n_guess - t * t.dot(&n_guess);
    if n.norm() < 1e-12 {
        n = initial_normal(&t);
    }
    let n = n.normalize();
    let b = t.cross(&n);
    BishopFrame { t, n, b }
}

/// Unit tangents at `params`, with near-zero derivatives replaced by the
/// tangent of the nearest valid sample. The second vector records which
/// sample each tangent was taken from.
pub(crate) fn unit_tangents(
    curve: &BezierCurve,
    params: &[f64],
) -> Result<(Vec<Point3>, Vec<usize>)> {
    let raw: Vec<Point3> = params.iter().map(|&u| curve.derivative_at(u)).collect();
    let valid: Vec<bool> = raw.iter().map(|d| d.norm() >= TANGENT_EPS).collect();
    if !valid.iter().any(|&v| v) {
        return Err(Error::DegenerateCurve(
            "derivative vanishes at every sample".into(),
        ));
    }
    let mut source = Vec::with_capacity(params.len());
    for j in 0..params.len() {
        if valid[j] {
            source.push(j);
            continue;
        }
        let mut pick = None;
        for off in 1..params.len() {
            if j >= off && valid[j - off] {
                pick = Some(j - off);
                break;
            }
            if j + off < params.len() && valid[j + off] {
                pick = Some(j + off);
                break;
            }
        }
        source.push(pick.expect("at least one valid tangent"));
    }
    let tangents = source.iter().map(|&s| raw[s].normalize()).collect();
    Ok((tangents, source))
}

/// Rotation-minimizing frames at sorted parameters, transported with the
/// double-reflection scheme starting from a deterministic initial normal.
pub fn bishop_frames(curve: &BezierCurve, params: &[f64]) -> Result<Vec<BishopFrame>> {
    if params.is_empty() {
        return Ok(Vec::new());
    }
    for &u in params {
        check_unit(u)?;
    }
    if params.windows(2).any(|w| w[1] < w[0]) {
        return Err(invalid("frame parameters must be sorted"));
    }
    let (tangents, _) = unit_tangents(curve, params)?;
    let points: Vec<Point3> = params.iter().map(|&u| curve.point_at(u)).collect();

    let mut frames = Vec::with_capacity(params.len());
    frames.push(orthonormal_frame(tangents[0], initial_normal(&tangents[0])));
    for j in 1..params.len() {
        let prev = frames[j - 1];
        let t = tangents[j];
        let v1 = points[j] - points[j - 1];
        let c1 = v1.dot(&v1);
        let n = if c1 > 1e-24 {
            let n_l = prev.n - v1 * (2.0 / c1 * v1.dot(&prev.n));
            let t_l = prev.t - v1 * (2.0 / c1 * v1.dot(&prev.t));
            let v2 = t - t_l;
            let c2 = v2.dot(&v2);
            if c2 > 1e-24 {
                n_l - v2 * (2.0 / c2 * v2.dot(&n_l))
            } else {
                n_l
            }
        } else {
            // Coincident samples: rotate about t_prev × t directly.
            let axis = prev.t.cross(&t);
            let s = axis.norm();
            if s < 1e-15 {
                prev.n
            } else {
                let c = prev.t.dot(&t);
                let k = axis / s;
                prev.n * c + k.cross(&prev.n) * s + k * k.dot(&prev.n) * (1.0 - c)
            }
        };
        frames.push(orthonormal_frame(t, n));
    }
    Ok(frames)
}

/// Normal equations of the endpoint-constrained fit: `S Q = r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresSystem {
    /// `(n-1) × (n-1)`, row-major.
    pub s: Vec<Vec<f64>>,
    pub r: Vec<Point3>,
}

/// Precomputed refit for a fixed degree and parameter set. The interior
/// control points solve `S Q = r` with
/// `S_ab = Σ_j B_a(u_j) B_b(u_j)` and
/// `r_b = Σ_j B_b(u_j) (p_j − B_0(u_j) q_0 − B_n(u_j) q_n)`,
/// while `q_0` and `q_n` are pinned to the first and last displaced points.
#[derive(Debug, Clone)]
pub struct RefitOperator {
    degree: usize,
    params: Vec<f64>,
    /// `basis[j][i] = B^n_i(u_j)`.
    basis: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    /// Lower Cholesky factor of `S`.
    chol: Vec<Vec<f64>>,
}

impl RefitOperator {
    pub fn new(degree: usize, params: &[f64]) -> Result<Self> {
        if degree == 0 {
            return Err(invalid("degree must be at least 1"));
        }
        if params.len() < degree + 1 {
            return Err(Error::IllConditioned(format!(
                "{} samples cannot determine a degree-{degree} curve",
                params.len()
            )));
        }
        for &u in params {
            check_unit(u)?;
        }
        let basis: Vec<Vec<f64>> = params.iter().map(|&u| bernstein_row(degree, u)).collect();
        let k = degree - 1;
        let mut s = vec![vec![0.0; k]; k];
        for row in &basis {
            for a in 0..k {
                for b in 0..k {
                    s[a][b] += row[a + 1] * row[b + 1];
                }
            }
        }
        let chol = cholesky(&s)?;
        Ok(Self {
            degree,
            params: params.to_vec(),
            basis,
            s,
            chol,
        })
    }

    pub fn uniform(degree: usize, m: usize) -> Result<Self> {
        Self::new(degree, &uniform_params(m))
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// The normal equations for a given displaced point set.
    pub fn system(&self, displaced: &[Point3]) -> Result<LeastSquaresSystem> {
        self.check_len(displaced.len())?;
        Ok(LeastSquaresSystem {
            s: self.s.clone(),
            r: self.rhs(displaced),
        })
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.params.len() {
            return Err(invalid(format!(
                "expected {} displaced points, got {len}",
                self.params.len()
            )));
        }
        Ok(())
    }

    fn rhs(&self, displaced: &[Point3]) -> Vec<Point3> {
        let n = self.degree;
        let q0 = displaced[0];
        let qn = displaced[displaced.len() - 1];
        let mut r = vec![Point3::zeros(); n.saturating_sub(1)];
        for (row, p) in self.basis.iter().zip(displaced) {
            let resid = p - q0 * row[0] - qn * row[n];
            for b in 1..n {
                r[b - 1] += resid * row[b];
            }
        }
        r
    }

    fn solve(&self, rhs: &[Point3]) -> Vec<Point3> {
        let k = rhs.len();
        let mut y = vec![Point3::zeros(); k];
        for i in 0..k {
            let mut acc = rhs[i];
            for j in 0..i {
                acc -= y[j] * self.chol[i][j];
            }
            y[i] = acc / self.chol[i][i];
        }
        let mut x = vec![Point3::zeros(); k];
        for i in (0..k).rev() {
            let mut acc = y[i];
            for j in i + 1..k {
                acc -= x[j] * self.chol[j][i];
            }
            x[i] = acc / self.chol[i][i];
        }
        x
    }

    /// Control points of the refit curve.
    pub fn fit_ctrl(&self, displaced: &[Point3]) -> Result<Vec<Point3>> {
        self.check_len(displaced.len())?;
        let mut ctrl = Vec::with_capacity(self.degree + 1);
        ctrl.push(displaced[0]);
        ctrl.extend(self.solve(&self.rhs(displaced)));
        ctrl.push(displaced[displaced.len() - 1]);
        Ok(ctrl)
    }

    pub fn fit(&self, displaced: &[Point3]) -> Result<BezierCurve> {
        BezierCurve::new(self.fit_ctrl(displaced)?)
    }

    /// Pulls a gradient with respect to the fitted control points back onto
    /// the displaced points (the fit is linear, so this is its transpose).
    pub fn adjoint(&self, grad_ctrl: &[Point3]) -> Vec<Point3> {
        let n = self.degree;
        let mut out = vec![Point3::zeros(); self.params.len()];
        let last = out.len() - 1;
        let g_r = self.solve(&grad_ctrl[1..n]);
        let mut g_q0 = grad_ctrl[0];
        let mut g_qn = grad_ctrl[n];
        for (j, row) in self.basis.iter().enumerate() {
            let mut g_resid = Point3::zeros();
            for b in 1..n {
                g_resid += g_r[b - 1] * row[b];
            }
            out[j] += g_resid;
            g_q0 -= g_resid * row[0];
            g_qn -= g_resid * row[n];
        }
        out[0] += g_q0;
        out[last] += g_qn;
        out
    }
}

fn cholesky(s: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = s.len();
    let mut l = vec![vec![0.0; k]; k];
    let mut pivots = Vec::with_capacity(k);
    for i in 0..k {
        for j in 0..=i {
            let mut acc = s[i][j];
            for p in 0..j {
                acc -= l[i][p] * l[j][p];
            }
            if i == j {
                if !(acc > 0.0) {
                    return Err(Error::IllConditioned(format!(
                        "non-positive pivot {acc:e} at row {i}"
                    )));
                }
                pivots.push(acc);
                l[i][i] = acc.sqrt();
            } else {
                l[i][j] = acc / l[j][j];
            }
        }
    }
    let largest = pivots.iter().cloned().fold(0.0, f64::max);
    let smallest = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    if k > 0 && smallest < PIVOT_RATIO * largest {
        return Err(Error::IllConditioned(format!(
            "pivot ratio {:e} below {PIVOT_RATIO:e}",
            smallest / largest
        )));
    }
    Ok(l)
}

/// Endpoint-constrained least-squares refit of `displaced` (one point per
/// sample of `samples`) as a degree-`degree` curve.
pub fn refit_curve(
    samples: &CurveSamples,
    displaced: &[Point3],
    degree: usize,
) -> Result<BezierCurve> {
    if displaced.len() != samples.params.len() {
        return Err(invalid(format!(
            "{} displaced points for {} samples",
            displaced.len(),
            samples.params.len()
        )));
    }
    RefitOperator::new(degree, &samples.params)?.fit(displaced)
}
