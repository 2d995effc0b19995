//! Synthetic scenes: analytic deformation oracles, virtual cameras, ground
//! truth renders, reconstruction metrics and the simulated adaptive
//! printing loop.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::field::{Displacement, Domain};
use crate::geometry::{BezierCurve, Point3, DEFAULT_SAMPLES};
use crate::optimize::{construct_twin, LossBreakdown, LossWeights, PrintedLayout, TwinConfig};
use crate::splat::{render_view, Camera, CurveKernels, ImageF};
use crate::wireframe::{partial_state, update_working_plan, DigitalTwin, PartialState, PrintPlan, WireframeGraph};

/// Analytic ground-truth displacement.
#[derive(Debug, Clone, PartialEq)]
pub enum DeformOracle {
    None,
    Translate(Vector3<f64>),
    /// `(0, 0, −a · max(z − base, 0)²)`.
    Sag { a: f64, base: f64 },
    /// `a · max(z − base, 0)² · axis`.
    TipBend { axis: Vector3<f64>, a: f64, base: f64 },
    /// `A x + t`.
    Affine { a: Matrix3<f64>, t: Vector3<f64> },
}

impl Displacement for DeformOracle {
    fn displacement(&self, x: &Point3) -> Point3 {
        match self {
            DeformOracle::None => Point3::zeros(),
            DeformOracle::Translate(v) => *v,
            DeformOracle::Sag { a, base } => {
                let h = (x.z - base).max(0.0);
                Point3::new(0.0, 0.0, -a * h * h)
            }
            DeformOracle::TipBend { axis, a, base } => {
                let h = (x.z - base).max(0.0);
                axis * (a * h * h)
            }
            DeformOracle::Affine { a, t } => a * x + t,
        }
    }
}

fn numbers(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| invalid(format!("bad number {p:?} in {what}")))
        })
        .collect()
}

impl FromStr for DeformOracle {
    type Err = Error;

    /// `none`, `translate:x,y,z`, `sag:a[,base]`,
    /// `tip_bend:axis,a[,base]` with axis `x`, `y` or `z`, or
    /// `affine:a11,…,a33,t1,t2,t3`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s.split_once(':').unwrap_or((s, ""));
        match kind.trim() {
            "none" if args.is_empty() => Ok(Self::None),
            "translate" => {
                let v = numbers(args, s)?;
                if v.len() != 3 {
                    return Err(invalid("translate needs x,y,z"));
                }
                Ok(Self::Translate(Vector3::new(v[0], v[1], v[2])))
            }
            "sag" => {
                let v = numbers(args, s)?;
                match v.as_slice() {
                    [a] => Ok(Self::Sag { a: *a, base: 0.0 }),
                    [a, base] => Ok(Self::Sag { a: *a, base: *base }),
                    _ => Err(invalid("sag needs a[,base]")),
                }
            }
            "tip_bend" => {
                let (axis, rest) = args.split_once(',').ok_or_else(|| invalid("tip_bend needs axis,a[,base]"))?;
                let axis = match axis.trim() {
                    "x" => Vector3::x(),
                    "y" => Vector3::y(),
                    "z" => Vector3::z(),
                    other => return Err(invalid(format!("unknown axis {other:?}"))),
                };
                let v = numbers(rest, s)?;
                match v.as_slice() {
                    [a] => Ok(Self::TipBend { axis, a: *a, base: 0.0 }),
                    [a, base] => Ok(Self::TipBend { axis, a: *a, base: *base }),
                    _ => Err(invalid("tip_bend needs axis,a[,base]")),
                }
            }
            "affine" => {
                let v = numbers(args, s)?;
                if v.len() != 12 {
                    return Err(invalid("affine needs 9 matrix entries and 3 offsets"));
                }
                Ok(Self::Affine {
                    a: Matrix3::from_row_slice(&v[..9]),
                    t: Vector3::new(v[9], v[10], v[11]),
                })
            }
            _ => Err(invalid(format!("unknown deformation {s:?}"))),
        }
    }
}

impl fmt::Display for DeformOracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeformOracle::None => write!(f, "none"),
            DeformOracle::Translate(v) => write!(f, "translate:{:e},{:e},{:e}", v.x, v.y, v.z),
            DeformOracle::Sag { a, base } => write!(f, "sag:{a:e},{base:e}"),
            DeformOracle::TipBend { axis, a, base } => {
                let name = if *axis == Vector3::x() {
                    "x"
                } else if *axis == Vector3::y() {
                    "y"
                } else {
                    "z"
                };
                write!(f, "tip_bend:{name},{a:e},{base:e}")
            }
            DeformOracle::Affine { a, t } => {
                write!(f, "affine:")?;
                for r in 0..3 {
                    for c in 0..3 {
                        write!(f, "{:e},", a[(r, c)])?;
                    }
                }
                write!(f, "{:e},{:e},{:e}", t.x, t.y, t.z)
            }
        }
    }
}

/// `n` cameras evenly spaced on a circle of radius twice the bbox diagonal
/// at 30° elevation, all looking at the bbox center with world `+z` up.
/// The focal length is chosen so the bbox spans about 70% of the height.
pub fn make_cameras(n: usize, bbox: &Domain, width: usize, height: usize) -> Result<Vec<Camera>> {
    if n == 0 {
        return Err(invalid("at least one view is required"));
    }
    let diag = bbox.diagonal();
    if !(diag > 0.0) || !diag.is_finite() {
        return Err(invalid("degenerate bounding box"));
    }
    let center = bbox.center();
    let radius = 2.0 * diag;
    let elev = 30f64.to_radians();
    let f = 1.4 * height as f64;
    let intr = [f, f, width as f64 / 2.0, height as f64 / 2.0];
    (0..n)
        .map(|i| {
            let phi = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let eye = center + Vector3::new(elev.cos() * phi.cos(), elev.cos() * phi.sin(), elev.sin()) * radius;
            Camera::look_at(eye, center, Vector3::z(), width, height, intr)
        })
        .collect()
}

/// Ground-truth geometry of the printed edges.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GtGeometry {
    pub curves: BTreeMap<usize, BezierCurve>,
    pub vertices: BTreeMap<usize, Point3>,
}

/// Displaces the samples of every printed edge by `oracle` and refits them
/// with displaced endpoints. Unprinted edges are left out.
pub fn apply_oracle<D: Displacement + ?Sized>(
    graph: &WireframeGraph,
    partial: &PartialState,
    oracle: &D,
    m: usize,
) -> Result<GtGeometry> {
    let layout = PrintedLayout::new(graph, partial, m)?;
    let (curves, vertices) = layout.deform(oracle)?;
    Ok(GtGeometry {
        curves: layout.edges().iter().cloned().zip(curves).collect(),
        vertices: layout.vertices().iter().cloned().zip(vertices).collect(),
    })
}

/// Renders curves with uniform kernel thickness and opacity.
pub fn render_uniform(
    curves: &BTreeMap<usize, BezierCurve>,
    tau: f64,
    alpha: f64,
    cam: &Camera,
    cfg: &TwinConfig,
) -> Result<ImageF> {
    let k = cfg.kernels_per_edge;
    let taus = vec![tau; k];
    let alphas = vec![alpha; k];
    let items: Vec<CurveKernels> = curves
        .iter()
        .map(|(&edge, curve)| CurveKernels {
            edge,
            curve,
            tau: &taus,
            alpha: &alphas,
        })
        .collect();
    render_view(&items, k, cam, &cfg.render)
}

/// Renders a twin with its own kernel parameters.
pub fn render_twin(twin: &DigitalTwin, cam: &Camera, cfg: &TwinConfig) -> Result<ImageF> {
    let k = cfg.kernels_per_edge;
    let params: Vec<(usize, &BezierCurve, Vec<f64>, Vec<f64>)> = twin
        .deformed_edges
        .iter()
        .map(|(&e, c)| {
            let p = twin.kernel_params.get(&e).ok_or_else(|| invalid(format!("edge {e} has no kernels")))?;
            if p.len() != k {
                return Err(invalid(format!("edge {e} has {} kernels, expected {k}", p.len())));
            }
            Ok((e, c, p.iter().map(|x| x.0).collect(), p.iter().map(|x| x.1).collect()))
        })
        .collect::<Result<_>>()?;
    let items: Vec<CurveKernels> = params
        .iter()
        .map(|(e, c, t, a)| CurveKernels {
            edge: *e,
            curve: c,
            tau: t,
            alpha: a,
        })
        .collect();
    render_view(&items, k, cam, &cfg.render)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOptions {
    pub t: usize,
    pub oracle: DeformOracle,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Add uniform ±1/255 pixel noise.
    pub noise: bool,
    /// Printed edges left out of the target images.
    pub missing_edges: Vec<usize>,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            t: 1,
            oracle: DeformOracle::None,
            views: 8,
            width: 256,
            height: 256,
            seed: 0,
            noise: false,
            missing_edges: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub graph: WireframeGraph,
    pub plan: PrintPlan,
    pub t: usize,
    pub partial: PartialState,
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageF>,
    pub gt: GtGeometry,
    pub oracle: DeformOracle,
    pub seed: u64,
}

/// Bounding box of the whole model, used to place the cameras.
pub fn model_bbox(graph: &WireframeGraph) -> Result<Domain> {
    Domain::enclosing(&graph.all_points(DEFAULT_SAMPLES)?, 1.0)
}

fn add_noise(images: &mut [ImageF], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    for im in images {
        for v in &mut im.data {
            *v = (*v + rng.gen_range(-1.0..=1.0) / 255.0).clamp(0.0, 1.0);
        }
    }
}

/// Target views of the oracle-deformed printed state after `t` batches.
pub fn generate_scene(
    graph: &WireframeGraph,
    plan: &PrintPlan,
    opts: &SceneOptions,
    cfg: &TwinConfig,
) -> Result<SceneBundle> {
    plan.validate(graph)?;
    if opts.t == 0 {
        return Err(invalid("t must be at least 1"));
    }
    let partial = partial_state(plan, graph, opts.t)?;
    let cameras = make_cameras(opts.views, &model_bbox(graph)?, opts.width, opts.height)?;
    let gt = apply_oracle(graph, &partial, &opts.oracle, cfg.samples_per_edge)?;
    let images = render_targets(&gt, &opts.missing_edges, &cameras, cfg, opts.noise.then_some(opts.seed))?;
    Ok(SceneBundle {
        graph: graph.clone(),
        plan: plan.clone(),
        t: opts.t,
        partial,
        cameras,
        images,
        gt,
        oracle: opts.oracle.clone(),
        seed: opts.seed,
    })
}

fn render_targets(
    gt: &GtGeometry,
    missing: &[usize],
    cameras: &[Camera],
    cfg: &TwinConfig,
    noise_seed: Option<u64>,
) -> Result<Vec<ImageF>> {
    let visible: BTreeMap<usize, BezierCurve> = gt
        .curves
        .iter()
        .filter(|(e, _)| !missing.contains(e))
        .map(|(e, c)| (*e, c.clone()))
        .collect();
    let mut images = cameras
        .iter()
        .map(|cam| render_uniform(&visible, cfg.tau_init, cfg.alpha_init, cam, cfg))
        .collect::<Result<Vec<_>>>()?;
    if let Some(seed) = noise_seed {
        add_noise(&mut images, seed);
    }
    Ok(images)
}

/// Symmetric Chamfer distance: mean nearest distance from `a` to `b` plus
/// from `b` to `a`.
pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("Chamfer distance of an empty point set"));
    }
    let one_way = |x: &[Point3], y: &[Point3]| {
        x.iter()
            .map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
            .sum::<f64>()
            / x.len() as f64
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// `m + 1` samples of each curve.
pub fn curve_points<'a>(curves: impl IntoIterator<Item = &'a BezierCurve>, m: usize) -> Result<Vec<Point3>> {
    let mut out = Vec::new();
    for c in curves {
        out.extend(c.sample(m)?.points);
    }
    Ok(out)
}

/// Largest `‖c*_k(u) − c_k(u)‖` per edge over `m + 1` samples.
pub fn edge_displacements(
    deformed: &BTreeMap<usize, BezierCurve>,
    planned: &WireframeGraph,
    m: usize,
) -> Result<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for (&k, c) in deformed {
        let p = &planned
            .edges
            .get(k)
            .ok_or_else(|| Error::Validation(format!("edge {k} is not in the planned model")))?
            .curve;
        let a = c.sample(m)?.points;
        let b = p.sample(m)?.points;
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
        out.insert(k, worst);
    }
    Ok(out)
}

/// `E_max`: the largest pointwise displacement of the deformed edges from
/// their planned curves.
pub fn max_displacement(deformed: &BTreeMap<usize, BezierCurve>, planned: &WireframeGraph) -> Result<f64> {
    Ok(edge_displacements(deformed, planned, DEFAULT_SAMPLES)?
        .values()
        .cloned()
        .fold(0.0, f64::max))
}

/// Chamfer distance between two curve sets of the same edges.
pub fn curve_chamfer(
    a: &BTreeMap<usize, BezierCurve>,
    b: &BTreeMap<usize, BezierCurve>,
) -> Result<f64> {
    chamfer(&curve_points(a.values(), DEFAULT_SAMPLES)?, &curve_points(b.values(), DEFAULT_SAMPLES)?)
}

/// [`curve_chamfer`] divided by the bounding-box diagonal of `model`.
pub fn normalized_chamfer(
    a: &BTreeMap<usize, BezierCurve>,
    b: &BTreeMap<usize, BezierCurve>,
    model: &WireframeGraph,
) -> Result<f64> {
    Ok(curve_chamfer(a, b)? / model_bbox(model)?.diagonal())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub noise: bool,
    pub twin: TwinConfig,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub t: usize,
    pub trace: Vec<LossBreakdown>,
    pub converged: bool,
    pub chamfer_twin_gt: f64,
    pub chamfer_planned_gt: f64,
    /// Twin against the original model.
    pub e_max: f64,
    /// Ground truth against the original model.
    pub e_max_gt: f64,
    pub images: Vec<ImageF>,
    /// Working plan after blending.
    pub plan: WireframeGraph,
    pub twin: DigitalTwin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rounds: Vec<RoundReport>,
    pub aborted: Option<String>,
    pub cameras: Vec<Camera>,
}

impl RunReport {
    pub fn final_plan(&self) -> Option<&WireframeGraph> {
        self.rounds.last().map(|r| &r.plan)
    }
}

/// Simulated closed loop: each round prints the next batch from the
/// current working plan, lets `schedule[t]` deform everything printed so
/// far, reconstructs the twin from rendered views and blends the remaining
/// plan onto it.
pub fn adaptive_sim(
    graph: &WireframeGraph,
    plan: &PrintPlan,
    schedule: &[DeformOracle],
    opts: &SimOptions,
) -> Result<RunReport> {
    plan.validate(graph)?;
    if schedule.len() != plan.len() {
        return Err(invalid(format!(
            "{} oracles for {} batches",
            schedule.len(),
            plan.len()
        )));
    }
    let m = opts.twin.samples_per_edge;
    let cameras = make_cameras(opts.views, &model_bbox(graph)?, opts.width, opts.height)?;
    let mut report = RunReport {
        rounds: Vec::new(),
        aborted: None,
        cameras: cameras.clone(),
    };
    let mut working = graph.clone();
    // What is physically on the build plate: positions of printed vertices
    // and curves of printed edges.
    let mut physical_vertices: BTreeMap<usize, Point3> = BTreeMap::new();
    let mut physical_curves: BTreeMap<usize, BezierCurve> = BTreeMap::new();

    for t in 1..=plan.len() {
        let partial = partial_state(plan, graph, t)?;
        let mut world = working.clone();
        for (&v, p) in &physical_vertices {
            world.vertices[v] = *p;
        }
        for (&k, c) in &physical_curves {
            world.edges[k].curve = c.clone();
        }
        let gt = apply_oracle(&world, &partial, &schedule[t - 1], m)?;
        physical_vertices = gt.vertices.clone();
        physical_curves = gt.curves.clone();

        let seed = opts.seed.wrapping_add(t as u64);
        let images = render_targets(&gt, &[], &cameras, &opts.twin, opts.noise.then_some(seed))?;
        let result = match construct_twin(&working, &partial, &cameras, &images, &opts.twin, &opts.weights) {
            Ok(r) => r,
            Err(e) => {
                report.aborted = Some(format!("round {t}: {e}"));
                return Ok(report);
            }
        };
        let planned: BTreeMap<usize, BezierCurve> = partial
            .printed_edges
            .iter()
            .map(|&k| (k, working.edges[k].curve.clone()))
            .collect();
        let next = update_working_plan(result.field(), &result.twin, &partial, &working, m)?;
        report.rounds.push(RoundReport {
            t,
            trace: result.trace.clone(),
            converged: result.converged,
            chamfer_twin_gt: curve_chamfer(&result.twin.deformed_edges, &gt.curves)?,
            chamfer_planned_gt: curve_chamfer(&planned, &gt.curves)?,
            e_max: max_displacement(&result.twin.deformed_edges, graph)?,
            e_max_gt: max_displacement(&gt.curves, graph)?,
            images,
            plan: next.clone(),
            twin: result.twin,
        });
        working = next;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BezierCurve;

    #[test]
    fn oracle_parsing_round_trips() {
        for s in ["none", "translate:1,2,3", "sag:0.05", "sag:0.05,1", "tip_bend:x,0.01,2", "affine:1,0,0,0,1,0,0,0,1,0.5,0,0"] {
            let o: DeformOracle = s.parse().unwrap();
            let back: DeformOracle = o.to_string().parse().unwrap();
            assert_eq!(o, back);
        }
        for bad in ["sag", "sag:x", "wobble:1", "translate:1,2", "tip_bend:w,1", "none:3"] {
            assert!(bad.parse::<DeformOracle>().is_err(), "{bad}");
        }
    }

    #[test]
    fn sag_of_vertical_strut() {
        let strut = WireframeGraph::straight(vec![Point3::zeros(), Point3::new(0.0, 0.0, 10.0)], &[[0, 1]], 3).unwrap();
        let partial = PartialState::from_edges(&strut, [0]).unwrap();
        let gt = apply_oracle(&strut, &partial, &DeformOracle::Sag { a: 0.05, base: 0.0 }, 64).unwrap();
        assert!((gt.vertices[&1] - Point3::new(0.0, 0.0, 5.0)).norm() < 1e-12);
        assert_eq!(gt.curves[&0].end(), gt.vertices[&1]);
        // The displaced samples lie on the parabola z ↦ z − 0.05 z², which a
        // cubic represents exactly.
        let c = &gt.curves[&0];
        for j in 0..=10 {
            let u = j as f64 / 10.0;
            let z = 10.0 * u;
            assert!((c.eval(u).unwrap() - Point3::new(0.0, 0.0, z - 0.05 * z * z)).norm() < 1e-9);
        }
        let e = max_displacement(&gt.curves, &strut).unwrap();
        assert!((e - 5.0).abs() < 1e-9);
    }

    #[test]
    fn translate_oracle_is_rigid() {
        let g = WireframeGraph::cube(5.0, 3).unwrap();
        let partial = PartialState::from_edges(&g, [0, 4, 8]).unwrap();
        let v = Vector3::new(0.3, -0.2, 0.7);
        let gt = apply_oracle(&g, &partial, &DeformOracle::Translate(v), 64).unwrap();
        for (k, c) in &gt.curves {
            for (a, b) in c.ctrl().iter().zip(g.edges[*k].curve.ctrl()) {
                assert!((a - b - v).norm() < 1e-12);
            }
        }
        assert!((max_displacement(&gt.curves, &g).unwrap() - v.norm()).abs() < 1e-12);
        let none = apply_oracle(&g, &partial, &DeformOracle::None, 64).unwrap();
        assert_eq!(max_displacement(&none.curves, &g).unwrap() < 1e-12, true);
    }

    #[test]
    fn camera_ring() {
        let bbox = Domain {
            min: [0.0; 3],
            max: [20.0; 3],
        };
        let cams = make_cameras(8, &bbox, 256, 256).unwrap();
        assert_eq!(cams.len(), 8);
        let c = bbox.center();
        let mut az = Vec::new();
        for cam in &cams {
            let p = cam.project(&c).unwrap();
            assert!((p.x - 128.0).abs() < 1.0 && (p.y - 128.0).abs() < 1.0);
            let r = cam.rotation();
            assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
            let e = cam.center() - c;
            assert!((e.norm() - 2.0 * bbox.diagonal()).abs() < 1e-9);
            assert!((e.z / e.norm() - 0.5).abs() < 1e-12);
            az.push(e.y.atan2(e.x));
        }
        for w in az.windows(2) {
            let d = (w[1] - w[0]).rem_euclid(2.0 * std::f64::consts::PI);
            assert!((d - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        }
        let four = make_cameras(4, &bbox, 256, 256).unwrap();
        assert_eq!(four.len(), 4);
        assert_ne!(four[1], cams[1]);
        assert!(make_cameras(0, &bbox, 256, 256).is_err());
        let flat = Domain {
            min: [1.0; 3],
            max: [1.0; 3],
        };
        assert!(make_cameras(3, &flat, 64, 64).is_err());
    }

    #[test]
    fn chamfer_examples() {
        let a = vec![Point3::zeros()];
        let b = vec![Point3::new(3.0, 0.0, 0.0)];
        assert_eq!(chamfer(&a, &b).unwrap(), 6.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rand_set = |n| -> Vec<Point3> {
            (0..n).map(|_| Point3::new(rng.gen(), rng.gen(), rng.gen())).collect()
        };
        let x = rand_set(40);
        let y = rand_set(25);
        let mut s1 = 0.0;
        for p in &x {
            let mut best = f64::INFINITY;
            for q in &y {
                best = best.min((p - q).norm());
            }
            s1 += best;
        }
        let mut s2 = 0.0;
        for q in &y {
            let mut best = f64::INFINITY;
            for p in &x {
                best = best.min((p - q).norm());
            }
            s2 += best;
        }
        let brute = s1 / 40.0 + s2 / 25.0;
        assert!((chamfer(&x, &y).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn edge_displacement_requires_matching_edges() {
        let g = WireframeGraph::cube(1.0, 3).unwrap();
        let mut extra = BTreeMap::new();
        extra.insert(40, BezierCurve::straight(Point3::zeros(), Point3::x(), 3).unwrap());
        assert!(matches!(max_displacement(&extra, &g), Err(Error::Validation(_))));
    }

    #[test]
    fn normalized_chamfer_of_parallel_struts() {
        // Bounding box 2 × 3 × 6, diagonal 7.
        let end = Point3::new(2.0, 3.0, 6.0);
        let g = WireframeGraph::straight(vec![Point3::zeros(), end], &[[0, 1]], 3).unwrap();
        let a: BTreeMap<usize, BezierCurve> = [(0, g.edges[0].curve.clone())].into();
        let off = Point3::new(3.0, -2.0, 0.0) * (3.0 / 13f64.sqrt());
        let shifted = BezierCurve::straight(off, end + off, 3).unwrap();
        let b: BTreeMap<usize, BezierCurve> = [(0, shifted)].into();
        assert!((curve_chamfer(&a, &b).unwrap() - 6.0).abs() < 1e-12);
        assert!((normalized_chamfer(&a, &b, &g).unwrap() - 6.0 / 7.0).abs() < 1e-12);
    }
}
