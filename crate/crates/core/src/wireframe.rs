//! Wireframe graphs, print plans, partial print states and the blending of
//! unprinted struts onto a deformed printed structure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::field::Displacement;
use crate::geometry::{BezierCurve, Point3, RefitOperator, DEFAULT_SAMPLES};

/// Curve endpoints must sit on their vertices to this tolerance.
pub const ENDPOINT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    /// Start and end vertex indices; `curve(0)` is at `v[0]`.
    pub v: [usize; 2],
    pub curve: BezierCurve,
}

/// The target model: vertices joined by Bézier struts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WireframeGraph {
    pub vertices: Vec<Point3>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFiniteVertex { vertex: usize },
    VertexOutOfRange { edge: usize, vertex: usize },
    EndpointMismatch { edge: usize, end: usize, distance: f64 },
    ZeroLengthEdge { edge: usize },
    DuplicateEdge { edge: usize, first: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonFiniteVertex { vertex } => write!(f, "vertex {vertex}: non-finite position"),
            Violation::VertexOutOfRange { edge, vertex } => {
                write!(f, "edge {edge}: vertex index {vertex} out of range")
            }
            Violation::EndpointMismatch { edge, end, distance } => write!(
                f,
                "edge {edge}: endpoint mismatch at end {end} ({distance:.3e} mm from its vertex)"
            ),
            Violation::ZeroLengthEdge { edge } => write!(f, "edge {edge}: zero-length edge"),
            Violation::DuplicateEdge { edge, first } => {
                write!(f, "edge {edge}: duplicates edge {first}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        Err(Error::Validation(lines.join("; ")))
    }
}

/// Checks every graph invariant and lists each violation.
pub fn validate_graph(graph: &WireframeGraph) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, v) in graph.vertices.iter().enumerate() {
        if !v.iter().all(|c| c.is_finite()) {
            report.violations.push(Violation::NonFiniteVertex { vertex: i });
        }
    }
    let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (k, e) in graph.edges.iter().enumerate() {
        let mut in_range = true;
        for &vi in &e.v {
            if vi >= graph.vertices.len() {
                report.violations.push(Violation::VertexOutOfRange { edge: k, vertex: vi });
                in_range = false;
            }
        }
        if !(e.curve.approx_length(DEFAULT_SAMPLES) > 0.0) {
            report.violations.push(Violation::ZeroLengthEdge { edge: k });
        }
        if in_range {
            for (end, (&vi, p)) in e.v.iter().zip([e.curve.start(), e.curve.end()]).enumerate() {
                let distance = (p - graph.vertices[vi]).norm();
                if !(distance <= ENDPOINT_TOL) {
                    report.violations.push(Violation::EndpointMismatch { edge: k, end, distance });
                }
            }
        }
        let key = (e.v[0].min(e.v[1]), e.v[0].max(e.v[1]));
        if let Some(&first) = seen.get(&key) {
            if e.curve == graph.edges[first].curve || e.curve == graph.edges[first].curve.reversed() {
                report.violations.push(Violation::DuplicateEdge { edge: k, first });
            }
        } else {
            seen.insert(key, k);
        }
    }
    if graph.edges.is_empty() {
        report.warnings.push("nothing to print".into());
    }
    report
}

impl WireframeGraph {
    /// Builds and validates a graph.
    pub fn new(vertices: Vec<Point3>, edges: Vec<Edge>) -> Result<Self> {
        let g = Self { vertices, edges };
        validate_graph(&g).into_result()?;
        Ok(g)
    }

    /// Graph whose edges are straight curves of the given degree.
    pub fn straight(vertices: Vec<Point3>, pairs: &[[usize; 2]], degree: usize) -> Result<Self> {
        let mut edges = Vec::with_capacity(pairs.len());
        for (k, &[s, e]) in pairs.iter().enumerate() {
            let (a, b) = match (vertices.get(s), vertices.get(e)) {
                (Some(a), Some(b)) => (*a, *b),
                _ => return Err(Error::Validation(format!("edge {k}: vertex index out of range"))),
            };
            edges.push(Edge {
                v: [s, e],
                curve: BezierCurve::straight(a, b, degree)?,
            });
        }
        Self::new(vertices, edges)
    }

    /// Axis-aligned cube wireframe with its lower corner at the origin.
    /// Vertices 0..4 form the bottom face.
    pub fn cube(size: f64, degree: usize) -> Result<Self> {
        let s = size;
        let vertices = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(s, 0.0, 0.0),
            Point3::new(s, s, 0.0),
            Point3::new(0.0, s, 0.0),
            Point3::new(0.0, 0.0, s),
            Point3::new(s, 0.0, s),
            Point3::new(s, s, s),
            Point3::new(0.0, s, s),
        ];
        let pairs = [
            [0, 1],
            [1, 2],
            [2, 3],
            [3, 0],
            [0, 4],
            [1, 5],
            [2, 6],
            [3, 7],
            [4, 5],
            [5, 6],
            [6, 7],
            [7, 4],
        ];
        Self::straight(vertices, &pairs, degree)
    }

    pub fn degree(&self) -> Option<usize> {
        self.edges.first().map(|e| e.curve.degree())
    }

    /// Dense samples of the given edges, `m + 1` per edge.
    pub fn edge_points(&self, edges: impl IntoIterator<Item = usize>, m: usize) -> Result<Vec<Point3>> {
        let mut pts = Vec::new();
        for k in edges {
            let e = self.edges.get(k).ok_or_else(|| invalid(format!("edge {k} out of range")))?;
            pts.extend(e.curve.sample(m)?.points);
        }
        Ok(pts)
    }

    /// Dense samples of every edge plus every vertex.
    pub fn all_points(&self, m: usize) -> Result<Vec<Point3>> {
        let mut pts = self.vertices.clone();
        pts.extend(self.edge_points(0..self.edges.len(), m)?);
        Ok(pts)
    }

    /// Vertices at the lowest height, the default build-plate contacts.
    pub fn lowest_vertices(&self) -> Vec<usize> {
        let zmin = self.vertices.iter().map(|v| v.z).fold(f64::INFINITY, f64::min);
        (0..self.vertices.len())
            .filter(|&i| self.vertices[i].z <= zmin + ENDPOINT_TOL)
            .collect()
    }
}

/// Ordered batches of edges to print.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrintPlan {
    pub batches: Vec<Vec<usize>>,
    /// Build-plate vertices; the lowest vertices when absent.
    pub base_vertices: Option<Vec<usize>>,
}

impl PrintPlan {
    pub fn new(batches: Vec<Vec<usize>>) -> Self {
        Self {
            batches,
            base_vertices: None,
        }
    }

    /// Checks the plan against `graph`.
    pub fn validate(&self, graph: &WireframeGraph) -> Result<()> {
        let base: BTreeSet<usize> = match &self.base_vertices {
            Some(b) => b.iter().cloned().collect(),
            None => graph.lowest_vertices().into_iter().collect(),
        };
        if let Some(&b) = base.iter().find(|&&b| b >= graph.vertices.len()) {
            return Err(Error::Validation(format!("base vertex {b} out of range")));
        }
        let mut used = BTreeSet::new();
        let mut reached: BTreeSet<usize> = BTreeSet::new();
        for (bi, batch) in self.batches.iter().enumerate() {
            if batch.is_empty() {
                return Err(Error::Validation(format!("batch {} is empty", bi + 1)));
            }
            for &k in batch {
                if k >= graph.edges.len() {
                    return Err(Error::Validation(format!("batch {}: edge {k} out of range", bi + 1)));
                }
                if !used.insert(k) {
                    return Err(Error::Validation(format!("batch {}: edge {k} repeated", bi + 1)));
                }
            }
            let anchor = if bi == 0 { &base } else { &reached };
            for &k in batch {
                let v = graph.edges[k].v;
                if bi == 0 && !(anchor.contains(&v[0]) || anchor.contains(&v[1])) {
                    return Err(Error::Validation(format!(
                        "batch 1: edge {k} does not touch a base vertex"
                    )));
                }
            }
            if bi > 0 && !batch.iter().any(|&k| graph.edges[k].v.iter().any(|v| anchor.contains(v))) {
                return Err(Error::Validation(format!(
                    "batch {} shares no vertex with earlier batches",
                    bi + 1
                )));
            }
            for &k in batch {
                reached.extend(graph.edges[k].v);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// The printed subgraph after some number of batches.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartialState {
    pub printed_edges: BTreeSet<usize>,
    pub printed_vertices: BTreeSet<usize>,
}

impl PartialState {
    pub fn from_edges(graph: &WireframeGraph, edges: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut s = Self::default();
        for k in edges {
            let e = graph.edges.get(k).ok_or_else(|| invalid(format!("edge {k} out of range")))?;
            s.printed_edges.insert(k);
            s.printed_vertices.extend(e.v);
        }
        Ok(s)
    }

    pub fn is_empty(&self) -> bool {
        self.printed_edges.is_empty()
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.printed_edges.is_subset(&other.printed_edges)
    }
}

/// Union of batches `1..=t`.
pub fn partial_state(plan: &PrintPlan, graph: &WireframeGraph, t: usize) -> Result<PartialState> {
    if t > plan.batches.len() {
        return Err(invalid(format!(
            "t = {t} exceeds the {} planned batches",
            plan.batches.len()
        )));
    }
    PartialState::from_edges(graph, plan.batches[..t].iter().flatten().cloned())
}

/// Deformed copy of the printed part of the model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DigitalTwin {
    pub deformed_edges: BTreeMap<usize, BezierCurve>,
    pub deformed_vertices: BTreeMap<usize, Point3>,
    /// Per edge, `(τ, α)` of each kernel.
    pub kernel_params: BTreeMap<usize, Vec<(f64, f64)>>,
}

impl DigitalTwin {
    /// Largest distance between a deformed edge endpoint and its deformed
    /// vertex.
    pub fn connectivity_error(&self, graph: &WireframeGraph) -> f64 {
        let mut worst: f64 = 0.0;
        for (&k, c) in &self.deformed_edges {
            let [s, e] = graph.edges[k].v;
            for (vi, p) in [(s, c.start()), (e, c.end())] {
                let d = match self.deformed_vertices.get(&vi) {
                    Some(v) => (p - v).norm(),
                    None => f64::INFINITY,
                };
                worst = worst.max(d);
            }
        }
        worst
    }
}

/// Curves of the printed edges, taken from the twin when given.
pub fn printed_curves<'a>(
    partial: &PartialState,
    graph: &'a WireframeGraph,
    twin: Option<&'a DigitalTwin>,
) -> Vec<&'a BezierCurve> {
    partial
        .printed_edges
        .iter()
        .map(|k| match twin.and_then(|t| t.deformed_edges.get(k)) {
            Some(c) => c,
            None => &graph.edges[*k].curve,
        })
        .collect()
}

/// Dense point samples of a set of printed curves for distance queries.
#[derive(Debug, Clone, PartialEq)]
pub struct PrintedSamples {
    points: Vec<Point3>,
}

impl PrintedSamples {
    /// `m + 1` samples per curve.
    pub fn new(curves: &[&BezierCurve], m: usize) -> Result<Self> {
        if curves.is_empty() {
            return Err(Error::UndefinedDistance);
        }
        let mut points = Vec::with_capacity(curves.len() * (m + 1));
        for c in curves {
            points.extend(c.sample(m)?.points);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn min_dist(&self, x: &Point3) -> f64 {
        self.points
            .iter()
            .map(|p| (x - p).norm_squared())
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }
}

/// Distance from `x` to the nearest dense sample (64 per edge) of the
/// printed curves.
pub fn min_dist_to_printed(x: &Point3, curves: &[&BezierCurve]) -> Result<f64> {
    Ok(PrintedSamples::new(curves, DEFAULT_SAMPLES)?.min_dist(x))
}

/// How an unprinted edge relates to the printed structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlendCase {
    BothPrinted,
    NeitherPrinted,
    StartPrinted,
    EndPrinted,
}

pub fn blend_case(edge: &Edge, partial: &PartialState) -> BlendCase {
    let s = partial.printed_vertices.contains(&edge.v[0]);
    let e = partial.printed_vertices.contains(&edge.v[1]);
    match (s, e) {
        (true, true) => BlendCase::BothPrinted,
        (false, false) => BlendCase::NeitherPrinted,
        (true, false) => BlendCase::StartPrinted,
        (false, true) => BlendCase::EndPrinted,
    }
}

/// New curves for the unprinted edges of `graph` so that they join the
/// deformed printed structure.
///
/// Edges with both endpoints printed are mapped through `p + d(p)`; edges
/// with one printed endpoint are mapped through `p(u) + u·d(p(u))` with the
/// printed end at `u = 1`; edges away from the printed part keep their
/// curve. Endpoints on printed vertices are set to the twin's deformed
/// vertices exactly.
pub fn blend_targets<D: Displacement + ?Sized>(
    field: &D,
    twin: &DigitalTwin,
    partial: &PartialState,
    graph: &WireframeGraph,
    m: usize,
) -> Result<BTreeMap<usize, BezierCurve>> {
    let degree = graph.degree().unwrap_or(crate::geometry::DEFAULT_DEGREE);
    let refit = RefitOperator::uniform(degree, m)?;
    let vstar = |vi: usize| -> Result<Point3> {
        twin.deformed_vertices
            .get(&vi)
            .copied()
            .ok_or_else(|| invalid(format!("twin has no deformed position for vertex {vi}")))
    };
    let mut out = BTreeMap::new();
    for (k, edge) in graph.edges.iter().enumerate() {
        if partial.printed_edges.contains(&k) {
            continue;
        }
        let case = blend_case(edge, partial);
        let curve = match case {
            BlendCase::NeitherPrinted => edge.curve.clone(),
            BlendCase::BothPrinted => {
                let pts = edge.curve.sample(m)?.points;
                let d = field.displacements(&pts);
                let mut moved: Vec<Point3> = pts.iter().zip(&d).map(|(p, d)| p + d).collect();
                moved[0] = vstar(edge.v[0])?;
                moved[m] = vstar(edge.v[1])?;
                refit.fit(&moved)?
            }
            BlendCase::StartPrinted | BlendCase::EndPrinted => {
                // Orient so that the printed end is u = 1.
                let flip = case == BlendCase::StartPrinted;
                let oriented = if flip { edge.curve.reversed() } else { edge.curve.clone() };
                let (free, fixed) = if flip { (edge.v[1], edge.v[0]) } else { (edge.v[0], edge.v[1]) };
                let samples = oriented.sample(m)?;
                let d = field.displacements(&samples.points);
                let mut moved: Vec<Point3> = samples
                    .points
                    .iter()
                    .zip(&d)
                    .zip(&samples.params)
                    .map(|((p, d), &u)| p + d * u)
                    .collect();
                moved[0] = graph.vertices[free];
                moved[m] = vstar(fixed)?;
                let c = refit.fit(&moved)?;
                if flip {
                    c.reversed()
                } else {
                    c
                }
            }
        };
        out.insert(k, curve);
    }
    Ok(out)
}

/// The working plan after a round: printed edges and vertices replaced by
/// their twin, unprinted edges blended.
pub fn update_working_plan<D: Displacement + ?Sized>(
    field: &D,
    twin: &DigitalTwin,
    partial: &PartialState,
    graph: &WireframeGraph,
    m: usize,
) -> Result<WireframeGraph> {
    let blended = blend_targets(field, twin, partial, graph, m)?;
    let mut next = graph.clone();
    for (&vi, p) in &twin.deformed_vertices {
        next.vertices[vi] = *p;
    }
    for (k, e) in next.edges.iter_mut().enumerate() {
        if let Some(c) = twin.deformed_edges.get(&k) {
            e.curve = c.clone();
        } else if let Some(c) = blended.get(&k) {
            e.curve = c.clone();
        }
    }
    validate_graph(&next).into_result()?;
    Ok(next)
}
