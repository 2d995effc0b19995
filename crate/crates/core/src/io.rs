//! File formats: wireframe, plan, camera and twin JSON, loss-trace CSV.
//!
//! Reals are written with 17 significant digits so that every `f64` reads
//! back bit-for-bit.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BezierCurve, Point3};
use crate::optimize::LossBreakdown;
use crate::wireframe::{DigitalTwin, Edge, PrintPlan, WireframeGraph};

/// JSON formatter printing every float as `{:.16e}`.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Validation(e.to_string()))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

fn p3(p: &Point3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

fn from3(a: &[f64; 3]) -> Point3 {
    Point3::new(a[0], a[1], a[2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeJson {
    pub v: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctrl: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireframeJson {
    pub units: String,
    pub degree: usize,
    pub vertices: Vec<[f64; 3]>,
    pub edges: Vec<EdgeJson>,
}

fn check_units(units: &str) -> Result<()> {
    if units != "mm" {
        return Err(Error::Validation(format!("unsupported units {units:?}; expected \"mm\"")));
    }
    Ok(())
}

impl WireframeJson {
    pub fn from_graph(g: &WireframeGraph) -> Self {
        Self {
            units: "mm".into(),
            degree: g.degree().unwrap_or(crate::geometry::DEFAULT_DEGREE),
            vertices: g.vertices.iter().map(p3).collect(),
            edges: g
                .edges
                .iter()
                .map(|e| EdgeJson {
                    v: e.v,
                    ctrl: Some(e.curve.ctrl().iter().map(p3).collect()),
                })
                .collect(),
        }
    }

    /// Builds and validates the graph. Edges without `ctrl` are straight.
    pub fn to_graph(&self) -> Result<WireframeGraph> {
        check_units(&self.units)?;
        if self.degree == 0 {
            return Err(Error::Validation("degree must be at least 1".into()));
        }
        let vertices: Vec<Point3> = self.vertices.iter().map(from3).collect();
        let mut edges = Vec::with_capacity(self.edges.len());
        for (k, e) in self.edges.iter().enumerate() {
            let curve = match &e.ctrl {
                Some(ctrl) => {
                    if ctrl.len() != self.degree + 1 {
                        return Err(Error::Validation(format!(
                            "edge {k}: {} control points for degree {}",
                            ctrl.len(),
                            self.degree
                        )));
                    }
                    BezierCurve::new(ctrl.iter().map(from3).collect())
                }
                None => {
                    let (a, b) = match (vertices.get(e.v[0]), vertices.get(e.v[1])) {
                        (Some(a), Some(b)) => (*a, *b),
                        _ => return Err(Error::Validation(format!("edge {k}: vertex index out of range"))),
                    };
                    BezierCurve::straight(a, b, self.degree)
                }
            }
            .map_err(|err| Error::Validation(format!("edge {k}: {err}")))?;
            edges.push(Edge { v: e.v, curve });
        }
        WireframeGraph::new(vertices, edges)
    }
}

pub fn read_wireframe(path: &Path) -> Result<WireframeGraph> {
    read_json::<WireframeJson>(path)?.to_graph()
}

pub fn write_wireframe(path: &Path, g: &WireframeGraph) -> Result<()> {
    write_json(path, &WireframeJson::from_graph(g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanJson {
    pub batches: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_vertices: Option<Vec<usize>>,
}

pub fn read_plan(path: &Path) -> Result<PrintPlan> {
    let p: PlanJson = read_json(path)?;
    Ok(PrintPlan {
        batches: p.batches,
        base_vertices: p.base_vertices,
    })
}

pub fn write_plan(path: &Path, plan: &PrintPlan) -> Result<()> {
    write_json(
        path,
        &PlanJson {
            batches: plan.batches.clone(),
            base_vertices: plan.base_vertices.clone(),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinEdgeJson {
    pub edge: usize,
    pub v: [usize; 2],
    pub ctrl: Vec<[f64; 3]>,
    /// `[τ, α]` per kernel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinVertexJson {
    pub index: usize,
    pub position: [f64; 3],
}

/// Deformed printed geometry: the twin, or ground-truth curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinJson {
    pub units: String,
    pub degree: usize,
    pub vertices: Vec<TwinVertexJson>,
    pub edges: Vec<TwinEdgeJson>,
}

impl TwinJson {
    pub fn from_twin(twin: &DigitalTwin, graph: &WireframeGraph) -> Result<Self> {
        let mut edges = Vec::with_capacity(twin.deformed_edges.len());
        for (&k, c) in &twin.deformed_edges {
            let e = graph
                .edges
                .get(k)
                .ok_or_else(|| Error::Validation(format!("edge {k} is not in the model")))?;
            edges.push(TwinEdgeJson {
                edge: k,
                v: e.v,
                ctrl: c.ctrl().iter().map(p3).collect(),
                kernels: twin
                    .kernel_params
                    .get(&k)
                    .map(|ps| ps.iter().map(|&(t, a)| [t, a]).collect()),
            });
        }
        Ok(Self {
            units: "mm".into(),
            degree: graph.degree().unwrap_or(crate::geometry::DEFAULT_DEGREE),
            vertices: twin
                .deformed_vertices
                .iter()
                .map(|(&index, p)| TwinVertexJson { index, position: p3(p) })
                .collect(),
            edges,
        })
    }

    pub fn to_twin(&self) -> Result<DigitalTwin> {
        check_units(&self.units)?;
        let mut twin = DigitalTwin::default();
        for v in &self.vertices {
            if twin.deformed_vertices.insert(v.index, from3(&v.position)).is_some() {
                return Err(Error::Validation(format!("vertex {} listed twice", v.index)));
            }
        }
        for e in &self.edges {
            if e.ctrl.len() != self.degree + 1 {
                return Err(Error::Validation(format!(
                    "edge {}: {} control points for degree {}",
                    e.edge,
                    e.ctrl.len(),
                    self.degree
                )));
            }
            let c = BezierCurve::new(e.ctrl.iter().map(from3).collect())
                .map_err(|err| Error::Validation(format!("edge {}: {err}", e.edge)))?;
            if twin.deformed_edges.insert(e.edge, c).is_some() {
                return Err(Error::Validation(format!("edge {} listed twice", e.edge)));
            }
            if let Some(ks) = &e.kernels {
                twin.kernel_params.insert(e.edge, ks.iter().map(|k| (k[0], k[1])).collect());
            }
        }
        Ok(twin)
    }

    /// Vertex pairs of the stored edges.
    pub fn edge_vertices(&self) -> BTreeMap<usize, [usize; 2]> {
        self.edges.iter().map(|e| (e.edge, e.v)).collect()
    }
}

pub fn write_twin(path: &Path, twin: &DigitalTwin, graph: &WireframeGraph) -> Result<()> {
    write_json(path, &TwinJson::from_twin(twin, graph)?)
}

pub fn read_twin(path: &Path) -> Result<DigitalTwin> {
    read_json::<TwinJson>(path)?.to_twin()
}

/// `iteration,l_img,l_bend,l_total,lr` with 6 significant digits.
pub fn trace_csv(trace: &[LossBreakdown]) -> String {
    let mut s = String::from("iteration,l_img,l_bend,l_total,lr\n");
    for b in trace {
        s.push_str(&format!(
            "{},{:.5e},{:.5e},{:.5e},{:.5e}\n",
            b.iteration, b.l_img, b.l_bend, b.l_total, b.lr
        ));
    }
    s
}
