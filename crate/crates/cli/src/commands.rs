use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use frametwin::geometry::{BezierCurve, DEFAULT_SAMPLES};
use frametwin::io::{self, TwinJson};
use frametwin::splat::{Camera, ImageF};
use frametwin::synth::{
    adaptive_sim, apply_oracle, curve_chamfer, edge_displacements, generate_scene, normalized_chamfer, render_twin,
    render_uniform,
    DeformOracle, SceneOptions, SimOptions,
};
use frametwin::wireframe::{partial_state, DigitalTwin, PrintPlan, WireframeGraph};
use frametwin::{optimize, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{hash_of, Config};
use crate::{AdaptArgs, GenSceneArgs, MetricsArgs, RenderArgs, TwinArgs};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub params: Value,
    pub config: Config,
    pub outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &str, params: Value, config: &Config) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            seed: config.seed,
            config_hash: hash_of(&(command, &params, config))?,
            params,
            config: config.clone(),
            outputs: Vec::new(),
        })
    }
}

/// Collects outputs under one directory and finishes with a manifest.
struct OutDir {
    root: PathBuf,
    manifest: Manifest,
}

impl OutDir {
    fn create(root: &Path, manifest: Manifest) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.root.join(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        self.manifest.outputs.push(name.to_string());
        Ok(p)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name)?;
        io::write_json(&p, value)
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name)?;
        fs::write(p, text)?;
        Ok(())
    }

    fn pgm(&mut self, name: &str, img: &ImageF) -> Result<()> {
        let p = self.path(name)?;
        img.write_pgm(&p)
    }

    fn finish(self) -> Result<()> {
        io::write_json(&self.root.join("manifest.json"), &self.manifest)
    }
}

fn read_model(path: &Path, cfg: &Config) -> Result<WireframeGraph> {
    let g = io::read_wireframe(path)?;
    if let Some(d) = g.degree() {
        if d != cfg.degree {
            return Err(Error::Validation(format!(
                "{}: degree {d} does not match the configured degree {}",
                path.display(),
                cfg.degree
            )));
        }
    }
    Ok(g)
}

fn parse_oracle(s: &str) -> Result<DeformOracle> {
    s.parse().map_err(|e| Error::Validation(format!("--deform {s:?}: {e}")))
}

fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    io::read_json(path)
}

fn usize_of(v: u64) -> usize {
    v as usize
}

pub fn gen_scene(mut cfg: Config, a: &GenSceneArgs) -> Result<()> {
    if let Some(v) = a.views {
        cfg.views = usize_of(v);
    }
    cfg.validate()?;
    let graph = read_model(&a.model, &cfg)?;
    let plan = io::read_plan(&a.plan)?;
    let oracle = parse_oracle(&a.deform)?;
    let opts = SceneOptions {
        t: usize_of(a.t),
        oracle: oracle.clone(),
        views: cfg.views,
        width: cfg.width,
        height: cfg.height,
        seed: cfg.seed,
        noise: cfg.noise,
        missing_edges: a.missing_edges.clone(),
    };
    let scene = generate_scene(&graph, &plan, &opts, &cfg.twin())?;
    let params = json!({
        "t": a.t,
        "deform": oracle.to_string(),
        "missing_edges": a.missing_edges,
    });
    let mut out = OutDir::create(&a.out, Manifest::new("gen-scene", params, &cfg)?)?;
    out.json("model.json", &io::WireframeJson::from_graph(&graph))?;
    out.json(
        "plan.json",
        &io::PlanJson {
            batches: plan.batches.clone(),
            base_vertices: plan.base_vertices.clone(),
        },
    )?;
    out.json("cameras.json", &scene.cameras)?;
    let gt = DigitalTwin {
        deformed_edges: scene.gt.curves.clone(),
        deformed_vertices: scene.gt.vertices.clone(),
        kernel_params: BTreeMap::new(),
    };
    out.json("gt_curves.json", &TwinJson::from_twin(&gt, &graph)?)?;
    for (i, img) in scene.images.iter().enumerate() {
        out.pgm(&format!("view_{i}.pgm"), img)?;
    }
    out.finish()
}

pub fn twin(mut cfg: Config, a: &TwinArgs) -> Result<()> {
    if let Some(w) = a.wbend {
        cfg.w_bend = w;
    }
    if let Some(p) = a.p {
        cfg.p = p;
    }
    if let Some(n) = a.max_iters {
        cfg.max_iters = usize_of(n);
    }
    cfg.validate()?;
    if !a.scene.is_dir() {
        return Err(Error::Validation(format!("scene directory {} not found", a.scene.display())));
    }
    let scene: Manifest = io::read_json(&a.scene.join("manifest.json"))?;
    let t = scene.params.get("t").and_then(Value::as_u64).ok_or_else(|| {
        Error::Validation("scene manifest has no batch count".into())
    })?;
    let graph = read_model(&a.scene.join("model.json"), &cfg)?;
    let plan = io::read_plan(&a.scene.join("plan.json"))?;
    plan.validate(&graph)?;
    let partial = partial_state(&plan, &graph, t as usize)?;
    let cameras = read_cameras(&a.scene.join("cameras.json"))?;
    let images = (0..cameras.len())
        .map(|i| ImageF::read_pgm(&a.scene.join(format!("view_{i}.pgm"))))
        .collect::<Result<Vec<_>>>()?;

    let result = optimize::construct_twin(&graph, &partial, &cameras, &images, &cfg.twin(), &cfg.weights())?;
    let params = json!({
        "scene_config_hash": scene.config_hash,
        "t": t,
    });
    let mut out = OutDir::create(&a.out, Manifest::new("twin", params, &cfg)?)?;
    out.json("twin.json", &TwinJson::from_twin(&result.twin, &graph)?)?;
    out.text("trace.csv", &io::trace_csv(&result.trace))?;
    out.json(
        "summary.json",
        &json!({
            "iterations": result.trace.len(),
            "converged": result.converged,
            "final": result.trace.last(),
        }),
    )?;
    out.finish()
}

pub fn adapt(mut cfg: Config, a: &AdaptArgs) -> Result<()> {
    if let Some(v) = a.views {
        cfg.views = usize_of(v);
    }
    if let Some(w) = a.wbend {
        cfg.w_bend = w;
    }
    if let Some(n) = a.max_iters {
        cfg.max_iters = usize_of(n);
    }
    cfg.validate()?;
    let graph = read_model(&a.model, &cfg)?;
    let plan = io::read_plan(&a.plan)?;
    plan.validate(&graph)?;
    let mut schedule = a.deform.iter().map(|s| parse_oracle(s)).collect::<Result<Vec<_>>>()?;
    if schedule.len() == 1 {
        schedule = vec![schedule[0].clone(); plan.len()];
    }
    if schedule.len() != plan.len() {
        return Err(Error::Validation(format!(
            "{} --deform values for {} batches",
            schedule.len(),
            plan.len()
        )));
    }
    let opts = SimOptions {
        views: cfg.views,
        width: cfg.width,
        height: cfg.height,
        seed: cfg.seed,
        noise: cfg.noise,
        twin: cfg.twin(),
        weights: cfg.weights(),
    };
    let report = adaptive_sim(&graph, &plan, &schedule, &opts)?;

    let params = json!({ "deform": schedule.iter().map(|o| o.to_string()).collect::<Vec<_>>() });
    let mut out = OutDir::create(&a.out, Manifest::new("adapt", params, &cfg)?)?;
    out.json("cameras.json", &report.cameras)?;
    let mut rounds = Vec::new();
    for r in &report.rounds {
        let dir = format!("round_{}", r.t);
        for (i, img) in r.images.iter().enumerate() {
            out.pgm(&format!("{dir}/view_{i}.pgm"), img)?;
        }
        out.json(&format!("{dir}/twin.json"), &TwinJson::from_twin(&r.twin, &graph)?)?;
        out.json(&format!("{dir}/plan.json"), &io::WireframeJson::from_graph(&r.plan))?;
        out.text(&format!("{dir}/trace.csv"), &io::trace_csv(&r.trace))?;
        rounds.push(json!({
            "t": r.t,
            "iterations": r.trace.len(),
            "converged": r.converged,
            "final": r.trace.last(),
            "chamfer_twin_gt": r.chamfer_twin_gt,
            "chamfer_planned_gt": r.chamfer_planned_gt,
            "e_max": r.e_max,
            "e_max_gt": r.e_max_gt,
        }));
    }
    out.json(
        "report.json",
        &json!({
            "batches": plan.len(),
            "aborted": report.aborted,
            "rounds": rounds,
        }),
    )?;
    out.finish()?;
    match report.aborted {
        Some(msg) => Err(Error::Numeric(format!("run aborted: {msg}"))),
        None => Ok(()),
    }
}

pub fn render(cfg: Config, a: &RenderArgs) -> Result<()> {
    cfg.validate()?;
    let cameras = read_cameras(&a.cameras)?;
    let cam = cameras.get(a.view).ok_or_else(|| {
        Error::Validation(format!("view {} out of range for {} cameras", a.view, cameras.len()))
    })?;
    let twin_cfg = cfg.twin();
    let img = if let Some(path) = &a.curves {
        let twin = io::read_twin(path)?;
        if twin.kernel_params.is_empty() {
            render_uniform(&twin.deformed_edges, cfg.tau_init, cfg.alpha_init, cam, &twin_cfg)?
        } else {
            render_twin(&twin, cam, &twin_cfg)?
        }
    } else {
        let path = a.model.as_ref().ok_or_else(|| Error::Usage("--curves or --model is required".into()))?;
        let graph = read_model(path, &cfg)?;
        let plan = match &a.plan {
            Some(p) => io::read_plan(p)?,
            None => PrintPlan {
                batches: vec![(0..graph.edges.len()).collect()],
                base_vertices: None,
            },
        };
        plan.validate(&graph)?;
        let t = a.t.map_or(plan.len(), usize_of);
        let partial = partial_state(&plan, &graph, t)?;
        let gt = apply_oracle(&graph, &partial, &DeformOracle::None, cfg.samples_per_edge)?;
        render_uniform(&gt.curves, cfg.tau_init, cfg.alpha_init, cam, &twin_cfg)?
    };
    img.write_pgm(&a.out)
}

fn edge_set(c: &BTreeMap<usize, BezierCurve>) -> Vec<usize> {
    c.keys().cloned().collect()
}

pub fn metrics(cfg: Config, a: &MetricsArgs) -> Result<()> {
    cfg.validate()?;
    let x = io::read_twin(&a.curves)?;
    let y = io::read_twin(&a.reference)?;
    if edge_set(&x.deformed_edges) != edge_set(&y.deformed_edges) {
        return Err(Error::Validation(format!(
            "edge sets differ: {} edges vs {} edges",
            x.deformed_edges.len(),
            y.deformed_edges.len()
        )));
    }
    let graph = read_model(&a.model, &cfg)?;
    let chamfer = curve_chamfer(&x.deformed_edges, &y.deformed_edges)?;
    let disp = edge_displacements(&x.deformed_edges, &graph, DEFAULT_SAMPLES)?;
    let e_max = disp.values().cloned().fold(0.0, f64::max);
    let mut csv = String::from("metric,edge,value\n");
    writeln!(csv, "chamfer,,{chamfer:.16e}").unwrap();
    let normalized = normalized_chamfer(&x.deformed_edges, &y.deformed_edges, &graph)?;
    writeln!(csv, "chamfer_normalized,,{normalized:.16e}").unwrap();
    writeln!(csv, "e_max,,{e_max:.16e}").unwrap();
    for (k, d) in &disp {
        writeln!(csv, "displacement,{k},{d:.16e}").unwrap();
    }
    match &a.out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
