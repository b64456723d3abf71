use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::svg::{Frame, Svg};
use crate::dataset::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::experiments::{scene_from_context, SceneDistribution};
use crate::latent::LatentDynamics;
use crate::policy::{Rollout, StablePolicyModel};

const DEMO: &str = "#1f5fbf";
const GENERATED: &str = "#2a9d3a";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    /// One-step displacement arrows with demonstrations and rollouts.
    Field,
    /// Image of a rectangular latent grid under the flow.
    Grid,
    /// State components over time, perturbations shaded.
    Timeseries,
}

impl PlotKind {
    pub fn name(self) -> &'static str {
        match self {
            PlotKind::Field => "field",
            PlotKind::Grid => "grid",
            PlotKind::Timeseries => "timeseries",
        }
    }
}

pub struct PlotInputs<'a> {
    pub model: Option<&'a StablePolicyModel>,
    pub context: Option<&'a [f64]>,
    pub rollouts: &'a [Rollout],
    pub data: Option<&'a TrajectoryDataset>,
    pub resolution: usize,
}

/// SVG text and element counts of the drawn layers.
pub fn render(kind: PlotKind, inp: &PlotInputs<'_>) -> Result<(String, Value)> {
    if inp.resolution < 2 {
        return Err(Error::InvalidInput("plot resolution must be at least 2".into()));
    }
    match kind {
        PlotKind::Field => field(inp),
        PlotKind::Grid => grid(inp),
        PlotKind::Timeseries => timeseries(inp),
    }
}

fn planar_model<'a>(inp: &PlotInputs<'a>, kind: &str) -> Result<(&'a StablePolicyModel, &'a [f64])> {
    let model = inp
        .model
        .ok_or_else(|| Error::Usage(format!("a {kind} plot needs --model")))?;
    if model.dim() != 2 {
        return Err(Error::Validation(format!(
            "{kind} plots need a 2-D state, the model has {} dimensions",
            model.dim()
        )));
    }
    Ok((model, inp.context.expect("context resolved with the model")))
}

fn bounds<'a>(points: impl Iterator<Item = &'a [f64]>) -> Option<[f64; 4]> {
    let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    let mut any = false;
    for p in points {
        if p[0].is_finite() && p[1].is_finite() {
            b = [b[0].min(p[0]), b[1].max(p[0]), b[2].min(p[1]), b[3].max(p[1])];
            any = true;
        }
    }
    any.then_some(b)
}

fn pad(b: [f64; 4], frac: f64) -> [f64; 4] {
    let (w, h) = ((b[1] - b[0]).max(1e-6), (b[3] - b[2]).max(1e-6));
    let m = frac * w.max(h);
    [b[0] - m, b[1] + m, b[2] - m, b[3] + m]
}

/// Square frame for a planar plot, centred on `b`, so circles stay round.
fn square_frame(b: [f64; 4]) -> Frame {
    let (cx, cy) = (0.5 * (b[0] + b[1]), 0.5 * (b[2] + b[3]));
    let half = 0.5 * (b[1] - b[0]).max(b[3] - b[2]);
    Frame::new([cx - half, cx + half, cy - half, cy + half], 560.0, 560.0, 20.0, 20.0)
}

fn default_box(model: &StablePolicyModel) -> [f64; 4] {
    let st = model.standardization();
    let (m, s) = (&st.state_shift, &st.state_scale);
    [
        m[0] - 3.0 * s[0],
        m[0] + 3.0 * s[0],
        m[1] - 3.0 * s[1],
        m[1] + 3.0 * s[1],
    ]
}

fn trace(fr: &Frame, states: &[Vec<f64>]) -> Vec<(f64, f64)> {
    states.iter().map(|y| (fr.px(y[0]), fr.py(y[1]))).collect()
}

fn field(inp: &PlotInputs<'_>) -> Result<(String, Value)> {
    let (model, c) = planar_model(inp, "field")?;
    for r in inp.rollouts {
        if r.states[0].len() != 2 {
            return Err(Error::Validation(
                "rollout state dimension differs from the model".into(),
            ));
        }
    }
    let demos: Vec<&Vec<Vec<f64>>> = inp
        .data
        .map(|d| d.trajectories.iter().map(|t| &t.states).collect())
        .unwrap_or_default();
    if inp.data.is_some_and(|d| d.dim_y != 2) {
        return Err(Error::Validation(
            "dataset state dimension differs from the model".into(),
        ));
    }
    let pts = demos
        .iter()
        .flat_map(|s| s.iter())
        .chain(inp.rollouts.iter().flat_map(|r| r.states.iter()))
        .map(|v| v.as_slice());
    let b = pad(bounds(pts).unwrap_or_else(|| default_box(model)), 0.08);
    let fr = square_frame(b);
    let quiet = model.noiseless();
    let n = inp.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut arrows = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let y = [
                fr.x0 + (i as f64 + 0.5) / n as f64 * (fr.x1 - fr.x0),
                fr.y0 + (j as f64 + 0.5) / n as f64 * (fr.y1 - fr.y0),
            ];
            // Noiseless, so the generator is never drawn from.
            let next = quiet.step(&y, c, &mut rng)?;
            arrows.push((y, [next[0] - y[0], next[1] - y[1]]));
        }
    }
    let longest = arrows.iter().map(|(_, d)| d[0].hypot(d[1])).fold(0.0, f64::max);
    let cell = (fr.x1 - fr.x0) / n as f64;
    let scale = if longest > 0.0 { 0.8 * cell / longest } else { 0.0 };

    let mut svg = Svg::new(600.0, 600.0);
    svg.frame_box(&fr);
    for (y, d) in &arrows {
        svg.arrow(
            (fr.px(y[0]), fr.py(y[1])),
            (fr.px(y[0] + scale * d[0]), fr.py(y[1] + scale * d[1])),
            "#777",
        );
    }
    for s in &demos {
        svg.polyline(&trace(&fr, s), DEMO, 1.5, false);
    }
    for r in inp.rollouts {
        svg.polyline(&trace(&fr, &r.states), GENERATED, 1.5, false);
    }
    let counts = json!({ "kind": "field", "arrows": arrows.len(), "demonstrations": demos.len(), "rollouts": inp.rollouts.len() });
    Ok((svg.finish(), counts))
}

fn grid(inp: &PlotInputs<'_>) -> Result<(String, Value)> {
    let (model, c) = planar_model(inp, "grid")?;
    // Latent box: preimage of the state window the data occupies.
    let yb = match inp.data {
        Some(d) if d.dim_y == 2 => bounds(d.states()).unwrap_or_else(|| default_box(model)),
        _ => default_box(model),
    };
    let mut zs = Vec::new();
    for i in 0..=8 {
        for j in 0..=8 {
            let y = [
                yb[0] + i as f64 / 8.0 * (yb[1] - yb[0]),
                yb[2] + j as f64 / 8.0 * (yb[3] - yb[2]),
            ];
            zs.push(model.to_latent(&y, c)?);
        }
    }
    let zb = bounds(zs.iter().map(|z| z.as_slice())).expect("grid preimage is non-empty");
    let n = inp.resolution;
    let samples = 48;
    let mut lines: Vec<Vec<[f64; 2]>> = Vec::with_capacity(2 * (n + 1));
    for axis in 0..2 {
        for i in 0..=n {
            let u = i as f64 / n as f64;
            let mut line = Vec::with_capacity(samples + 1);
            for k in 0..=samples {
                let v = k as f64 / samples as f64;
                let (a, b) = if axis == 0 { (u, v) } else { (v, u) };
                let z = [zb[0] + a * (zb[1] - zb[0]), zb[2] + b * (zb[3] - zb[2])];
                let y = model.to_state(&z, c)?;
                line.push([y[0], y[1]]);
            }
            lines.push(line);
        }
    }
    let scene = if model.context_dim() == 8 {
        Some(scene_from_context(&SceneDistribution::default(), c)?)
    } else {
        None
    };
    let mut pts: Vec<[f64; 2]> = lines.iter().flatten().copied().collect();
    if let Some(s) = &scene {
        for o in &s.obstacles {
            pts.push([o[0] - s.obstacle_radius, o[1] - s.obstacle_radius]);
            pts.push([o[0] + s.obstacle_radius, o[1] + s.obstacle_radius]);
        }
    }
    let fr = square_frame(pad(
        bounds(pts.iter().map(|p| p.as_slice())).expect("grid is non-empty"),
        0.05,
    ));
    let mut svg = Svg::new(600.0, 600.0);
    svg.frame_box(&fr);
    if let Some(s) = &scene {
        for o in &s.obstacles {
            svg.circle(fr.px(o[0]), fr.py(o[1]), fr.sx(s.obstacle_radius), "#d04040", 0.5);
        }
        svg.circle(fr.px(s.goal[0]), fr.py(s.goal[1]), 5.0, "#222", 1.0);
    }
    for line in &lines {
        let p: Vec<(f64, f64)> = line.iter().map(|y| (fr.px(y[0]), fr.py(y[1]))).collect();
        svg.polyline(&p, "#3060a0", 0.8, false);
    }
    let counts = json!({
        "kind": "grid",
        "grid_lines": lines.len(),
        "obstacles": scene.as_ref().map_or(0, |s| s.obstacles.len()),
    });
    Ok((svg.finish(), counts))
}

/// `f(0, c)` in raw units when the attractor is a point.
fn commanded(model: &StablePolicyModel, c: &[f64]) -> Result<Option<Vec<f64>>> {
    match model.latent() {
        LatentDynamics::Attractor(_) => Ok(Some(model.to_state(&vec![0.0; model.dim()], c)?)),
        LatentDynamics::LimitCycle(_) => Ok(None),
    }
}

fn timeseries(inp: &PlotInputs<'_>) -> Result<(String, Value)> {
    let first = inp
        .rollouts
        .first()
        .ok_or_else(|| Error::Usage("a timeseries plot needs at least one --rollout".into()))?;
    let d = first.states[0].len();
    if inp.rollouts.iter().any(|r| r.states[0].len() != d) {
        return Err(Error::Validation("rollouts differ in state dimension".into()));
    }
    if let Some(m) = inp.model {
        if m.dim() != d {
            return Err(Error::Validation(
                "rollout state dimension differs from the model".into(),
            ));
        }
    }
    let mut targets: Vec<Vec<Vec<f64>>> = Vec::new();
    if let Some(m) = inp.model {
        for r in inp.rollouts {
            let t: Option<Vec<Vec<f64>>> = r
                .contexts
                .iter()
                .map(|c| commanded(m, c))
                .collect::<Result<Option<Vec<_>>>>()?;
            if let Some(t) = t {
                targets.push(t);
            }
        }
    }
    let t_end = inp
        .rollouts
        .iter()
        .map(|r| (r.len() - 1) as f64 * r.dt)
        .fold(0.0, f64::max);
    let panel = 110.0;
    let gap = 24.0;
    let height = 20.0 + d as f64 * (panel + gap);
    let mut svg = Svg::new(720.0, height);
    let mut shaded = 0;
    for i in 0..d {
        let series = inp
            .rollouts
            .iter()
            .flat_map(|r| r.states.iter().map(move |y| y[i]))
            .chain(targets.iter().flat_map(|t| t.iter().map(move |y| y[i])));
        let (lo, hi) = series.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
        let m = 0.05 * (hi - lo).max(1e-6);
        let top = 20.0 + i as f64 * (panel + gap);
        let fr = Frame::new([0.0, t_end, lo - m, hi + m], 640.0, panel, 60.0, top);
        for r in inp.rollouts {
            for p in &r.perturbations {
                let t = p.step as f64 * r.dt;
                let w = fr.sx(2.0 * r.dt).max(3.0);
                svg.rect(fr.px(t) - 0.5 * w, top, w, panel, "#f0b000", 0.3);
                shaded += 1;
            }
        }
        svg.frame_box(&fr);
        svg.text(8.0, top + 0.5 * panel, 12.0, &format!("y{i}"));
        for t in &targets {
            let r = &inp.rollouts[0];
            let p: Vec<(f64, f64)> = t
                .iter()
                .enumerate()
                .map(|(k, y)| (fr.px(k as f64 * r.dt), fr.py(y[i])))
                .collect();
            svg.polyline(&p, "#555", 1.0, true);
        }
        for r in inp.rollouts {
            let p: Vec<(f64, f64)> = r
                .states
                .iter()
                .enumerate()
                .map(|(k, y)| (fr.px(k as f64 * r.dt), fr.py(y[i])))
                .collect();
            svg.polyline(&p, GENERATED, 1.3, false);
        }
    }
    let counts = json!({
        "kind": "timeseries",
        "panels": d,
        "rollouts": inp.rollouts.len(),
        "commanded_traces": targets.len(),
        "perturbation_bands": shaded,
    });
    Ok((svg.finish(), counts))
}
