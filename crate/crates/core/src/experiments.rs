//! Task and reference generation, evaluation domains, metrics, suite
//! orchestration, and latency reporting.

use crate::config::{Config, IlConfig, LinearMpcConfig};
use crate::imitation::{
    run_flip_episode, run_linear_episode, CurvePoint, FlipPipeline, IlError, LinearPipeline, MethodSpec,
};
use crate::linmpc::{identify_tilt_tau, ReferenceWindow, RtmpcConfig};
use crate::policy::MlpPolicy;
use crate::sim::{DisturbanceSet, MultirotorParams};
use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("run failure: {0}")]
    Il(#[from] IlError),
    #[error("infeasible task: {0}")]
    InfeasibleTask(String),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

// ---------------------------------------------------------------------------
// Tasks and references.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    FigureEight,
    Circle,
    Step,
    Hover,
    Goto,
    Flip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Circle radius [m].
    pub radius: f64,
    /// Peak reference speed [m/s].
    pub speed: f64,
    /// Position-step amplitude [m].
    pub step_size: f64,
    pub goto_target: [f64; 3],
    /// Episode length [s].
    pub duration: f64,
}

impl TaskSpec {
    pub fn figure_eight() -> Self {
        Self { kind: TaskKind::FigureEight, radius: 0.0, speed: 3.4, step_size: 0.0, goto_target: [0.0; 3], duration: 7.0 }
    }

    pub fn circle() -> Self {
        Self { kind: TaskKind::Circle, radius: 2.0, speed: 2.0, step_size: 0.0, goto_target: [0.0; 3], duration: 7.0 }
    }

    pub fn step() -> Self {
        Self { kind: TaskKind::Step, radius: 0.0, speed: 0.0, step_size: 1.0, goto_target: [0.0; 3], duration: 7.0 }
    }

    pub fn hover() -> Self {
        Self { kind: TaskKind::Hover, radius: 0.0, speed: 0.0, step_size: 0.0, goto_target: [0.0; 3], duration: 7.0 }
    }

    pub fn goto(target: [f64; 3]) -> Self {
        Self { kind: TaskKind::Goto, radius: 0.0, speed: 0.0, step_size: 0.0, goto_target: target, duration: 7.0 }
    }

    pub fn flip() -> Self {
        Self { kind: TaskKind::Flip, radius: 0.0, speed: 0.0, step_size: 0.0, goto_target: [0.0; 3], duration: 3.0 }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::FigureEight => "figure-eight",
            TaskKind::Circle => "circle",
            TaskKind::Step => "step",
            TaskKind::Hover => "hover",
            TaskKind::Goto => "goto",
            TaskKind::Flip => "flip",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "figure-eight" => Some(Self::figure_eight()),
            "circle" => Some(Self::circle()),
            "step" => Some(Self::step()),
            "hover" => Some(Self::hover()),
            "flip" => Some(Self::flip()),
            _ => None,
        }
    }

    /// Episode length in controller steps; the duration must be an integer
    /// multiple of the controller period.
    pub fn episode_steps(&self, dt: f64) -> usize {
        let steps = self.duration / dt;
        assert!((steps - steps.round()).abs() < 1e-9, "episode length must divide the controller period");
        steps.round() as usize
    }
}

/// Full analytic reference at the controller rate, plus a windowing helper
/// with terminal hold.
#[derive(Debug, Clone)]
pub struct ReferenceTrack {
    pub name: String,
    pub dt: f64,
    /// `steps + 1` knots of (position, velocity).
    pub points: Vec<(Vector3<f64>, Vector3<f64>)>,
}

impl ReferenceTrack {
    pub fn len_steps(&self) -> usize {
        self.points.len() - 1
    }

    /// N+1-knot window starting at `step`, holding the terminal point.
    pub fn window(&self, step: usize, n: usize) -> ReferenceWindow {
        let last = self.points.len() - 1;
        let points = (0..=n).map(|k| self.points[(step + k).min(last)]).collect();
        ReferenceWindow { points }
    }
}

/// Samples the task's analytic reference at `dt` over `steps` intervals and
/// audits it against the state constraint box.
pub fn gen_reference(task: &TaskSpec, steps: usize, dt: f64, lim: &LinearMpcConfig) -> Result<ReferenceTrack, ExpError> {
    let tau = 2.0 * std::f64::consts::PI;
    let t_total = steps as f64 * dt;
    let point = |t: f64| -> (Vector3<f64>, Vector3<f64>) {
        match task.kind {
            TaskKind::Hover => (Vector3::zeros(), Vector3::zeros()),
            TaskKind::Step => (Vector3::new(task.step_size, 0.0, 0.0), Vector3::zeros()),
            TaskKind::Goto => (Vector3::from_column_slice(&task.goto_target), Vector3::zeros()),
            TaskKind::Circle => {
                let w = task.speed / task.radius;
                (
                    Vector3::new(task.radius * (w * t).sin(), task.radius * (1.0 - (w * t).cos()), 0.0),
                    Vector3::new(task.speed * (w * t).cos(), task.speed * (w * t).sin(), 0.0),
                )
            }
            TaskKind::FigureEight => {
                // One lemniscate cycle per episode; the peak speed (at the
                // crossing) equals the configured speed.
                let w = tau / t_total;
                let a = task.speed / (w * 2f64.sqrt());
                let phi = w * t;
                (
                    Vector3::new(a * phi.sin(), a * phi.sin() * phi.cos(), 0.0),
                    Vector3::new(a * w * phi.cos(), a * w * (2.0 * phi).cos(), 0.0),
                )
            }
            TaskKind::Flip => unreachable!(),
        }
    };
    if task.kind == TaskKind::Flip {
        return Err(ExpError::InfeasibleTask("maneuver references come from the safe planner".into()));
    }
    let points: Vec<_> = (0..=steps).map(|k| point(k as f64 * dt)).collect();
    for (p, v) in &points {
        if p.amax() > lim.pos_limit || v.amax() > lim.vel_limit {
            return Err(ExpError::InfeasibleTask(format!(
                "reference leaves the state box (|p|≤{}, |v|≤{})",
                lim.pos_limit, lim.vel_limit
            )));
        }
    }
    Ok(ReferenceTrack { name: task.name().into(), dt, points })
}

// ---------------------------------------------------------------------------
// Evaluation domains.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// Constant-force disturbance set (drawn once per episode).
    pub dist: DisturbanceSet,
    /// Multiplier on the simulator's translational/rotational drag
    /// coefficients (model-error domain).
    pub drag_scale: f64,
}

impl DomainSpec {
    /// Source domain: no disturbance, nominal model.
    pub fn source() -> Self {
        Self { name: "S".into(), dist: DisturbanceSet::zero(), drag_scale: 1.0 }
    }

    /// Wind-like disturbance domain for the tracking task.
    pub fn t1(il: &IlConfig, mg: f64) -> Self {
        Self {
            name: "T1".into(),
            dist: DisturbanceSet { f_min: il.t1_min_frac * mg, f_max: il.t1_max_frac * mg },
            drag_scale: 1.0,
        }
    }

    /// Model-error domain: drag coefficients scaled between train and test.
    pub fn t2(il: &IlConfig) -> Self {
        Self { name: "T2".into(), dist: DisturbanceSet::zero(), drag_scale: il.t2_drag_scale }
    }

    /// Disturbance domain for the maneuver task.
    pub fn t_flip(il: &IlConfig, mg: f64) -> Self {
        Self {
            name: "T_flip".into(),
            dist: DisturbanceSet { f_min: il.flip_min_frac * mg, f_max: il.flip_max_frac * mg },
            drag_scale: 1.0,
        }
    }

    /// Domain-randomization collection domain: disturbances sampled from the
    /// target set while the model stays nominal.
    pub fn dr_linear(il: &IlConfig, mg: f64) -> Self {
        Self { name: "DR".into(), ..Self::t1(il, mg) }
    }

    pub fn dr_flip(il: &IlConfig, mg: f64) -> Self {
        Self { name: "DR".into(), ..Self::t_flip(il, mg) }
    }

    pub fn parse(name: &str, il: &IlConfig, mg: f64) -> Option<Self> {
        match name {
            "S" => Some(Self::source()),
            "T1" => Some(Self::t1(il, mg)),
            "T2" => Some(Self::t2(il)),
            "T_flip" => Some(Self::t_flip(il, mg)),
            _ => None,
        }
    }

    /// Applies the domain's model overrides to the simulator parameters.
    pub fn apply(&self, params: &MultirotorParams) -> MultirotorParams {
        let mut p = params.clone();
        p.c_d1 *= self.drag_scale;
        p.c_d2 *= self.drag_scale;
        p.c_d3 *= self.drag_scale;
        p
    }
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Percentage of episodes with no state-constraint violation.
    pub success_rate: f64,
    /// Mean stage cost over successful episodes (NaN if none).
    pub stage_cost: f64,
    /// Mean relative stage-cost error vs the paired expert episodes, percent,
    /// over episodes where both succeeded.
    pub expert_gap: Option<f64>,
    pub episode_costs: Vec<f64>,
    pub episode_success: Vec<bool>,
}

impl MetricsRecord {
    fn from_episodes(costs: Vec<f64>, success: Vec<bool>, baseline: Option<&MetricsRecord>) -> Self {
        let n = success.len().max(1);
        let n_succ = success.iter().filter(|s| **s).count();
        let success_rate = 100.0 * n_succ as f64 / n as f64;
        let stage_cost = if n_succ > 0 {
            costs.iter().zip(&success).filter(|(_, s)| **s).map(|(c, _)| c).sum::<f64>() / n_succ as f64
        } else {
            f64::NAN
        };
        let mut rec = Self { success_rate, stage_cost, expert_gap: None, episode_costs: costs, episode_success: success };
        rec.expert_gap = baseline.and_then(|b| paired_gap(b, &rec));
        rec
    }

    /// Success rate recomputed from the raw per-episode flags (double-entry
    /// audit).
    pub fn recount(&self) -> f64 {
        let n = self.episode_success.len().max(1);
        100.0 * self.episode_success.iter().filter(|s| **s).count() as f64 / n as f64
    }
}

/// Mean per-episode relative stage-cost error (percent) over paired episodes
/// where both the expert and the candidate succeeded.
pub fn paired_gap(expert: &MetricsRecord, policy: &MetricsRecord) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..expert.episode_costs.len().min(policy.episode_costs.len()) {
        if expert.episode_success[i] && policy.episode_success[i] && expert.episode_costs[i] > 0.0 {
            acc += (expert.episode_costs[i] - policy.episode_costs[i]).abs() / expert.episode_costs[i];
            n += 1;
        }
    }
    (n > 0).then(|| 100.0 * acc / n as f64)
}

pub enum LinController<'a> {
    Expert,
    Policy(&'a MlpPolicy),
}

/// Evaluates a controller over `n_episodes` seeded episodes (paired across
/// controllers via `seed0`), in parallel.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_linear(
    ctrl: LinController<'_>,
    rt: &RtmpcConfig,
    params: &MultirotorParams,
    track: &ReferenceTrack,
    domain: &DomainSpec,
    n_episodes: usize,
    seed0: u64,
    init_ball: f64,
    baseline: Option<&MetricsRecord>,
) -> Result<MetricsRecord, IlError> {
    let (use_expert, policy) = match ctrl {
        LinController::Expert => (true, None),
        LinController::Policy(p) => (false, Some(p)),
    };
    let steps = track.len_steps();
    let results: Result<Vec<_>, IlError> = (0..n_episodes)
        .into_par_iter()
        .map(|ep| {
            let out = run_linear_episode(
                rt,
                params,
                use_expert,
                policy,
                1.0,
                track,
                domain,
                steps,
                init_ball,
                seed0.wrapping_add(ep as u64),
            )?;
            Ok((out.stage_cost, out.demo.success))
        })
        .collect();
    let results = results?;
    let (costs, success): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(MetricsRecord::from_episodes(costs, success, baseline))
}

pub enum FlipController<'a> {
    Expert,
    Policy(&'a MlpPolicy),
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_flip(
    ctrl: FlipController<'_>,
    pipe: &FlipPipeline,
    cfg: &Config,
    domain: &DomainSpec,
    n_episodes: usize,
    seed0: u64,
    baseline: Option<&MetricsRecord>,
) -> Result<MetricsRecord, IlError> {
    let (use_expert, policy) = match ctrl {
        FlipController::Expert => (true, None),
        FlipController::Policy(p) => (false, Some(p)),
    };
    let results: Result<Vec<_>, IlError> = (0..n_episodes)
        .into_par_iter()
        .map(|ep| {
            let out = run_flip_episode(
                &pipe.params,
                cfg,
                &pipe.plan,
                &pipe.tube,
                use_expert,
                policy,
                1.0,
                domain,
                cfg.il.episode_steps,
                seed0.wrapping_add(ep as u64),
                false,
            )?;
            Ok((out.stage_cost, out.demo.success))
        })
        .collect();
    let results = results?;
    let (costs, success): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(MetricsRecord::from_episodes(costs, success, baseline))
}

// ---------------------------------------------------------------------------
// Pipeline assembly.
// ---------------------------------------------------------------------------

/// Builds the tracking expert (identified tilt lags, Monte-Carlo tube against
/// the nonlinear simulator, tightened constraints) and the task reference.
pub fn build_linear_pipeline(cfg: &Config, task: &TaskSpec) -> Result<LinearPipeline, ExpError> {
    let params = cfg.sim.clone();
    let taus = (
        cfg.linear.tau_roll.unwrap_or_else(|| identify_tilt_tau(&params, false)),
        cfg.linear.tau_pitch.unwrap_or_else(|| identify_tilt_tau(&params, true)),
    );
    let nominal = RtmpcConfig::build(&cfg.linear, &params, taus, crate::sets::AxisBox::zero(8))
        .map_err(IlError::Expert)?;
    let dist = DisturbanceSet { f_min: 0.0, f_max: cfg.linear.tube.w_max_frac * params.hover_thrust() };
    let tube = crate::linmpc::estimate_tube_nonlinear(&nominal, &params, &dist, &cfg.linear.tube)
        .map_err(IlError::Expert)?;
    let rt = RtmpcConfig::build(&cfg.linear, &params, taus, tube).map_err(IlError::Expert)?;
    let steps = task.episode_steps(cfg.linear.dt);
    let track = gen_reference(task, steps, cfg.linear.dt, &cfg.linear)?;
    Ok(LinearPipeline { params, rt, track })
}

// ---------------------------------------------------------------------------
// Curve digests.
// ---------------------------------------------------------------------------

/// First demonstration count at which the curve reports full success in the
/// given domain.
pub fn first_full_success(curve: &[CurvePoint], domain: &str) -> Option<usize> {
    curve
        .iter()
        .filter(|p| p.domain == domain && p.success_rate >= 100.0 - 1e-9)
        .map(|p| p.demo_idx)
        .min()
}

/// Mean expert gap over updates in the demo-count window [lo, hi].
pub fn gap_in_window(curve: &[CurvePoint], domain: &str, lo: usize, hi: usize) -> Option<f64> {
    let gaps: Vec<f64> = curve
        .iter()
        .filter(|p| p.domain == domain && p.demo_idx >= lo && p.demo_idx <= hi)
        .filter_map(|p| p.expert_gap)
        .collect();
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Success rate at the largest demo count evaluated in the domain.
pub fn final_success(curve: &[CurvePoint], domain: &str) -> Option<f64> {
    curve
        .iter()
        .filter(|p| p.domain == domain)
        .max_by_key(|p| p.demo_idx)
        .map(|p| p.success_rate)
}

// ---------------------------------------------------------------------------
// Suite orchestration.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    /// "linear" or "flip".
    pub pipeline: String,
    pub task: String,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub n_demos: usize,
    pub eval_domains: Vec<String>,
}

impl Manifest {
    /// Demonstration-efficiency protocol for the tracking task: all eight
    /// method × robustifier combinations.
    pub fn tracking_suite(seeds: Vec<u64>, n_demos: usize) -> Self {
        Self {
            name: "tracking".into(),
            pipeline: "linear".into(),
            task: "figure-eight".into(),
            methods: [
                "bc",
                "dagger",
                "bc+dr",
                "dagger+dr",
                "bc+sa-sparse",
                "dagger+sa-sparse",
                "bc+sa-dense",
                "dagger+sa-dense",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            seeds,
            n_demos,
            eval_domains: vec!["S".into(), "T1".into()],
        }
    }

    pub fn flip_suite(seeds: Vec<u64>, n_demos: usize) -> Self {
        Self {
            name: "flip".into(),
            pipeline: "flip".into(),
            task: "flip".into(),
            methods: vec!["dagger+sa-25".into(), "dagger+sa-sparse".into(), "dagger+dr".into()],
            seeds,
            n_demos,
            eval_domains: vec!["S".into(), "T_flip".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub seed: u64,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug)]
pub struct SuiteReport {
    pub cells_run: usize,
    pub cells_skipped: usize,
    pub failures: Vec<String>,
    pub out_dir: PathBuf,
}

fn cell_path(out_dir: &Path, method: &str, seed: u64) -> PathBuf {
    out_dir.join("cells").join(format!("{}_s{}.json", method.replace('+', "_"), seed))
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), ExpError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Executes every (method, seed) cell of the manifest, skipping cells whose
/// result files already exist, then regenerates the aggregate tables.
pub fn run_suite(cfg: &Config, manifest: &Manifest, out_dir: &Path) -> Result<SuiteReport, ExpError> {
    std::fs::create_dir_all(out_dir.join("cells"))?;
    write_atomic(&out_dir.join("manifest.json"), &serde_json::to_string_pretty(manifest)?)?;
    let mg = cfg.sim.hover_thrust();
    let domains: Vec<DomainSpec> = manifest
        .eval_domains
        .iter()
        .map(|d| DomainSpec::parse(d, &cfg.il, mg).ok_or_else(|| ExpError::Manifest(format!("unknown domain {d}"))))
        .collect::<Result<_, _>>()?;
    let methods: Vec<MethodSpec> = manifest
        .methods
        .iter()
        .map(|m| MethodSpec::parse(m).ok_or_else(|| ExpError::Manifest(format!("unknown method {m}"))))
        .collect::<Result<_, _>>()?;

    let mut pending: Vec<(MethodSpec, u64)> = Vec::new();
    let mut skipped = 0usize;
    for m in &methods {
        for &s in &manifest.seeds {
            if cell_path(out_dir, &m.name(), s).exists() {
                skipped += 1;
            } else {
                pending.push((*m, s));
            }
        }
    }

    let mut failures = Vec::new();
    let mut run = 0usize;
    if !pending.is_empty() {
        match manifest.pipeline.as_str() {
            "linear" => {
                let task = TaskSpec::parse(&manifest.task)
                    .ok_or_else(|| ExpError::Manifest(format!("unknown task {}", manifest.task)))?;
                let pipe = build_linear_pipeline(cfg, &task)?;
                for (m, s) in pending {
                    match crate::imitation::run_il_linear(&pipe, cfg, m, manifest.n_demos, &domains, s) {
                        Ok(out) => {
                            let cell = CellResult { method: m.name(), seed: s, curve: out.curve };
                            write_atomic(&cell_path(out_dir, &m.name(), s), &serde_json::to_string_pretty(&cell)?)?;
                            run += 1;
                        }
                        Err(e) => failures.push(format!("{}_s{}: {}", m.name(), s, e)),
                    }
                }
            }
            "flip" => {
                let pipe = FlipPipeline::build(&cfg.sim, cfg)?;
                for (m, s) in pending {
                    match crate::imitation::run_il_flip(&pipe, cfg, m, manifest.n_demos, &domains, s) {
                        Ok(out) => {
                            let cell = CellResult { method: m.name(), seed: s, curve: out.curve };
                            write_atomic(&cell_path(out_dir, &m.name(), s), &serde_json::to_string_pretty(&cell)?)?;
                            run += 1;
                        }
                        Err(e) => failures.push(format!("{}_s{}: {}", m.name(), s, e)),
                    }
                }
            }
            other => return Err(ExpError::Manifest(format!("unknown pipeline {other}"))),
        }
    }

    aggregate_suite(manifest, out_dir)?;
    if !failures.is_empty() {
        write_atomic(&out_dir.join("failures.txt"), &failures.join("\n"))?;
    }
    Ok(SuiteReport { cells_run: run, cells_skipped: skipped, failures, out_dir: out_dir.to_path_buf() })
}

/// Rebuilds `curves.csv`, `summary.csv` and `summary.md` from the cell files.
pub fn aggregate_suite(manifest: &Manifest, out_dir: &Path) -> Result<Vec<CellResult>, ExpError> {
    let mut cells = Vec::new();
    for m in &manifest.methods {
        for &s in &manifest.seeds {
            let p = cell_path(out_dir, m, s);
            if p.exists() {
                let cell: CellResult = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
                cells.push(cell);
            }
        }
    }
    let mut curves = String::from("method,seed,demo_idx,domain,success_rate,stage_cost,expert_gap,wall_clock_s\n");
    for c in &cells {
        for p in &c.curve {
            curves.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.method,
                c.seed,
                p.demo_idx,
                p.domain,
                p.success_rate,
                p.stage_cost,
                p.expert_gap.map(|g| g.to_string()).unwrap_or_default(),
                p.wall_clock_s
            ));
        }
    }
    write_atomic(&out_dir.join("curves.csv"), &curves)?;

    let mut summary = String::from("method,seed,domain,final_success,first_full_success,gap_20_30,wall_clock_s\n");
    let mut md = String::from("| method | seed | domain | final success % | first 100% (demos) | gap 20–30 (%) |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for c in &cells {
        for d in &manifest.eval_domains {
            let fs = final_success(&c.curve, d);
            let ff = first_full_success(&c.curve, d);
            let gap = gap_in_window(&c.curve, d, 20, 30);
            let wall = c.curve.last().map(|p| p.wall_clock_s).unwrap_or(0.0);
            summary.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.method,
                c.seed,
                d,
                fs.map(|v| v.to_string()).unwrap_or_default(),
                ff.map(|v| v.to_string()).unwrap_or_default(),
                gap.map(|v| v.to_string()).unwrap_or_default(),
                wall
            ));
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                c.method,
                c.seed,
                d,
                fs.map(|v| format!("{v:.0}")).unwrap_or_else(|| "–".into()),
                ff.map(|v| v.to_string()).unwrap_or_else(|| "–".into()),
                gap.map(|v| format!("{v:.1}")).unwrap_or_else(|| "–".into()),
            ));
        }
    }
    write_atomic(&out_dir.join("summary.csv"), &summary)?;
    write_atomic(&out_dir.join("summary.md"), &md)?;
    Ok(cells)
}

// ---------------------------------------------------------------------------
// Latency reporting.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_us: f64,
    pub std_us: f64,
    pub min_us: f64,
    pub max_us: f64,
}

fn stats_of(samples: &[f64]) -> TimingStats {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    TimingStats {
        mean_us: mean,
        std_us: var.sqrt(),
        min_us: samples.iter().cloned().fold(f64::INFINITY, f64::min),
        max_us: samples.iter().cloned().fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub expert: TimingStats,
    pub policy: TimingStats,
    /// Expert mean latency / policy mean latency.
    pub speedup: f64,
}

/// Per-action latency of the tracking expert (one QP solve) vs the policy
/// forward pass, `n` warmed-up repetitions each.
pub fn timing_report_linear(pipe: &LinearPipeline, policy: &MlpPolicy, n: usize) -> Result<TimingReport, ExpError> {
    if n == 0 {
        return Err(ExpError::Manifest("timing requires n ≥ 1".into()));
    }
    let mut expert = crate::linmpc::LinearRtmpc::new(pipe.rt.clone());
    let mut x = DVector::zeros(8);
    x[0] = 0.2;
    x[4] = -0.1;
    let refw = pipe.track.window(0, pipe.rt.horizon);
    let features = crate::policy::featurize_linear(&x, &refw).map_err(IlError::Policy)?;
    for _ in 0..5 {
        expert.solve(&x, &refw).map_err(IlError::Expert)?;
        policy.forward(&features).map_err(IlError::Policy)?;
    }
    let mut te = Vec::with_capacity(n);
    for _ in 0..n {
        let t0 = std::time::Instant::now();
        expert.solve(&x, &refw).map_err(IlError::Expert)?;
        te.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    let mut tp = Vec::with_capacity(n);
    for _ in 0..n {
        let t0 = std::time::Instant::now();
        std::hint::black_box(policy.forward(&features).map_err(IlError::Policy)?);
        tp.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    let expert = stats_of(&te);
    let pol = stats_of(&tp);
    let speedup = expert.mean_us / pol.mean_us;
    Ok(TimingReport { expert, policy: pol, speedup })
}

/// Per-action latency of the maneuver expert (one warm-started real-time
/// iteration) vs the policy forward pass.
pub fn timing_report_flip(pipe: &FlipPipeline, cfg: &Config, policy: &MlpPolicy, n: usize) -> Result<TimingReport, ExpError> {
    use crate::nmpc::{ancillary_nmpc_action, ancillary_state, build_ancillary_solver, SqpMode};
    use crate::sim::RobotState;
    if n == 0 {
        return Err(ExpError::Manifest("timing requires n ≥ 1".into()));
    }
    let mut solver = build_ancillary_solver(&pipe.params, &cfg.nmpc);
    let mut s = RobotState::hover_at(Vector3::new(0.05, 0.0, 0.0));
    s.velocity.y = 0.05;
    let x = ancillary_state(&s);
    let last = pipe.plan.states.last().expect("planned maneuver is non-empty");
    let p_des = Vector3::new(last[0], last[1], last[2]);
    let (features, _) = crate::policy::featurize_flip(&s, 0.1, &p_des, &crate::attitude_math::QUAT_IDENTITY);
    for _ in 0..5 {
        ancillary_nmpc_action(&mut solver, &x, 0.1, &pipe.plan, SqpMode::Rti).map_err(IlError::Nmpc)?;
        policy.forward(&features).map_err(IlError::Policy)?;
    }
    let mut te = Vec::with_capacity(n);
    for _ in 0..n {
        let t0 = std::time::Instant::now();
        ancillary_nmpc_action(&mut solver, &x, 0.1, &pipe.plan, SqpMode::Rti).map_err(IlError::Nmpc)?;
        te.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    let mut tp = Vec::with_capacity(n);
    for _ in 0..n {
        let t0 = std::time::Instant::now();
        std::hint::black_box(policy.forward(&features).map_err(IlError::Policy)?);
        tp.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    let expert = stats_of(&te);
    let pol = stats_of(&tp);
    let speedup = expert.mean_us / pol.mean_us;
    Ok(TimingReport { expert, policy: pol, speedup })
}
