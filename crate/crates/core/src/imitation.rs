//! Demonstration collection and imitation-learning algorithms: behavior
//! cloning, DAgger with β-mixed execution, domain randomization, and
//! tube-guided sampling-augmentation for both expert pipelines, plus the
//! fine-tuning protocol for the maneuver policy.

use crate::config::Config;
use crate::experiments::{DomainSpec, ReferenceTrack};
use crate::linmpc::{ancillary_action, reduced_state, to_command, LinMpcError, LinearRtmpc, RtmpcConfig};
use crate::nmpc::{
    ancillary_nmpc_action, ancillary_state, apply_error_coords, build_ancillary_solver, error_coords,
    generalized_predictor_from, plan_safe_flip, predict_augmented_action, sensitivity_gain, Linearization, NmpcError,
    SafePlan, SensitivityGain, SqpMode, FLIP_POS_LIMIT, FLIP_VEL_LIMIT,
};
use crate::policy::{featurize_flip, featurize_linear, Dataset, MlpPolicy, PolicyError, Provenance, TrainOpts};
use crate::sets::{sample_tube_dense, sample_tube_sparse, sample_tube_uniform, AxisBox, SetError};
use crate::sim::{MultirotorParams, SimError, Simulator, RobotState, ATT_DECIMATION, SIM_DT};
use nalgebra::{DMatrix, DVector, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IlError {
    #[error("expert failure: {0}")]
    Expert(#[from] LinMpcError),
    #[error("nmpc failure: {0}")]
    Nmpc(#[from] NmpcError),
    #[error("simulation failure: {0}")]
    Sim(#[from] SimError),
    #[error("policy failure: {0}")]
    Policy(#[from] PolicyError),
    #[error("set failure: {0}")]
    Set(#[from] SetError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid run: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Method taxonomy.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Bc,
    Dagger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Robustifier {
    None,
    /// Domain randomization: disturbances sampled from the target set during
    /// demonstration collection.
    Dr,
    /// Tube facet-center samples (2·n_err per step).
    SaSparse,
    /// All tube vertices (2^n per step; linear pipeline only).
    SaDense,
    /// N_s uniform samples per step.
    SaUniform(usize),
}

impl Robustifier {
    pub fn is_sa(&self) -> bool {
        matches!(self, Robustifier::SaSparse | Robustifier::SaDense | Robustifier::SaUniform(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub robustifier: Robustifier,
}

impl MethodSpec {
    pub fn name(&self) -> String {
        let m = match self.method {
            Method::Bc => "bc",
            Method::Dagger => "dagger",
        };
        let r = match self.robustifier {
            Robustifier::None => String::new(),
            Robustifier::Dr => "+dr".into(),
            Robustifier::SaSparse => "+sa-sparse".into(),
            Robustifier::SaDense => "+sa-dense".into(),
            Robustifier::SaUniform(n) => format!("+sa-{n}"),
        };
        format!("{m}{r}")
    }

    pub fn parse(s: &str) -> Option<Self> {
        let (m, r) = match s.split_once('+') {
            Some((m, r)) => (m, Some(r)),
            None => (s, None),
        };
        let method = match m {
            "bc" => Method::Bc,
            "dagger" => Method::Dagger,
            _ => return None,
        };
        let robustifier = match r {
            None => Robustifier::None,
            Some("dr") => Robustifier::Dr,
            Some("sa-sparse") => Robustifier::SaSparse,
            Some("sa-dense") => Robustifier::SaDense,
            Some(other) => {
                let n: usize = other.strip_prefix("sa-")?.parse().ok()?;
                Robustifier::SaUniform(n)
            }
        };
        Some(Self { method, robustifier })
    }
}

/// Probability of executing the expert action on demonstration `demo_idx`
/// (0-based): BC always executes the expert; DAgger uses the expert on the
/// first demonstration only.
pub fn beta_schedule(method: Method, demo_idx: usize) -> f64 {
    match method {
        Method::Bc => 1.0,
        Method::Dagger => {
            if demo_idx == 0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Demonstrations.
// ---------------------------------------------------------------------------

/// Stored QP linearization for the generalized predictor, used on steps where
/// the sensitivity gain is unavailable (weak complementarity).
#[derive(Debug, Clone)]
pub struct PredictorFallback {
    pub lin: Linearization,
    pub nx: usize,
    pub nu: usize,
    pub ui0: usize,
}

/// One expert-rate record of an episode.
#[derive(Debug, Clone)]
pub struct DemoStep {
    pub t: f64,
    /// Controller-model state: 8-dim (tracking) or 10-dim (maneuver).
    pub state: DVector<f64>,
    pub features: DVector<f64>,
    pub expert_action: DVector<f64>,
    pub executed_action: DVector<f64>,
    /// Nominal initial state x̄*₀ of the expert solution (tube center).
    pub x_bar0: DVector<f64>,
    pub u_bar0: DVector<f64>,
    pub gain: Option<SensitivityGain>,
    pub fallback: Option<PredictorFallback>,
    pub disturbance: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct Demonstration {
    pub task: String,
    pub domain: String,
    pub seed: u64,
    /// True iff no state constraint was violated and the episode completed.
    pub success: bool,
    pub diverged: bool,
    /// Tube cross-section active during collection (8-dim linear, 9-dim
    /// error-coordinate for the maneuver).
    pub tube: AxisBox,
    /// Goal position handed to the maneuver featurizer.
    pub p_des: Vector3<f64>,
    pub steps: Vec<DemoStep>,
    /// Call-count instrumentation: full expert solves and sensitivity-system
    /// solves performed during collection.
    pub expert_solves: usize,
    pub sensitivity_solves: usize,
}

impl Demonstration {
    /// Supervised rows (visited-state features → expert action).
    pub fn rows(&self, tag: Provenance) -> Dataset {
        let mut d = Dataset::default();
        for s in &self.steps {
            d.push(s.features.clone(), s.expert_action.clone(), tag);
        }
        d
    }
}

/// Episode output shared by collection and evaluation.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub demo: Demonstration,
    pub stage_cost: f64,
}

fn sample_ball<R: Rng>(radius: f64, rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Initial state drawn uniformly from position/velocity balls of radius
/// `init_ball` around the origin (hover attitude).
pub fn random_initial_state<R: Rng>(init_ball: f64, rng: &mut R) -> RobotState {
    let mut s = RobotState::hover_at(Vector3::zeros());
    s.position = sample_ball(init_ball, rng);
    s.velocity = sample_ball(init_ball, rng);
    s
}

// ---------------------------------------------------------------------------
// Linear (trajectory-tracking) episodes.
// ---------------------------------------------------------------------------

/// Runs one closed-loop tracking episode at the expert rate (0.1 s). With
/// `use_expert`, the expert is solved at every visited state (DAgger
/// relabeling) and the executed action is the expert's with probability β,
/// else the policy's. Without it, the policy flies alone and the expert
/// fields of the records hold the executed action.
///
/// A solver or simulator failure ends the episode early; the truncated
/// demonstration is returned with `diverged` (and failure) flagged rather
/// than as an error, so partially trained policies can crash and still
/// contribute data.
#[allow(clippy::too_many_arguments)]
pub fn run_linear_episode(
    rt: &RtmpcConfig,
    params: &MultirotorParams,
    use_expert: bool,
    policy: Option<&MlpPolicy>,
    beta: f64,
    track: &ReferenceTrack,
    domain: &DomainSpec,
    steps: usize,
    init_ball: f64,
    seed: u64,
) -> Result<EpisodeOutcome, IlError> {
    if !use_expert && policy.is_none() {
        return Err(IlError::Invalid("episode needs an expert or a policy".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_ext = domain.dist.sample(&mut rng);
    let sim_params = domain.apply(params);
    let mut expert = use_expert.then(|| LinearRtmpc::new(rt.clone()));
    let mut sim = Simulator::new(sim_params.clone());
    let mut state = random_initial_state(init_ball, &mut rng);
    // Episodes start in a ball around the reference's initial state.
    let (p0, v0) = track.points[0];
    state.position += p0;
    state.velocity += v0;
    let substeps = (rt.model.dt / SIM_DT).round() as usize;
    assert!(substeps >= 1 && substeps % ATT_DECIMATION == 0);

    let mut demo = Demonstration {
        task: track.name.clone(),
        domain: domain.name.clone(),
        seed,
        success: true,
        diverged: false,
        tube: rt.tube.clone(),
        p_des: Vector3::zeros(),
        steps: Vec::with_capacity(steps),
        expert_solves: 0,
        sensitivity_solves: 0,
    };
    let mut stage_cost = 0.0;

    for step in 0..steps {
        let x8 = reduced_state(&state);
        let refw = track.window(step, rt.horizon);
        let x_ref = refw.state(0);
        let features = featurize_linear(&x8, &refw)?;

        let (expert_action, x_bar0, u_bar0) = if let Some(exp) = expert.as_mut() {
            demo.expert_solves += 1;
            match exp.solve(&x8, &refw) {
                Ok(sol) => {
                    let ua = ancillary_action(&x8, &sol.x_bar0, &sol.u_bar0, &rt.k_gain);
                    (ua, sol.x_bar0, sol.u_bar0)
                }
                Err(_) => {
                    demo.success = false;
                    demo.diverged = true;
                    break;
                }
            }
        } else {
            (DVector::zeros(3), DVector::zeros(8), DVector::zeros(3))
        };

        let policy_action = match policy {
            Some(p) => Some(p.forward(&features)?),
            None => None,
        };
        let executed = match (&policy_action, use_expert) {
            (Some(pa), true) => {
                if rng.gen_bool(beta) {
                    expert_action.clone()
                } else {
                    pa.clone()
                }
            }
            (Some(pa), false) => pa.clone(),
            (None, _) => expert_action.clone(),
        };
        let expert_record = if use_expert { expert_action } else { executed.clone() };

        if !executed.iter().all(|v| v.is_finite()) {
            demo.success = false;
            demo.diverged = true;
            break;
        }
        let dx = &x8 - &x_ref;
        stage_cost += dx.dot(&(&rt.q_x * &dx)) + executed.dot(&(&rt.r_u * &executed));
        if !rt.x_box.contains(&x8, 1e-9) {
            demo.success = false;
        }

        demo.steps.push(DemoStep {
            t: step as f64 * rt.model.dt,
            state: x8,
            features,
            expert_action: expert_record,
            executed_action: executed.clone(),
            x_bar0,
            u_bar0,
            gain: None,
            fallback: None,
            disturbance: f_ext,
        });

        let cmd = to_command(&executed, &state, &sim_params);
        let mut failed = false;
        for _ in 0..substeps {
            match sim.step(&state, &cmd, &f_ext) {
                Ok(next) => state = next,
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            demo.success = false;
            demo.diverged = true;
            break;
        }
    }
    Ok(EpisodeOutcome { demo, stage_cost })
}

/// Expert-in-the-loop demonstration collection for the tracking task.
#[allow(clippy::too_many_arguments)]
pub fn collect_demo_linear(
    rt: &RtmpcConfig,
    params: &MultirotorParams,
    policy: Option<&MlpPolicy>,
    beta: f64,
    track: &ReferenceTrack,
    domain: &DomainSpec,
    steps: usize,
    init_ball: f64,
    seed: u64,
) -> Result<Demonstration, IlError> {
    Ok(run_linear_episode(rt, params, true, policy, beta, track, domain, steps, init_ball, seed)?.demo)
}

// ---------------------------------------------------------------------------
// Linear tube-guided augmentation.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinStrategy {
    /// Facet centers: 2·n_x samples per step.
    Sparse,
    /// All 2^{n_x} tube vertices per step.
    Dense,
    /// N_s uniform draws per step.
    Uniform(usize),
}

/// Synthesizes extra (state, action) pairs from the tube around each step's
/// nominal state: u⁺ = ū*₀ + K(x⁺ − x̄*₀). Features reuse the step's
/// reference window (the tail of the logged feature vector).
pub fn augment_linear(
    demo: &Demonstration,
    tube: &AxisBox,
    k_gain: &DMatrix<f64>,
    strategy: LinStrategy,
    seed: u64,
) -> Result<Dataset, IlError> {
    let mut out = Dataset::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in &demo.steps {
        let nx = step.x_bar0.len();
        let samples = match strategy {
            LinStrategy::Sparse => sample_tube_sparse(&step.x_bar0, tube),
            LinStrategy::Dense => sample_tube_dense(&step.x_bar0, tube)?,
            LinStrategy::Uniform(n) => sample_tube_uniform(&step.x_bar0, tube, n, &mut rng),
        };
        let window_tail = step.features.rows(nx, step.features.len() - nx).into_owned();
        for x_plus in samples {
            let dev = &x_plus - &step.x_bar0;
            assert!(tube.contains(&dev, 1e-9), "augmented state escaped the tube");
            let u_plus = &step.u_bar0 + k_gain * dev;
            let mut feat = DVector::zeros(step.features.len());
            feat.rows_mut(0, nx).copy_from(&x_plus);
            feat.rows_mut(nx, window_tail.len()).copy_from(&window_tail);
            out.push(feat, u_plus, Provenance::Augmented);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Maneuver (flip) episodes.
// ---------------------------------------------------------------------------

/// Runs one closed-loop maneuver episode at the ancillary rate (0.02 s).
/// With `use_expert`, the ancillary NMPC is solved to convergence at every
/// visited state and, when `with_gains`, the first-input sensitivity is
/// extracted once per step (falling back to a stored linearization for the
/// generalized predictor when strict complementarity fails).
#[allow(clippy::too_many_arguments)]
pub fn run_flip_episode(
    params: &MultirotorParams,
    cfg: &Config,
    plan: &SafePlan,
    tube: &AxisBox,
    use_expert: bool,
    policy: Option<&MlpPolicy>,
    beta: f64,
    domain: &DomainSpec,
    steps: usize,
    seed: u64,
    with_gains: bool,
) -> Result<EpisodeOutcome, IlError> {
    if !use_expert && policy.is_none() {
        return Err(IlError::Invalid("episode needs an expert or a policy".into()));
    }
    let ncfg = &cfg.nmpc;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_ext = domain.dist.sample(&mut rng);
    let sim_params = domain.apply(params);
    let mut solver = use_expert.then(|| build_ancillary_solver(params, ncfg));
    let mut sim = Simulator::new(sim_params);
    let mut state = random_initial_state(cfg.il.init_ball, &mut rng);
    let dt_ctrl = ncfg.dt();
    let substeps = (dt_ctrl / SIM_DT).round() as usize;
    assert!(substeps >= 1 && substeps % ATT_DECIMATION == 0);
    let last = plan.states.last().unwrap();
    let p_des = Vector3::new(last[0], last[1], last[2]);

    let mut demo = Demonstration {
        task: "flip".into(),
        domain: domain.name.clone(),
        seed,
        success: true,
        diverged: false,
        tube: tube.clone(),
        p_des,
        steps: Vec::with_capacity(steps),
        expert_solves: 0,
        sensitivity_solves: 0,
    };
    let mut stage_cost = 0.0;
    let mut prev_q = crate::attitude_math::QUAT_IDENTITY;
    let mut prev_omega = Vector3::zeros();

    for step in 0..steps {
        let t = step as f64 * dt_ctrl;
        let x10 = ancillary_state(&state);
        let (features, qc) = featurize_flip(&state, t, &p_des, &prev_q);
        prev_q = qc;
        let (x_ref, u_ref) = plan.reference_at(t);

        let mut gain = None;
        let mut fallback = None;
        let (expert_action, x_bar0, u_bar0) = if let Some(sv) = solver.as_mut() {
            demo.expert_solves += 1;
            match ancillary_nmpc_action(sv, &x10, t, plan, SqpMode::FullSqp) {
                Ok((u, sol)) => {
                    if with_gains {
                        demo.sensitivity_solves += 1;
                        match sensitivity_gain(sv, &sol, ncfg.strict_complementarity) {
                            Ok(g) => gain = Some(g),
                            Err(_) => {
                                fallback = sv.last_linearization().map(|lin| PredictorFallback {
                                    lin: lin.clone(),
                                    nx: sv.tr.nx,
                                    nu: sv.tr.nu,
                                    ui0: sv.tr.ui(0),
                                });
                            }
                        }
                    }
                    (u.clone(), sv.state_knot(0), u)
                }
                Err(_) => {
                    demo.success = false;
                    demo.diverged = true;
                    break;
                }
            }
        } else {
            (DVector::zeros(4), DVector::zeros(10), DVector::zeros(4))
        };

        let policy_action = match policy {
            Some(p) => Some(p.forward(&features)?),
            None => None,
        };
        let executed = match (&policy_action, use_expert) {
            (Some(pa), true) => {
                if rng.gen_bool(beta) {
                    expert_action.clone()
                } else {
                    pa.clone()
                }
            }
            (Some(pa), false) => pa.clone(),
            (None, _) => expert_action.clone(),
        };
        let expert_record = if use_expert { expert_action } else { executed.clone() };
        if !executed.iter().all(|v| v.is_finite()) {
            demo.success = false;
            demo.diverged = true;
            break;
        }

        // Ancillary-NMPC stage cost of the executed trajectory.
        let dev = error_coords(&x10, &x_ref);
        let du = &executed - &u_ref;
        stage_cost += ncfg.q_pos * dev.rows(0, 3).norm_squared()
            + ncfg.q_vel * dev.rows(3, 3).norm_squared()
            + ncfg.q_att * dev.rows(6, 3).norm_squared()
            + ncfg.r_thrust * du[0] * du[0]
            + ncfg.r_rate * du.rows(1, 3).norm_squared();
        if state.position.amax() > FLIP_POS_LIMIT || state.velocity.amax() > FLIP_VEL_LIMIT {
            demo.success = false;
        }

        demo.steps.push(DemoStep {
            t,
            state: x10,
            features,
            expert_action: expert_record,
            executed_action: executed.clone(),
            x_bar0,
            u_bar0,
            gain,
            fallback,
            disturbance: f_ext,
        });

        let omega_cmd = Vector3::new(executed[1], executed[2], executed[3]);
        let omega_dot_cmd = (omega_cmd - prev_omega) / dt_ctrl;
        prev_omega = omega_cmd;
        let cmd = crate::sim::CommandInput::RateThrust { thrust: executed[0].max(0.0), omega_cmd, omega_dot_cmd };
        let mut failed = false;
        for _ in 0..substeps {
            match sim.step(&state, &cmd, &f_ext) {
                Ok(next) => state = next,
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            demo.success = false;
            demo.diverged = true;
            break;
        }
    }
    Ok(EpisodeOutcome { demo, stage_cost })
}

// ---------------------------------------------------------------------------
// Maneuver tube-guided augmentation.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipStrategy {
    /// Facet centers of the 9-dim error-coordinate tube: 18 per step.
    Sparse,
    /// N_s uniform draws per step.
    Uniform(usize),
}

#[derive(Debug, Clone, Default)]
pub struct AugmentReport {
    pub rows: usize,
    pub skipped: usize,
    pub fallback_rows: usize,
}

/// Synthesizes extra pairs by sampling the 9-dim MRP-error tube around each
/// step's nominal state and predicting actions from the step's sensitivity
/// gain (or the generalized predictor where the gain was unavailable).
/// Predictor failures skip the row and are counted.
pub fn augment_nonlinear(
    demo: &Demonstration,
    tube: &AxisBox,
    strategy: FlipStrategy,
    seed: u64,
) -> Result<(Dataset, AugmentReport), IlError> {
    assert_eq!(tube.dim(), 9, "maneuver tube must be in 9-dim error coordinates");
    let mut out = Dataset::default();
    let mut report = AugmentReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero9 = DVector::zeros(9);
    for step in &demo.steps {
        if step.gain.is_none() && step.fallback.is_none() {
            continue;
        }
        let errors = match strategy {
            FlipStrategy::Sparse => sample_tube_sparse(&zero9, tube),
            FlipStrategy::Uniform(n) => sample_tube_uniform(&zero9, tube, n, &mut rng),
        };
        let prev_q = Vector4::new(step.features[6], step.features[7], step.features[8], step.features[9]);
        for e in errors {
            assert!(tube.contains(&e, 1e-9), "augmented error escaped the tube");
            let x_plus = apply_error_coords(&step.x_bar0, &e);
            let u_plus = if let Some(g) = &step.gain {
                predict_augmented_action(g, &x_plus)
            } else {
                let f = step.fallback.as_ref().unwrap();
                match generalized_predictor_from(&f.lin, f.nx, f.nu, f.ui0, &x_plus) {
                    Ok(u) => {
                        report.fallback_rows += 1;
                        u
                    }
                    Err(_) => {
                        report.skipped += 1;
                        continue;
                    }
                }
            };
            let mut s = RobotState::hover_at(Vector3::new(x_plus[0], x_plus[1], x_plus[2]));
            s.velocity = Vector3::new(x_plus[3], x_plus[4], x_plus[5]);
            s.attitude = Vector4::new(x_plus[6], x_plus[7], x_plus[8], x_plus[9]);
            let (feat, _) = featurize_flip(&s, step.t, &demo.p_des, &prev_q);
            out.push(feat, u_plus, Provenance::Augmented);
            report.rows += 1;
        }
    }
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// Training orchestration.
// ---------------------------------------------------------------------------

/// One learning-curve record, appended after every policy update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub demo_idx: usize,
    pub domain: String,
    pub success_rate: f64,
    pub stage_cost: f64,
    pub expert_gap: Option<f64>,
    /// Cumulative collection + training time.
    pub wall_clock_s: f64,
    pub seed: u64,
}

pub fn write_curve_jsonl<W: Write>(points: &[CurvePoint], w: &mut W) -> Result<(), IlError> {
    for p in points {
        let line = serde_json::to_string(p).map_err(|e| IlError::Invalid(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct IlOutcome {
    pub policy: MlpPolicy,
    pub dataset: Dataset,
    pub curve: Vec<CurvePoint>,
    pub demos: Vec<Demonstration>,
}

/// Assembled assets of the tracking pipeline (expert with estimated tube and
/// the task reference).
pub struct LinearPipeline {
    pub params: MultirotorParams,
    pub rt: RtmpcConfig,
    pub track: ReferenceTrack,
}

fn fresh_linear_policy(cfg: &Config, feature_dim: usize, seed: u64, data: &Dataset) -> MlpPolicy {
    let mut dims = vec![feature_dim];
    dims.extend_from_slice(&cfg.train.hidden_linear);
    dims.push(3);
    let mut p = MlpPolicy::new(&dims, cfg.train.seed ^ seed);
    let (mean, std) = data.feature_stats();
    p.set_normalization(mean, std);
    p
}

fn fresh_flip_policy(cfg: &Config, feature_dim: usize, seed: u64, data: &Dataset) -> MlpPolicy {
    let mut dims = vec![feature_dim];
    dims.extend_from_slice(&cfg.train.hidden_flip);
    dims.push(4);
    let mut p = MlpPolicy::new(&dims, cfg.train.seed ^ seed);
    let (mean, std) = data.feature_stats();
    p.set_normalization(mean, std);
    p
}

/// Per-demonstration training loop for the tracking task: collect, augment
/// (SA variants), retrain on all accumulated data, and evaluate on every
/// requested domain after each demonstration.
pub fn run_il_linear(
    pipe: &LinearPipeline,
    cfg: &Config,
    spec: MethodSpec,
    n_demos: usize,
    eval_domains: &[DomainSpec],
    seed: u64,
) -> Result<IlOutcome, IlError> {
    let steps = cfg.il.episode_steps.min(pipe.track.len_steps());
    let eval_seed0 = seed.wrapping_mul(1_000_003).wrapping_add(777);
    let mut baselines = Vec::new();
    for d in eval_domains {
        baselines.push(crate::experiments::evaluate_linear(
            crate::experiments::LinController::Expert,
            &pipe.rt,
            &pipe.params,
            &pipe.track,
            d,
            cfg.il.eval_episodes,
            eval_seed0,
            cfg.il.init_ball,
            None,
        )?);
    }

    let collect_domain = if spec.robustifier == Robustifier::Dr {
        DomainSpec::dr_linear(&cfg.il, pipe.params.hover_thrust())
    } else {
        DomainSpec::source()
    };

    let mut dataset = Dataset::default();
    let mut demos = Vec::new();
    let mut policy: Option<MlpPolicy> = None;
    let mut curve = Vec::new();
    let mut wall = 0.0f64;

    for i in 0..n_demos {
        let t0 = Instant::now();
        let beta = if policy.is_none() { 1.0 } else { beta_schedule(spec.method, i) };
        let demo_seed = seed.wrapping_mul(10_000).wrapping_add(i as u64);
        let demo = collect_demo_linear(
            &pipe.rt,
            &pipe.params,
            policy.as_ref(),
            beta,
            &pipe.track,
            &collect_domain,
            steps,
            cfg.il.init_ball,
            demo_seed,
        )?;
        dataset.extend(&demo.rows(Provenance::Demo));
        if spec.robustifier.is_sa() {
            let strategy = match spec.robustifier {
                Robustifier::SaSparse => LinStrategy::Sparse,
                Robustifier::SaDense => LinStrategy::Dense,
                Robustifier::SaUniform(n) => LinStrategy::Uniform(n),
                _ => unreachable!(),
            };
            dataset.extend(&augment_linear(&demo, &pipe.rt.tube, &pipe.rt.k_gain, strategy, demo_seed)?);
        }
        demos.push(demo);

        let mut p = fresh_linear_policy(cfg, dataset.inputs[0].len(), seed, &dataset);
        let mut opts = TrainOpts::linear(&cfg.train);
        opts.seed ^= seed;
        crate::policy::train(&mut p, &dataset, &opts);
        wall += t0.elapsed().as_secs_f64();

        for (d, base) in eval_domains.iter().zip(&baselines) {
            let m = crate::experiments::evaluate_linear(
                crate::experiments::LinController::Policy(&p),
                &pipe.rt,
                &pipe.params,
                &pipe.track,
                d,
                cfg.il.eval_episodes,
                eval_seed0,
                cfg.il.init_ball,
                Some(base),
            )?;
            curve.push(CurvePoint {
                demo_idx: i + 1,
                domain: d.name.clone(),
                success_rate: m.success_rate,
                stage_cost: m.stage_cost,
                expert_gap: m.expert_gap,
                wall_clock_s: wall,
                seed,
            });
        }
        policy = Some(p);
    }
    let policy = policy.ok_or_else(|| IlError::Invalid("zero-demo run produces no policy".into()))?;
    Ok(IlOutcome { policy, dataset, curve, demos })
}

/// Assembled assets of the maneuver pipeline: safe plan and estimated tube.
pub struct FlipPipeline {
    pub params: MultirotorParams,
    pub plan: SafePlan,
    /// 9-dim error-coordinate state tube.
    pub tube: AxisBox,
}

impl FlipPipeline {
    /// Plans the flip and estimates the tube per the pipeline configuration.
    pub fn build(params: &MultirotorParams, cfg: &Config) -> Result<Self, IlError> {
        let plan = plan_safe_flip(params, &cfg.flip, 2.0 * std::f64::consts::PI)?;
        let dist = crate::sim::DisturbanceSet {
            f_min: 0.0,
            f_max: cfg.nmpc.tube.w_max_frac * params.hover_thrust(),
        };
        let (tube, _action_tube) = crate::nmpc::estimate_flip_tube(
            params,
            &plan,
            &cfg.nmpc,
            &dist,
            cfg.nmpc.tube.rollouts,
            cfg.nmpc.tube.safety,
            cfg.nmpc.tube.seed,
        )?;
        Ok(Self { params: params.clone(), plan, tube })
    }
}

/// Demonstration loop for the maneuver: SA variants collect one demonstration
/// at a time and retrain after each; baselines retrain per batch.
pub fn run_il_flip(
    pipe: &FlipPipeline,
    cfg: &Config,
    spec: MethodSpec,
    n_demos: usize,
    eval_domains: &[DomainSpec],
    seed: u64,
) -> Result<IlOutcome, IlError> {
    let steps = cfg.il.episode_steps;
    let eval_seed0 = seed.wrapping_mul(1_000_003).wrapping_add(333);
    let mut baselines = Vec::new();
    for d in eval_domains {
        baselines.push(crate::experiments::evaluate_flip(
            crate::experiments::FlipController::Expert,
            pipe,
            cfg,
            d,
            cfg.il.eval_episodes,
            eval_seed0,
            None,
        )?);
    }
    let collect_domain = if spec.robustifier == Robustifier::Dr {
        DomainSpec::dr_flip(&cfg.il, pipe.params.hover_thrust())
    } else {
        DomainSpec::source()
    };
    let batch = if spec.robustifier.is_sa() { 1 } else { cfg.il.demos_per_batch };

    let mut dataset = Dataset::default();
    let mut demos = Vec::new();
    let mut policy: Option<MlpPolicy> = None;
    let mut curve = Vec::new();
    let mut wall = 0.0f64;

    for i in 0..n_demos {
        let t0 = Instant::now();
        let beta = if policy.is_none() { 1.0 } else { beta_schedule(spec.method, i) };
        let demo_seed = seed.wrapping_mul(10_000).wrapping_add(i as u64);
        let with_gains = spec.robustifier.is_sa();
        let demo = run_flip_episode(
            &pipe.params,
            cfg,
            &pipe.plan,
            &pipe.tube,
            true,
            policy.as_ref(),
            beta,
            &collect_domain,
            steps,
            demo_seed,
            with_gains,
        )?
        .demo;
        dataset.extend(&demo.rows(Provenance::Demo));
        if with_gains {
            let strategy = match spec.robustifier {
                Robustifier::SaSparse => FlipStrategy::Sparse,
                Robustifier::SaUniform(n) => FlipStrategy::Uniform(n),
                Robustifier::SaDense => {
                    return Err(IlError::Invalid("dense vertex augmentation is impractical in 9 dims".into()))
                }
                _ => unreachable!(),
            };
            let (aug, _report) = augment_nonlinear(&demo, &pipe.tube, strategy, demo_seed)?;
            dataset.extend(&aug);
        }
        demos.push(demo);
        wall += t0.elapsed().as_secs_f64();

        if (i + 1) % batch != 0 && i + 1 != n_demos {
            continue;
        }
        let t1 = Instant::now();
        let mut p = fresh_flip_policy(cfg, dataset.inputs[0].len(), seed, &dataset);
        let mut opts = TrainOpts::nonlinear(&cfg.train);
        opts.seed ^= seed;
        crate::policy::train(&mut p, &dataset, &opts);
        wall += t1.elapsed().as_secs_f64();

        for (d, base) in eval_domains.iter().zip(&baselines) {
            let m = crate::experiments::evaluate_flip(
                crate::experiments::FlipController::Policy(&p),
                pipe,
                cfg,
                d,
                cfg.il.eval_episodes,
                eval_seed0,
                Some(base),
            )?;
            curve.push(CurvePoint {
                demo_idx: i + 1,
                domain: d.name.clone(),
                success_rate: m.success_rate,
                stage_cost: m.stage_cost,
                expert_gap: m.expert_gap,
                wall_clock_s: wall,
                seed,
            });
        }
        policy = Some(p);
    }
    let policy = policy.ok_or_else(|| IlError::Invalid("zero-demo run produces no policy".into()))?;
    Ok(IlOutcome { policy, dataset, curve, demos })
}

/// Fine-tuning protocol: discard all previous data (including every augmented
/// row), collect `n_extra` unaugmented demonstrations with the policy flying
/// (expert relabels), and retrain from the pretrained parameters after each.
pub fn fine_tune_flip(
    pipe: &FlipPipeline,
    cfg: &Config,
    pretrained: &MlpPolicy,
    n_extra: usize,
    seed: u64,
) -> Result<(MlpPolicy, Dataset, Vec<Demonstration>), IlError> {
    let mut policy = pretrained.clone();
    let mut data = Dataset::default();
    let mut demos = Vec::new();
    let source = DomainSpec::source();
    for i in 0..n_extra {
        let demo_seed = seed.wrapping_mul(77_003).wrapping_add(i as u64);
        let demo = run_flip_episode(
            &pipe.params,
            cfg,
            &pipe.plan,
            &pipe.tube,
            true,
            Some(&policy),
            0.0,
            &source,
            cfg.il.episode_steps,
            demo_seed,
            false,
        )?
        .demo;
        data.extend(&demo.rows(Provenance::FineTune));
        demos.push(demo);
        // Retrain from the pretrained parameters, not from the last iterate.
        policy = pretrained.clone();
        let mut opts = TrainOpts::nonlinear(&cfg.train);
        opts.seed ^= seed;
        crate::policy::train(&mut policy, &data, &opts);
    }
    Ok((policy, data, demos))
}

// ---------------------------------------------------------------------------
// Dataset persistence: CSV with one row per pair, feature columns, target
// columns, and a provenance column.
// ---------------------------------------------------------------------------

pub fn save_dataset_csv<W: Write>(data: &Dataset, w: &mut W) -> Result<(), IlError> {
    if data.is_empty() {
        writeln!(w, "provenance")?;
        return Ok(());
    }
    let nf = data.inputs[0].len();
    let nt = data.targets[0].len();
    let mut header: Vec<String> = (0..nf).map(|i| format!("x{i}")).collect();
    header.extend((0..nt).map(|i| format!("u{i}")));
    header.push("provenance".into());
    writeln!(w, "{}", header.join(","))?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.inputs[i].iter().map(|v| format!("{v:.17e}")).collect();
        row.extend(data.targets[i].iter().map(|v| format!("{v:.17e}")));
        row.push(
            match data.provenance[i] {
                Provenance::Demo => "demo",
                Provenance::Augmented => "augmented",
                Provenance::FineTune => "fine_tune",
            }
            .into(),
        );
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn load_dataset_csv<R: BufRead>(r: &mut R, n_features: usize) -> Result<Dataset, IlError> {
    let mut lines = r.lines();
    let _header = lines.next().transpose()?;
    let mut data = Dataset::default();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < n_features + 2 {
            return Err(IlError::Invalid(format!("short dataset row: {line}")));
        }
        let tag = match *cells.last().unwrap() {
            "demo" => Provenance::Demo,
            "augmented" => Provenance::Augmented,
            "fine_tune" => Provenance::FineTune,
            other => return Err(IlError::Invalid(format!("unknown provenance {other}"))),
        };
        let nums: Result<Vec<f64>, _> = cells[..cells.len() - 1].iter().map(|c| c.parse::<f64>()).collect();
        let nums = nums.map_err(|e| IlError::Invalid(e.to_string()))?;
        let (xs, us) = nums.split_at(n_features);
        data.push(DVector::from_vec(xs.to_vec()), DVector::from_vec(us.to_vec()), tag);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LinearMpcConfig;
    use crate::experiments::{gen_reference, TaskSpec};
    use crate::linmpc::NX;

    fn rt_fixture(tube_hw: f64) -> RtmpcConfig {
        RtmpcConfig::build(
            &LinearMpcConfig::default(),
            &MultirotorParams::defaults(),
            (0.15, 0.15),
            AxisBox::symmetric(&DVector::from_element(NX, tube_hw)),
        )
        .unwrap()
    }

    fn hover_track(steps: usize) -> ReferenceTrack {
        gen_reference(&TaskSpec::hover(), steps, 0.1, &LinearMpcConfig::default()).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for name in [
            "bc",
            "dagger",
            "bc+dr",
            "dagger+dr",
            "bc+sa-sparse",
            "dagger+sa-sparse",
            "bc+sa-dense",
            "dagger+sa-dense",
            "dagger+sa-25",
        ] {
            let spec = MethodSpec::parse(name).unwrap();
            assert_eq!(spec.name(), name);
        }
        assert!(MethodSpec::parse("foo").is_none());
        assert!(MethodSpec::parse("bc+sa-x").is_none());
    }

    #[test]
    fn beta_schedule_expert_first_then_policy() {
        assert_eq!(beta_schedule(Method::Bc, 0), 1.0);
        assert_eq!(beta_schedule(Method::Bc, 7), 1.0);
        assert_eq!(beta_schedule(Method::Dagger, 0), 1.0);
        assert_eq!(beta_schedule(Method::Dagger, 1), 0.0);
        assert_eq!(beta_schedule(Method::Dagger, 9), 0.0);
    }

    #[test]
    fn expert_collection_executes_expert_actions() {
        let rt = rt_fixture(0.05);
        let track = hover_track(15);
        let domain = DomainSpec::source();
        let demo = collect_demo_linear(
            &rt,
            &MultirotorParams::defaults(),
            None,
            1.0,
            &track,
            &domain,
            15,
            0.05,
            3,
        )
        .unwrap();
        assert!(demo.success, "expert hover episode must succeed");
        assert_eq!(demo.steps.len(), 15);
        assert_eq!(demo.expert_solves, 15);
        for s in &demo.steps {
            assert_eq!(s.executed_action, s.expert_action);
            assert_eq!(s.disturbance, Vector3::zeros());
        }
    }

    #[test]
    fn episodes_are_seed_deterministic() {
        let rt = rt_fixture(0.05);
        let track = hover_track(10);
        let domain = DomainSpec::source();
        let run = |seed| {
            run_linear_episode(&rt, &MultirotorParams::defaults(), true, None, 1.0, &track, &domain, 10, 0.05, seed)
                .unwrap()
        };
        let (a, b, c) = (run(11), run(11), run(12));
        assert_eq!(a.stage_cost, b.stage_cost);
        for (sa, sb) in a.demo.steps.iter().zip(&b.demo.steps) {
            assert_eq!(sa.state, sb.state);
            assert_eq!(sa.executed_action, sb.executed_action);
        }
        assert_ne!(a.demo.steps[0].state, c.demo.steps[0].state, "different seeds start differently");
    }

    #[test]
    fn dr_collection_disturbance_constant_and_in_set() {
        let il = crate::config::IlConfig::default();
        let params = MultirotorParams::defaults();
        let domain = DomainSpec::dr_linear(&il, params.hover_thrust());
        let rt = rt_fixture(0.05);
        let track = hover_track(8);
        let demo = collect_demo_linear(&rt, &params, None, 1.0, &track, &domain, 8, 0.05, 5).unwrap();
        let d0 = demo.steps[0].disturbance;
        assert!(demo.steps.iter().all(|s| s.disturbance == d0), "constant over the episode");
        let n = d0.norm();
        assert!(n >= domain.dist.f_min - 1e-12 && n <= domain.dist.f_max + 1e-12, "norm {n} outside set");
    }

    fn synthetic_linear_demo(n_steps: usize, feat_dim: usize) -> Demonstration {
        let mut steps = Vec::new();
        for k in 0..n_steps {
            let x_bar0 = DVector::from_fn(8, |i, _| 0.01 * (i + k) as f64);
            let mut features = DVector::from_fn(feat_dim, |i, _| 0.1 * i as f64 + k as f64);
            features.rows_mut(0, 8).copy_from(&x_bar0);
            steps.push(DemoStep {
                t: k as f64 * 0.1,
                state: x_bar0.clone(),
                features,
                expert_action: DVector::zeros(3),
                executed_action: DVector::zeros(3),
                x_bar0,
                u_bar0: DVector::from_vec(vec![0.5, -0.2, 0.1]),
                gain: None,
                fallback: None,
                disturbance: Vector3::zeros(),
            });
        }
        Demonstration {
            task: "hover".into(),
            domain: "S".into(),
            seed: 0,
            success: true,
            diverged: false,
            tube: AxisBox::symmetric(&DVector::from_element(8, 0.1)),
            p_des: Vector3::zeros(),
            steps,
            expert_solves: n_steps,
            sensitivity_solves: 0,
        }
    }

    #[test]
    fn sparse_augmentation_count_and_ancillary_law() {
        let demo = synthetic_linear_demo(3, 8 + 12);
        let tube = demo.tube.clone();
        let k = DMatrix::from_fn(3, 8, |r, c| 0.1 * (r as f64 + 1.0) - 0.05 * c as f64);
        let aug = augment_linear(&demo, &tube, &k, LinStrategy::Sparse, 0).unwrap();
        assert_eq!(aug.len(), 3 * 16, "2·n_x facet centers per step");
        for i in 0..aug.len() {
            let step = &demo.steps[i / 16];
            let x_plus = aug.inputs[i].rows(0, 8).into_owned();
            let dev = &x_plus - &step.x_bar0;
            let expect = &step.u_bar0 + &k * &dev;
            assert!((&aug.targets[i] - expect).amax() < 1e-12);
            // Facet center: exactly one coordinate at a half-width.
            let active = dev.iter().filter(|v| v.abs() > 1e-12).count();
            assert_eq!(active, 1);
            assert_eq!(aug.provenance[i], Provenance::Augmented);
        }
    }

    #[test]
    fn dense_and_uniform_augmentation_counts() {
        let demo = synthetic_linear_demo(2, 8 + 12);
        let tube = demo.tube.clone();
        let k = DMatrix::zeros(3, 8);
        let dense = augment_linear(&demo, &tube, &k, LinStrategy::Dense, 0).unwrap();
        assert_eq!(dense.len(), 2 * 256, "2^8 vertices per step");
        let uni = augment_linear(&demo, &tube, &k, LinStrategy::Uniform(7), 0).unwrap();
        assert_eq!(uni.len(), 2 * 7);
    }

    #[test]
    fn augmented_features_splice_state_and_reference_window() {
        let demo = synthetic_linear_demo(1, 8 + 12);
        let tube = demo.tube.clone();
        let k = DMatrix::zeros(3, 8);
        let aug = augment_linear(&demo, &tube, &k, LinStrategy::Sparse, 0).unwrap();
        let tail = demo.steps[0].features.rows(8, 12).into_owned();
        for i in 0..aug.len() {
            assert_eq!(aug.inputs[i].rows(8, 12).into_owned(), tail, "reference window preserved");
        }
    }

    #[test]
    fn nonlinear_augmentation_skips_steps_without_predictor() {
        let mut demo = synthetic_linear_demo(2, 14);
        for s in &mut demo.steps {
            let mut x = DVector::zeros(10);
            x[6] = 1.0;
            s.x_bar0 = x;
            s.u_bar0 = DVector::zeros(4);
        }
        let tube = AxisBox::symmetric(&DVector::from_element(9, 0.05));
        let (data, report) = augment_nonlinear(&demo, &tube, FlipStrategy::Sparse, 0).unwrap();
        assert!(data.is_empty());
        assert_eq!(report.rows, 0);
        assert_eq!(report.skipped, 0);
        assert_eq!(report.fallback_rows, 0);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let mut data = Dataset::default();
        data.push(
            DVector::from_vec(vec![1.0, -2.5e-7, 3.25]),
            DVector::from_vec(vec![0.5, 0.125]),
            Provenance::Demo,
        );
        data.push(
            DVector::from_vec(vec![-1.0, 0.0, std::f64::consts::PI]),
            DVector::from_vec(vec![-0.5, 9.75]),
            Provenance::Augmented,
        );
        data.push(DVector::zeros(3), DVector::zeros(2), Provenance::FineTune);
        let mut buf = Vec::new();
        save_dataset_csv(&data, &mut buf).unwrap();
        let loaded = load_dataset_csv(&mut std::io::BufReader::new(buf.as_slice()), 3).unwrap();
        assert_eq!(loaded.len(), data.len());
        for i in 0..data.len() {
            assert_eq!(loaded.inputs[i], data.inputs[i]);
            assert_eq!(loaded.targets[i], data.targets[i]);
            assert_eq!(loaded.provenance[i], data.provenance[i]);
        }
    }

    #[test]
    fn curve_jsonl_one_line_per_point() {
        let pts = vec![
            CurvePoint { demo_idx: 1, domain: "S".into(), success_rate: 100.0, stage_cost: 1.0, expert_gap: Some(2.0), wall_clock_s: 0.1, seed: 0 },
            CurvePoint { demo_idx: 2, domain: "T1".into(), success_rate: 50.0, stage_cost: 2.0, expert_gap: None, wall_clock_s: 0.2, seed: 0 },
        ];
        let mut buf = Vec::new();
        write_curve_jsonl(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let back: CurvePoint = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back.demo_idx, 1);
        assert_eq!(back.expert_gap, Some(2.0));
    }

    #[test]
    fn policy_only_episode_requires_policy() {
        let rt = rt_fixture(0.05);
        let track = hover_track(5);
        let err = run_linear_episode(
            &rt,
            &MultirotorParams::defaults(),
            false,
            None,
            0.0,
            &track,
            &DomainSpec::source(),
            5,
            0.05,
            0,
        );
        assert!(err.is_err());
    }
}
