//! Release gate: ten end-to-end criteria covering solver correctness,
//! robustness of the learned policies, and reproducibility. Each test prints
//! exactly one `[criterion NN] PASS/FAIL` line (visible with `--nocapture`).
//!
//! Expensive artifacts (estimated tubes, assembled pipelines, learning
//! curves) are built once and shared across criteria via `OnceLock`.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

use tubeil::config::Config;
use tubeil::experiments::{
    build_linear_pipeline, evaluate_flip, final_success, gap_in_window, timing_report_flip,
    timing_report_linear, DomainSpec, FlipController, TaskSpec,
};
use tubeil::imitation::{
    augment_nonlinear, fine_tune_flip, run_flip_episode, run_il_flip, run_il_linear,
    run_linear_episode, CurvePoint, FlipPipeline, FlipStrategy, LinearPipeline, MethodSpec,
};
use tubeil::linmpc::{build_linear_model, identify_tilt_tau, solve_lqr};
use tubeil::nmpc::{
    integrate_stage, sensitivity_gain, simulate_flip_tracking, Integrator, NmpcSolver,
    OcpTranscription, ShootingModel, SqpMode, SqpStatus,
};
use tubeil::policy::{featurize_linear, mse_loss_and_grad, MlpPolicy, Provenance};
use tubeil::qp::{solve_kkt_equality, QpProblem, QpSettings, QpSolver, QpStatus, SparseMatrix};
use tubeil::sim::{DisturbanceSet, MultirotorParams, RobotState};

// ---------------------------------------------------------------------------
// Reporting.
// ---------------------------------------------------------------------------

fn verdict(id: u32, pass: bool, detail: &str) {
    println!("[criterion {id:02}] {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

// ---------------------------------------------------------------------------
// Shared fixtures.
// ---------------------------------------------------------------------------

fn config() -> &'static Config {
    static C: OnceLock<Config> = OnceLock::new();
    C.get_or_init(Config::default)
}

fn lin_pipe() -> &'static LinearPipeline {
    static P: OnceLock<LinearPipeline> = OnceLock::new();
    P.get_or_init(|| build_linear_pipeline(config(), &TaskSpec::figure_eight()).unwrap())
}

fn flip_pipe() -> &'static FlipPipeline {
    static P: OnceLock<FlipPipeline> = OnceLock::new();
    P.get_or_init(|| FlipPipeline::build(&config().sim, config()).unwrap())
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct Cell {
    method: &'static str,
    curve: Vec<CurvePoint>,
}

/// Learning curves for the tracking task: four methods × three seeds,
/// evaluated in S and T1 after every demonstration.
fn tracking_cells() -> &'static Vec<Cell> {
    static CELLS: OnceLock<Vec<Cell>> = OnceLock::new();
    CELLS.get_or_init(|| {
        let cfg = config();
        let pipe = lin_pipe();
        let mg = pipe.params.hover_thrust();
        let domains = vec![DomainSpec::source(), DomainSpec::t1(&cfg.il, mg)];
        // Demo budgets: enough to witness each claim (SA methods converge
        // within a few demos; the gap window for the SA method needs 20).
        let plan: [(&'static str, usize); 4] =
            [("dagger+sa-sparse", 20), ("bc+sa-sparse", 3), ("bc", 10), ("dagger+dr", 15)];
        let mut cells = Vec::new();
        for (method, n_demos) in plan {
            let spec = MethodSpec::parse(method).unwrap();
            for seed in SEEDS {
                let out = run_il_linear(pipe, cfg, spec, n_demos, &domains, seed).unwrap();
                cells.push(Cell { method, curve: out.curve });
            }
        }
        cells
    })
}

/// Seed-averaged success rate of a method at a given demo count.
fn mean_success(cells: &[Cell], method: &str, domain: &str, demo_idx: usize) -> f64 {
    let vals: Vec<f64> = cells
        .iter()
        .filter(|c| c.method == method)
        .filter_map(|c| {
            c.curve
                .iter()
                .find(|p| p.domain == domain && p.demo_idx == demo_idx)
                .map(|p| p.success_rate)
        })
        .collect();
    assert!(!vals.is_empty(), "no curve points for {method}/{domain} at {demo_idx}");
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// First demo count at which the seed-averaged success rate reaches 100%.
fn first_mean_full(cells: &[Cell], method: &str, domain: &str, max_demos: usize) -> Option<usize> {
    (1..=max_demos).find(|&d| mean_success(cells, method, domain, d) >= 100.0 - 1e-9)
}

struct FlipResults {
    sa25_rows_per_step: f64,
    sparse_rows_per_step: f64,
    /// Per seed: success of the policy after 1 demo + 1 fine-tune in (S, T_flip).
    tuned_success: Vec<(f64, f64)>,
    /// Per seed: expert gap in S after 1 and after 2 fine-tuning demos.
    gap_ft: Vec<(f64, f64)>,
    /// Per seed: DAgger+DR success in T_flip at 50 demonstrations.
    dr_final: Vec<f64>,
}

fn flip_results() -> &'static FlipResults {
    static R: OnceLock<FlipResults> = OnceLock::new();
    R.get_or_init(|| {
        let cfg = config();
        let pipe = flip_pipe();
        let mg = pipe.params.hover_thrust();
        let source = DomainSpec::source();
        let tflip = DomainSpec::t_flip(&cfg.il, mg);
        let sa25 = MethodSpec::parse("dagger+sa-25").unwrap();
        let dr = MethodSpec::parse("dagger+dr").unwrap();

        // Augmentation-count audits on one expert demonstration.
        let demo = run_flip_episode(
            &pipe.params,
            cfg,
            &pipe.plan,
            &pipe.tube,
            true,
            None,
            1.0,
            &source,
            cfg.il.episode_steps,
            42,
            true,
        )
        .unwrap()
        .demo;
        let (sparse_rows, _) = augment_nonlinear(&demo, &pipe.tube, FlipStrategy::Sparse, 42).unwrap();
        let (sa25_rows, _) = augment_nonlinear(&demo, &pipe.tube, FlipStrategy::Uniform(25), 42).unwrap();
        let n_steps = demo.steps.len() as f64;

        let mut tuned_success = Vec::new();
        let mut gap_ft = Vec::new();
        let mut dr_final = Vec::new();
        for seed in SEEDS {
            let domains = vec![source.clone(), tflip.clone()];
            let out = run_il_flip(pipe, cfg, sa25, 1, &domains, seed).unwrap();
            let (p1, _, _) = fine_tune_flip(pipe, cfg, &out.policy, 1, seed).unwrap();
            let (p2, _, _) = fine_tune_flip(pipe, cfg, &out.policy, 2, seed).unwrap();

            let eval_seed = 5_000_000 + seed * 1_000;
            let base_s = evaluate_flip(FlipController::Expert, pipe, cfg, &source, cfg.il.eval_episodes, eval_seed, None).unwrap();
            let base_t = evaluate_flip(FlipController::Expert, pipe, cfg, &tflip, cfg.il.eval_episodes, eval_seed, None).unwrap();
            let m1_s = evaluate_flip(FlipController::Policy(&p1), pipe, cfg, &source, cfg.il.eval_episodes, eval_seed, Some(&base_s)).unwrap();
            let m1_t = evaluate_flip(FlipController::Policy(&p1), pipe, cfg, &tflip, cfg.il.eval_episodes, eval_seed, Some(&base_t)).unwrap();
            let m2_s = evaluate_flip(FlipController::Policy(&p2), pipe, cfg, &source, cfg.il.eval_episodes, eval_seed, Some(&base_s)).unwrap();
            tuned_success.push((m1_s.success_rate, m1_t.success_rate));
            gap_ft.push((m1_s.expert_gap.unwrap_or(f64::INFINITY), m2_s.expert_gap.unwrap_or(f64::INFINITY)));

            let dr_out = run_il_flip(pipe, cfg, dr, 50, &[tflip.clone()], seed).unwrap();
            dr_final.push(final_success(&dr_out.curve, "T_flip").unwrap());
        }
        FlipResults {
            sa25_rows_per_step: sa25_rows.len() as f64 / n_steps,
            sparse_rows_per_step: sparse_rows.len() as f64 / n_steps,
            tuned_success,
            gap_ft,
            dr_final,
        }
    })
}

// ---------------------------------------------------------------------------
// Small models used by the solver-level oracles.
// ---------------------------------------------------------------------------

/// Double integrator ẋ = (v, u); the standard sandbox for OCP-level checks.
struct DoubleIntegrator;

impl ShootingModel for DoubleIntegrator {
    fn nx(&self) -> usize {
        2
    }
    fn nu(&self) -> usize {
        1
    }
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[1], u[0]])
    }
    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        )
    }
}

fn di_solver(n: usize, u_bound: f64, p_term: Option<DMatrix<f64>>) -> NmpcSolver<DoubleIntegrator> {
    let mut tr = OcpTranscription::new(
        n,
        2,
        1,
        0.1,
        1.0,
        DVector::from_vec(vec![1.0, 0.5]),
        DVector::from_vec(vec![0.1]),
        DVector::from_element(1, -u_bound),
        DVector::from_element(1, u_bound),
    );
    tr.lm_reg = 0.0;
    tr.p_term = p_term;
    let mut solver = NmpcSolver::new(DoubleIntegrator, tr, Integrator::Rk4, 1e-9, 30, 8000);
    solver.init_from_reference();
    solver
}

// ---------------------------------------------------------------------------
// Criteria.
// ---------------------------------------------------------------------------

/// Enumerates active sets of one-sided constraints and returns the best
/// KKT-consistent minimizer — an independent reference for the QP solver.
fn active_set_oracle(p: &DMatrix<f64>, q: &DVector<f64>, a: &DMatrix<f64>, u: &DVector<f64>) -> DVector<f64> {
    let m = a.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let a_act = DMatrix::from_fn(rows.len(), a.ncols(), |r, c| a[(rows[r], c)]);
        let b_act = DVector::from_fn(rows.len(), |r, _| u[rows[r]]);
        let Ok((x, lam)) = solve_kkt_equality(p, &a_act, q, &b_act) else { continue };
        let ax = a * &x;
        let feasible = (0..m).all(|i| ax[i] <= u[i] + 1e-9);
        let dual_ok = lam.iter().all(|&v| v >= -1e-9);
        if feasible && dual_ok {
            let obj = 0.5 * x.dot(&(p * &x)) + q.dot(&x);
            if best.as_ref().map_or(true, |(b, _)| obj < *b) {
                best = Some((obj, x));
            }
        }
    }
    best.expect("oracle found no KKT point").1
}

#[test]
fn c01_qp_solver_matches_brute_force_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_260_825);
    let mut solver = QpSolver::new(QpSettings::default());
    let mut worst_x = 0.0f64;
    let mut worst_kkt = 0.0f64;
    for case in 0..50 {
        let n = rng.gen_range(2..=8);
        let m = rng.gen_range(1..=12);
        let msqrt = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let p = &msqrt.transpose() * &msqrt + DMatrix::identity(n, n);
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0f64));
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let u = DVector::from_fn(m, |_, _| rng.gen_range(0.1..1.0f64));
        let prob = QpProblem {
            p: SparseMatrix::from_dense(&p),
            q: q.clone(),
            a: SparseMatrix::from_dense(&a),
            l: DVector::from_element(m, f64::NEG_INFINITY),
            u: u.clone(),
        };
        solver.clear_warm_start();
        let sol = solver.solve(&prob).unwrap();
        assert_eq!(sol.status, QpStatus::Solved, "case {case} not solved");
        let x_ref = active_set_oracle(&p, &q, &a, &u);
        worst_x = worst_x.max((&sol.x - &x_ref).amax());
        worst_kkt = worst_kkt.max(sol.primal_res.max(sol.dual_res));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = worst_x < 1e-6 && worst_kkt <= 1e-8 && elapsed < 10.0;
    verdict(
        1,
        pass,
        &format!("50 random QPs vs active-set oracle: worst |x−x*| {worst_x:.2e}, worst KKT residual {worst_kkt:.2e}, {elapsed:.1} s"),
    );
}

#[test]
fn c02_riccati_golden_ratio_and_stable_closed_loop() {
    let t0 = Instant::now();
    // Scalar A=B=Q=R=1: value iteration converges to the golden ratio.
    let one = DMatrix::from_element(1, 1, 1.0);
    let (_, p_sol) = solve_lqr(&one, &one, &one, &one).unwrap();
    let mut p_vi = 1.0f64;
    for _ in 0..200 {
        p_vi = 1.0 + p_vi - p_vi * p_vi / (1.0 + p_vi);
    }
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    let scalar_err = (p_sol[(0, 0)] - golden).abs().max((p_sol[(0, 0)] - p_vi).abs());

    // 8-dim tracking model: closed loop is Schur stable.
    let params = MultirotorParams::defaults();
    let taus = (identify_tilt_tau(&params, false), identify_tilt_tau(&params, true));
    let model = build_linear_model(&params, taus.0, taus.1, config().linear.dt);
    let lc = &config().linear;
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![
        lc.q_pos, lc.q_pos, lc.q_pos, lc.q_vel, lc.q_vel, lc.q_vel, lc.q_tilt, lc.q_tilt,
    ]));
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![lc.r_thrust, lc.r_tilt, lc.r_tilt]));
    let (k, _) = solve_lqr(&model.a, &model.b, &q, &r).unwrap();
    let a_cl = &model.a + &model.b * &k;
    let rho = a_cl.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0f64, f64::max);

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = scalar_err < 1e-10 && rho < 1.0 && elapsed < 1.0;
    verdict(
        2,
        pass,
        &format!("scalar Riccati vs value iteration/golden ratio err {scalar_err:.2e}, ρ(A+BK) = {rho:.4}, {elapsed:.2} s"),
    );
}

#[test]
fn c03_gradient_and_sensitivity_oracles() {
    let t0 = Instant::now();

    // (a) MLP gradients vs central finite differences.
    let mut policy = MlpPolicy::new(&[5, 8, 4, 2], 9);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs: Vec<DVector<f64>> =
        (0..6).map(|_| DVector::from_fn(5, |_, _| rng.gen_range(-1.0..1.0))).collect();
    let targets: Vec<DVector<f64>> =
        (0..6).map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0))).collect();
    let xin: Vec<&DVector<f64>> = inputs.iter().collect();
    let tgt: Vec<&DVector<f64>> = targets.iter().collect();
    let (_, grads) = mse_loss_and_grad(&policy, &xin, &tgt);
    let h = 1e-6;
    let mut mlp_err = 0.0f64;
    for l in 0..policy.weights.len() {
        for idx in 0..policy.weights[l].len() {
            let orig = policy.weights[l][idx];
            policy.weights[l][idx] = orig + h;
            let (lp, _) = mse_loss_and_grad(&policy, &xin, &tgt);
            policy.weights[l][idx] = orig - h;
            let (lm, _) = mse_loss_and_grad(&policy, &xin, &tgt);
            policy.weights[l][idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let g = grads.dw[l][idx];
            mlp_err = mlp_err.max((fd - g).abs() / g.abs().max(1.0));
        }
        for idx in 0..policy.biases[l].len() {
            let orig = policy.biases[l][idx];
            policy.biases[l][idx] = orig + h;
            let (lp, _) = mse_loss_and_grad(&policy, &xin, &tgt);
            policy.biases[l][idx] = orig - h;
            let (lm, _) = mse_loss_and_grad(&policy, &xin, &tgt);
            policy.biases[l][idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let g = grads.db[l][idx];
            mlp_err = mlp_err.max((fd - g).abs() / g.abs().max(1.0));
        }
    }

    // (b) Sensitivity gain equals the stationary LQR gain on an unconstrained
    // LQ instance whose terminal weight is the Riccati fixed point.
    let x0 = DVector::zeros(2);
    let (_, a, b) = integrate_stage(&DoubleIntegrator, Integrator::Rk4, &x0, &DVector::zeros(1), 0.1).unwrap();
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5]));
    let r = DMatrix::from_element(1, 1, 0.1);
    let (k_lqr, p_term) = solve_lqr(&a, &b, &q, &r).unwrap();
    let mut solver = di_solver(8, 1e6, Some(p_term));
    let x_t = DVector::from_vec(vec![0.4, -0.2]);
    let sol = solver.solve(&x_t, SqpMode::FullSqp).unwrap();
    assert_eq!(sol.status, SqpStatus::Converged);
    let gain = sensitivity_gain(&solver, &sol, 1e-6).unwrap();
    let lqr_err = (&gain.k - &k_lqr).amax();

    // (c) Sensitivity gain vs finite-difference SQP re-solves at an interior
    // point of a constrained instance.
    let solve_u0 = |x_t: &DVector<f64>| -> DVector<f64> {
        let mut s = di_solver(8, 0.5, None);
        let sol = s.solve(x_t, SqpMode::FullSqp).unwrap();
        assert_eq!(sol.status, SqpStatus::Converged);
        s.input_stage(0)
    };
    let x_i = DVector::from_vec(vec![0.05, -0.02]);
    let mut s = di_solver(8, 0.5, None);
    let sol = s.solve(&x_i, SqpMode::FullSqp).unwrap();
    let gain = sensitivity_gain(&s, &sol, 1e-6).unwrap();
    let hfd = 1e-5;
    let mut fd = DMatrix::zeros(1, 2);
    for j in 0..2 {
        let mut xp = x_i.clone();
        xp[j] += hfd;
        let mut xm = x_i.clone();
        xm[j] -= hfd;
        fd.set_column(j, &((solve_u0(&xp) - solve_u0(&xm)) / (2.0 * hfd)));
    }
    let sens_err = (&gain.k - &fd).amax() / gain.k.amax().max(1.0);

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = mlp_err <= 1e-5 && lqr_err < 1e-8 && sens_err <= 1e-3 && elapsed < 120.0;
    verdict(
        3,
        pass,
        &format!("MLP grad vs FD {mlp_err:.2e}, sensitivity vs LQR {lqr_err:.2e}, sensitivity vs FD re-solves {sens_err:.2e}, {elapsed:.1} s"),
    );
}

#[test]
fn c04_tube_containment_both_pipelines() {
    let cfg = config();
    let n_eps = 200usize;

    // Tracking pipeline: closed-loop expert episodes under constant
    // disturbances drawn from the design set. The pipelines (and their
    // Monte-Carlo tube estimates) are shared fixtures; the runtime budget
    // covers the containment check itself.
    let pipe = lin_pipe();
    let fpipe = flip_pipe();
    let t0 = Instant::now();
    let mg = pipe.params.hover_thrust();
    let w_lin = DomainSpec {
        name: "W".into(),
        dist: DisturbanceSet { f_min: 0.0, f_max: cfg.linear.tube.w_max_frac * mg },
        drag_scale: 1.0,
    };
    let mut lin_ok = 0usize;
    for ep in 0..n_eps {
        let out = run_linear_episode(
            &pipe.rt,
            &pipe.params,
            true,
            None,
            1.0,
            &pipe.track,
            &w_lin,
            pipe.track.len_steps(),
            cfg.il.init_ball,
            900_000 + ep as u64,
        )
        .unwrap();
        let contained = !out.demo.steps.is_empty()
            && out.demo.steps.iter().all(|s| pipe.rt.tube.contains(&(&s.state - &s.x_bar0), 1e-9));
        if contained && out.demo.success {
            lin_ok += 1;
        }
    }

    // Maneuver pipeline: ancillary-NMPC tracking of the safe plan.
    let dist = DisturbanceSet { f_min: 0.0, f_max: cfg.nmpc.tube.w_max_frac * mg };
    let mut flip_ok = 0usize;
    for ep in 0..n_eps {
        let mut rng = ChaCha8Rng::seed_from_u64(800_000 + ep as u64);
        let f = dist.sample(&mut rng);
        let roll = simulate_flip_tracking(
            &fpipe.params,
            &fpipe.plan,
            &cfg.nmpc,
            &f,
            cfg.nmpc.tube.horizon_steps,
            &RobotState::hover_at(Vector3::zeros()),
        )
        .unwrap();
        if roll.state_dev.iter().all(|d| fpipe.tube.contains(d, 1e-9)) {
            flip_ok += 1;
        }
    }

    let lin_rate = 100.0 * lin_ok as f64 / n_eps as f64;
    let flip_rate = 100.0 * flip_ok as f64 / n_eps as f64;
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = lin_rate >= 99.0 && flip_rate >= 99.0 && elapsed < 600.0;
    verdict(
        4,
        pass,
        &format!("containment over {n_eps} episodes: tracking {lin_rate:.1}%, maneuver {flip_rate:.1}%, {elapsed:.0} s"),
    );
}

#[test]
fn c05_demonstration_efficiency_trend() {
    let t0 = Instant::now();
    let cells = tracking_cells();
    let sa_first = first_mean_full(cells, "dagger+sa-sparse", "T1", 20);
    let bc_sa_first = first_mean_full(cells, "bc+sa-sparse", "T1", 3);
    let bc_at_10 = mean_success(cells, "bc", "T1", 10);
    let dr_first = first_mean_full(cells, "dagger+dr", "T1", 15);

    // SA methods: full success within ≤ 2 demonstrations (±1 tolerated).
    let sa_ok = sa_first.is_some_and(|d| d <= 3);
    let bc_sa_ok = bc_sa_first.is_some_and(|d| d <= 3);
    // Plain behavior cloning stays below 50% after 10 demonstrations.
    let bc_ok = bc_at_10 < 50.0;
    // Domain randomization needs at least 3× the SA demo count; a run that
    // never reaches full success within its budget satisfies this a fortiori.
    let dr_ok = match (sa_first, dr_first) {
        (Some(s), Some(d)) => d >= 3 * s,
        (Some(_), None) => true,
        _ => false,
    };

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = sa_ok && bc_sa_ok && bc_ok && dr_ok && elapsed < 3600.0;
    verdict(
        5,
        pass,
        &format!(
            "first full success in T1 (seed-avg): dagger+sa-sparse {sa_first:?}, bc+sa-sparse {bc_sa_first:?}, dagger+dr {dr_first:?}; bc at 10 demos {bc_at_10:.0}%, {elapsed:.0} s"
        ),
    );
}

#[test]
fn c06_expert_gap_at_convergence() {
    let cells = tracking_cells();
    let gaps: Vec<f64> = cells
        .iter()
        .filter(|c| c.method == "dagger+sa-sparse")
        .filter_map(|c| gap_in_window(&c.curve, "T1", 20, 30))
        .collect();
    assert!(!gaps.is_empty(), "no gap points in the 20–30 demo window");
    let gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let pass = gap <= 10.0;
    verdict(6, pass, &format!("dagger+sa-sparse expert gap in T1 at 20–30 demos: {gap:.2}% (limit 10%)"));
}

#[test]
fn c07_maneuver_trend_and_augmentation_audit() {
    let t0 = Instant::now();
    let r = flip_results();
    let tuned_ok = r.tuned_success.iter().all(|&(s, t)| s >= 100.0 - 1e-9 && t >= 100.0 - 1e-9);
    let dr_mean = r.dr_final.iter().sum::<f64>() / r.dr_final.len() as f64;
    let dr_ok = dr_mean < 100.0;
    let audit_ok = (r.sparse_rows_per_step - 18.0).abs() < 1e-9 && (r.sa25_rows_per_step - 25.0).abs() < 1e-9;
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = tuned_ok && dr_ok && audit_ok && elapsed < 7200.0;
    verdict(
        7,
        pass,
        &format!(
            "dagger+sa-25 after 1 demo + 1 fine-tune (S, T_flip) per seed: {:?}; dagger+dr in T_flip at 50 demos {dr_mean:.0}%; augmentation rows/step sparse {:.1}, sa-25 {:.1}; {elapsed:.0} s",
            r.tuned_success, r.sparse_rows_per_step, r.sa25_rows_per_step
        ),
    );
}

#[test]
fn c08_fine_tuning_monotone_gap() {
    let r = flip_results();
    let g1 = r.gap_ft.iter().map(|g| g.0).sum::<f64>() / r.gap_ft.len() as f64;
    let g2 = r.gap_ft.iter().map(|g| g.1).sum::<f64>() / r.gap_ft.len() as f64;
    let pass = g2 < g1;
    verdict(8, pass, &format!("expert gap in S after fine-tune demos 1 → 2: {g1:.2}% → {g2:.2}%"));
}

#[test]
fn c09_policy_latency_floor() {
    let cfg = config();
    let pipe = lin_pipe();
    let fpipe = flip_pipe();
    let t0 = Instant::now();
    // Untrained policies of the configured architectures: latency does not
    // depend on the weights.
    let feat = featurize_linear(&DVector::zeros(8), &pipe.track.window(0, pipe.rt.horizon)).unwrap().len();
    let mut dims = vec![feat];
    dims.extend_from_slice(&cfg.train.hidden_linear);
    dims.push(3);
    let lin_policy = MlpPolicy::new(&dims, cfg.train.seed);
    let lin = timing_report_linear(pipe, &lin_policy, 100).unwrap();

    let mut fdims = vec![14];
    fdims.extend_from_slice(&cfg.train.hidden_flip);
    fdims.push(4);
    let flip_policy = MlpPolicy::new(&fdims, cfg.train.seed);
    let flip = timing_report_flip(fpipe, cfg, &flip_policy, 100).unwrap();

    let elapsed = t0.elapsed().as_secs_f64();
    let pass = lin.speedup >= 10.0 && flip.speedup >= 10.0 && elapsed < 60.0;
    verdict(
        9,
        pass,
        &format!(
            "policy vs expert latency: tracking {:.1}× ({:.0} µs vs {:.0} µs), maneuver {:.1}× ({:.0} µs vs {:.0} µs), {elapsed:.0} s",
            lin.speedup, lin.policy.mean_us, lin.expert.mean_us, flip.speedup, flip.policy.mean_us, flip.expert.mean_us
        ),
    );
}

#[test]
fn c10_seeded_rerun_is_bitwise_reproducible() {
    let cfg = config();
    let pipe = lin_pipe();
    let mg = pipe.params.hover_thrust();
    let domains = vec![DomainSpec::source(), DomainSpec::t1(&cfg.il, mg)];
    let spec = MethodSpec::parse("bc").unwrap();
    let a = run_il_linear(pipe, cfg, spec, 2, &domains, 7).unwrap();
    let b = run_il_linear(pipe, cfg, spec, 2, &domains, 7).unwrap();
    let mut pass = a.curve.len() == b.curve.len() && !a.curve.is_empty();
    if pass {
        for (x, y) in a.curve.iter().zip(&b.curve) {
            pass &= x.demo_idx == y.demo_idx
                && x.domain == y.domain
                && x.success_rate.to_bits() == y.success_rate.to_bits()
                && x.stage_cost.to_bits() == y.stage_cost.to_bits()
                && x.expert_gap.map(f64::to_bits) == y.expert_gap.map(f64::to_bits);
        }
    }
    // The trained policies themselves must also coincide.
    pass &= a.policy == b.policy;
    // Dataset row counts by provenance agree.
    pass &= a.dataset.count(Provenance::Demo) == b.dataset.count(Provenance::Demo);
    verdict(10, pass, &format!("identical seeded rerun: {} curve points bitwise equal, policies identical", a.curve.len()));
}
