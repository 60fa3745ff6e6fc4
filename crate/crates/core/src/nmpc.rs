//! Nonlinear tube MPC: multiple-shooting transcription, Gauss-Newton SQP
//! (full and real-time-iteration modes), the fixed-final-time planar flip
//! planner, the ancillary rate/thrust NMPC, and parametric-sensitivity
//! action predictors used for data augmentation.

use crate::attitude_math::{
    half_xi_matrix, mrp_error, omega_matrix, quat_conj, quat_from_axis_angle, quat_mul, quat_normalize, quat_to_rot,
    skew,
};
use crate::config::{FlipConfig, NmpcConfig};
use crate::qp::{EqualityKkt, QpError, QpProblem, QpSettings, QpSolution, QpSolver, QpStatus, SparseMatrix};
use crate::sets::{AxisBox, SetError};
use crate::sim::{
    CommandInput, DisturbanceSet, MultirotorParams, RobotState, SimError, Simulator, ATT_DECIMATION, SIM_DT,
};
use nalgebra::{DMatrix, DVector, Matrix3x4, Matrix4, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NmpcError {
    #[error("qp failure: {0}")]
    Qp(#[from] QpError),
    #[error("simulation failure: {0}")]
    Sim(#[from] SimError),
    #[error("set failure: {0}")]
    Set(#[from] SetError),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("singular KKT system in sensitivity extraction")]
    SingularKkt,
    #[error("weak complementarity: an active constraint has a near-zero multiplier")]
    WeakComplementarity,
    #[error("implicit integrator Newton iteration diverged")]
    NewtonDivergence,
    #[error("non-finite value encountered")]
    NonFinite,
}

// ---------------------------------------------------------------------------
// Shooting models.
// ---------------------------------------------------------------------------

/// Continuous-time model used inside the multiple-shooting transcription.
pub trait ShootingModel: Sync {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// Continuous-time Jacobians (∂ẋ/∂x, ∂ẋ/∂u).
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
    /// Start index of a unit-quaternion block within the state, if any.
    fn quat_index(&self) -> Option<usize> {
        None
    }
}

/// Reduced rate/thrust quadrotor model: state [p, v, q] (10), input
/// [t_cmd, ω_cmd] (4). The attitude kinematics integrate the commanded body
/// rate directly; the inner attitude loop is assumed fast.
pub struct ReducedQuadModel {
    pub params: MultirotorParams,
}

impl ReducedQuadModel {
    fn drag_accel(&self, v: &Vector3<f64>) -> Vector3<f64> {
        (-self.params.c_d1 * v - self.params.c_d2 * v.norm() * v) / self.params.mass
    }

    fn drag_jacobian(&self, v: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
        let n = v.norm();
        let mut j = nalgebra::Matrix3::identity() * (-self.params.c_d1);
        if n > 1e-12 {
            j += -self.params.c_d2 * (n * nalgebra::Matrix3::identity() + v * v.transpose() / n);
        }
        j / self.params.mass
    }
}

impl ShootingModel for ReducedQuadModel {
    fn nx(&self) -> usize {
        10
    }

    fn nu(&self) -> usize {
        4
    }

    fn quat_index(&self) -> Option<usize> {
        Some(6)
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let v = Vector3::new(x[3], x[4], x[5]);
        let q = Vector4::new(x[6], x[7], x[8], x[9]);
        let thrust = u[0];
        let omega = Vector3::new(u[1], u[2], u[3]);
        let body_z = quat_to_rot(&q) * Vector3::z();
        let acc = body_z * (thrust / self.params.mass) + self.drag_accel(&v)
            - Vector3::new(0.0, 0.0, self.params.gravity);
        let qdot = 0.5 * omega_matrix(&omega) * q;
        let mut dx = DVector::zeros(10);
        dx.rows_mut(0, 3).copy_from(&v);
        dx.rows_mut(3, 3).copy_from(&acc);
        dx.rows_mut(6, 4).copy_from(&qdot);
        dx
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let v = Vector3::new(x[3], x[4], x[5]);
        let q = Vector4::new(x[6], x[7], x[8], x[9]);
        let (w, qx, qy, qz) = (q[0], q[1], q[2], q[3]);
        let thrust = u[0];
        let omega = Vector3::new(u[1], u[2], u[3]);
        let mut a = DMatrix::zeros(10, 10);
        a.view_mut((0, 3), (3, 3)).fill_with_identity();
        a.view_mut((3, 3), (3, 3)).copy_from(&self.drag_jacobian(&v));
        // ∂(R(q)e₃)/∂q for the normalized-form rotation matrix.
        let d_bodyz = Matrix3x4::new(
            2.0 * qy, 2.0 * qz, 2.0 * w, 2.0 * qx, //
            -2.0 * qx, -2.0 * w, 2.0 * qz, 2.0 * qy, //
            0.0, -4.0 * qx, -4.0 * qy, 0.0,
        );
        a.view_mut((3, 6), (3, 4)).copy_from(&(d_bodyz * (thrust / self.params.mass)));
        a.view_mut((6, 6), (4, 4)).copy_from(&(0.5 * omega_matrix(&omega)));

        let mut b = DMatrix::zeros(10, 4);
        let body_z = quat_to_rot(&q) * Vector3::z();
        b.view_mut((3, 0), (3, 1)).copy_from(&(body_z / self.params.mass));
        b.view_mut((6, 1), (4, 3)).copy_from(&half_xi_matrix(&q));
        (a, b)
    }
}

/// Planar flip planner model on the extended state
/// [p_y, p_z, v_y, v_z, φ, ω_x, f₁..f₄] (10) with per-propeller thrust rates
/// as inputs (4). The roll angle φ is kept unrolled so a full revolution is
/// distinguishable from no rotation.
pub struct PlanarFlipModel {
    pub params: MultirotorParams,
}

impl ShootingModel for PlanarFlipModel {
    fn nx(&self) -> usize {
        10
    }

    fn nu(&self) -> usize {
        4
    }

    fn dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let (vy, vz, phi, wx) = (x[2], x[3], x[4], x[5]);
        let thrust: f64 = x.rows(6, 4).sum();
        let vn = (vy * vy + vz * vz).sqrt();
        let mut dx = DVector::zeros(10);
        dx[0] = vy;
        dx[1] = vz;
        dx[2] = (-thrust * phi.sin() - p.c_d1 * vy - p.c_d2 * vn * vy) / p.mass;
        dx[3] = (thrust * phi.cos() - p.c_d1 * vz - p.c_d2 * vn * vz) / p.mass - p.gravity;
        dx[4] = wx;
        dx[5] = p.arm * (x[7] - x[9]) / p.inertia.x;
        dx.rows_mut(6, 4).copy_from(&u.rows(0, 4));
        dx
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let _ = u;
        let p = &self.params;
        let (vy, vz, phi) = (x[2], x[3], x[4]);
        let thrust: f64 = x.rows(6, 4).sum();
        let vn = (vy * vy + vz * vz).sqrt();
        let mut a = DMatrix::zeros(10, 10);
        a[(0, 2)] = 1.0;
        a[(1, 3)] = 1.0;
        let (dvn_dy, dvn_dz) = if vn > 1e-12 { (vy / vn, vz / vn) } else { (0.0, 0.0) };
        a[(2, 2)] = (-p.c_d1 - p.c_d2 * (vn + dvn_dy * vy)) / p.mass;
        a[(2, 3)] = -p.c_d2 * dvn_dz * vy / p.mass;
        a[(3, 2)] = -p.c_d2 * dvn_dy * vz / p.mass;
        a[(3, 3)] = (-p.c_d1 - p.c_d2 * (vn + dvn_dz * vz)) / p.mass;
        a[(2, 4)] = -thrust * phi.cos() / p.mass;
        a[(3, 4)] = -thrust * phi.sin() / p.mass;
        for j in 6..10 {
            a[(2, j)] = -phi.sin() / p.mass;
            a[(3, j)] = phi.cos() / p.mass;
        }
        a[(4, 5)] = 1.0;
        a[(5, 7)] = p.arm / p.inertia.x;
        a[(5, 9)] = -p.arm / p.inertia.x;
        let mut b = DMatrix::zeros(10, 4);
        b.view_mut((6, 0), (4, 4)).fill_with_identity();
        (a, b)
    }
}

// ---------------------------------------------------------------------------
// Stage integration with sensitivities.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Rk4,
    /// Two-stage Gauss-Legendre (order 4), Newton inner solve.
    GaussLegendre4,
}

/// One integration step with discrete-time Jacobians (∂x⁺/∂x, ∂x⁺/∂u).
/// Quaternion blocks are renormalized with the renormalization folded into
/// the Jacobians.
pub fn integrate_stage<M: ShootingModel>(
    model: &M,
    integrator: Integrator,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), NmpcError> {
    let (mut xp, mut a, mut b) = match integrator {
        Integrator::Rk4 => rk4_with_sensitivities(model, x, u, dt),
        Integrator::GaussLegendre4 => gl4_with_sensitivities(model, x, u, dt)?,
    };
    if let Some(qi) = model.quat_index() {
        let q = Vector4::new(xp[qi], xp[qi + 1], xp[qi + 2], xp[qi + 3]);
        let n = q.norm();
        let qn = q / n;
        // d(q/‖q‖)/dq = (I − q̂q̂ᵀ)/‖q‖.
        let jn = (Matrix4::identity() - qn * qn.transpose()) / n;
        let a_rows = jn * a.rows(qi, 4).clone_owned();
        a.rows_mut(qi, 4).copy_from(&a_rows);
        let b_rows = jn * b.rows(qi, 4).clone_owned();
        b.rows_mut(qi, 4).copy_from(&b_rows);
        for k in 0..4 {
            xp[qi + k] = qn[k];
        }
    }
    if !xp.iter().all(|v| v.is_finite()) {
        return Err(NmpcError::NonFinite);
    }
    Ok((xp, a, b))
}

fn rk4_with_sensitivities<M: ShootingModel>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let nx = model.nx();
    let eye = DMatrix::<f64>::identity(nx, nx);
    let k1 = model.dynamics(x, u);
    let (j1x, j1u) = model.jacobians(x, u);
    let dk1_dx = j1x.clone();
    let dk1_du = j1u;

    let x2 = x + &k1 * (dt / 2.0);
    let k2 = model.dynamics(&x2, u);
    let (j2x, j2u) = model.jacobians(&x2, u);
    let dk2_dx = &j2x * (&eye + &dk1_dx * (dt / 2.0));
    let dk2_du = &j2x * (&dk1_du * (dt / 2.0)) + j2u;

    let x3 = x + &k2 * (dt / 2.0);
    let k3 = model.dynamics(&x3, u);
    let (j3x, j3u) = model.jacobians(&x3, u);
    let dk3_dx = &j3x * (&eye + &dk2_dx * (dt / 2.0));
    let dk3_du = &j3x * (&dk2_du * (dt / 2.0)) + j3u;

    let x4 = x + &k3 * dt;
    let k4 = model.dynamics(&x4, u);
    let (j4x, j4u) = model.jacobians(&x4, u);
    let dk4_dx = &j4x * (&eye + &dk3_dx * dt);
    let dk4_du = &j4x * (&dk3_du * dt) + j4u;

    let xp = x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (dt / 6.0);
    let a = &eye + (dk1_dx + 2.0 * dk2_dx + 2.0 * dk3_dx + dk4_dx) * (dt / 6.0);
    let b = (dk1_du + 2.0 * dk2_du + 2.0 * dk3_du + dk4_du) * (dt / 6.0);
    (xp, a, b)
}

fn gl4_with_sensitivities<M: ShootingModel>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>), NmpcError> {
    let nx = model.nx();
    let s3 = 3f64.sqrt();
    let a_tab = [[0.25, 0.25 - s3 / 6.0], [0.25 + s3 / 6.0, 0.25]];
    // Stage slopes k₁, k₂ via Newton on r_i = k_i − f(x + dt Σ a_ij k_j, u).
    let f0 = model.dynamics(x, u);
    let mut k = [f0.clone(), f0];
    for _ in 0..50 {
        let xs: Vec<DVector<f64>> =
            (0..2).map(|i| x + (&k[0] * a_tab[i][0] + &k[1] * a_tab[i][1]) * dt).collect();
        let r0 = &k[0] - model.dynamics(&xs[0], u);
        let r1 = &k[1] - model.dynamics(&xs[1], u);
        let res = r0.amax().max(r1.amax());
        if res < 1e-13 {
            break;
        }
        if !res.is_finite() {
            return Err(NmpcError::NewtonDivergence);
        }
        let (j0, _) = model.jacobians(&xs[0], u);
        let (j1, _) = model.jacobians(&xs[1], u);
        let mut jac = DMatrix::zeros(2 * nx, 2 * nx);
        for (i, ji) in [&j0, &j1].into_iter().enumerate() {
            for j in 0..2 {
                let mut block = -ji * (dt * a_tab[i][j]);
                if i == j {
                    block += DMatrix::identity(nx, nx);
                }
                jac.view_mut((i * nx, j * nx), (nx, nx)).copy_from(&block);
            }
        }
        let mut rhs = DVector::zeros(2 * nx);
        rhs.rows_mut(0, nx).copy_from(&r0);
        rhs.rows_mut(nx, nx).copy_from(&r1);
        let delta = jac.lu().solve(&rhs).ok_or(NmpcError::NewtonDivergence)?;
        for i in 0..nx {
            k[0][i] -= delta[i];
            k[1][i] -= delta[nx + i];
        }
    }
    let xs: Vec<DVector<f64>> = (0..2).map(|i| x + (&k[0] * a_tab[i][0] + &k[1] * a_tab[i][1]) * dt).collect();
    let r_final = (&k[0] - model.dynamics(&xs[0], u)).amax().max((&k[1] - model.dynamics(&xs[1], u)).amax());
    if r_final > 1e-9 {
        return Err(NmpcError::NewtonDivergence);
    }
    let xp = x + (&k[0] + &k[1]) * (dt / 2.0);

    // Implicit differentiation: (∂R/∂K)·dK/d(x,u) = −∂R/∂(x,u).
    let (j0, b0) = model.jacobians(&xs[0], u);
    let (j1, b1) = model.jacobians(&xs[1], u);
    let nu = model.nu();
    let mut drdk = DMatrix::zeros(2 * nx, 2 * nx);
    for (i, ji) in [&j0, &j1].into_iter().enumerate() {
        for j in 0..2 {
            let mut block = -ji * (dt * a_tab[i][j]);
            if i == j {
                block += DMatrix::identity(nx, nx);
            }
            drdk.view_mut((i * nx, j * nx), (nx, nx)).copy_from(&block);
        }
    }
    let lu = drdk.lu();
    let mut drdx = DMatrix::zeros(2 * nx, nx);
    drdx.view_mut((0, 0), (nx, nx)).copy_from(&j0);
    drdx.view_mut((nx, 0), (nx, nx)).copy_from(&j1);
    let dkdx = lu.solve(&drdx).ok_or(NmpcError::NewtonDivergence)?;
    let mut drdu = DMatrix::zeros(2 * nx, nu);
    drdu.view_mut((0, 0), (nx, nu)).copy_from(&b0);
    drdu.view_mut((nx, 0), (nx, nu)).copy_from(&b1);
    let dkdu = lu.solve(&drdu).ok_or(NmpcError::NewtonDivergence)?;
    let a = DMatrix::identity(nx, nx)
        + (dkdx.rows(0, nx).clone_owned() + dkdx.rows(nx, nx).clone_owned()) * (dt / 2.0);
    let b = (dkdu.rows(0, nx).clone_owned() + dkdu.rows(nx, nx).clone_owned()) * (dt / 2.0);
    Ok((xp, a, b))
}

// ---------------------------------------------------------------------------
// Quaternion-cost helpers.
// ---------------------------------------------------------------------------

/// Matrix form of right quaternion multiplication: quat_mul(a, b) = Rr(b)·a.
fn quat_right_mul(b: &Vector4<f64>) -> Matrix4<f64> {
    let (w, v) = (b[0], Vector3::new(b[1], b[2], b[3]));
    let mut m = Matrix4::zeros();
    m[(0, 0)] = w;
    m.view_mut((0, 1), (1, 3)).copy_from(&(-v.transpose()));
    m.view_mut((1, 0), (3, 1)).copy_from(&v);
    m.view_mut((1, 1), (3, 3)).copy_from(&(w * nalgebra::Matrix3::identity() - skew(&v)));
    m
}

/// Analytic Jacobian ∂ε/∂q of the MRP attitude error ε = MRP(q ⊙ q_ref⁻¹),
/// accounting for the shadow-set flip.
fn mrp_error_jacobian(q: &Vector4<f64>, q_ref: &Vector4<f64>) -> Matrix3x4<f64> {
    let rr = quat_right_mul(&quat_conj(q_ref));
    let mut qe = rr * q;
    let mut sign = 1.0;
    if qe[0] < 0.0 {
        qe = -qe;
        sign = -1.0;
    }
    let (w, v) = (qe[0], Vector3::new(qe[1], qe[2], qe[3]));
    let denom = 1.0 + w;
    let mut d = Matrix3x4::zeros();
    d.view_mut((0, 0), (3, 1)).copy_from(&(-v / (denom * denom)));
    d.view_mut((0, 1), (3, 3)).copy_from(&(nalgebra::Matrix3::identity() / denom));
    (d * sign) * rr
}

/// Maps a 9-dim error-coordinate perturbation [δp, δv, δε] at attitude q₀ to
/// a 10-dim plain-coordinate perturbation.
fn error_injection(q0: &Vector4<f64>) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(10, 9);
    e.view_mut((0, 0), (6, 6)).fill_with_identity();
    // dq/dε at ε=0 is [0; 2I] composed with right-multiplication by q₀.
    let rr = quat_right_mul(q0);
    let mut dq = nalgebra::Matrix4x3::zeros();
    dq.view_mut((1, 0), (3, 3)).copy_from(&(2.0 * nalgebra::Matrix3::identity()));
    e.view_mut((6, 6), (4, 3)).copy_from(&(rr * dq));
    e
}

/// 9-dim deviation [p−p_r, v−v_r, MRP(q ⊙ q_r⁻¹)] between two 10-dim
/// rate/thrust-model states.
/// Inverse of [`error_coords`]: maps a 9-dim deviation [δp, δv, ε] around a
/// reference 10-dim state back to plain coordinates, composing the MRP error
/// quaternion onto the reference attitude.
pub fn apply_error_coords(x_ref: &DVector<f64>, e: &DVector<f64>) -> DVector<f64> {
    assert_eq!(x_ref.len(), 10);
    assert_eq!(e.len(), 9);
    let mut x = x_ref.clone();
    for i in 0..6 {
        x[i] += e[i];
    }
    let s = Vector3::new(e[6], e[7], e[8]);
    let n2 = s.norm_squared();
    let dq = Vector4::new(1.0 - n2, 2.0 * s.x, 2.0 * s.y, 2.0 * s.z) / (1.0 + n2);
    let qr = Vector4::new(x_ref[6], x_ref[7], x_ref[8], x_ref[9]);
    let q = quat_mul(&dq, &qr);
    for i in 0..4 {
        x[6 + i] = q[i];
    }
    x
}

pub fn error_coords(x: &DVector<f64>, x_ref: &DVector<f64>) -> DVector<f64> {
    let mut e = DVector::zeros(9);
    for i in 0..6 {
        e[i] = x[i] - x_ref[i];
    }
    let q = Vector4::new(x[6], x[7], x[8], x[9]);
    let qr = Vector4::new(x_ref[6], x_ref[7], x_ref[8], x_ref[9]);
    let eps = mrp_error(&q, &qr);
    for i in 0..3 {
        e[6 + i] = eps[i];
    }
    e
}

// ---------------------------------------------------------------------------
// Transcription.
// ---------------------------------------------------------------------------

/// Multiple-shooting transcription: decision vector y = (x̄₀..x̄_N, ū₀..ū_{N−1}),
/// continuity and initial-state equalities, input bounds and optional
/// per-knot state boxes plus terminal equalities.
#[derive(Debug, Clone)]
pub struct OcpTranscription {
    pub n: usize,
    pub nx: usize,
    pub nu: usize,
    pub dt: f64,
    pub gamma: f64,
    /// Stage state weights (entries over a quaternion block must be zero
    /// when `att_weight` is used).
    pub q_diag: DVector<f64>,
    pub r_diag: DVector<f64>,
    /// Optional terminal weight matrix; when absent the terminal knot reuses
    /// the stage weights.
    pub p_term: Option<DMatrix<f64>>,
    /// (quaternion block start, weight) for an MRP-coordinate attitude cost.
    pub att_weight: Option<(usize, f64)>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub x_lo: Option<DVector<f64>>,
    pub x_hi: Option<DVector<f64>>,
    /// Terminal equality rows (state index, value).
    pub terminal_eq: Vec<(usize, f64)>,
    pub lm_reg: f64,
    /// Per-knot state-box rows, precomputed as (knot, state index).
    state_box_rows: Vec<(usize, usize)>,
}

impl OcpTranscription {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        nx: usize,
        nu: usize,
        dt: f64,
        gamma: f64,
        q_diag: DVector<f64>,
        r_diag: DVector<f64>,
        u_lo: DVector<f64>,
        u_hi: DVector<f64>,
    ) -> Self {
        assert!(n >= 1 && dt > 0.0);
        assert_eq!(q_diag.len(), nx);
        assert_eq!(r_diag.len(), nu);
        // The Gauss-Newton Hessian is PSD only when every weight is
        // nonnegative; enforce that at build time.
        assert!(q_diag.iter().all(|w| *w >= 0.0), "state weights must be nonnegative");
        assert!(r_diag.iter().all(|w| *w >= 0.0), "input weights must be nonnegative");
        Self {
            n,
            nx,
            nu,
            dt,
            gamma,
            q_diag,
            r_diag,
            p_term: None,
            att_weight: None,
            u_lo,
            u_hi,
            x_lo: None,
            x_hi: None,
            terminal_eq: Vec::new(),
            lm_reg: 1e-4,
            state_box_rows: Vec::new(),
        }
    }

    pub fn with_state_box(mut self, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        assert_eq!(lo.len(), self.nx);
        assert_eq!(hi.len(), self.nx);
        self.state_box_rows = (1..=self.n)
            .flat_map(|k| {
                (0..self.nx)
                    .filter(|&i| lo[i].is_finite() || hi[i].is_finite())
                    .map(move |i| (k, i))
            })
            .collect();
        self.x_lo = Some(lo);
        self.x_hi = Some(hi);
        self
    }

    pub fn with_attitude_cost(mut self, quat_start: usize, weight: f64) -> Self {
        assert!(weight >= 0.0);
        for i in quat_start..quat_start + 4 {
            assert_eq!(self.q_diag[i], 0.0, "quaternion coordinates must carry no direct weight");
        }
        self.att_weight = Some((quat_start, weight));
        self
    }

    /// Decision index of state knot i.
    pub fn xi(&self, i: usize) -> usize {
        debug_assert!(i <= self.n);
        i * self.nx
    }

    /// Decision index of input stage k.
    pub fn ui(&self, k: usize) -> usize {
        debug_assert!(k < self.n);
        (self.n + 1) * self.nx + k * self.nu
    }

    pub fn dim(&self) -> usize {
        (self.n + 1) * self.nx + self.n * self.nu
    }

    pub fn n_eq(&self) -> usize {
        (self.n + 1) * self.nx + self.terminal_eq.len()
    }

    fn n_rows(&self) -> usize {
        self.n_eq() + self.n * self.nu + self.state_box_rows.len()
    }
}

// ---------------------------------------------------------------------------
// SQP solver.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpMode {
    FullSqp,
    /// Single linearize+QP per call, shift-initialized.
    Rti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpStatus {
    Converged,
    MaxIter,
    SingleIteration,
}

#[derive(Debug, Clone)]
pub struct SqpSolution {
    pub y: DVector<f64>,
    /// Row multipliers of the last QP (equalities then bounds).
    pub duals: DVector<f64>,
    pub kkt_history: Vec<f64>,
    pub cost_history: Vec<f64>,
    pub status: SqpStatus,
    pub iterations: usize,
    pub qp_iterations: usize,
}

/// Frozen linearization of the OCP at an iterate, reused by the predictors
/// and the sensitivity extraction.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub qp: QpProblem,
    pub y_lin: DVector<f64>,
    pub grad: DVector<f64>,
    pub a_mats: Vec<DMatrix<f64>>,
    pub b_mats: Vec<DMatrix<f64>>,
}

pub struct NmpcSolver<M: ShootingModel> {
    pub model: M,
    pub tr: OcpTranscription,
    pub integrator: Integrator,
    pub y: DVector<f64>,
    pub x_ref: Vec<DVector<f64>>,
    pub u_ref: Vec<DVector<f64>>,
    pub tol: f64,
    pub max_sqp_iter: usize,
    qp: QpSolver,
    duals: Option<DVector<f64>>,
    last_lin: Option<Linearization>,
    primed: bool,
}

impl<M: ShootingModel> NmpcSolver<M> {
    pub fn new(model: M, tr: OcpTranscription, integrator: Integrator, tol: f64, max_sqp_iter: usize, max_qp_iter: usize) -> Self {
        assert_eq!(model.nx(), tr.nx);
        assert_eq!(model.nu(), tr.nu);
        let x_ref = vec![DVector::zeros(tr.nx); tr.n + 1];
        let u_ref = vec![DVector::zeros(tr.nu); tr.n];
        let y = DVector::zeros(tr.dim());
        // The configured QP iteration budget counts active-set-style
        // iterations; first-order ADMM sweeps are far cheaper, so scale the
        // internal cap accordingly.
        let settings = QpSettings { max_iter: max_qp_iter.saturating_mul(50), ..QpSettings::default() };
        Self {
            model,
            tr,
            integrator,
            y,
            x_ref,
            u_ref,
            tol,
            max_sqp_iter,
            qp: QpSolver::new(settings),
            duals: None,
            last_lin: None,
            primed: false,
        }
    }

    pub fn set_reference(&mut self, x_ref: Vec<DVector<f64>>, u_ref: Vec<DVector<f64>>) {
        assert_eq!(x_ref.len(), self.tr.n + 1);
        assert_eq!(u_ref.len(), self.tr.n);
        self.x_ref = x_ref;
        self.u_ref = u_ref;
    }

    pub fn init_from_reference(&mut self) {
        for i in 0..=self.tr.n {
            self.y.rows_mut(self.tr.xi(i), self.tr.nx).copy_from(&self.x_ref[i]);
        }
        for k in 0..self.tr.n {
            self.y.rows_mut(self.tr.ui(k), self.tr.nu).copy_from(&self.u_ref[k]);
        }
        self.duals = None;
        self.primed = true;
    }

    pub fn is_primed(&self) -> bool {
        self.primed
    }

    /// Shifts the decision vector one stage forward, duplicating the
    /// terminal knot and last input.
    pub fn shift_warm_start(&mut self) {
        let (n, nx, nu) = (self.tr.n, self.tr.nx, self.tr.nu);
        for i in 0..n {
            let next = self.y.rows(self.tr.xi(i + 1), nx).into_owned();
            self.y.rows_mut(self.tr.xi(i), nx).copy_from(&next);
        }
        for k in 0..n - 1 {
            let next = self.y.rows(self.tr.ui(k + 1), nu).into_owned();
            self.y.rows_mut(self.tr.ui(k), nu).copy_from(&next);
        }
    }

    pub fn state_knot(&self, i: usize) -> DVector<f64> {
        self.y.rows(self.tr.xi(i), self.tr.nx).into_owned()
    }

    pub fn input_stage(&self, k: usize) -> DVector<f64> {
        self.y.rows(self.tr.ui(k), self.tr.nu).into_owned()
    }

    pub fn last_linearization(&self) -> Option<&Linearization> {
        self.last_lin.as_ref()
    }

    fn stage_weight(&self, i: usize) -> f64 {
        self.tr.gamma.powi(i.min(self.tr.n) as i32)
    }

    /// Exact nonlinear cost at a candidate decision vector.
    pub fn cost(&self, y: &DVector<f64>) -> f64 {
        let tr = &self.tr;
        let mut c = 0.0;
        for i in 0..=tr.n {
            let w = self.stage_weight(i);
            let x = y.rows(tr.xi(i), tr.nx);
            let dx = &x - &self.x_ref[i];
            if i == tr.n {
                if let Some(p) = &tr.p_term {
                    c += w * dx.dot(&(p * &dx));
                    continue;
                }
            }
            for j in 0..tr.nx {
                c += w * tr.q_diag[j] * dx[j] * dx[j];
            }
            if let Some((qi, qw)) = tr.att_weight {
                let q = Vector4::new(x[qi], x[qi + 1], x[qi + 2], x[qi + 3]);
                let qr = &self.x_ref[i];
                let qr = Vector4::new(qr[qi], qr[qi + 1], qr[qi + 2], qr[qi + 3]);
                let eps = mrp_error(&quat_normalize(&q), &qr);
                c += w * qw * eps.norm_squared();
            }
        }
        for k in 0..tr.n {
            let w = self.stage_weight(k);
            let u = y.rows(tr.ui(k), tr.nu);
            let du = &u - &self.u_ref[k];
            for j in 0..tr.nu {
                c += w * tr.r_diag[j] * du[j] * du[j];
            }
        }
        c
    }

    /// Builds the Gauss-Newton QP in step coordinates Δy around the current
    /// iterate for the measured state x_t.
    pub fn linearize(&self, x_t: &DVector<f64>) -> Result<Linearization, NmpcError> {
        let tr = &self.tr;
        let (n, nx, nu) = (tr.n, tr.nx, tr.nu);
        let dim = tr.dim();
        let mut a_mats = Vec::with_capacity(n);
        let mut b_mats = Vec::with_capacity(n);
        let mut defects = Vec::with_capacity(n);
        for k in 0..n {
            let xk = self.y.rows(tr.xi(k), nx).into_owned();
            let uk = self.y.rows(tr.ui(k), nu).into_owned();
            let (xp, a, b) = integrate_stage(&self.model, self.integrator, &xk, &uk, tr.dt)?;
            defects.push(&xp - &self.y.rows(tr.xi(k + 1), nx));
            a_mats.push(a);
            b_mats.push(b);
        }

        // Cost gradient and Gauss-Newton Hessian.
        let mut grad = DVector::zeros(dim);
        let mut h_trips: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..=n {
            let w = self.stage_weight(i);
            let base = tr.xi(i);
            let x = self.y.rows(base, nx).into_owned();
            let dx = &x - &self.x_ref[i];
            if i == n && tr.p_term.is_some() {
                let p = tr.p_term.as_ref().unwrap();
                let gblock = 2.0 * w * (p * &dx);
                for r in 0..nx {
                    grad[base + r] += gblock[r];
                    for c in 0..nx {
                        let v = 2.0 * w * p[(r, c)];
                        if v != 0.0 {
                            h_trips.push((base + r, base + c, v));
                        }
                    }
                }
                continue;
            }
            for j in 0..nx {
                grad[base + j] += 2.0 * w * tr.q_diag[j] * dx[j];
                if tr.q_diag[j] != 0.0 {
                    h_trips.push((base + j, base + j, 2.0 * w * tr.q_diag[j]));
                }
            }
            if let Some((qi, qw)) = tr.att_weight {
                let q = Vector4::new(x[qi], x[qi + 1], x[qi + 2], x[qi + 3]);
                let xr = &self.x_ref[i];
                let qr = Vector4::new(xr[qi], xr[qi + 1], xr[qi + 2], xr[qi + 3]);
                let eps = mrp_error(&quat_normalize(&q), &qr);
                let jatt = mrp_error_jacobian(&quat_normalize(&q), &qr);
                let gq = 2.0 * w * qw * jatt.transpose() * eps;
                let hq = 2.0 * w * qw * jatt.transpose() * jatt;
                for r in 0..4 {
                    grad[base + qi + r] += gq[r];
                    for c in 0..4 {
                        if hq[(r, c)] != 0.0 {
                            h_trips.push((base + qi + r, base + qi + c, hq[(r, c)]));
                        }
                    }
                }
            }
        }
        for k in 0..n {
            let w = self.stage_weight(k);
            let base = tr.ui(k);
            let u = self.y.rows(base, nu).into_owned();
            let du = &u - &self.u_ref[k];
            for j in 0..nu {
                grad[base + j] += 2.0 * w * tr.r_diag[j] * du[j];
                if tr.r_diag[j] != 0.0 {
                    h_trips.push((base + j, base + j, 2.0 * w * tr.r_diag[j]));
                }
            }
        }
        if tr.lm_reg > 0.0 {
            for i in 0..dim {
                h_trips.push((i, i, tr.lm_reg));
            }
        }

        // Constraint rows.
        let m = tr.n_rows();
        let mut a_trips: Vec<(usize, usize, f64)> = Vec::new();
        let mut l = DVector::zeros(m);
        let mut u_vec = DVector::zeros(m);
        // Initial-state equality: Δx₀ = x_t − x̄₀.
        for j in 0..nx {
            a_trips.push((j, tr.xi(0) + j, 1.0));
            let b = x_t[j] - self.y[tr.xi(0) + j];
            l[j] = b;
            u_vec[j] = b;
        }
        // Continuity: Δx_{k+1} − A_kΔx_k − B_kΔu_k = x_{k+1} − F(x_k, u_k).
        for k in 0..n {
            let row0 = nx * (k + 1);
            for r in 0..nx {
                a_trips.push((row0 + r, tr.xi(k + 1) + r, 1.0));
                for c in 0..nx {
                    let v = -a_mats[k][(r, c)];
                    if v != 0.0 {
                        a_trips.push((row0 + r, tr.xi(k) + c, v));
                    }
                }
                for c in 0..nu {
                    let v = -b_mats[k][(r, c)];
                    if v != 0.0 {
                        a_trips.push((row0 + r, tr.ui(k) + c, v));
                    }
                }
                let b = defects[k][r];
                l[row0 + r] = b;
                u_vec[row0 + r] = b;
            }
        }
        // Terminal equalities.
        let mut row = nx * (n + 1);
        for (idx, val) in &tr.terminal_eq {
            a_trips.push((row, tr.xi(n) + idx, 1.0));
            let b = val - self.y[tr.xi(n) + idx];
            l[row] = b;
            u_vec[row] = b;
            row += 1;
        }
        // Input bounds.
        for k in 0..n {
            for j in 0..nu {
                a_trips.push((row, tr.ui(k) + j, 1.0));
                l[row] = tr.u_lo[j] - self.y[tr.ui(k) + j];
                u_vec[row] = tr.u_hi[j] - self.y[tr.ui(k) + j];
                row += 1;
            }
        }
        // State boxes on knots 1..N.
        if let (Some(xlo), Some(xhi)) = (&tr.x_lo, &tr.x_hi) {
            for (knot, idx) in &tr.state_box_rows {
                a_trips.push((row, tr.xi(*knot) + idx, 1.0));
                let cur = self.y[tr.xi(*knot) + idx];
                l[row] = if xlo[*idx].is_finite() { xlo[*idx] - cur } else { f64::NEG_INFINITY };
                u_vec[row] = if xhi[*idx].is_finite() { xhi[*idx] - cur } else { f64::INFINITY };
                row += 1;
            }
        }
        debug_assert_eq!(row, m);

        let qp = QpProblem {
            p: SparseMatrix::from_triplets(dim, dim, &h_trips),
            q: grad.clone(),
            a: SparseMatrix::from_triplets(m, dim, &a_trips),
            l,
            u: u_vec,
        };
        Ok(Linearization { qp, y_lin: self.y.clone(), grad, a_mats, b_mats })
    }

    /// KKT residual of the nonlinear problem at the linearization point,
    /// using the supplied QP row multipliers.
    fn kkt_residual(lin: &Linearization, duals: &DVector<f64>) -> f64 {
        let stationarity = (&lin.grad + lin.qp.a.tr_matvec(duals)).amax();
        let mut primal: f64 = 0.0;
        for r in 0..lin.qp.l.len() {
            // The QP is in step coordinates, so A·0 = 0 at the iterate.
            if lin.qp.l[r].is_finite() {
                primal = primal.max(lin.qp.l[r]);
            }
            if lin.qp.u[r].is_finite() {
                primal = primal.max(-lin.qp.u[r]);
            }
        }
        stationarity.max(primal)
    }

    fn renormalize(&mut self) {
        if let Some(qi) = self.model.quat_index() {
            for i in 0..=self.tr.n {
                let base = self.tr.xi(i) + qi;
                let q = Vector4::new(self.y[base], self.y[base + 1], self.y[base + 2], self.y[base + 3]);
                let qn = quat_normalize(&q);
                for k in 0..4 {
                    self.y[base + k] = qn[k];
                }
            }
        }
    }

    /// Exact-penalty merit used by the full-SQP line search.
    fn merit(&self, y: &DVector<f64>, x_t: &DVector<f64>, nu_pen: f64) -> f64 {
        let tr = &self.tr;
        let mut infeas = 0.0;
        for j in 0..tr.nx {
            infeas += (x_t[j] - y[tr.xi(0) + j]).abs();
        }
        for k in 0..tr.n {
            let xk = y.rows(tr.xi(k), tr.nx).into_owned();
            let uk = y.rows(tr.ui(k), tr.nu).into_owned();
            if let Ok((xp, _, _)) = integrate_stage(&self.model, self.integrator, &xk, &uk, tr.dt) {
                infeas += (&xp - &y.rows(tr.xi(k + 1), tr.nx)).abs().sum();
            } else {
                return f64::INFINITY;
            }
            for j in 0..tr.nu {
                let u = y[tr.ui(k) + j];
                infeas += (tr.u_lo[j] - u).max(0.0) + (u - tr.u_hi[j]).max(0.0);
            }
        }
        for (idx, val) in &tr.terminal_eq {
            infeas += (y[tr.xi(tr.n) + idx] - val).abs();
        }
        if let (Some(xlo), Some(xhi)) = (&tr.x_lo, &tr.x_hi) {
            for (knot, idx) in &tr.state_box_rows {
                let x = y[tr.xi(*knot) + idx];
                if xlo[*idx].is_finite() {
                    infeas += (xlo[*idx] - x).max(0.0);
                }
                if xhi[*idx].is_finite() {
                    infeas += (x - xhi[*idx]).max(0.0);
                }
            }
        }
        self.cost(y) + nu_pen * infeas
    }

    pub fn solve(&mut self, x_t: &DVector<f64>, mode: SqpMode) -> Result<SqpSolution, NmpcError> {
        assert!(self.primed, "initialize or shift the solver before solving");
        let mut kkt_history = Vec::new();
        let mut cost_history = Vec::new();
        let mut qp_iterations = 0;
        let mut iterations = 0;

        if mode == SqpMode::Rti {
            let lin = self.linearize(x_t)?;
            let sol = self.solve_qp(&lin.qp)?;
            qp_iterations += sol.iterations;
            self.y += &sol.x;
            self.renormalize();
            self.duals = Some(sol.y.clone());
            kkt_history.push(Self::kkt_residual(&lin, &sol.y));
            cost_history.push(self.cost(&self.y));
            self.last_lin = Some(lin);
            return Ok(SqpSolution {
                y: self.y.clone(),
                duals: sol.y,
                kkt_history,
                cost_history,
                status: SqpStatus::SingleIteration,
                iterations: 1,
                qp_iterations,
            });
        }

        let mut status = SqpStatus::MaxIter;
        loop {
            let lin = self.linearize(x_t)?;
            cost_history.push(self.cost(&self.y));
            if let Some(d) = &self.duals {
                let kkt = Self::kkt_residual(&lin, d);
                kkt_history.push(kkt);
                if kkt <= self.tol {
                    status = SqpStatus::Converged;
                    self.last_lin = Some(lin);
                    break;
                }
            }
            if iterations >= self.max_sqp_iter {
                self.last_lin = Some(lin);
                break;
            }
            let sol = self.solve_qp(&lin.qp)?;
            qp_iterations += sol.iterations;
            let nu_pen = 10.0 * (sol.y.amax() + 1.0);
            let base_merit = self.merit(&self.y, x_t, nu_pen);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..8 {
                let cand = &self.y + &sol.x * alpha;
                if self.merit(&cand, x_t, nu_pen) <= base_merit + 1e-12 {
                    self.y = cand;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                // Take the smallest damped step rather than stalling.
                self.y += &sol.x * alpha;
            }
            self.renormalize();
            self.duals = Some(sol.y);
            self.last_lin = Some(lin);
            iterations += 1;
        }
        Ok(SqpSolution {
            y: self.y.clone(),
            duals: self.duals.clone().unwrap_or_else(|| DVector::zeros(self.tr.n_rows())),
            kkt_history,
            cost_history,
            status,
            iterations,
            qp_iterations,
        })
    }

    fn solve_qp(&mut self, prob: &QpProblem) -> Result<QpSolution, NmpcError> {
        let sol = self.qp.solve(prob)?;
        match sol.status {
            QpStatus::Solved | QpStatus::MaxIter => Ok(sol),
            QpStatus::PrimalInfeasible => Err(NmpcError::Infeasible("QP subproblem primal infeasible".into())),
            QpStatus::DualInfeasible => Err(NmpcError::Infeasible("QP subproblem dual infeasible".into())),
        }
    }
}

// ---------------------------------------------------------------------------
// Sensitivity-based predictors.
// ---------------------------------------------------------------------------

/// First-input sensitivity of the OCP solution to the measured state,
/// extracted at a solved iterate with a frozen active set.
#[derive(Debug, Clone)]
pub struct SensitivityGain {
    /// n_u × n_err gain; for quaternion models the state error is 9-dim
    /// [δp, δv, δε] in MRP coordinates, otherwise plain nx-dim.
    pub k: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub u0: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    pub uses_mrp: bool,
}

/// Hessian of the Lagrangian at the solved iterate. The Gauss-Newton QP
/// Hessian omits the dynamics-curvature term and the second-order part of the
/// attitude residual, and carries the Levenberg-Marquardt shift; the solution
/// map's derivative needs the exact Hessian, so the shift is removed and the
/// curvature terms are restored via central differences of the analytic
/// first-order quantities.
fn exact_lagrangian_hessian<M: ShootingModel>(
    solver: &NmpcSolver<M>,
    lin: &Linearization,
    duals: &DVector<f64>,
) -> Result<SparseMatrix, NmpcError> {
    let tr = &solver.tr;
    let (n, nx, nu) = (tr.n, tr.nx, tr.nu);
    let dim = tr.dim();
    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    for (i, j, v) in lin.qp.p.iter() {
        trips.push((i, j, v));
    }
    if tr.lm_reg > 0.0 {
        for i in 0..dim {
            trips.push((i, i, -tr.lm_reg));
        }
    }
    let h = 1e-5;
    for k in 0..n {
        let lam = duals.rows(nx * (k + 1), nx).into_owned();
        let xk = solver.state_knot(k);
        let uk = solver.input_stage(k);
        let nz = nx + nu;
        let mut blk = DMatrix::zeros(nz, nz);
        for i in 0..nz {
            let eval = |s: f64| -> Result<DVector<f64>, NmpcError> {
                let mut x = xk.clone();
                let mut u = uk.clone();
                if i < nx {
                    x[i] += s;
                } else {
                    u[i - nx] += s;
                }
                let (_, a, b) = integrate_stage(&solver.model, solver.integrator, &x, &u, tr.dt)?;
                let mut g = DVector::zeros(nz);
                let ga = a.transpose() * &lam;
                let gb = b.transpose() * &lam;
                for r in 0..nx {
                    g[r] = ga[r];
                }
                for r in 0..nu {
                    g[nx + r] = gb[r];
                }
                Ok(g)
            };
            let col = (eval(h)? - eval(-h)?) / (2.0 * h);
            for r in 0..nz {
                blk[(r, i)] += col[r];
            }
        }
        // Continuity rows contribute −Σ λ_r ∇²F_r to the Lagrangian Hessian.
        let blk = -(blk.clone() + blk.transpose()) * 0.5;
        let map = |i: usize| if i < nx { tr.xi(k) + i } else { tr.ui(k) + (i - nx) };
        for r in 0..nz {
            for c in 0..nz {
                if blk[(r, c)] != 0.0 {
                    trips.push((map(r), map(c), blk[(r, c)]));
                }
            }
        }
    }
    if let Some((qi, qw)) = tr.att_weight {
        for i in 0..=n {
            if i == n && tr.p_term.is_some() {
                continue;
            }
            let w = solver.stage_weight(i);
            let x = solver.state_knot(i);
            let xr = &solver.x_ref[i];
            let qr = Vector4::new(xr[qi], xr[qi + 1], xr[qi + 2], xr[qi + 3]);
            let g_att = |q: &Vector4<f64>| -> Vector4<f64> {
                let qn = quat_normalize(q);
                let eps = mrp_error(&qn, &qr);
                let jatt = mrp_error_jacobian(&qn, &qr);
                2.0 * w * qw * (jatt.transpose() * eps)
            };
            let q0 = Vector4::new(x[qi], x[qi + 1], x[qi + 2], x[qi + 3]);
            let mut hq = nalgebra::Matrix4::<f64>::zeros();
            for c in 0..4 {
                let mut qp = q0;
                qp[c] += h;
                let mut qm = q0;
                qm[c] -= h;
                hq.set_column(c, &((g_att(&qp) - g_att(&qm)) / (2.0 * h)));
            }
            let hq = (hq + hq.transpose()) * 0.5;
            let jatt = mrp_error_jacobian(&quat_normalize(&q0), &qr);
            let gn = 2.0 * w * qw * jatt.transpose() * jatt;
            for r in 0..4 {
                for c in 0..4 {
                    let v = hq[(r, c)] - gn[(r, c)];
                    if v != 0.0 {
                        trips.push((tr.xi(i) + qi + r, tr.xi(i) + qi + c, v));
                    }
                }
            }
        }
    }
    Ok(SparseMatrix::from_triplets(dim, dim, &trips))
}

pub fn sensitivity_gain<M: ShootingModel>(
    solver: &NmpcSolver<M>,
    solution: &SqpSolution,
    strict_complementarity: f64,
) -> Result<SensitivityGain, NmpcError> {
    let lin = solver.last_linearization().ok_or(NmpcError::SingularKkt)?;
    let tr = &solver.tr;
    let n_eq = tr.n_eq();

    // Frozen active set: at-bound inequality rows. Any at-bound row with a
    // multiplier below the strict-complementarity threshold is ambiguous.
    let mut active_rows: Vec<(usize, f64)> = Vec::new();
    for r in n_eq..lin.qp.l.len() {
        let mu = solution.duals[r];
        let at_lower = lin.qp.l[r].is_finite() && lin.qp.l[r].abs() < 1e-7;
        let at_upper = lin.qp.u[r].is_finite() && lin.qp.u[r].abs() < 1e-7;
        if at_lower || at_upper {
            if mu.abs() <= strict_complementarity {
                return Err(NmpcError::WeakComplementarity);
            }
            let bound = if mu > 0.0 { lin.qp.u[r] } else { lin.qp.l[r] };
            active_rows.push((r, bound));
        }
    }

    // Equality-KKT system with the active bounds appended as equalities.
    let dim = tr.dim();
    let mut a_trips: Vec<(usize, usize, f64)> = Vec::new();
    for (i, j, v) in lin.qp.a.iter() {
        if i < n_eq {
            a_trips.push((i, j, v));
        }
    }
    for (extra, (r, _)) in active_rows.iter().enumerate() {
        for (i, j, v) in lin.qp.a.iter() {
            if i == *r {
                a_trips.push((n_eq + extra, j, v));
            }
        }
    }
    let a_eq = SparseMatrix::from_triplets(n_eq + active_rows.len(), dim, &a_trips);
    let p_exact = exact_lagrangian_hessian(solver, lin, &solution.duals)?;
    let kkt = EqualityKkt::factor(&p_exact, &a_eq).map_err(|_| NmpcError::SingularKkt)?;

    let uses_mrp = solver.model.quat_index().is_some();
    let n_err = if uses_mrp { 9 } else { tr.nx };
    let inject = if uses_mrp {
        let qi = solver.model.quat_index().unwrap();
        let x0 = solver.state_knot(0);
        let q0 = Vector4::new(x0[qi], x0[qi + 1], x0[qi + 2], x0[qi + 3]);
        error_injection(&q0)
    } else {
        DMatrix::identity(tr.nx, tr.nx)
    };

    let g = DVector::zeros(dim);
    let mut k = DMatrix::zeros(tr.nu, n_err);
    for j in 0..n_err {
        let mut b = DVector::zeros(n_eq + active_rows.len());
        for r in 0..tr.nx {
            b[r] = inject[(r, j)];
        }
        let (dy, _) = kkt.solve(&g, &b).map_err(|_| NmpcError::SingularKkt)?;
        for r in 0..tr.nu {
            k[(r, j)] = dy[tr.ui(0) + r];
        }
    }
    if !k.iter().all(|v| v.is_finite()) {
        return Err(NmpcError::SingularKkt);
    }
    Ok(SensitivityGain {
        k,
        x0: solver.state_knot(0),
        u0: solver.input_stage(0),
        u_lo: tr.u_lo.clone(),
        u_hi: tr.u_hi.clone(),
        uses_mrp,
    })
}

/// Tangential predictor: u⁺ = ū*₀ + K_χ·δx, clamped to the input bounds.
pub fn predict_augmented_action(gain: &SensitivityGain, x_plus: &DVector<f64>) -> DVector<f64> {
    let delta = if gain.uses_mrp {
        error_coords(x_plus, &gain.x0)
    } else {
        x_plus - &gain.x0
    };
    let mut u = &gain.u0 + &gain.k * delta;
    for j in 0..u.len() {
        u[j] = u[j].clamp(gain.u_lo[j], gain.u_hi[j]);
    }
    u
}

/// Generalized tangential predictor: re-solves the last QP with the
/// initial-state equality moved to x⁺, keeping the frozen linearization.
/// Handles active-set changes exactly.
pub fn generalized_tangential_predictor<M: ShootingModel>(
    solver: &NmpcSolver<M>,
    x_plus: &DVector<f64>,
) -> Result<DVector<f64>, NmpcError> {
    let lin = solver.last_linearization().ok_or(NmpcError::SingularKkt)?;
    generalized_predictor_from(lin, solver.tr.nx, solver.tr.nu, solver.tr.ui(0), x_plus)
}

/// Same predictor operating on a stored linearization (e.g. one logged during
/// demonstration collection), without needing the solver instance.
pub fn generalized_predictor_from(
    lin: &Linearization,
    nx: usize,
    nu: usize,
    ui0: usize,
    x_plus: &DVector<f64>,
) -> Result<DVector<f64>, NmpcError> {
    let mut prob = lin.qp.clone();
    for j in 0..nx {
        let b = x_plus[j] - lin.y_lin[j];
        prob.l[j] = b;
        prob.u[j] = b;
    }
    let mut qp = QpSolver::new(QpSettings::default());
    let sol = qp.solve(&prob)?;
    if sol.status == QpStatus::PrimalInfeasible {
        return Err(NmpcError::Infeasible("predictor QP infeasible".into()));
    }
    let mut u = DVector::zeros(nu);
    for j in 0..nu {
        u[j] = lin.y_lin[ui0 + j] + sol.x[ui0 + j];
    }
    Ok(u)
}

// ---------------------------------------------------------------------------
// Safe flip planning.
// ---------------------------------------------------------------------------

/// Nominal maneuver plan: knot trajectories of the rate/thrust reference
/// (states [p, v, q], inputs [t_cmd, ω_cmd]) plus the underlying
/// per-propeller thrust profile and its rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafePlan {
    pub dt: f64,
    pub t_final: f64,
    /// n+1 knots of the 10-dim rate/thrust-model state.
    pub states: Vec<Vec<f64>>,
    /// n+1 knots of the mapped 4-dim input (terminal knot holds hover).
    pub inputs: Vec<Vec<f64>>,
    pub f_prop: Vec<Vec<f64>>,
    pub f_prop_rate: Vec<Vec<f64>>,
    pub prop_lo: f64,
    pub prop_hi: f64,
    pub rate_bound: f64,
}

impl SafePlan {
    pub fn n_knots(&self) -> usize {
        self.states.len()
    }

    /// Reference state/input at continuous time t; clamps to the terminal
    /// equilibrium beyond the maneuver.
    pub fn reference_at(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let n = self.states.len() - 1;
        let s = (t / self.dt).clamp(0.0, n as f64);
        let i = (s.floor() as usize).min(n - 1).min(n.saturating_sub(1)).min(n);
        let i = i.min(n - 1);
        let frac = s - i as f64;
        let mut x = DVector::zeros(10);
        for j in 0..6 {
            x[j] = self.states[i][j] * (1.0 - frac) + self.states[i + 1][j] * frac;
        }
        let qa = Vector4::new(self.states[i][6], self.states[i][7], self.states[i][8], self.states[i][9]);
        let qb = Vector4::new(
            self.states[i + 1][6],
            self.states[i + 1][7],
            self.states[i + 1][8],
            self.states[i + 1][9],
        );
        let qb = if qa.dot(&qb) < 0.0 { -qb } else { qb };
        let q = quat_normalize(&(qa * (1.0 - frac) + qb * frac));
        for j in 0..4 {
            x[6 + j] = q[j];
        }
        let mut u = DVector::zeros(4);
        for j in 0..4 {
            u[j] = self.inputs[i][j] * (1.0 - frac) + self.inputs[i + 1][j] * frac;
        }
        (x, u)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("safe plan serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Plans a fixed-final-time planar maneuver rotating `angle` radians about
/// the body x axis, starting and ending at the hover equilibrium. The plan
/// is computed on the extended planar state and lifted to the 3D
/// rate/thrust reference.
/// Position/velocity constraint box for the maneuver task, shared by the
/// planner's per-knot state bounds and the episode success criterion.
pub const FLIP_POS_LIMIT: f64 = 5.0;
pub const FLIP_VEL_LIMIT: f64 = 10.0;

pub fn plan_safe_flip(
    params: &MultirotorParams,
    flip: &FlipConfig,
    angle: f64,
) -> Result<SafePlan, NmpcError> {
    let n = flip.horizon;
    let dt = flip.dt();
    let mg = params.hover_thrust();
    let f_hover = mg / 4.0;
    let prop_lo = flip.prop_min_frac * mg;
    let prop_hi = flip.prop_max_frac * mg;
    if f_hover < prop_lo || f_hover > prop_hi {
        return Err(NmpcError::Infeasible("hover thrust outside tightened propeller bounds".into()));
    }

    let mut q_diag = DVector::zeros(10);
    q_diag[0] = flip.q_pos;
    q_diag[1] = flip.q_pos;
    q_diag[2] = flip.q_vel;
    q_diag[3] = flip.q_vel;
    q_diag[5] = flip.q_rate;
    for j in 6..10 {
        q_diag[j] = flip.q_thrust;
    }
    let r_diag = DVector::from_element(4, flip.r_rate);
    let u_lo = DVector::from_element(4, -flip.thrust_rate_limit);
    let u_hi = DVector::from_element(4, flip.thrust_rate_limit);
    let mut tr = OcpTranscription::new(n, 10, 4, dt, 1.0, q_diag, r_diag, u_lo, u_hi);
    let inf = f64::INFINITY;
    let (pl, vl) = (FLIP_POS_LIMIT, FLIP_VEL_LIMIT);
    let x_lo = DVector::from_vec(vec![-pl, -pl, -vl, -vl, -inf, -12.0, prop_lo, prop_lo, prop_lo, prop_lo]);
    let x_hi = DVector::from_vec(vec![pl, pl, vl, vl, inf, 12.0, prop_hi, prop_hi, prop_hi, prop_hi]);
    tr = tr.with_state_box(x_lo, x_hi);
    tr.terminal_eq = vec![
        (0, 0.0),
        (1, 0.0),
        (2, 0.0),
        (3, 0.0),
        (4, angle),
        (5, 0.0),
        (6, f_hover),
        (7, f_hover),
        (8, f_hover),
        (9, f_hover),
    ];
    tr.lm_reg = 1e-4;

    let model = PlanarFlipModel { params: params.clone() };
    let mut solver = NmpcSolver::new(model, tr, Integrator::Rk4, 1e-6, 400, 20_000);

    // Reference: hover-like targets (the zero-weight roll coordinate is
    // unconstrained by the cost; the terminal equality drives the rotation).
    let mut x_hover = DVector::zeros(10);
    for j in 6..10 {
        x_hover[j] = f_hover;
    }
    solver.set_reference(vec![x_hover.clone(); n + 1], vec![DVector::zeros(4); n]);

    // Initial guess: smooth roll ramp with the matching differential-thrust
    // profile, planar states integrated forward for rough consistency.
    let two_pi = 2.0 * std::f64::consts::PI;
    let t_f = flip.t_final;
    let phi_of = |t: f64| angle * (t / t_f - (two_pi * t / t_f).sin() / two_pi);
    let phidd_of = |t: f64| angle * two_pi / (t_f * t_f) * (two_pi * t / t_f).sin();
    let mut guess_states = Vec::with_capacity(n + 1);
    let mut x = x_hover.clone();
    for k in 0..=n {
        let t = k as f64 * dt;
        let delta = params.inertia.x * phidd_of(t) / params.arm;
        x[4] = phi_of(t);
        x[5] = if k == 0 || k == n { 0.0 } else { angle / t_f * (1.0 - (two_pi * t / t_f).cos()) };
        x[6] = f_hover;
        x[7] = (f_hover + delta / 2.0).clamp(prop_lo, prop_hi);
        x[8] = f_hover;
        x[9] = (f_hover - delta / 2.0).clamp(prop_lo, prop_hi);
        guess_states.push(x.clone());
        if k < n {
            // Forward-integrate the planar translation under the guessed
            // attitude/thrust profile.
            let dx = solver.model.dynamics(&x, &DVector::zeros(4));
            for j in 0..4 {
                x[j] += dt * dx[j];
            }
        }
    }
    for (k, gs) in guess_states.iter().enumerate() {
        solver.y.rows_mut(solver.tr.xi(k), 10).copy_from(gs);
    }
    for k in 0..n {
        let df: DVector<f64> = (guess_states[k + 1].rows(6, 4) - guess_states[k].rows(6, 4)) / dt;
        solver.y.rows_mut(solver.tr.ui(k), 4).copy_from(&df);
    }
    solver.primed = true;

    let mut x0 = x_hover.clone();
    x0[4] = 0.0;
    let sol = solver.solve(&x0, SqpMode::FullSqp)?;
    if sol.status != SqpStatus::Converged {
        let kkt = sol.kkt_history.last().copied().unwrap_or(f64::INFINITY);
        if kkt > 1e-4 {
            return Err(NmpcError::Infeasible(format!(
                "flip planner did not converge (KKT residual {kkt:.3e}); maneuver time may be too short"
            )));
        }
    }

    // Lift the planar plan to the 3D rate/thrust reference.
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n + 1);
    let mut f_prop = Vec::with_capacity(n + 1);
    let mut f_prop_rate = Vec::with_capacity(n);
    for k in 0..=n {
        let z = solver.state_knot(k);
        let q = quat_from_axis_angle(&Vector3::x(), z[4]);
        let t_cmd: f64 = z.rows(6, 4).sum();
        states.push(vec![0.0, z[0], z[1], 0.0, z[2], z[3], q[0], q[1], q[2], q[3]]);
        inputs.push(vec![t_cmd, z[5], 0.0, 0.0]);
        f_prop.push(z.rows(6, 4).iter().copied().collect());
        if k < n {
            f_prop_rate.push(solver.input_stage(k).iter().copied().collect());
        }
    }
    // Terminal knot holds the hover input.
    inputs[n] = vec![mg, 0.0, 0.0, 0.0];
    Ok(SafePlan {
        dt,
        t_final: flip.t_final,
        states,
        inputs,
        f_prop,
        f_prop_rate,
        prop_lo,
        prop_hi,
        rate_bound: flip.thrust_rate_limit,
    })
}

// ---------------------------------------------------------------------------
// Ancillary NMPC.
// ---------------------------------------------------------------------------

/// 10-dim rate/thrust-model state of a simulated robot.
pub fn ancillary_state(s: &RobotState) -> DVector<f64> {
    let mut x = DVector::zeros(10);
    for i in 0..3 {
        x[i] = s.position[i];
        x[3 + i] = s.velocity[i];
    }
    let q = quat_normalize(&s.attitude);
    for i in 0..4 {
        x[6 + i] = q[i];
    }
    x
}

/// Builds the discounted tracking NMPC on the reduced rate/thrust model.
pub fn build_ancillary_solver(params: &MultirotorParams, cfg: &NmpcConfig) -> NmpcSolver<ReducedQuadModel> {
    let mg = params.hover_thrust();
    let mut q_diag = DVector::zeros(10);
    for j in 0..3 {
        q_diag[j] = cfg.q_pos;
        q_diag[3 + j] = cfg.q_vel;
    }
    let r_diag = DVector::from_vec(vec![cfg.r_thrust, cfg.r_rate, cfg.r_rate, cfg.r_rate]);
    let u_lo = DVector::from_vec(vec![cfg.thrust_min_frac * mg, -cfg.rate_limit, -cfg.rate_limit, -cfg.rate_limit]);
    let u_hi = DVector::from_vec(vec![cfg.thrust_max_frac * mg, cfg.rate_limit, cfg.rate_limit, cfg.rate_limit]);
    let mut tr = OcpTranscription::new(cfg.horizon, 10, 4, cfg.dt(), cfg.gamma, q_diag, r_diag, u_lo, u_hi)
        .with_attitude_cost(6, cfg.q_att);
    tr.lm_reg = cfg.lm_reg;
    assert!((tr.n as f64 * tr.dt - cfg.horizon_time).abs() < 1e-12);
    NmpcSolver::new(
        ReducedQuadModel { params: params.clone() },
        tr,
        Integrator::Rk4,
        cfg.tol,
        cfg.max_sqp_iter,
        cfg.max_qp_iter,
    )
}

/// Installs the plan segment starting at time t0 as the solver reference.
pub fn set_plan_reference(solver: &mut NmpcSolver<ReducedQuadModel>, plan: &SafePlan, t0: f64) {
    let n = solver.tr.n;
    let dt = solver.tr.dt;
    let mut x_ref = Vec::with_capacity(n + 1);
    let mut u_ref = Vec::with_capacity(n);
    for i in 0..=n {
        let (x, u) = plan.reference_at(t0 + i as f64 * dt);
        x_ref.push(x);
        if i < n {
            u_ref.push(u);
        }
    }
    solver.set_reference(x_ref, u_ref);
}

/// One ancillary-controller decision: tracks the plan from time t at the
/// measured state, returning the first input and the solver report.
pub fn ancillary_nmpc_action(
    solver: &mut NmpcSolver<ReducedQuadModel>,
    x_t: &DVector<f64>,
    t: f64,
    plan: &SafePlan,
    mode: SqpMode,
) -> Result<(DVector<f64>, SqpSolution), NmpcError> {
    set_plan_reference(solver, plan, t);
    if !solver.is_primed() {
        solver.init_from_reference();
    } else if mode == SqpMode::Rti {
        solver.shift_warm_start();
    }
    let sol = solver.solve(x_t, mode)?;
    Ok((solver.input_stage(0), sol))
}

/// One closed-loop maneuver-tracking episode at the controller rate against
/// the full simulator.
#[derive(Debug, Clone)]
pub struct FlipRollout {
    pub states: Vec<RobotState>,
    /// Per-step 9-dim deviation from the plan in MRP error coordinates.
    pub state_dev: Vec<DVector<f64>>,
    /// Per-step input deviation u_t − v*_t.
    pub action_dev: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

pub fn simulate_flip_tracking(
    params: &MultirotorParams,
    plan: &SafePlan,
    cfg: &NmpcConfig,
    f_ext: &Vector3<f64>,
    steps: usize,
    x0: &RobotState,
) -> Result<FlipRollout, NmpcError> {
    let mut solver = build_ancillary_solver(params, cfg);
    let dt_ctrl = cfg.dt();
    let substeps = (dt_ctrl / SIM_DT).round() as usize;
    assert!(substeps >= 1 && substeps % ATT_DECIMATION == 0);
    let mut simulator = Simulator::new(params.clone());
    let mut state = x0.clone();
    let mut prev_omega = Vector3::zeros();
    let mut out = FlipRollout { states: Vec::new(), state_dev: Vec::new(), action_dev: Vec::new(), inputs: Vec::new() };
    for step in 0..steps {
        let t = step as f64 * dt_ctrl;
        let x_t = ancillary_state(&state);
        let (u, _) = ancillary_nmpc_action(&mut solver, &x_t, t, plan, SqpMode::Rti)?;
        let (x_ref, u_ref) = plan.reference_at(t);
        out.states.push(state.clone());
        out.state_dev.push(error_coords(&x_t, &x_ref));
        out.action_dev.push(&u - &u_ref);
        out.inputs.push(u.clone());
        let omega_cmd = Vector3::new(u[1], u[2], u[3]);
        let omega_dot_cmd = (omega_cmd - prev_omega) / dt_ctrl;
        prev_omega = omega_cmd;
        let cmd = CommandInput::RateThrust { thrust: u[0].max(0.0), omega_cmd, omega_dot_cmd };
        for _ in 0..substeps {
            state = simulator.step(&state, &cmd, f_ext)?;
        }
    }
    Ok(FlipRollout { states: out.states, state_dev: out.state_dev, action_dev: out.action_dev, inputs: out.inputs })
}

/// Monte-Carlo tube estimation for the maneuver: closed-loop rollouts under
/// constant disturbances, peak deviations in 9-dim MRP error coordinates
/// (state) and 4-dim input deviations (action), inflated by `safety`.
pub fn estimate_flip_tube(
    params: &MultirotorParams,
    plan: &SafePlan,
    cfg: &NmpcConfig,
    dist: &DisturbanceSet,
    n_rollouts: usize,
    safety: f64,
    seed: u64,
) -> Result<(AxisBox, AxisBox), NmpcError> {
    let steps = cfg.tube.horizon_steps;
    let x0 = RobotState::hover_at(Vector3::zeros());
    let peaks: Vec<Result<(DVector<f64>, DVector<f64>), NmpcError>> = (0..n_rollouts)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            // Alternate worst-magnitude and uniformly sampled disturbances.
            let f = if k % 2 == 0 {
                dist.sample_at_magnitude(dist.f_max, &mut rng)
            } else {
                dist.sample(&mut rng)
            };
            let roll = simulate_flip_tracking(params, plan, cfg, &f, steps, &x0)?;
            let mut sp: DVector<f64> = DVector::zeros(9);
            let mut ap: DVector<f64> = DVector::zeros(4);
            for d in &roll.state_dev {
                for i in 0..9 {
                    sp[i] = sp[i].max(d[i].abs());
                }
            }
            for d in &roll.action_dev {
                for i in 0..4 {
                    ap[i] = ap[i].max(d[i].abs());
                }
            }
            Ok((sp, ap))
        })
        .collect();
    let mut state_peak: DVector<f64> = DVector::zeros(9);
    let mut action_peak: DVector<f64> = DVector::zeros(4);
    for r in peaks {
        let (sp, ap) = r?;
        for i in 0..9 {
            state_peak[i] = state_peak[i].max(sp[i]);
        }
        for i in 0..4 {
            action_peak[i] = action_peak[i].max(ap[i]);
        }
    }
    let state_tube = AxisBox::symmetric(&(state_peak * safety));
    let action_tube = AxisBox::symmetric(&(action_peak * safety));
    Ok((state_tube, action_tube))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use approx::assert_relative_eq;
    use rand::Rng;
    use std::sync::OnceLock;

    /// Double integrator: ẋ = [v, u].
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
            let mut a = DMatrix::zeros(2, 2);
            a[(0, 1)] = 1.0;
            let mut b = DMatrix::zeros(2, 1);
            b[(1, 0)] = 1.0;
            (a, b)
        }
    }

    fn di_transcription(n: usize, u_bound: f64, lm: f64) -> OcpTranscription {
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
        tr.lm_reg = lm;
        tr
    }

    fn default_params() -> MultirotorParams {
        MultirotorParams::defaults()
    }

    #[test]
    fn transcription_counts() {
        let tr = di_transcription(1, 10.0, 0.0);
        assert_eq!(tr.dim(), 2 * 2 + 1);
        assert_eq!(tr.n_eq(), 2 * 2); // initial + one continuity block

        let cfg = Config::default();
        let solver = build_ancillary_solver(&default_params(), &cfg.nmpc);
        assert_eq!(solver.tr.dim(), 710);
        assert_relative_eq!(solver.tr.n as f64 * solver.tr.dt, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shift_round_trip_indices() {
        let tr = di_transcription(4, 10.0, 0.0);
        let mut solver = NmpcSolver::new(DoubleIntegrator, tr, Integrator::Rk4, 1e-8, 30, 1000);
        // Stage-coded values: state knot i carries 100+i, input stage k carries 200+k.
        for i in 0..=4 {
            solver.y[solver.tr.xi(i)] = 100.0 + i as f64;
        }
        for k in 0..4 {
            solver.y[solver.tr.ui(k)] = 200.0 + k as f64;
        }
        solver.shift_warm_start();
        for i in 0..4 {
            assert_eq!(solver.y[solver.tr.xi(i)], 100.0 + (i + 1) as f64);
        }
        assert_eq!(solver.y[solver.tr.xi(4)], 104.0); // duplicated terminal
        for k in 0..3 {
            assert_eq!(solver.y[solver.tr.ui(k)], 200.0 + (k + 1) as f64);
        }
        assert_eq!(solver.y[solver.tr.ui(3)], 203.0);
    }

    #[test]
    #[should_panic(expected = "nonnegative")]
    fn negative_weight_rejected() {
        OcpTranscription::new(
            2,
            2,
            1,
            0.1,
            1.0,
            DVector::from_vec(vec![-1.0, 1.0]),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, -1.0),
            DVector::from_element(1, 1.0),
        );
    }

    #[test]
    fn hover_is_integration_fixed_point() {
        let params = default_params();
        let model = ReducedQuadModel { params: params.clone() };
        let x = ancillary_state(&RobotState::hover_at(Vector3::new(0.3, -0.2, 1.0)));
        let u = DVector::from_vec(vec![params.hover_thrust(), 0.0, 0.0, 0.0]);
        let (xp, a, _) = integrate_stage(&model, Integrator::Rk4, &x, &u, 0.02).unwrap();
        assert_relative_eq!((&xp - &x).amax(), 0.0, epsilon = 1e-12);
        // A ≈ exp(J_c·dt) via a finite-difference check on the map itself.
        let fd = fd_state_jacobian(&model, Integrator::Rk4, &x, &u, 0.02);
        assert!((a - fd).amax() < 1e-7);
    }

    fn fd_state_jacobian<M: ShootingModel>(
        model: &M,
        integ: Integrator,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
    ) -> DMatrix<f64> {
        let nx = model.nx();
        let h = 1e-6;
        let mut j = DMatrix::zeros(nx, nx);
        for c in 0..nx {
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            let (fp, _, _) = integrate_stage(model, integ, &xp, u, dt).unwrap();
            let (fm, _, _) = integrate_stage(model, integ, &xm, u, dt).unwrap();
            j.set_column(c, &((fp - fm) / (2.0 * h)));
        }
        j
    }

    fn fd_input_jacobian<M: ShootingModel>(
        model: &M,
        integ: Integrator,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dt: f64,
    ) -> DMatrix<f64> {
        let h = 1e-6;
        let mut j = DMatrix::zeros(model.nx(), model.nu());
        for c in 0..model.nu() {
            let mut up = u.clone();
            up[c] += h;
            let mut um = u.clone();
            um[c] -= h;
            let (fp, _, _) = integrate_stage(model, integ, x, &up, dt).unwrap();
            let (fm, _, _) = integrate_stage(model, integ, x, &um, dt).unwrap();
            j.set_column(c, &((fp - fm) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let params = default_params();
        let quad = ReducedQuadModel { params: params.clone() };
        let planar = PlanarFlipModel { params: params.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mg = params.hover_thrust();
        for case in 0..100 {
            // Random quadrotor state/input.
            let mut x = DVector::from_fn(10, |_, _| rng.gen_range(-1.0..1.0));
            let q = quat_normalize(&Vector4::new(
                1.0 + rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ));
            for j in 0..4 {
                x[6 + j] = q[j];
            }
            let u = DVector::from_vec(vec![
                mg * rng.gen_range(0.3..2.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ]);
            let integ = if case % 10 == 0 { Integrator::GaussLegendre4 } else { Integrator::Rk4 };
            let (_, a, b) = integrate_stage(&quad, integ, &x, &u, 0.02).unwrap();
            let fa = fd_state_jacobian(&quad, integ, &x, &u, 0.02);
            let fb = fd_input_jacobian(&quad, integ, &x, &u, 0.02);
            let scale = a.amax().max(1.0);
            assert!((a - fa).amax() / scale < 1e-5, "quad A mismatch, case {case}");
            assert!((b - fb).amax() / scale < 1e-5, "quad B mismatch, case {case}");

            // Random planar extended state/input.
            let mut z = DVector::from_fn(10, |_, _| rng.gen_range(-1.0..1.0));
            for j in 6..10 {
                z[j] = rng.gen_range(0.2..5.0);
            }
            let v = DVector::from_fn(4, |_, _| rng.gen_range(-20.0..20.0));
            let (_, pa, pb) = integrate_stage(&planar, integ, &z, &v, 0.05).unwrap();
            let fpa = fd_state_jacobian(&planar, integ, &z, &v, 0.05);
            let fpb = fd_input_jacobian(&planar, integ, &z, &v, 0.05);
            assert!((pa - fpa).amax() < 1e-5, "planar A mismatch, case {case}");
            assert!((pb - fpb).amax() < 1e-5, "planar B mismatch, case {case}");
        }
    }

    #[test]
    fn constant_rate_closes_full_rotation() {
        let params = default_params();
        let model = ReducedQuadModel { params };
        let dt = 0.02;
        let k = 100;
        let rate = 2.0 * std::f64::consts::PI / (dt * k as f64);
        let mut x = ancillary_state(&RobotState::hover_at(Vector3::zeros()));
        let u = DVector::from_vec(vec![0.0, rate, 0.0, 0.0]);
        for _ in 0..k {
            let (xp, _, _) = integrate_stage(&model, Integrator::Rk4, &x, &u, dt).unwrap();
            x = xp;
        }
        let q = Vector4::new(x[6], x[7], x[8], x[9]);
        let r = quat_to_rot(&q);
        assert!((r - nalgebra::Matrix3::identity()).amax() < 1e-5);
    }

    #[test]
    fn linear_quadratic_converges_in_one_iteration() {
        let tr = di_transcription(5, 100.0, 0.0);
        let mut solver = NmpcSolver::new(DoubleIntegrator, tr, Integrator::Rk4, 1e-8, 30, 4000);
        solver.init_from_reference();
        let x_t = DVector::from_vec(vec![1.0, -0.5]);
        let sol = solver.solve(&x_t, SqpMode::FullSqp).unwrap();
        assert_eq!(sol.status, SqpStatus::Converged);
        assert_eq!(sol.iterations, 1);
        assert!(*sol.kkt_history.last().unwrap() <= 1e-8);

        // Oracle: the one QP the SQP solved is the convex problem itself;
        // verify against an independent dense equality-KKT solve of the
        // unconstrained LQ problem.
        let lin = solver.linearize(&x_t).unwrap();
        let h = lin.qp.p.to_dense();
        let n_eq = solver.tr.n_eq();
        let a_full = lin.qp.a.to_dense();
        let a_eq = a_full.rows(0, n_eq).into_owned();
        let b_eq = lin.qp.l.rows(0, n_eq).into_owned();
        let dim = solver.tr.dim();
        let mut kkt = DMatrix::zeros(dim + n_eq, dim + n_eq);
        kkt.view_mut((0, 0), (dim, dim)).copy_from(&h);
        kkt.view_mut((0, dim), (dim, n_eq)).copy_from(&a_eq.transpose());
        kkt.view_mut((dim, 0), (n_eq, dim)).copy_from(&a_eq);
        let mut rhs = DVector::zeros(dim + n_eq);
        rhs.rows_mut(0, dim).copy_from(&(-&lin.grad));
        rhs.rows_mut(dim, n_eq).copy_from(&b_eq);
        let step = kkt.lu().solve(&rhs).unwrap();
        // At the converged iterate the step must vanish.
        assert!(step.rows(0, dim).amax() < 1e-8);
    }

    #[test]
    fn hover_regulation_cost_decreases() {
        let params = default_params();
        let cfg = Config::default();
        let mut nmpc_cfg = cfg.nmpc.clone();
        nmpc_cfg.horizon = 20;
        nmpc_cfg.horizon_time = 0.4;
        let mut solver = build_ancillary_solver(&params, &nmpc_cfg);
        let hover = ancillary_state(&RobotState::hover_at(Vector3::zeros()));
        let hover_u = DVector::from_vec(vec![params.hover_thrust(), 0.0, 0.0, 0.0]);
        solver.set_reference(vec![hover.clone(); 21], vec![hover_u; 20]);
        solver.init_from_reference();
        let mut x_t = hover.clone();
        x_t[0] += 0.2;
        x_t[4] -= 0.1;
        let sol = solver.solve(&x_t, SqpMode::FullSqp).unwrap();
        assert_eq!(sol.status, SqpStatus::Converged);
        // The first entry is the (reference-initialized) guess before the
        // initial-condition jump; monotonicity holds from the first feasible
        // iterate onward.
        for w in sol.cost_history[1..].windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "cost increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn rti_reaches_full_sqp_fixed_point() {
        let params = default_params();
        let cfg = Config::default();
        let mut nmpc_cfg = cfg.nmpc.clone();
        nmpc_cfg.horizon = 15;
        nmpc_cfg.horizon_time = 0.3;
        let hover = ancillary_state(&RobotState::hover_at(Vector3::zeros()));
        let hover_u = DVector::from_vec(vec![params.hover_thrust(), 0.0, 0.0, 0.0]);
        let mut x_t = hover.clone();
        x_t[1] += 0.15;
        x_t[3] += 0.1;

        let mut full = build_ancillary_solver(&params, &nmpc_cfg);
        full.set_reference(vec![hover.clone(); 16], vec![hover_u.clone(); 15]);
        full.init_from_reference();
        let full_sol = full.solve(&x_t, SqpMode::FullSqp).unwrap();
        assert_eq!(full_sol.status, SqpStatus::Converged);

        let mut rti = build_ancillary_solver(&params, &nmpc_cfg);
        rti.set_reference(vec![hover.clone(); 16], vec![hover_u; 15]);
        rti.init_from_reference();
        for _ in 0..10 {
            rti.solve(&x_t, SqpMode::Rti).unwrap();
        }
        assert!((&rti.y - &full_sol.y).amax() < 1e-6);
    }

    fn shared_flip_plan() -> &'static SafePlan {
        static PLAN: OnceLock<SafePlan> = OnceLock::new();
        PLAN.get_or_init(|| {
            let cfg = Config::default();
            plan_safe_flip(&default_params(), &cfg.flip, 2.0 * std::f64::consts::PI).unwrap()
        })
    }

    #[test]
    fn zero_rotation_plan_is_hover() {
        let cfg = Config::default();
        let params = default_params();
        let plan = plan_safe_flip(&params, &cfg.flip, 0.0).unwrap();
        let mg = params.hover_thrust();
        for (x, u) in plan.states.iter().zip(&plan.inputs) {
            for j in 0..6 {
                assert!(x[j].abs() < 1e-5, "non-hover translation {x:?}");
            }
            assert!((u[0] - mg).abs() < 1e-4, "thrust {} vs mg {}", u[0], mg);
            assert!(u[1].abs() < 1e-4);
        }
    }

    #[test]
    fn flip_plan_terminal_and_constraints() {
        let plan = shared_flip_plan();
        let n = plan.n_knots() - 1;
        // Terminal attitude: a full revolution about x maps the quaternion
        // to −identity; the terminal rotation matrix is the identity.
        let q_n = Vector4::new(plan.states[n][6], plan.states[n][7], plan.states[n][8], plan.states[n][9]);
        assert!((quat_to_rot(&q_n) - nalgebra::Matrix3::identity()).amax() < 1e-4);
        // Terminal rest at the start point.
        for j in 0..6 {
            assert!(plan.states[n][j].abs() < 1e-4, "terminal state {:?}", plan.states[n]);
        }
        // Unrolled rotation audit: accumulate roll increments along the plan.
        let mut total = 0.0;
        let mut prev = 0.0;
        for x in &plan.states {
            let q = quat_normalize(&Vector4::new(x[6], x[7], x[8], x[9]));
            let angle = 2.0 * (q[1]).atan2(q[0]);
            let mut d = angle - prev;
            while d > std::f64::consts::PI {
                d -= 2.0 * std::f64::consts::PI;
            }
            while d < -std::f64::consts::PI {
                d += 2.0 * std::f64::consts::PI;
            }
            total += d;
            prev = angle;
        }
        assert!((total - 2.0 * std::f64::consts::PI).abs() < 1e-4, "unrolled angle {total}");
        // Tightened thrust bounds at all knots and rate bounds on all stages.
        for f in &plan.f_prop {
            for v in f {
                assert!(*v >= plan.prop_lo - 1e-6 && *v <= plan.prop_hi + 1e-6, "f_prop {v}");
            }
        }
        for r in &plan.f_prop_rate {
            for v in r {
                assert!(v.abs() <= plan.rate_bound + 1e-6, "thrust rate {v}");
            }
        }
    }

    #[test]
    fn safe_plan_json_round_trip() {
        let cfg = Config::default();
        let plan = plan_safe_flip(&default_params(), &cfg.flip, 0.0).unwrap();
        let text = plan.to_json();
        let back = SafePlan::from_json(&text).unwrap();
        assert_eq!(back.states, plan.states);
        assert_eq!(back.f_prop_rate, plan.f_prop_rate);
        assert_eq!(back.dt, plan.dt);
    }

    #[test]
    fn on_plan_action_matches_plan_input() {
        // With the robot exactly on a dynamics-consistent (hover) plan, the
        // ancillary optimum is the plan input itself.
        let cfg = Config::default();
        let params = default_params();
        let plan = plan_safe_flip(&params, &cfg.flip, 0.0).unwrap();
        let mut solver = build_ancillary_solver(&params, &cfg.nmpc);
        let (x0, u0) = plan.reference_at(0.0);
        let (u, sol) = ancillary_nmpc_action(&mut solver, &x0, 0.0, &plan, SqpMode::FullSqp).unwrap();
        assert_eq!(sol.status, SqpStatus::Converged);
        assert!((&u - &u0).amax() < 1e-6, "u {u:?} vs plan {u0:?}");
    }

    #[test]
    fn lateral_offset_commands_opposing_tilt() {
        let cfg = Config::default();
        let params = default_params();
        let plan = plan_safe_flip(&params, &cfg.flip, 0.0).unwrap();
        let mut solver = build_ancillary_solver(&params, &cfg.nmpc);
        let (mut x0, _) = plan.reference_at(0.0);
        x0[1] += 0.1; // +y offset
        let (u, _) = ancillary_nmpc_action(&mut solver, &x0, 0.0, &plan, SqpMode::FullSqp).unwrap();
        // Accelerating toward −y requires a positive roll rate command.
        assert!(u[1] > 1e-4, "expected positive roll-rate command, got {}", u[1]);
    }

    #[test]
    fn closed_loop_tracks_flip_start() {
        let cfg = Config::default();
        let params = default_params();
        let plan = shared_flip_plan();
        let roll =
            simulate_flip_tracking(&params, plan, &cfg.nmpc, &Vector3::new(0.1, 0.0, 0.0), 50, &RobotState::hover_at(Vector3::zeros()))
                .unwrap();
        for dev in &roll.state_dev {
            assert!(dev.rows(0, 3).amax() < 0.5, "position deviation {dev:?}");
        }
    }

    #[test]
    fn sensitivity_matches_lqr_on_lq_instance() {
        // Unconstrained LQ with the Riccati fixed point as terminal weight:
        // the first-input sensitivity equals the stationary LQR gain.
        let model = DoubleIntegrator;
        let x0 = DVector::zeros(2);
        let (a, b) = {
            let (_, a, b) = integrate_stage(&model, Integrator::Rk4, &x0, &DVector::zeros(1), 0.1).unwrap();
            (a, b)
        };
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5]));
        let r = DMatrix::from_element(1, 1, 0.1);
        let (k_lqr, p) = crate::linmpc::solve_lqr(&a, &b, &q, &r).unwrap();

        let mut tr = di_transcription(8, 1e6, 0.0);
        tr.p_term = Some(p);
        let mut solver = NmpcSolver::new(DoubleIntegrator, tr, Integrator::Rk4, 1e-9, 30, 8000);
        solver.init_from_reference();
        let x_t = DVector::from_vec(vec![0.4, -0.2]);
        let sol = solver.solve(&x_t, SqpMode::FullSqp).unwrap();
        assert_eq!(sol.status, SqpStatus::Converged);
        let gain = sensitivity_gain(&solver, &sol, 1e-6).unwrap();
        assert!((&gain.k - &k_lqr).amax() < 1e-8, "gain {:?} vs LQR {:?}", gain.k, k_lqr);
    }

    #[test]
    fn sensitivity_matches_finite_difference_resolves() {
        let params = default_params();
        let cfg = Config::default();
        let mut nmpc_cfg = cfg.nmpc.clone();
        nmpc_cfg.horizon = 10;
        nmpc_cfg.horizon_time = 0.2;
        nmpc_cfg.lm_reg = 0.0;
        let hover = ancillary_state(&RobotState::hover_at(Vector3::zeros()));
        let hover_u = DVector::from_vec(vec![params.hover_thrust(), 0.0, 0.0, 0.0]);
        let solve_at = |x_t: &DVector<f64>| -> DVector<f64> {
            let mut s = build_ancillary_solver(&params, &nmpc_cfg);
            s.set_reference(vec![hover.clone(); 11], vec![hover_u.clone(); 10]);
            s.init_from_reference();
            let sol = s.solve(x_t, SqpMode::FullSqp).unwrap();
            assert_eq!(sol.status, SqpStatus::Converged);
            s.input_stage(0)
        };

        let mut x_t = hover.clone();
        x_t[0] += 0.05;
        x_t[4] += 0.03;
        let mut solver = build_ancillary_solver(&params, &nmpc_cfg);
        solver.set_reference(vec![hover.clone(); 11], vec![hover_u.clone(); 10]);
        solver.init_from_reference();
        let sol = solver.solve(&x_t, SqpMode::FullSqp).unwrap();
        let gain = sensitivity_gain(&solver, &sol, 1e-6).unwrap();

        let h = 1e-4;
        let mut fd = DMatrix::zeros(4, 9);
        for j in 0..9 {
            let inject = error_injection(&Vector4::new(x_t[6], x_t[7], x_t[8], x_t[9]));
            let mut dir = DVector::zeros(10);
            for r in 0..10 {
                dir[r] = inject[(r, j)];
            }
            let mut xp = &x_t + &dir * h;
            let mut xm = &x_t - &dir * h;
            let qn = quat_normalize(&Vector4::new(xp[6], xp[7], xp[8], xp[9]));
            for r in 0..4 {
                xp[6 + r] = qn[r];
            }
            let qn = quat_normalize(&Vector4::new(xm[6], xm[7], xm[8], xm[9]));
            for r in 0..4 {
                xm[6 + r] = qn[r];
            }
            fd.set_column(j, &((solve_at(&xp) - solve_at(&xm)) / (2.0 * h)));
        }
        let scale = gain.k.amax().max(1.0);
        assert!(
            (&gain.k - &fd).amax() / scale < 1e-3,
            "sensitivity mismatch: {:.3e}",
            (&gain.k - &fd).amax() / scale
        );
    }

    #[test]
    fn predictor_identities_and_linearity() {
        let mut tr = di_transcription(8, 1e6, 0.0);
        tr.p_term = None;
        let mut solver = NmpcSolver::new(DoubleIntegrator, tr, Integrator::Rk4, 1e-9, 30, 8000);
        solver.init_from_reference();
        let x_t = DVector::from_vec(vec![0.3, 0.1]);
        let sol = solver.solve(&x_t, SqpMode::FullSqp).unwrap();
        let gain = sensitivity_gain(&solver, &sol, 1e-6).unwrap();

        // x⁺ = x̄*₀ reproduces ū*₀ for both predictors.
        let u_base = predict_augmented_action(&gain, &gain.x0.clone());
        assert!((&u_base - &gain.u0).amax() < 1e-12);
        let u_gen = generalized_tangential_predictor(&solver, &gain.x0.clone()).unwrap();
        assert!((&u_gen - &gain.u0).amax() < 1e-6);

        // Linearity pre-clamp.
        let delta = DVector::from_vec(vec![0.02, -0.01]);
        let u1 = predict_augmented_action(&gain, &(&gain.x0 + &delta));
        let u2 = predict_augmented_action(&gain, &(&gain.x0 + &delta * 2.0));
        assert!(((&u2 - &gain.u0) - (&u1 - &gain.u0) * 2.0).amax() < 1e-10);

        // Interior point, no active-set change: predictors agree.
        let x_near = &gain.x0 + DVector::from_vec(vec![0.01, 0.005]);
        let u_lin = predict_augmented_action(&gain, &x_near);
        let u_g = generalized_tangential_predictor(&solver, &x_near).unwrap();
        assert!((&u_lin - &u_g).amax() < 1e-6, "lin {u_lin:?} gen {u_g:?}");
    }

    #[test]
    fn generalized_predictor_respects_activated_bound() {
        let u_bound = 0.5;
        let tr = di_transcription(8, u_bound, 0.0);
        let mut solver = NmpcSolver::new(DoubleIntegrator, tr, Integrator::Rk4, 1e-9, 30, 8000);
        solver.init_from_reference();
        // Small enough offset that no bound is active at the solution.
        let x_t = DVector::from_vec(vec![0.05, 0.0]);
        let sol = solver.solve(&x_t, SqpMode::FullSqp).unwrap();
        let gain = sensitivity_gain(&solver, &sol, 1e-6).unwrap();

        // A large displacement drives the linear predictor past the bound.
        let x_far = DVector::from_vec(vec![2.0, 1.0]);
        let delta = &x_far - &gain.x0;
        let u_unclamped = &gain.u0 + &gain.k * delta;
        assert!(u_unclamped.amax() > u_bound, "constructed case must exceed the bound");
        let u_gen = generalized_tangential_predictor(&solver, &x_far).unwrap();
        assert!(u_gen[0].abs() <= u_bound + 1e-7, "generalized predictor violated the bound: {}", u_gen[0]);
    }

    #[test]
    fn active_bound_freezes_input_sensitivity() {
        let u_bound = 0.2;
        let tr = di_transcription(6, u_bound, 0.0);
        let mut solver = NmpcSolver::new(DoubleIntegrator, tr, Integrator::Rk4, 1e-9, 60, 8000);
        solver.init_from_reference();
        // Large offset saturates the first input at the solution.
        let x_t = DVector::from_vec(vec![3.0, 1.0]);
        let sol = solver.solve(&x_t, SqpMode::FullSqp).unwrap();
        let u0 = solver.input_stage(0);
        assert!((u0[0].abs() - u_bound).abs() < 1e-6, "first input should be saturated, got {}", u0[0]);
        let gain = sensitivity_gain(&solver, &sol, 1e-6).unwrap();
        // With the bound frozen active, the clamped input has zero
        // sensitivity along feasible perturbations.
        assert!(gain.k.row(0).amax() < 1e-8, "saturated input row should vanish: {:?}", gain.k);
    }

    #[test]
    fn error_coords_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let mut x_ref = DVector::from_fn(10, |_, _| rng.gen_range(-1.0..1.0));
            let q = quat_normalize(&Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ));
            for i in 0..4 {
                x_ref[6 + i] = q[i];
            }
            let e = DVector::from_fn(9, |i, _| if i < 6 { rng.gen_range(-0.5..0.5) } else { rng.gen_range(-0.2..0.2) });
            let x = apply_error_coords(&x_ref, &e);
            let back = error_coords(&x, &x_ref);
            assert_relative_eq!(back, e, epsilon = 1e-12);
            // The composed attitude stays unit-norm.
            let qn = Vector4::new(x[6], x[7], x[8], x[9]);
            assert_relative_eq!(qn.norm(), 1.0, epsilon = 1e-12);
        }
    }
}
