//! Nonlinear multirotor simulation environment: rigid-body dynamics with
//! linear/quadratic drag, propeller allocation with saturation, a geometric
//! attitude inner loop, constant-force disturbance injection and episode
//! tracing.
//!
//! The physics integrate at 200 Hz (fixed-step RK4); the attitude controller
//! recomputes its torque every second substep (100 Hz).

use crate::attitude_math::{omega_matrix, quat_from_euler_zyx, quat_normalize, quat_to_rot};
use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Physics substep: 200 Hz.
pub const SIM_DT: f64 = 1.0 / 200.0;
/// Attitude controller updates every `ATT_DECIMATION`-th physics substep.
pub const ATT_DECIMATION: usize = 2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("integration produced non-finite state at t = {0:.3} s")]
    NonFinite(f64),
    #[error("allocation matrix is singular")]
    SingularAllocation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Unit quaternion q_WB, scalar-first.
    pub attitude: Vector4<f64>,
    /// Body-frame angular velocity.
    pub angular_velocity: Vector3<f64>,
}

impl RobotState {
    pub fn hover_at(position: Vector3<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: crate::attitude_math::QUAT_IDENTITY,
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.attitude.iter().all(|v| v.is_finite())
            && self.angular_velocity.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultirotorParams {
    pub mass: f64,
    /// Diagonal of the inertia tensor.
    pub inertia: Vector3<f64>,
    pub gravity: f64,
    /// Linear translational drag coefficient.
    pub c_d1: f64,
    /// Quadratic translational drag coefficient.
    pub c_d2: f64,
    /// Rotational drag coefficient.
    pub c_d3: f64,
    /// Arm length from center to each propeller.
    pub arm: f64,
    /// Propeller drag-torque coefficient (yaw moment per unit thrust).
    pub kappa: f64,
    pub prop_thrust_min: f64,
    pub prop_thrust_max: f64,
    /// Geometric attitude controller gains (per body axis).
    pub att_kr: Vector3<f64>,
    pub att_kw: Vector3<f64>,
}

impl MultirotorParams {
    pub fn defaults() -> Self {
        let mass = 1.0;
        let gravity = 9.81;
        Self {
            mass,
            inertia: Vector3::new(0.01, 0.01, 0.02),
            gravity,
            c_d1: 0.1,
            c_d2: 0.01,
            c_d3: 0.01,
            arm: 0.17,
            kappa: 0.016,
            prop_thrust_min: 0.0,
            prop_thrust_max: 0.75 * mass * gravity,
            // Tuned so the closed-loop tilt response fits a first-order lag
            // with time constant ≈ 0.15 s (the linear model relies on this).
            att_kr: Vector3::new(2.0, 2.0, 1.28),
            att_kw: Vector3::new(0.29, 0.29, 0.32),
        }
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.inertia)
    }

    /// Allocation matrix 𝒜 mapping per-propeller thrusts to (t_cmd, τ) for a
    /// plus-configuration quad: propellers at +x, +y, −x, −y.
    pub fn alloc_matrix(&self) -> Matrix4<f64> {
        let (l, k) = (self.arm, self.kappa);
        Matrix4::new(
            1.0, 1.0, 1.0, 1.0, //
            0.0, l, 0.0, -l, //
            -l, 0.0, l, 0.0, //
            k, -k, k, -k,
        )
    }
}

/// Constant-force disturbance set `{f | f_min ≤ ‖f‖ ≤ f_max}`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DisturbanceSet {
    pub f_min: f64,
    pub f_max: f64,
}

impl DisturbanceSet {
    pub fn zero() -> Self {
        Self { f_min: 0.0, f_max: 0.0 }
    }

    /// Draws a force via spherical coordinates: magnitude ~ U(f_min, f_max),
    /// θ ~ U(0, π), φ ~ U(0, 2π). Drawn once and held constant per episode.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vector3<f64> {
        assert!(0.0 <= self.f_min && self.f_min <= self.f_max, "invalid disturbance bounds");
        let r = if self.f_max > self.f_min { rng.gen_range(self.f_min..self.f_max) } else { self.f_min };
        self.direction(rng) * r
    }

    /// Same angular law at a fixed magnitude (worst-case probes).
    pub fn sample_at_magnitude<R: Rng>(&self, magnitude: f64, rng: &mut R) -> Vector3<f64> {
        self.direction(rng) * magnitude
    }

    fn direction<R: Rng>(&self, rng: &mut R) -> Vector3<f64> {
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let phi = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
    }
}

/// Setpoints handed to the attitude inner loop each control tick.
#[derive(Debug, Clone, Copy)]
pub enum CommandInput {
    /// Linear pipeline: collective thrust plus desired roll/pitch tilt
    /// (yaw reference 0).
    TiltThrust { thrust: f64, roll: f64, pitch: f64 },
    /// Nonlinear pipeline: collective thrust plus body-rate command; the
    /// attitude term is disabled (R_des tracks the current attitude) and
    /// only rate/acceleration errors act.
    RateThrust { thrust: f64, omega_cmd: Vector3<f64>, omega_dot_cmd: Vector3<f64> },
}

impl CommandInput {
    pub fn thrust(&self) -> f64 {
        match self {
            CommandInput::TiltThrust { thrust, .. } => *thrust,
            CommandInput::RateThrust { thrust, .. } => *thrust,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StateDerivative {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: Vector4<f64>,
    pub angular_velocity: Vector3<f64>,
}

/// Continuous-time dynamics under a body wrench (collective thrust along
/// body z plus torque) and a constant world-frame disturbance force.
pub fn derivative(
    state: &RobotState,
    thrust: f64,
    torque: &Vector3<f64>,
    f_ext: &Vector3<f64>,
    params: &MultirotorParams,
) -> StateDerivative {
    let r = quat_to_rot(&state.attitude);
    let v = state.velocity;
    let w = state.angular_velocity;
    let f_drag = -params.c_d1 * v - params.c_d2 * v.norm() * v;
    let v_dot =
        (r * Vector3::new(0.0, 0.0, thrust) + f_drag + f_ext) / params.mass - Vector3::new(0.0, 0.0, params.gravity);
    let q_dot = 0.5 * omega_matrix(&w) * state.attitude;
    let i_mav = params.inertia;
    let iw = Vector3::new(i_mav.x * w.x, i_mav.y * w.y, i_mav.z * w.z);
    let tau_drag = -params.c_d3 * w;
    let w_dot = Vector3::new(
        (-(w.cross(&iw)).x + torque.x + tau_drag.x) / i_mav.x,
        (-(w.cross(&iw)).y + torque.y + tau_drag.y) / i_mav.y,
        (-(w.cross(&iw)).z + torque.z + tau_drag.z) / i_mav.z,
    );
    StateDerivative { position: v, velocity: v_dot, attitude: q_dot, angular_velocity: w_dot }
}

/// One RK4 step under a frozen wrench; the quaternion is renormalized.
pub fn rk4_step(
    state: &RobotState,
    thrust: f64,
    torque: &Vector3<f64>,
    f_ext: &Vector3<f64>,
    params: &MultirotorParams,
    dt: f64,
) -> RobotState {
    let add = |s: &RobotState, d: &StateDerivative, h: f64| RobotState {
        position: s.position + h * d.position,
        velocity: s.velocity + h * d.velocity,
        attitude: s.attitude + h * d.attitude,
        angular_velocity: s.angular_velocity + h * d.angular_velocity,
    };
    let k1 = derivative(state, thrust, torque, f_ext, params);
    let k2 = derivative(&add(state, &k1, 0.5 * dt), thrust, torque, f_ext, params);
    let k3 = derivative(&add(state, &k2, 0.5 * dt), thrust, torque, f_ext, params);
    let k4 = derivative(&add(state, &k3, dt), thrust, torque, f_ext, params);
    let mut next = RobotState {
        position: state.position + dt / 6.0 * (k1.position + 2.0 * k2.position + 2.0 * k3.position + k4.position),
        velocity: state.velocity + dt / 6.0 * (k1.velocity + 2.0 * k2.velocity + 2.0 * k3.velocity + k4.velocity),
        attitude: state.attitude + dt / 6.0 * (k1.attitude + 2.0 * k2.attitude + 2.0 * k3.attitude + k4.attitude),
        angular_velocity: state.angular_velocity
            + dt / 6.0 * (k1.angular_velocity + 2.0 * k2.angular_velocity + 2.0 * k3.angular_velocity + k4.angular_velocity),
    };
    next.attitude = quat_normalize(&next.attitude);
    next
}

/// Geometric SO(3) tracking controller. In [`CommandInput::RateThrust`] mode
/// the attitude error term vanishes by construction and the torque reduces to
/// rate feedback plus the rigid-body feedforward.
pub fn attitude_control(state: &RobotState, cmd: &CommandInput, params: &MultirotorParams) -> Vector3<f64> {
    let w = state.angular_velocity;
    let i_mat = params.inertia_matrix();
    let coriolis = w.cross(&(i_mat * w));
    match cmd {
        CommandInput::TiltThrust { roll, pitch, .. } => {
            let r = quat_to_rot(&state.attitude);
            let r_des = quat_to_rot(&quat_from_euler_zyx(0.0, *pitch, *roll));
            let e_mat = 0.5 * (r_des.transpose() * r - r.transpose() * r_des);
            let e_r = Vector3::new(e_mat[(2, 1)], e_mat[(0, 2)], e_mat[(1, 0)]);
            let e_w = w; // desired rates are zero in tilt mode
            -params.att_kr.component_mul(&e_r) - params.att_kw.component_mul(&e_w) + coriolis
        }
        CommandInput::RateThrust { omega_cmd, omega_dot_cmd, .. } => {
            let e_w = w - omega_cmd;
            -params.att_kw.component_mul(&e_w) + coriolis + i_mat * omega_dot_cmd
        }
    }
}

/// Maps a desired wrench to per-propeller thrusts via 𝒜⁻¹ (exact for the
/// square four-propeller case).
pub fn allocate(thrust: f64, torque: &Vector3<f64>, params: &MultirotorParams) -> Result<Vector4<f64>, SimError> {
    let a_inv = params.alloc_matrix().try_inverse().ok_or(SimError::SingularAllocation)?;
    Ok(a_inv * Vector4::new(thrust, torque.x, torque.y, torque.z))
}

/// Forward allocation map: achieved (thrust, torque) of given prop thrusts.
pub fn wrench_of(props: &Vector4<f64>, params: &MultirotorParams) -> (f64, Vector3<f64>) {
    let w = params.alloc_matrix() * props;
    (w[0], Vector3::new(w[1], w[2], w[3]))
}

/// Stateful stepper that owns the attitude-loop decimation and actuator
/// saturation. One [`Simulator::step`] call advances one 200 Hz substep.
pub struct Simulator {
    pub params: MultirotorParams,
    torque: Vector3<f64>,
    substep: usize,
    last_props: Vector4<f64>,
}

impl Simulator {
    pub fn new(params: MultirotorParams) -> Self {
        Self { params, torque: Vector3::zeros(), substep: 0, last_props: Vector4::zeros() }
    }

    pub fn reset(&mut self) {
        self.torque = Vector3::zeros();
        self.substep = 0;
        self.last_props = Vector4::zeros();
    }

    /// Per-propeller thrusts applied on the most recent substep.
    pub fn last_props(&self) -> Vector4<f64> {
        self.last_props
    }

    pub fn step(
        &mut self,
        state: &RobotState,
        cmd: &CommandInput,
        f_ext: &Vector3<f64>,
    ) -> Result<RobotState, SimError> {
        if !state.is_finite() {
            return Err(SimError::NonFinite(self.substep as f64 * SIM_DT));
        }
        if self.substep % ATT_DECIMATION == 0 {
            self.torque = attitude_control(state, cmd, &self.params);
        }
        // Saturate through the actuators: clamp each propeller and map back
        // to the achieved wrench.
        let props = allocate(cmd.thrust(), &self.torque, &self.params)?
            .map(|f| f.clamp(self.params.prop_thrust_min, self.params.prop_thrust_max));
        let (thrust, torque) = wrench_of(&props, &self.params);
        self.last_props = props;
        let next = rk4_step(state, thrust, &torque, f_ext, &self.params, SIM_DT);
        self.substep += 1;
        if !next.is_finite() {
            return Err(SimError::NonFinite(self.substep as f64 * SIM_DT));
        }
        Ok(next)
    }
}

/// One logged sample of an episode trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: f64,
    pub state: RobotState,
    pub props: Vector4<f64>,
    pub f_ext: Vector3<f64>,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,u0,u1,u2,u3,fx,fy,fz")?;
    for r in rows {
        let s = &r.state;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            s.position.x,
            s.position.y,
            s.position.z,
            s.velocity.x,
            s.velocity.y,
            s.velocity.z,
            s.attitude[0],
            s.attitude[1],
            s.attitude[2],
            s.attitude[3],
            s.angular_velocity.x,
            s.angular_velocity.y,
            s.angular_velocity.z,
            r.props[0],
            r.props[1],
            r.props[2],
            r.props[3],
            r.f_ext.x,
            r.f_ext.y,
            r.f_ext.z,
        )?;
    }
    Ok(())
}
