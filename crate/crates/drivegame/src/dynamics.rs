//! 3-DOF single-track vehicle dynamics.
//!
//! Two steppers share one canonical state layout
//! `[X, Y, d, alpha, v_x, v_y, omega]`:
//!
//! - a lateral-only affine model (linear tire forces, constant longitudinal
//!   speed) discretized by forward Euler, which keeps the control-affine
//!   structure `x' = x + dt*(f(x) + g(x)*delta)` that the closed-form
//!   control law and the HJB diagnostics rely on;
//! - a joint lateral/longitudinal model whose `v_y`/`omega` updates use the
//!   semi-implicit (backward-Euler) rational expressions, stable down to
//!   very low longitudinal speeds.
//!
//! All functions are pure; every operation also has a tape-building twin so
//! training losses can differentiate through the model. The numeric and
//! tape paths are cross-checked against each other in tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{NodeId, Tape};

/// Number of components in [`VehicleState`].
pub const STATE_DIM: usize = 7;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("longitudinal speed {0} is not strictly positive")]
    NonPositiveSpeed(f64),
    #[error("non-finite {0} after a dynamics step")]
    NonFinite(&'static str),
}

/// Physical parameters of the single-track model.
///
/// Cornering stiffnesses are negative by convention: positive slip angle
/// produces a restoring (negative) lateral force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Front cornering stiffness C_f [N/rad], negative.
    pub cornering_stiffness_front: f64,
    /// Rear cornering stiffness C_r [N/rad], negative.
    pub cornering_stiffness_rear: f64,
    /// Distance from the center of gravity to the front axle l_f [m].
    pub dist_cg_front_axle: f64,
    /// Distance from the center of gravity to the rear axle l_r [m].
    pub dist_cg_rear_axle: f64,
    /// Vehicle mass [kg].
    pub mass: f64,
    /// Yaw moment of inertia I_z [kg m^2].
    pub yaw_inertia: f64,
    /// Steering angle magnitude limit [rad].
    pub steer_limit: f64,
    /// Acceleration magnitude limit [m/s^2]; keeps speeds positive over an
    /// episode when paired with sane scenario speeds.
    pub accel_limit: f64,
    /// Integration step [s].
    pub dt: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            cornering_stiffness_front: -88_000.0,
            cornering_stiffness_rear: -94_000.0,
            dist_cg_front_axle: 1.14,
            dist_cg_rear_axle: 1.4,
            mass: 1500.0,
            yaw_inertia: 2420.0,
            steer_limit: 0.35,
            accel_limit: 3.0,
            dt: 0.05,
        }
    }
}

impl VehicleParams {
    /// Checks the sign conventions and positivity constraints. The returned
    /// string names the offending field.
    pub fn validate(&self) -> Result<(), String> {
        let checks: [(&str, bool); 9] = [
            ("mass", self.mass > 0.0),
            ("yaw_inertia", self.yaw_inertia > 0.0),
            ("dt", self.dt > 0.0),
            ("steer_limit", self.steer_limit > 0.0),
            ("accel_limit", self.accel_limit > 0.0),
            ("cornering_stiffness_front", self.cornering_stiffness_front < 0.0),
            ("cornering_stiffness_rear", self.cornering_stiffness_rear < 0.0),
            ("dist_cg_front_axle", self.dist_cg_front_axle > 0.0),
            ("dist_cg_rear_axle", self.dist_cg_rear_axle > 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(format!("vehicle parameter `{name}` out of range"));
            }
        }
        Ok(())
    }
}

/// One vehicle's physical state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Global X position [m].
    pub x_global: f64,
    /// Global Y position [m].
    pub y_global: f64,
    /// Trajectory offset d [m]: signed distance of the reference-line
    /// coordinate (Y for X-parallel references, X for Y-parallel ones)
    /// from the reference line.
    pub traj_offset: f64,
    /// Heading angle error alpha [rad], measured counterclockwise from the
    /// reference tangent.
    pub heading_err: f64,
    /// Longitudinal (body-frame) speed v_x [m/s], strictly positive.
    pub v_long: f64,
    /// Lateral (body-frame) speed v_y [m/s].
    pub v_lat: f64,
    /// Yaw rate omega [rad/s].
    pub yaw_rate: f64,
}

impl VehicleState {
    pub fn as_array(&self) -> [f64; STATE_DIM] {
        [
            self.x_global,
            self.y_global,
            self.traj_offset,
            self.heading_err,
            self.v_long,
            self.v_lat,
            self.yaw_rate,
        ]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        Self {
            x_global: a[0],
            y_global: a[1],
            traj_offset: a[2],
            heading_err: a[3],
            v_long: a[4],
            v_lat: a[5],
            yaw_rate: a[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Acceleration and steering command, clamped on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleAction {
    pub accel: f64,
    pub steer: f64,
}

impl VehicleAction {
    /// Clamps steering to `steer_limit` and acceleration to `accel_limit`.
    pub fn clamped(accel: f64, steer: f64, params: &VehicleParams) -> Self {
        Self {
            accel: accel.clamp(-params.accel_limit, params.accel_limit),
            steer: steer.clamp(-params.steer_limit, params.steer_limit),
        }
    }

    pub fn coast() -> Self {
        Self { accel: 0.0, steer: 0.0 }
    }
}

/// Which global axis the reference line is parallel to. Selects the heading
/// base angle (beta = alpha for X, alpha + pi/2 for Y) and whether the
/// trajectory offset follows Y or X.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AxisAlignment {
    ParallelToX,
    ParallelToY,
}

/// Travel direction along the reference axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }
}

/// Reference frame of one vehicle's axis-parallel straight reference line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub axis: AxisAlignment,
    pub forward: Direction,
}

impl TrackFrame {
    pub fn new(axis: AxisAlignment) -> Self {
        Self { axis, forward: Direction::Positive }
    }

    /// Global angle of the reference tangent; the vehicle heading is
    /// `heading_base() + heading_err`.
    pub fn heading_base(&self) -> f64 {
        use std::f64::consts::{FRAC_PI_2, PI};
        match (self.axis, self.forward) {
            (AxisAlignment::ParallelToX, Direction::Positive) => 0.0,
            (AxisAlignment::ParallelToY, Direction::Positive) => FRAC_PI_2,
            (AxisAlignment::ParallelToX, Direction::Negative) => PI,
            (AxisAlignment::ParallelToY, Direction::Negative) => -FRAC_PI_2,
        }
    }

    /// Sign mapping the stored trajectory offset onto "offset to the left
    /// of the travel direction", which is the frame-covariant quantity used
    /// in egocentric observations.
    pub fn left_offset_sign(&self) -> f64 {
        match self.axis {
            AxisAlignment::ParallelToX => self.forward.sign(),
            AxisAlignment::ParallelToY => -self.forward.sign(),
        }
    }
}

/// Drift and per-steer input gain of the lateral affine model, so that
/// `derivative = drift + input_gain * steer`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTerms {
    pub drift: [f64; STATE_DIM],
    pub input_gain: [f64; STATE_DIM],
}

fn require_positive_speed(v_long: f64) -> Result<(), DynamicsError> {
    if v_long > 0.0 {
        Ok(())
    } else {
        Err(DynamicsError::NonPositiveSpeed(v_long))
    }
}

/// Linear-tire lateral forces on the front and rear axles [N].
///
/// F_f = C_f((v_y + l_f w)/v_x - delta), F_r = C_r (v_y - l_r w)/v_x.
pub fn tire_forces(
    state: &VehicleState,
    steer: f64,
    params: &VehicleParams,
) -> Result<(f64, f64), DynamicsError> {
    require_positive_speed(state.v_long)?;
    let slip_front = (state.v_lat + params.dist_cg_front_axle * state.yaw_rate) / state.v_long;
    let slip_rear = (state.v_lat - params.dist_cg_rear_axle * state.yaw_rate) / state.v_long;
    let front = params.cornering_stiffness_front * (slip_front - steer);
    let rear = params.cornering_stiffness_rear * slip_rear;
    Ok((front, rear))
}

/// Drift `f(x)` and input gain `g(x)` of the lateral affine model.
///
/// The gain is nonzero only in the `v_lat` and `yaw_rate` components:
/// `g = [0, 0, 0, 0, 0, -C_f/m, -l_f C_f/I_z]`.
pub fn affine_terms(
    state: &VehicleState,
    params: &VehicleParams,
    frame: TrackFrame,
) -> Result<AffineTerms, DynamicsError> {
    require_positive_speed(state.v_long)?;
    let beta = frame.heading_base() + state.heading_err;
    let (sin_b, cos_b) = beta.sin_cos();
    let cf = params.cornering_stiffness_front;
    let cr = params.cornering_stiffness_rear;
    let lf = params.dist_cg_front_axle;
    let lr = params.dist_cg_rear_axle;

    let x_dot = state.v_long * cos_b - state.v_lat * sin_b;
    let y_dot = state.v_long * sin_b + state.v_lat * cos_b;
    let d_dot = match frame.axis {
        AxisAlignment::ParallelToX => y_dot,
        AxisAlignment::ParallelToY => x_dot,
    };
    let lat_force_drift = (cf * (state.v_lat + lf * state.yaw_rate)
        + cr * (state.v_lat - lr * state.yaw_rate))
        / (params.mass * state.v_long);
    let yaw_torque_drift = (lf * cf * (state.v_lat + lf * state.yaw_rate)
        - lr * cr * (state.v_lat - lr * state.yaw_rate))
        / (params.yaw_inertia * state.v_long);

    let drift = [
        x_dot,
        y_dot,
        d_dot,
        state.yaw_rate,
        0.0,
        -state.v_long * state.yaw_rate + lat_force_drift,
        yaw_torque_drift,
    ];
    let input_gain = [
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        -cf / params.mass,
        -lf * cf / params.yaw_inertia,
    ];
    Ok(AffineTerms { drift, input_gain })
}

/// Continuous-time state derivative of the lateral model.
pub fn lateral_derivative(
    state: &VehicleState,
    steer: f64,
    params: &VehicleParams,
    frame: TrackFrame,
) -> Result<[f64; STATE_DIM], DynamicsError> {
    let affine = affine_terms(state, params, frame)?;
    let mut out = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        out[i] = affine.drift[i] + affine.input_gain[i] * steer;
    }
    Ok(out)
}

/// One forward-Euler step of the lateral model. Longitudinal speed is
/// carried over exactly.
pub fn step_lateral(
    state: &VehicleState,
    steer: f64,
    params: &VehicleParams,
    frame: TrackFrame,
) -> Result<VehicleState, DynamicsError> {
    let deriv = lateral_derivative(state, steer, params, frame)?;
    let cur = state.as_array();
    let mut next = [0.0; STATE_DIM];
    for i in 0..STATE_DIM {
        next[i] = cur[i] + params.dt * deriv[i];
    }
    next[4] = state.v_long;
    let out = VehicleState::from_array(next);
    if !out.is_finite() {
        return Err(DynamicsError::NonFinite("lateral step"));
    }
    Ok(out)
}

/// One step of the joint lateral/longitudinal model. Pose, trajectory
/// offset, heading error and speed update explicitly; `v_lat` and
/// `yaw_rate` use the semi-implicit rational expressions, which stay
/// well-behaved at longitudinal speeds as low as 0.1 m/s.
pub fn step_joint(
    state: &VehicleState,
    action: &VehicleAction,
    params: &VehicleParams,
    frame: TrackFrame,
) -> Result<VehicleState, DynamicsError> {
    require_positive_speed(state.v_long)?;
    let dt = params.dt;
    let cf = params.cornering_stiffness_front;
    let cr = params.cornering_stiffness_rear;
    let lf = params.dist_cg_front_axle;
    let lr = params.dist_cg_rear_axle;
    let m = params.mass;
    let iz = params.yaw_inertia;
    let (vx, vy, w) = (state.v_long, state.v_lat, state.yaw_rate);

    let beta = frame.heading_base() + state.heading_err;
    let (sin_b, cos_b) = beta.sin_cos();
    let dx = dt * (vx * cos_b - vy * sin_b);
    let dy = dt * (vx * sin_b + vy * cos_b);
    let dd = match frame.axis {
        AxisAlignment::ParallelToX => dy,
        AxisAlignment::ParallelToY => dx,
    };

    let v_long_next = vx + dt * action.accel;
    if v_long_next <= 0.0 {
        return Err(DynamicsError::NonPositiveSpeed(v_long_next));
    }

    let v_lat_next = (m * vx * vy + dt * (lf * cf - lr * cr) * w
        - dt * cf * vx * action.steer
        - dt * m * vx * vx * w)
        / (m * vx - dt * (cf + cr));
    let yaw_rate_next = (iz * vx * w + dt * (lf * cf - lr * cr) * vy
        - dt * lf * cf * vx * action.steer)
        / (iz * vx - dt * (lf * lf * cf + lr * lr * cr));

    let out = VehicleState {
        x_global: state.x_global + dx,
        y_global: state.y_global + dy,
        traj_offset: state.traj_offset + dd,
        heading_err: state.heading_err + dt * w,
        v_long: v_long_next,
        v_lat: v_lat_next,
        yaw_rate: yaw_rate_next,
    };
    if !out.is_finite() {
        return Err(DynamicsError::NonFinite("joint step"));
    }
    Ok(out)
}

// ---- tape builders ---------------------------------------------------------

/// State components as scalar tape nodes, in canonical order.
pub type StateNodes = [NodeId; STATE_DIM];

/// Records one forward-Euler lateral step on the tape. `steer` is a scalar
/// node; the returned nodes are the next state's components.
pub fn lateral_step_nodes(
    tape: &mut Tape,
    state: &StateNodes,
    steer: NodeId,
    params: &VehicleParams,
    frame: TrackFrame,
) -> StateNodes {
    let cf = params.cornering_stiffness_front;
    let cr = params.cornering_stiffness_rear;
    let lf = params.dist_cg_front_axle;
    let lr = params.dist_cg_rear_axle;

    let base = tape.scalar(frame.heading_base());
    let beta = tape.add(state[3], base);
    let sin_b = tape.sin(beta);
    let cos_b = tape.cos(beta);
    let vx = state[4];
    let vy = state[5];
    let w = state[6];

    let vx_cos = tape.mul(vx, cos_b);
    let vy_sin = tape.mul(vy, sin_b);
    let x_dot = tape.sub(vx_cos, vy_sin);
    let vx_sin = tape.mul(vx, sin_b);
    let vy_cos = tape.mul(vy, cos_b);
    let y_dot = tape.add(vx_sin, vy_cos);
    let d_dot = match frame.axis {
        AxisAlignment::ParallelToX => y_dot,
        AxisAlignment::ParallelToY => x_dot,
    };

    let inv_vx = tape.recip(vx);
    tape.label(inv_vx, "lateral speed reciprocal");
    // front/rear slip force terms divided by m*v_x and I_z*v_x
    let lf_w = tape.scale(lf, w);
    let front_arm = tape.add(vy, lf_w);
    let lr_w = tape.scale(-lr, w);
    let rear_arm = tape.add(vy, lr_w);
    let cf_front = tape.scale(cf, front_arm);
    let cr_rear = tape.scale(cr, rear_arm);
    let lat_sum = tape.add(cf_front, cr_rear);
    let lat_over_vx = tape.mul(lat_sum, inv_vx);
    let lat_drift = tape.scale(1.0 / params.mass, lat_over_vx);
    let vx_w = tape.mul(vx, w);
    let neg_vx_w = tape.neg(vx_w);
    let vy_drift = tape.add(neg_vx_w, lat_drift);
    let steer_vy = tape.scale(-cf / params.mass, steer);
    let vy_dot = tape.add(vy_drift, steer_vy);

    let lfcf_front = tape.scale(lf * cf, front_arm);
    let lrcr_rear = tape.scale(-lr * cr, rear_arm);
    let yaw_sum = tape.add(lfcf_front, lrcr_rear);
    let yaw_over_vx = tape.mul(yaw_sum, inv_vx);
    let yaw_drift = tape.scale(1.0 / params.yaw_inertia, yaw_over_vx);
    let steer_w = tape.scale(-lf * cf / params.yaw_inertia, steer);
    let w_dot = tape.add(yaw_drift, steer_w);

    // v_x has zero derivative in the lateral model: carry the node over.
    let derivs = [x_dot, y_dot, d_dot, w, state[4], vy_dot, w_dot];
    let mut next = [0; STATE_DIM];
    for i in 0..STATE_DIM {
        if i == 4 {
            next[i] = state[4];
            continue;
        }
        let stepped = tape.scale(params.dt, derivs[i]);
        next[i] = tape.add(state[i], stepped);
    }
    next
}

/// Records one joint-model step on the tape; `accel` and `steer` are
/// scalar nodes.
pub fn joint_step_nodes(
    tape: &mut Tape,
    state: &StateNodes,
    accel: NodeId,
    steer: NodeId,
    params: &VehicleParams,
    frame: TrackFrame,
) -> StateNodes {
    let dt = params.dt;
    let cf = params.cornering_stiffness_front;
    let cr = params.cornering_stiffness_rear;
    let lf = params.dist_cg_front_axle;
    let lr = params.dist_cg_rear_axle;
    let m = params.mass;
    let iz = params.yaw_inertia;

    let base = tape.scalar(frame.heading_base());
    let beta = tape.add(state[3], base);
    let sin_b = tape.sin(beta);
    let cos_b = tape.cos(beta);
    let vx = state[4];
    let vy = state[5];
    let w = state[6];

    let vx_cos = tape.mul(vx, cos_b);
    let vy_sin = tape.mul(vy, sin_b);
    let xdot = tape.sub(vx_cos, vy_sin);
    let dx = tape.scale(dt, xdot);
    let vx_sin = tape.mul(vx, sin_b);
    let vy_cos = tape.mul(vy, cos_b);
    let ydot = tape.add(vx_sin, vy_cos);
    let dy = tape.scale(dt, ydot);
    let dd = match frame.axis {
        AxisAlignment::ParallelToX => dy,
        AxisAlignment::ParallelToY => dx,
    };

    let x_next = tape.add(state[0], dx);
    let y_next = tape.add(state[1], dy);
    let d_next = tape.add(state[2], dd);
    let dt_w = tape.scale(dt, w);
    let alpha_next = tape.add(state[3], dt_w);
    let dt_a = tape.scale(dt, accel);
    let vx_next = tape.add(state[4], dt_a);

    // v_y' = (m vx vy + dt (lf cf - lr cr) w - dt cf vx steer - dt m vx^2 w)
    //        / (m vx - dt (cf + cr))
    let m_vx = tape.scale(m, vx);
    let m_vx_vy = tape.mul(m_vx, vy);
    let coupling_w = tape.scale(dt * (lf * cf - lr * cr), w);
    let vx_steer = tape.mul(vx, steer);
    let steer_term = tape.scale(-dt * cf, vx_steer);
    let vx_sq = tape.mul(vx, vx);
    let vx_sq_w = tape.mul(vx_sq, w);
    let centripetal = tape.scale(-dt * m, vx_sq_w);
    let num_a = tape.add(m_vx_vy, coupling_w);
    let num_b = tape.add(steer_term, centripetal);
    let vy_num = tape.add(num_a, num_b);
    let denom_shift = tape.scalar(-dt * (cf + cr));
    let vy_den = tape.add(m_vx, denom_shift);
    let vy_next = tape.div(vy_num, vy_den);
    tape.label(vy_next, "joint v_lat update");

    // w' = (iz vx w + dt (lf cf - lr cr) vy - dt lf cf vx steer)
    //      / (iz vx - dt (lf^2 cf + lr^2 cr))
    let iz_vx = tape.scale(iz, vx);
    let iz_vx_w = tape.mul(iz_vx, w);
    let coupling_vy = tape.scale(dt * (lf * cf - lr * cr), vy);
    let steer_yaw = tape.scale(-dt * lf * cf, vx_steer);
    let wnum_a = tape.add(iz_vx_w, coupling_vy);
    let w_num = tape.add(wnum_a, steer_yaw);
    let wden_shift = tape.scalar(-dt * (lf * lf * cf + lr * lr * cr));
    let w_den = tape.add(iz_vx, wden_shift);
    let w_next = tape.div(w_num, w_den);
    tape.label(w_next, "joint yaw_rate update");

    [x_next, y_next, d_next, alpha_next, vx_next, vy_next, w_next]
}
