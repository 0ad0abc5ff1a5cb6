//! The N-player intersection game.
//!
//! Vehicles follow axis-parallel straight reference lines that cross at the
//! intersection center. Transitions are decoupled (each vehicle advances by
//! its own dynamics step); the game coupling lives entirely in the
//! per-player cost, whose safety term activates when another vehicle comes
//! closer than the safe distance.
//!
//! Observations come in two views: the flat global state, and an
//! egocentric [`LocalObservation`] (own dynamic state plus the relative
//! state of every other vehicle in the observer's body frame) whose shape
//! is identical for every vehicle, which is what makes parameter sharing
//! across vehicles possible.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    self, joint_step_nodes, lateral_step_nodes, AxisAlignment, DynamicsError, StateNodes,
    TrackFrame, VehicleAction, VehicleParams, VehicleState, STATE_DIM,
};
use crate::tape::{NodeId, Tape};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("vehicle {vehicle} dynamics failure at step {step}: {source}")]
    Dynamics {
        vehicle: usize,
        step: usize,
        source: DynamicsError,
    },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("vehicle index {0} out of range for {1} vehicles")]
    IndexOutOfRange(usize, usize),
}

/// Which other vehicle the safety term measures against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximityRule {
    /// Distance to the nearest other vehicle (default: the actual threat).
    Nearest,
    /// Distance to the farthest other vehicle. For two vehicles this
    /// coincides with `Nearest`.
    Farthest,
}

/// Cost weights and constants. Larger weights penalize the matching term
/// harder; the cost is minimized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    /// Weight on squared trajectory offset.
    pub offset: f64,
    /// Weight on squared heading error.
    pub heading: f64,
    /// Weight on squared longitudinal speed error.
    pub speed: f64,
    /// Weight on the safety hinge term.
    pub safety: f64,
    /// Weight on squared steering angle.
    pub steer: f64,
    /// Weight on squared acceleration.
    pub accel: f64,
    /// Distance below which the safety term activates [m].
    pub safe_distance: f64,
    /// Default reference speed [m/s]; per-vehicle values override it.
    pub reference_speed: f64,
    pub proximity: ProximityRule,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            offset: 0.4,
            heading: 1.0,
            speed: 0.5,
            safety: 1.0,
            steer: 80.0,
            accel: 1.0,
            safe_distance: 5.0,
            reference_speed: 5.0,
            proximity: ProximityRule::Nearest,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), String> {
        let named = [
            ("offset", self.offset),
            ("heading", self.heading),
            ("speed", self.speed),
            ("safety", self.safety),
            ("steer", self.steer),
            ("accel", self.accel),
        ];
        for (name, v) in named {
            if !(v >= 0.0) {
                return Err(format!("cost weight `{name}` must be >= 0, got {v}"));
            }
        }
        if !(self.safe_distance > 0.0) {
            return Err(format!("`safe_distance` must be > 0, got {}", self.safe_distance));
        }
        if !(self.reference_speed > 0.0) {
            return Err(format!(
                "`reference_speed` must be > 0, got {}",
                self.reference_speed
            ));
        }
        Ok(())
    }
}

/// Whether vehicles command only steering or steering plus acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    LateralOnly,
    Joint,
}

impl ControlMode {
    pub fn action_dim(self) -> usize {
        match self {
            ControlMode::LateralOnly => 1,
            ControlMode::Joint => 2,
        }
    }
}

/// One vehicle's slot in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub start: VehicleState,
    pub frame: TrackFrame,
    /// Coordinate of the reference line (Y for X-parallel lines, X for
    /// Y-parallel ones) [m].
    pub reference_offset: f64,
    /// Target longitudinal speed [m/s].
    pub reference_speed: f64,
}

impl VehicleSpec {
    /// Convenience constructor: places the vehicle at `(x, y)` at speed
    /// `v`, aligned with its reference and with the trajectory offset
    /// derived from the reference line.
    pub fn on_line(
        x: f64,
        y: f64,
        v: f64,
        frame: TrackFrame,
        reference_offset: f64,
        reference_speed: f64,
    ) -> Self {
        let coord = match frame.axis {
            AxisAlignment::ParallelToX => y,
            AxisAlignment::ParallelToY => x,
        };
        Self {
            start: VehicleState {
                x_global: x,
                y_global: y,
                traj_offset: coord - reference_offset,
                heading_err: 0.0,
                v_long: v,
                v_lat: 0.0,
                yaw_rate: 0.0,
            },
            frame,
            reference_offset,
            reference_speed,
        }
    }
}

/// Full scenario description shared by training, simulation and metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub vehicles: Vec<VehicleSpec>,
    pub params: VehicleParams,
    pub weights: CostWeights,
    pub episode_length: usize,
    pub control_mode: ControlMode,
    /// Where the reference lines cross [m].
    pub intersection_center: [f64; 2],
    /// How far past the center a vehicle must be to count as through.
    pub passed_margin: f64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |msg: String| Err(EnvError::InvalidSpec(msg));
        if self.vehicles.is_empty() {
            return fail("`vehicles` must list at least one vehicle".into());
        }
        if self.episode_length == 0 {
            return fail("`episode_length` must be > 0".into());
        }
        if !(self.passed_margin > 0.0) {
            return fail(format!("`passed_margin` must be > 0, got {}", self.passed_margin));
        }
        self.params.validate().map_err(EnvError::InvalidSpec)?;
        self.weights.validate().map_err(EnvError::InvalidSpec)?;
        for (i, v) in self.vehicles.iter().enumerate() {
            if !(v.reference_speed > 0.0) {
                return fail(format!("vehicle {i}: `reference_speed` must be > 0"));
            }
            if !(v.start.v_long > 0.0) {
                return fail(format!("vehicle {i}: starting `v_long` must be > 0"));
            }
            if !v.start.is_finite() {
                return fail(format!("vehicle {i}: starting state has non-finite components"));
            }
            let coord = match v.frame.axis {
                AxisAlignment::ParallelToX => v.start.y_global,
                AxisAlignment::ParallelToY => v.start.x_global,
            };
            if (coord - v.reference_offset - v.start.traj_offset).abs() > 1e-6 {
                return fail(format!(
                    "vehicle {i}: `traj_offset` inconsistent with position and `reference_offset`"
                ));
            }
        }
        Ok(())
    }
}

/// The game state: every vehicle's state plus the simulation clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub vehicles: Vec<VehicleState>,
    pub step_index: usize,
}

impl GlobalState {
    /// Flat vector of all vehicle states in canonical component order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.vehicles.len() * STATE_DIM);
        for v in &self.vehicles {
            out.extend_from_slice(&v.as_array());
        }
        out
    }

    pub fn from_flat(flat: &[f64], step_index: usize) -> Self {
        assert_eq!(flat.len() % STATE_DIM, 0);
        let vehicles = flat
            .chunks_exact(STATE_DIM)
            .map(|c| {
                let mut a = [0.0; STATE_DIM];
                a.copy_from_slice(c);
                VehicleState::from_array(a)
            })
            .collect();
        Self { vehicles, step_index }
    }
}

/// Another vehicle seen from the observer's body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeState {
    /// Longitudinal (ahead-positive) offset in the observer frame [m].
    pub rel_x: f64,
    /// Lateral (left-positive) offset in the observer frame [m].
    pub rel_y: f64,
    /// Heading difference wrapped to (-pi, pi].
    pub rel_heading: f64,
    /// The other vehicle's longitudinal speed [m/s].
    pub other_v_long: f64,
}

/// Egocentric observation: identical layout for every vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalObservation {
    /// `[left_offset, heading_err, v_long, v_lat, yaw_rate]`. The offset is
    /// signed to the left of the travel direction so the view is invariant
    /// under rigid motions of the whole scene.
    pub own: [f64; 5],
    /// Other vehicles sorted by current distance, nearest first.
    pub others: Vec<RelativeState>,
}

impl LocalObservation {
    /// Flat layout of dimension `5 + 4*(n-1)`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(5 + 4 * self.others.len());
        out.extend_from_slice(&self.own);
        for o in &self.others {
            out.extend_from_slice(&[o.rel_x, o.rel_y, o.rel_heading, o.other_v_long]);
        }
        out
    }

    pub fn dim_for(n_vehicles: usize) -> usize {
        5 + 4 * (n_vehicles - 1)
    }
}

/// Per-player cost split into the four reported components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostBreakdown {
    /// Trajectory tracking: weighted squared offset plus heading error.
    pub tracking: f64,
    /// Traffic efficiency: weighted squared speed error.
    pub efficiency: f64,
    /// Safety hinge on the proximity distance.
    pub safety: f64,
    /// Comfort: weighted squared steering and acceleration.
    pub comfort: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.tracking + self.efficiency + self.safety + self.comfort
    }
}

/// Euclidean distance between two vehicles' global positions.
pub fn pairwise_distance(state: &GlobalState, i: usize, j: usize) -> Result<f64, EnvError> {
    let n = state.vehicles.len();
    if i >= n {
        return Err(EnvError::IndexOutOfRange(i, n));
    }
    if j >= n {
        return Err(EnvError::IndexOutOfRange(j, n));
    }
    let (a, b) = (&state.vehicles[i], &state.vehicles[j]);
    Ok(((a.x_global - b.x_global).powi(2) + (a.y_global - b.y_global).powi(2)).sqrt())
}

/// The game environment: a validated scenario plus its operations.
#[derive(Debug, Clone)]
pub struct GameEnv {
    spec: ScenarioSpec,
}

impl GameEnv {
    pub fn new(spec: ScenarioSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn num_vehicles(&self) -> usize {
        self.spec.vehicles.len()
    }

    /// Initial state from the scenario's starting slots.
    pub fn reset(&self) -> GlobalState {
        GlobalState {
            vehicles: self.spec.vehicles.iter().map(|v| v.start).collect(),
            step_index: 0,
        }
    }

    fn check_index(&self, i: usize) -> Result<(), EnvError> {
        let n = self.num_vehicles();
        if i >= n {
            Err(EnvError::IndexOutOfRange(i, n))
        } else {
            Ok(())
        }
    }

    /// Advances every vehicle independently by one dynamics step. In
    /// lateral-only mode acceleration is ignored and longitudinal speed is
    /// carried over exactly.
    pub fn step(
        &self,
        state: &GlobalState,
        actions: &[VehicleAction],
    ) -> Result<GlobalState, EnvError> {
        let n = self.num_vehicles();
        if actions.len() != n {
            return Err(EnvError::ActionCount { expected: n, got: actions.len() });
        }
        let mut vehicles = Vec::with_capacity(n);
        for (i, (v, a)) in state.vehicles.iter().zip(actions).enumerate() {
            let frame = self.spec.vehicles[i].frame;
            let next = match self.spec.control_mode {
                ControlMode::LateralOnly => {
                    dynamics::step_lateral(v, a.steer, &self.spec.params, frame)
                }
                ControlMode::Joint => dynamics::step_joint(v, a, &self.spec.params, frame),
            }
            .map_err(|source| EnvError::Dynamics { vehicle: i, step: state.step_index, source })?;
            vehicles.push(next);
        }
        Ok(GlobalState { vehicles, step_index: state.step_index + 1 })
    }

    /// The proximity distance feeding the safety term: distance to the
    /// nearest (default) or farthest other vehicle. `None` when alone.
    pub fn proximity_distance(&self, state: &GlobalState, i: usize) -> Option<f64> {
        let n = state.vehicles.len();
        if n < 2 {
            return None;
        }
        let dists = (0..n).filter(|&j| j != i).map(|j| {
            pairwise_distance(state, i, j).expect("indices in range")
        });
        Some(match self.spec.weights.proximity {
            ProximityRule::Nearest => dists.fold(f64::INFINITY, f64::min),
            ProximityRule::Farthest => dists.fold(0.0, f64::max),
        })
    }

    /// Per-player stage cost. In lateral-only mode the acceleration channel
    /// is treated as zero.
    pub fn cost(
        &self,
        state: &GlobalState,
        actions: &[VehicleAction],
        i: usize,
    ) -> Result<CostBreakdown, EnvError> {
        self.check_index(i)?;
        let w = &self.spec.weights;
        let v = &state.vehicles[i];
        let vspec = &self.spec.vehicles[i];

        let tracking = w.offset * v.traj_offset * v.traj_offset
            + w.heading * v.heading_err * v.heading_err;
        let dv = v.v_long - vspec.reference_speed;
        let efficiency = w.speed * dv * dv;

        let safety = match self.proximity_distance(state, i) {
            Some(prox) => {
                let margin = w.safe_distance * w.safe_distance - prox * prox;
                w.safety * margin.max(0.0)
            }
            None => 0.0,
        };

        let a = &actions[i];
        let accel = match self.spec.control_mode {
            ControlMode::LateralOnly => 0.0,
            ControlMode::Joint => a.accel,
        };
        let comfort = w.steer * a.steer * a.steer + w.accel * accel * accel;

        Ok(CostBreakdown { tracking, efficiency, safety, comfort })
    }

    /// Global heading of vehicle `i`: reference tangent plus heading error.
    pub fn global_heading(&self, state: &GlobalState, i: usize) -> f64 {
        self.spec.vehicles[i].frame.heading_base() + state.vehicles[i].heading_err
    }

    /// Distance ordering of the other vehicles, nearest first; ties break
    /// on the index so the ordering is always deterministic.
    pub fn observation_order(&self, state: &GlobalState, i: usize) -> Vec<usize> {
        let mut order: Vec<usize> =
            (0..state.vehicles.len()).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            let da = pairwise_distance(state, i, a).expect("in range");
            let db = pairwise_distance(state, i, b).expect("in range");
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        });
        order
    }

    /// Egocentric observation of vehicle `i`.
    pub fn observe(&self, state: &GlobalState, i: usize) -> Result<LocalObservation, EnvError> {
        self.check_index(i)?;
        let me = &state.vehicles[i];
        let frame = self.spec.vehicles[i].frame;
        let own = [
            frame.left_offset_sign() * me.traj_offset,
            me.heading_err,
            me.v_long,
            me.v_lat,
            me.yaw_rate,
        ];
        let psi_i = self.global_heading(state, i);
        let (sin_i, cos_i) = psi_i.sin_cos();
        let others = self
            .observation_order(state, i)
            .into_iter()
            .map(|j| {
                let other = &state.vehicles[j];
                let dx = other.x_global - me.x_global;
                let dy = other.y_global - me.y_global;
                RelativeState {
                    rel_x: cos_i * dx + sin_i * dy,
                    rel_y: -sin_i * dx + cos_i * dy,
                    rel_heading: crate::tape::wrap_to_pi(
                        self.global_heading(state, j) - psi_i,
                    ),
                    other_v_long: other.v_long,
                }
            })
            .collect();
        Ok(LocalObservation { own, others })
    }

    /// Signed progress along the travel direction, measured from the
    /// intersection center.
    pub fn along_track(&self, state: &GlobalState, i: usize) -> f64 {
        let v = &state.vehicles[i];
        let f = self.spec.vehicles[i].frame;
        let c = self.spec.intersection_center;
        match f.axis {
            AxisAlignment::ParallelToX => f.forward.sign() * (v.x_global - c[0]),
            AxisAlignment::ParallelToY => f.forward.sign() * (v.y_global - c[1]),
        }
    }

    /// True once the episode horizon is reached or every vehicle is past
    /// the intersection center by the configured margin.
    pub fn is_terminal(&self, state: &GlobalState) -> bool {
        if state.step_index >= self.spec.episode_length {
            return true;
        }
        (0..self.num_vehicles()).all(|i| self.along_track(state, i) > self.spec.passed_margin)
    }

    // ---- tape builders -----------------------------------------------------

    /// Records the joint transition of all vehicles. `actions[i]` is
    /// `(accel, steer)` as scalar nodes; accel is unused in lateral mode.
    pub fn step_nodes(
        &self,
        tape: &mut Tape,
        states: &[StateNodes],
        actions: &[(NodeId, NodeId)],
    ) -> Vec<StateNodes> {
        states
            .iter()
            .zip(actions)
            .enumerate()
            .map(|(i, (s, &(accel, steer)))| {
                let frame = self.spec.vehicles[i].frame;
                match self.spec.control_mode {
                    ControlMode::LateralOnly => {
                        lateral_step_nodes(tape, s, steer, &self.spec.params, frame)
                    }
                    ControlMode::Joint => {
                        joint_step_nodes(tape, s, accel, steer, &self.spec.params, frame)
                    }
                }
            })
            .collect()
    }

    /// Records player `i`'s stage cost over state and action nodes.
    pub fn cost_nodes(
        &self,
        tape: &mut Tape,
        states: &[StateNodes],
        actions: &[(NodeId, NodeId)],
        i: usize,
    ) -> NodeId {
        let w = &self.spec.weights;
        let s = &states[i];
        let d_sq = tape.square(s[2]);
        let a_sq = tape.square(s[3]);
        let tracking_d = tape.scale(w.offset, d_sq);
        let tracking_a = tape.scale(w.heading, a_sq);
        let tracking = tape.add(tracking_d, tracking_a);

        let vref = tape.scalar(self.spec.vehicles[i].reference_speed);
        let dv = tape.sub(s[4], vref);
        let dv_sq = tape.square(dv);
        let efficiency = tape.scale(w.speed, dv_sq);

        let n = states.len();
        let safety = if n >= 2 {
            let mut dist_sqs = Vec::with_capacity(n - 1);
            for (j, other) in states.iter().enumerate() {
                if j == i {
                    continue;
                }
                let dx = tape.sub(other[0], s[0]);
                let dy = tape.sub(other[1], s[1]);
                let dx2 = tape.square(dx);
                let dy2 = tape.square(dy);
                dist_sqs.push(tape.add(dx2, dy2));
            }
            // running min(a,b) = b - max0(b-a); max(a,b) = a + max0(b-a)
            let mut prox_sq = dist_sqs[0];
            for &d in &dist_sqs[1..] {
                let diff = tape.sub(d, prox_sq);
                let hinge = tape.max0(diff);
                prox_sq = match w.proximity {
                    ProximityRule::Nearest => {
                        let neg = tape.neg(hinge);
                        tape.add(d, neg)
                    }
                    ProximityRule::Farthest => tape.add(prox_sq, hinge),
                };
            }
            let limit = tape.scalar(w.safe_distance * w.safe_distance);
            let margin = tape.sub(limit, prox_sq);
            let hinge = tape.max0(margin);
            tape.scale(w.safety, hinge)
        } else {
            tape.scalar(0.0)
        };

        let (accel, steer) = actions[i];
        let steer_sq = tape.square(steer);
        let mut comfort = tape.scale(w.steer, steer_sq);
        if self.spec.control_mode == ControlMode::Joint {
            let accel_sq = tape.square(accel);
            let accel_cost = tape.scale(w.accel, accel_sq);
            comfort = tape.add(comfort, accel_cost);
        }

        let te = tape.add(tracking, efficiency);
        let sc = tape.add(safety, comfort);
        tape.add(te, sc)
    }

    /// Records vehicle `i`'s flat egocentric observation. `order` must be
    /// the distance ordering to use (normally [`Self::observation_order`]
    /// of the numeric state the nodes were built from).
    pub fn observe_nodes(
        &self,
        tape: &mut Tape,
        states: &[StateNodes],
        i: usize,
        order: &[usize],
    ) -> NodeId {
        let s = &states[i];
        let frame = self.spec.vehicles[i].frame;
        let left_d = tape.scale(frame.left_offset_sign(), s[2]);

        let base_i = tape.scalar(frame.heading_base());
        let psi_i = tape.add(s[3], base_i);
        let sin_i = tape.sin(psi_i);
        let cos_i = tape.cos(psi_i);

        let mut parts = vec![left_d, s[3], s[4], s[5], s[6]];
        for &j in order {
            let o = &states[j];
            let dx = tape.sub(o[0], s[0]);
            let dy = tape.sub(o[1], s[1]);
            let cx = tape.mul(cos_i, dx);
            let sy = tape.mul(sin_i, dy);
            let rel_x = tape.add(cx, sy);
            let sx = tape.mul(sin_i, dx);
            let cy = tape.mul(cos_i, dy);
            let rel_y = tape.sub(cy, sx);
            let base_j = tape.scalar(self.spec.vehicles[j].frame.heading_base());
            let psi_j = tape.add(o[3], base_j);
            let dpsi = tape.sub(psi_j, psi_i);
            let rel_heading = tape.wrap_angle(dpsi);
            parts.extend_from_slice(&[rel_x, rel_y, rel_heading, o[4]]);
        }
        tape.concat(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Direction;
    use crate::tape::Bindings;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::FRAC_PI_2;

    fn frame(axis: AxisAlignment) -> TrackFrame {
        TrackFrame::new(axis)
    }

    /// Two crossing vehicles, lateral control, the first experiment's
    /// starting geometry.
    pub(crate) fn crossing_scenario() -> ScenarioSpec {
        ScenarioSpec {
            vehicles: vec![
                VehicleSpec::on_line(-100.0, -10.0, 5.0, frame(AxisAlignment::ParallelToX), 0.0, 5.0),
                VehicleSpec::on_line(-5.0, -100.0, 5.0, frame(AxisAlignment::ParallelToY), 0.0, 5.0),
            ],
            params: VehicleParams::default(),
            weights: CostWeights::default(),
            episode_length: 600,
            control_mode: ControlMode::LateralOnly,
            intersection_center: [0.0, 0.0],
            passed_margin: 20.0,
        }
    }

    #[test]
    fn reset_places_vehicles_at_scenario_starts() {
        let env = GameEnv::new(crossing_scenario()).unwrap();
        let s = env.reset();
        assert_eq!(s.step_index, 0);
        assert_eq!(s.vehicles[0].x_global, -100.0);
        assert_eq!(s.vehicles[0].y_global, -10.0);
        assert_eq!(s.vehicles[0].traj_offset, -10.0);
        assert_eq!(s.vehicles[1].x_global, -5.0);
        assert_eq!(s.vehicles[1].y_global, -100.0);
        assert_eq!(s.vehicles[1].traj_offset, -5.0);
    }

    #[test]
    fn reset_on_reference_has_zero_errors() {
        let spec = ScenarioSpec {
            vehicles: vec![VehicleSpec::on_line(
                -40.0,
                0.0,
                5.0,
                frame(AxisAlignment::ParallelToX),
                0.0,
                5.0,
            )],
            ..crossing_scenario()
        };
        let env = GameEnv::new(spec).unwrap();
        let s = env.reset();
        assert_eq!(s.vehicles[0].traj_offset, 0.0);
        assert_eq!(s.vehicles[0].heading_err, 0.0);
    }

    #[test]
    fn invalid_spec_is_rejected_with_field_name() {
        let mut spec = crossing_scenario();
        spec.weights.offset = -1.0;
        let err = GameEnv::new(spec).unwrap_err();
        assert!(err.to_string().contains("offset"), "{err}");
        let mut spec = crossing_scenario();
        spec.vehicles[0].reference_speed = 0.0;
        assert!(GameEnv::new(spec).unwrap_err().to_string().contains("reference_speed"));
    }

    #[test]
    fn step_equals_independent_single_vehicle_steps() {
        let env = GameEnv::new(crossing_scenario()).unwrap();
        let s = env.reset();
        let actions = [
            VehicleAction { accel: 0.0, steer: 0.05 },
            VehicleAction { accel: 0.0, steer: -0.1 },
        ];
        let next = env.step(&s, &actions).unwrap();
        for i in 0..2 {
            let alone = dynamics::step_lateral(
                &s.vehicles[i],
                actions[i].steer,
                &env.spec().params,
                env.spec().vehicles[i].frame,
            )
            .unwrap();
            assert_eq!(next.vehicles[i], alone);
        }
        assert_eq!(next.step_index, 1);
    }

    #[test]
    fn step_error_names_the_offending_vehicle() {
        let mut spec = crossing_scenario();
        spec.control_mode = ControlMode::Joint;
        spec.vehicles[1] =
            VehicleSpec::on_line(-5.0, -100.0, 0.05, frame(AxisAlignment::ParallelToY), 0.0, 5.0);
        let env = GameEnv::new(spec).unwrap();
        let s = env.reset();
        let brake = VehicleAction { accel: -3.0, steer: 0.0 };
        let err = env.step(&s, &[brake, brake]).unwrap_err();
        match err {
            EnvError::Dynamics { vehicle, step, .. } => {
                assert_eq!(vehicle, 1);
                assert_eq!(step, 0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn distance_examples() {
        let env = GameEnv::new(crossing_scenario()).unwrap();
        let mut s = env.reset();
        assert_relative_eq!(
            pairwise_distance(&s, 0, 1).unwrap(),
            (95.0f64 * 95.0 + 90.0 * 90.0).sqrt(),
            max_relative = 1e-12
        );
        assert_relative_eq!(pairwise_distance(&s, 0, 1).unwrap(), 130.86, max_relative = 1e-4);
        s.vehicles[1].x_global = 3.0;
        s.vehicles[1].y_global = 4.0;
        s.vehicles[0].x_global = 0.0;
        s.vehicles[0].y_global = 0.0;
        assert_eq!(pairwise_distance(&s, 0, 1).unwrap(), 5.0);
        s.vehicles[1] = s.vehicles[0];
        assert_eq!(pairwise_distance(&s, 0, 1).unwrap(), 0.0);
        assert!(pairwise_distance(&s, 0, 5).is_err());
    }

    #[test]
    fn cost_hand_example() {
        // d=2, alpha=0.1, dv=1, nearest other at 3 m, steer=0.05, accel=0.5,
        // all weights 1 -> 4 + 0.01 + 1 + 16 + 0.0025 + 0.25
        let mut spec = crossing_scenario();
        spec.control_mode = ControlMode::Joint;
        spec.weights = CostWeights {
            offset: 1.0,
            heading: 1.0,
            speed: 1.0,
            safety: 1.0,
            steer: 1.0,
            accel: 1.0,
            ..CostWeights::default()
        };
        let env = GameEnv::new(spec).unwrap();
        let mut s = env.reset();
        s.vehicles[0].traj_offset = 2.0;
        s.vehicles[0].heading_err = 0.1;
        s.vehicles[0].v_long = 6.0; // reference 5 -> dv = 1
        s.vehicles[0].x_global = 0.0;
        s.vehicles[0].y_global = 0.0;
        s.vehicles[1].x_global = 3.0;
        s.vehicles[1].y_global = 0.0;
        let actions = [
            VehicleAction { accel: 0.5, steer: 0.05 },
            VehicleAction::coast(),
        ];
        let c = env.cost(&s, &actions, 0).unwrap();
        assert_relative_eq!(c.total(), 21.2625, max_relative = 1e-12);
        assert_relative_eq!(c.tracking, 4.01, max_relative = 1e-12);
        assert_relative_eq!(c.efficiency, 1.0, max_relative = 1e-12);
        assert_relative_eq!(c.safety, 16.0, max_relative = 1e-12);
        assert_relative_eq!(c.comfort, 0.2525, max_relative = 1e-12);
    }

    #[test]
    fn cost_is_zero_at_the_global_minimum() {
        let env = GameEnv::new(crossing_scenario()).unwrap();
        let mut s = env.reset();
        for v in &mut s.vehicles {
            v.traj_offset = 0.0;
            v.heading_err = 0.0;
            v.v_long = 5.0;
        }
        // far apart already by construction
        let actions = [VehicleAction::coast(), VehicleAction::coast()];
        assert_eq!(env.cost(&s, &actions, 0).unwrap().total(), 0.0);
        assert_eq!(env.cost(&s, &actions, 1).unwrap().total(), 0.0);
    }

    #[test]
    fn safety_term_is_zero_exactly_at_the_boundary() {
        let env = GameEnv::new(crossing_scenario()).unwrap();
        let mut s = env.reset();
        s.vehicles[0].x_global = 0.0;
        s.vehicles[0].y_global = 0.0;
        s.vehicles[1].x_global = 5.0;
        s.vehicles[1].y_global = 0.0;
        let actions = [VehicleAction::coast(), VehicleAction::coast()];
        assert_eq!(env.cost(&s, &actions, 0).unwrap().safety, 0.0);
    }

    #[test]
    fn nearest_rule_tracks_the_closer_vehicle() {
        let mut spec = crossing_scenario();
        spec.vehicles.push(VehicleSpec::on_line(
            50.0,
            -10.0,
            5.0,
            frame(AxisAlignment::ParallelToX),
            0.0,
            5.0,
        ));
        let env = GameEnv::new(spec.clone()).unwrap();
        let mut s = env.reset();
        s.vehicles[0].x_global = 0.0;
        s.vehicles[0].y_global = 0.0;
        s.vehicles[1].x_global = 3.0;
        s.vehicles[1].y_global = 0.0;
        s.vehicles[2].x_global = 100.0;
        assert_eq!(env.proximity_distance(&s, 0).unwrap(), 3.0);

        spec.weights.proximity = ProximityRule::Farthest;
        let env = GameEnv::new(spec).unwrap();
        assert_relative_eq!(
            env.proximity_distance(&s, 0).unwrap(),
            (100.0f64 * 100.0 + 100.0).sqrt(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn observe_axis_aligned_example() {
        // observer at origin heading +x, other at (10, 0) heading +y at 5 m/s
        let spec = ScenarioSpec {
            vehicles: vec![
                VehicleSpec::on_line(0.0, 0.0, 5.0, frame(AxisAlignment::ParallelToX), 0.0, 5.0),
                VehicleSpec::on_line(10.0, 0.0, 5.0, frame(AxisAlignment::ParallelToY), 10.0, 5.0),
            ],
            ..crossing_scenario()
        };
        let env = GameEnv::new(spec).unwrap();
        let s = env.reset();
        let obs = env.observe(&s, 0).unwrap();
        assert_eq!(obs.others.len(), 1);
        let r = obs.others[0];
        assert_relative_eq!(r.rel_x, 10.0, max_relative = 1e-12);
        assert!(r.rel_y.abs() < 1e-12);
        assert_relative_eq!(r.rel_heading, FRAC_PI_2, max_relative = 1e-12);
        assert_eq!(r.other_v_long, 5.0);
        assert_eq!(obs.flat().len(), LocalObservation::dim_for(2));
    }

    #[test]
    fn single_vehicle_observation_has_no_others() {
        let spec = ScenarioSpec {
            vehicles: vec![VehicleSpec::on_line(
                0.0,
                0.0,
                5.0,
                frame(AxisAlignment::ParallelToX),
                0.0,
                5.0,
            )],
            ..crossing_scenario()
        };
        let env = GameEnv::new(spec).unwrap();
        let obs = env.observe(&env.reset(), 0).unwrap();
        assert!(obs.others.is_empty());
        assert_eq!(obs.flat().len(), 5);
    }

    #[test]
    fn observe_matches_rotation_matrix_oracle() {
        // observer heading +y: relative coordinates are the displacement
        // rotated by the inverse heading
        let spec = ScenarioSpec {
            vehicles: vec![
                VehicleSpec::on_line(2.0, -3.0, 5.0, frame(AxisAlignment::ParallelToY), 2.0, 5.0),
                VehicleSpec::on_line(7.0, 4.0, 6.0, frame(AxisAlignment::ParallelToX), 4.0, 5.0),
            ],
            ..crossing_scenario()
        };
        let env = GameEnv::new(spec).unwrap();
        let mut s = env.reset();
        s.vehicles[0].heading_err = 0.2;
        let obs = env.observe(&s, 0).unwrap();
        let psi = FRAC_PI_2 + 0.2;
        let (dx, dy) = (5.0, 7.0);
        // inverse rotation: [cos psi, sin psi; -sin psi, cos psi] * delta
        let want_x = psi.cos() * dx + psi.sin() * dy;
        let want_y = -psi.sin() * dx + psi.cos() * dy;
        assert_relative_eq!(obs.others[0].rel_x, want_x, max_relative = 1e-12);
        assert_relative_eq!(obs.others[0].rel_y, want_y, max_relative = 1e-12);
    }

    /// Rotating the whole scene by a quarter turn (remapping frames and
    /// reference lines accordingly) and translating it rigidly leaves every
    /// egocentric observation unchanged.
    #[test]
    fn observation_is_invariant_under_rigid_scene_motion() {
        fn rotate_frame(f: TrackFrame) -> TrackFrame {
            match (f.axis, f.forward) {
                (AxisAlignment::ParallelToX, Direction::Positive) => {
                    TrackFrame { axis: AxisAlignment::ParallelToY, forward: Direction::Positive }
                }
                (AxisAlignment::ParallelToY, Direction::Positive) => {
                    TrackFrame { axis: AxisAlignment::ParallelToX, forward: Direction::Negative }
                }
                (AxisAlignment::ParallelToX, Direction::Negative) => {
                    TrackFrame { axis: AxisAlignment::ParallelToY, forward: Direction::Negative }
                }
                (AxisAlignment::ParallelToY, Direction::Negative) => {
                    TrackFrame { axis: AxisAlignment::ParallelToX, forward: Direction::Positive }
                }
            }
        }
        // quarter-turn image of the reference offset
        fn rotate_reference(f: TrackFrame, offset: f64) -> f64 {
            match f.axis {
                AxisAlignment::ParallelToX => -offset,
                AxisAlignment::ParallelToY => offset,
            }
        }

        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..25 {
            let base = crossing_scenario();
            let mut spec = base.clone();
            for v in &mut spec.vehicles {
                v.start.traj_offset = rng.gen_range(-10.0..10.0);
                v.start.heading_err = rng.gen_range(-0.3..0.3);
                v.start.v_lat = rng.gen_range(-1.0..1.0);
                v.start.yaw_rate = rng.gen_range(-0.3..0.3);
                match v.frame.axis {
                    AxisAlignment::ParallelToX => v.start.y_global = v.reference_offset + v.start.traj_offset,
                    AxisAlignment::ParallelToY => v.start.x_global = v.reference_offset + v.start.traj_offset,
                }
            }
            let turns = rng.gen_range(1..4);
            let (tx, ty) = (rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));

            let mut moved = spec.clone();
            for _ in 0..turns {
                for v in &mut moved.vehicles {
                    let (x, y) = (v.start.x_global, v.start.y_global);
                    v.start.x_global = -y;
                    v.start.y_global = x;
                    v.reference_offset = rotate_reference(v.frame, v.reference_offset);
                    v.frame = rotate_frame(v.frame);
                    let coord = match v.frame.axis {
                        AxisAlignment::ParallelToX => v.start.y_global,
                        AxisAlignment::ParallelToY => v.start.x_global,
                    };
                    v.start.traj_offset = coord - v.reference_offset;
                }
                let (cx, cy) = (moved.intersection_center[0], moved.intersection_center[1]);
                moved.intersection_center = [-cy, cx];
            }
            for v in &mut moved.vehicles {
                v.start.x_global += tx;
                v.start.y_global += ty;
                match v.frame.axis {
                    AxisAlignment::ParallelToX => v.reference_offset += ty,
                    AxisAlignment::ParallelToY => v.reference_offset += tx,
                }
            }
            moved.intersection_center[0] += tx;
            moved.intersection_center[1] += ty;

            let env = GameEnv::new(spec).unwrap();
            let env_moved = GameEnv::new(moved).unwrap();
            for i in 0..2 {
                let a = env.observe(&env.reset(), i).unwrap().flat();
                let b = env_moved.observe(&env_moved.reset(), i).unwrap().flat();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 1e-9, "component mismatch: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn relabeling_vehicles_permutes_costs_and_observations() {
        let mut spec = crossing_scenario();
        spec.vehicles.push(VehicleSpec::on_line(
            30.0,
            -4.0,
            6.0,
            frame(AxisAlignment::ParallelToX),
            0.0,
            6.0,
        ));
        let perm = [2usize, 0, 1];
        let mut permuted = spec.clone();
        for (new_i, &old_i) in perm.iter().enumerate() {
            permuted.vehicles[new_i] = spec.vehicles[old_i];
        }
        let env = GameEnv::new(spec).unwrap();
        let envp = GameEnv::new(permuted).unwrap();
        let s = env.reset();
        let sp = envp.reset();
        let actions = [
            VehicleAction { accel: 0.1, steer: 0.02 },
            VehicleAction { accel: -0.2, steer: -0.04 },
            VehicleAction { accel: 0.3, steer: 0.01 },
        ];
        let actions_p: Vec<VehicleAction> = perm.iter().map(|&o| actions[o]).collect();
        for (new_i, &old_i) in perm.iter().enumerate() {
            let c = env.cost(&s, &actions, old_i).unwrap();
            let cp = envp.cost(&sp, &actions_p, new_i).unwrap();
            assert_relative_eq!(c.total(), cp.total(), max_relative = 1e-12);
            let o = env.observe(&s, old_i).unwrap().flat();
            let op = envp.observe(&sp, new_i).unwrap().flat();
            for (x, y) in o.iter().zip(&op) {
                assert_relative_eq!(*x, *y, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn terminal_conditions() {
        let env = GameEnv::new(crossing_scenario()).unwrap();
        let mut s = env.reset();
        assert!(!env.is_terminal(&s));
        s.step_index = 600;
        assert!(env.is_terminal(&s));

        let mut past = env.reset();
        past.vehicles[0].x_global = 30.0;
        past.vehicles[1].y_global = 30.0;
        assert!(env.is_terminal(&past));
        past.vehicles[1].y_global = 10.0; // inside the margin
        assert!(!env.is_terminal(&past));
    }

    #[test]
    fn cost_nodes_match_numeric_cost() {
        for mode in [ControlMode::LateralOnly, ControlMode::Joint] {
            let mut spec = crossing_scenario();
            spec.control_mode = mode;
            spec.vehicles.push(VehicleSpec::on_line(
                10.0,
                -3.0,
                4.0,
                frame(AxisAlignment::ParallelToX),
                0.0,
                5.0,
            ));
            let env = GameEnv::new(spec).unwrap();
            let mut rng = StdRng::seed_from_u64(53);
            for _ in 0..10 {
                let mut s = env.reset();
                for v in &mut s.vehicles {
                    v.x_global += rng.gen_range(-2.0..98.0);
                    v.y_global += rng.gen_range(-2.0..98.0);
                    v.traj_offset = rng.gen_range(-10.0..10.0);
                    v.heading_err = rng.gen_range(-0.3..0.3);
                    v.v_long = rng.gen_range(1.0..9.0);
                }
                let actions: Vec<VehicleAction> = (0..3)
                    .map(|_| VehicleAction {
                        accel: rng.gen_range(-2.0..2.0),
                        steer: rng.gen_range(-0.3..0.3),
                    })
                    .collect();

                let mut tape = Tape::new();
                let (gs, flat) = tape.input("state", 3 * STATE_DIM);
                let states: Vec<StateNodes> = (0..3)
                    .map(|v| std::array::from_fn(|c| tape.slice(flat, v * STATE_DIM + c, 1)))
                    .collect();
                let (ga, aflat) = tape.input("actions", 6);
                let action_nodes: Vec<(NodeId, NodeId)> = (0..3)
                    .map(|v| (tape.slice(aflat, 2 * v, 1), tape.slice(aflat, 2 * v + 1, 1)))
                    .collect();
                for i in 0..3 {
                    let c = env.cost_nodes(&mut tape, &states, &action_nodes, i);
                    let mut b = Bindings::new();
                    b.set(gs, s.flat());
                    b.set(
                        ga,
                        actions.iter().flat_map(|a| [a.accel, a.steer]).collect(),
                    );
                    let eval = tape.forward(&b).unwrap();
                    let want = env.cost(&s, &actions, i).unwrap().total();
                    assert_relative_eq!(eval.scalar(c), want, max_relative = 1e-12, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn observe_nodes_match_numeric_observation() {
        let mut spec = crossing_scenario();
        spec.vehicles.push(VehicleSpec::on_line(
            12.0,
            -7.0,
            3.0,
            frame(AxisAlignment::ParallelToY),
            12.0,
            5.0,
        ));
        let env = GameEnv::new(spec).unwrap();
        let mut rng = StdRng::seed_from_u64(59);
        let mut s = env.reset();
        for v in &mut s.vehicles {
            v.heading_err = rng.gen_range(-0.4..0.4);
        }
        for i in 0..3 {
            let order = env.observation_order(&s, i);
            let mut tape = Tape::new();
            let (gs, flat) = tape.input("state", 3 * STATE_DIM);
            let states: Vec<StateNodes> = (0..3)
                .map(|v| std::array::from_fn(|c| tape.slice(flat, v * STATE_DIM + c, 1)))
                .collect();
            let obs_node = env.observe_nodes(&mut tape, &states, i, &order);
            let mut b = Bindings::new();
            b.set(gs, s.flat());
            let eval = tape.forward(&b).unwrap();
            let want = env.observe(&s, i).unwrap().flat();
            for (got, want) in eval.value(obs_node).iter().zip(&want) {
                assert_relative_eq!(*got, *want, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    proptest! {
        /// Cost is non-negative for any state/action, and zero only when
        /// every quadratic term vanishes and nobody is inside the safe
        /// distance.
        #[test]
        fn cost_nonnegative(
            d in -30.0..30.0f64,
            alpha in -0.5..0.5f64,
            v in 0.5..12.0f64,
            steer in -0.35..0.35f64,
            accel in -3.0..3.0f64,
            other_x in -50.0..50.0f64,
            other_y in -50.0..50.0f64,
        ) {
            let mut spec = crossing_scenario();
            spec.control_mode = ControlMode::Joint;
            let env = GameEnv::new(spec).unwrap();
            let mut s = env.reset();
            s.vehicles[0].traj_offset = d;
            s.vehicles[0].heading_err = alpha;
            s.vehicles[0].v_long = v;
            s.vehicles[1].x_global = other_x;
            s.vehicles[1].y_global = other_y;
            let actions = [
                VehicleAction { accel, steer },
                VehicleAction::coast(),
            ];
            let c = env.cost(&s, &actions, 0).unwrap();
            prop_assert!(c.total() >= 0.0);
            let quadratics_zero = d == 0.0 && alpha == 0.0 && (v - 5.0).abs() < 1e-12
                && steer == 0.0 && accel == 0.0;
            let dist = pairwise_distance(&s, 0, 1).unwrap();
            if c.total() == 0.0 {
                prop_assert!(quadratics_zero && dist >= 5.0);
            }
            if quadratics_zero && dist >= 5.0 {
                prop_assert!(c.total() == 0.0);
            }
        }

        /// Distance is exactly symmetric.
        #[test]
        fn distance_symmetry(ax in -100.0..100.0f64, ay in -100.0..100.0f64,
                             bx in -100.0..100.0f64, by in -100.0..100.0f64) {
            let env = GameEnv::new(crossing_scenario()).unwrap();
            let mut s = env.reset();
            s.vehicles[0].x_global = ax;
            s.vehicles[0].y_global = ay;
            s.vehicles[1].x_global = bx;
            s.vehicles[1].y_global = by;
            let dij = pairwise_distance(&s, 0, 1).unwrap();
            let dji = pairwise_distance(&s, 1, 0).unwrap();
            prop_assert_eq!(dij.to_bits(), dji.to_bits());
        }
    }
}
