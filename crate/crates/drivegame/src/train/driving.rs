//! The intersection game as a differentiable training model.
//!
//! Wraps [`GameEnv`] with the choice of observation view (global flat
//! state for per-player training, egocentric observation for
//! parameter-shared self-play), fixed feature scaling that keeps network
//! inputs O(1), randomized episode starts, and a low-speed actuation guard
//! that keeps the joint model's positive-speed precondition satisfiable
//! under any bounded policy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{AxisAlignment, StateNodes, VehicleAction, STATE_DIM};
use crate::game::{ControlMode, GameEnv, GlobalState, LocalObservation};
use crate::tape::{NodeId, Tape};

use super::model::{AffineView, DiffGame};

/// Which state view the networks consume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationView {
    /// Flat global state of all vehicles (per-player nets).
    Global,
    /// Unified egocentric observation (one shared net for all vehicles).
    Egocentric,
}

/// Speed floor the actuation guard preserves [m/s].
const MIN_SPEED: f64 = 0.05;

/// Fixed input scaling, chosen so that scenario-scale inputs land near
/// [-2, 2] for the tanh layers.
const POS_SCALE: f64 = 0.02;
const OFFSET_SCALE: f64 = 0.1;
const HEADING_SCALE: f64 = 2.0;
const SPEED_SCALE: f64 = 0.1;
const LAT_SPEED_SCALE: f64 = 0.5;
const YAW_SCALE: f64 = 1.0;
const REL_HEADING_SCALE: f64 = 0.5;

fn global_scales(n: usize) -> Vec<f64> {
    let per_vehicle = [
        POS_SCALE,
        POS_SCALE,
        OFFSET_SCALE,
        HEADING_SCALE,
        SPEED_SCALE,
        LAT_SPEED_SCALE,
        YAW_SCALE,
    ];
    (0..n).flat_map(|_| per_vehicle).collect()
}

fn local_scales(n: usize) -> Vec<f64> {
    let mut s = vec![
        OFFSET_SCALE,
        HEADING_SCALE,
        SPEED_SCALE,
        LAT_SPEED_SCALE,
        YAW_SCALE,
    ];
    for _ in 0..n - 1 {
        s.extend_from_slice(&[POS_SCALE, POS_SCALE, REL_HEADING_SCALE, SPEED_SCALE]);
    }
    s
}

/// Randomization ranges and data-collection bounds for training episodes.
#[derive(Debug, Clone, Copy)]
pub struct StartRanges {
    /// Uniform half-width around the nominal trajectory offset [m].
    pub offset: f64,
    /// Uniform half-width around the nominal speed [m/s].
    pub speed: f64,
    /// Lowest start speed allowed [m/s].
    pub min_speed: f64,
    /// Training rollouts end once any vehicle strays farther than this
    /// from its reference line [m]. Termination only curates collected
    /// data (replay targets never bootstrap through terminals), keeping
    /// early wild-policy episodes from flooding the buffer with
    /// astronomical-cost states.
    pub corridor: f64,
}

impl Default for StartRanges {
    fn default() -> Self {
        Self { offset: 15.0, speed: 2.0, min_speed: 0.3, corridor: 30.0 }
    }
}

/// [`GameEnv`] plus everything the trainer needs around it.
#[derive(Debug, Clone)]
pub struct DrivingGame {
    env: GameEnv,
    view: ObservationView,
    ranges: StartRanges,
}

impl DrivingGame {
    pub fn new(env: GameEnv, view: ObservationView, ranges: StartRanges) -> Self {
        Self { env, view, ranges }
    }

    pub fn env(&self) -> &GameEnv {
        &self.env
    }

    pub fn view(&self) -> ObservationView {
        self.view
    }

    fn n(&self) -> usize {
        self.env.num_vehicles()
    }

    fn global_state(&self, flat: &[f64]) -> GlobalState {
        GlobalState::from_flat(flat, 0)
    }

    /// Acceleration floor that keeps the next speed at or above the guard
    /// minimum: `a_eff = max(a, (MIN_SPEED - v)/dt)`.
    fn accel_floor(&self, v_long: f64) -> f64 {
        (MIN_SPEED - v_long) / self.env.spec().params.dt
    }

    /// Converts per-player action vectors (already amplitude-bounded by the
    /// actor head) into guarded [`VehicleAction`]s.
    pub fn vehicle_actions(&self, state: &[f64], actions: &[Vec<f64>]) -> Vec<VehicleAction> {
        let mode = self.env.spec().control_mode;
        actions
            .iter()
            .enumerate()
            .map(|(i, a)| match mode {
                ControlMode::LateralOnly => VehicleAction { accel: 0.0, steer: a[0] },
                ControlMode::Joint => {
                    let v = state[i * STATE_DIM + 4];
                    VehicleAction { accel: a[0].max(self.accel_floor(v)), steer: a[1] }
                }
            })
            .collect()
    }

    fn scales(&self) -> Vec<f64> {
        match self.view {
            ObservationView::Global => global_scales(self.n()),
            ObservationView::Egocentric => local_scales(self.n()),
        }
    }

    /// Numeric egocentric observation from a flat state.
    pub fn local_observation(&self, state: &[f64], player: usize) -> LocalObservation {
        let gs = self.global_state(state);
        self.env.observe(&gs, player).expect("player index in range")
    }

    fn features(&self, state: &[f64], player: usize) -> Vec<f64> {
        let raw = match self.view {
            ObservationView::Global => state.to_vec(),
            ObservationView::Egocentric => self.local_observation(state, player).flat(),
        };
        raw.iter().zip(self.scales()).map(|(x, s)| x * s).collect()
    }

    fn build_features(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        player: usize,
        state_numeric: &[f64],
    ) -> NodeId {
        let raw = match self.view {
            ObservationView::Global => tape.concat(state),
            ObservationView::Egocentric => {
                let gs = self.global_state(state_numeric);
                let order = self.env.observation_order(&gs, player);
                let states = chunk_state_nodes(state, self.n());
                self.env.observe_nodes(tape, &states, player, &order)
            }
        };
        let scales = tape.constant(self.scales());
        tape.mul(scales, raw)
    }
}

fn chunk_state_nodes(state: &[NodeId], n: usize) -> Vec<StateNodes> {
    assert_eq!(state.len(), n * STATE_DIM);
    (0..n)
        .map(|v| std::array::from_fn(|c| state[v * STATE_DIM + c]))
        .collect()
}

impl DiffGame for DrivingGame {
    fn num_players(&self) -> usize {
        self.n()
    }

    fn state_dim(&self) -> usize {
        self.n() * STATE_DIM
    }

    fn action_dim(&self, _player: usize) -> usize {
        self.env.spec().control_mode.action_dim()
    }

    fn amplitudes(&self, _player: usize) -> Option<Vec<f64>> {
        let p = &self.env.spec().params;
        Some(match self.env.spec().control_mode {
            ControlMode::LateralOnly => vec![p.steer_limit],
            ControlMode::Joint => vec![p.accel_limit, p.steer_limit],
        })
    }

    fn critic_input_dim(&self) -> usize {
        match self.view {
            ObservationView::Global => self.state_dim(),
            ObservationView::Egocentric => LocalObservation::dim_for(self.n()),
        }
    }

    fn actor_input_dim(&self) -> usize {
        self.critic_input_dim()
    }

    fn horizon(&self) -> usize {
        self.env.spec().episode_length
    }

    fn nominal_state(&self) -> Vec<f64> {
        self.env.reset().flat()
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut gs = self.env.reset();
        for (i, v) in gs.vehicles.iter_mut().enumerate() {
            let spec = &self.env.spec().vehicles[i];
            let d = v.traj_offset + rng.gen_range(-self.ranges.offset..=self.ranges.offset);
            match spec.frame.axis {
                AxisAlignment::ParallelToX => v.y_global = spec.reference_offset + d,
                AxisAlignment::ParallelToY => v.x_global = spec.reference_offset + d,
            }
            v.traj_offset = d;
            let speed = v.v_long + rng.gen_range(-self.ranges.speed..=self.ranges.speed);
            v.v_long = speed.max(self.ranges.min_speed);
        }
        gs.flat()
    }

    fn is_terminal(&self, state: &[f64]) -> bool {
        // the step index is tracked by the rollout loop; spatially the
        // episode ends when everyone is through or someone leaves the
        // training corridor
        let gs = self.global_state(state);
        if gs.vehicles.iter().any(|v| v.traj_offset.abs() > self.ranges.corridor) {
            return true;
        }
        (0..self.n()).all(|i| self.env.along_track(&gs, i) > self.env.spec().passed_margin)
    }

    fn step(&self, state: &[f64], actions: &[Vec<f64>]) -> Result<Vec<f64>, String> {
        let gs = self.global_state(state);
        let acts = self.vehicle_actions(state, actions);
        self.env
            .step(&gs, &acts)
            .map(|next| next.flat())
            .map_err(|e| e.to_string())
    }

    fn cost(&self, state: &[f64], actions: &[Vec<f64>], player: usize) -> f64 {
        let gs = self.global_state(state);
        let acts = self.vehicle_actions(state, actions);
        self.env
            .cost(&gs, &acts, player)
            .expect("player index in range")
            .total()
    }

    fn critic_input(&self, state: &[f64], player: usize) -> Vec<f64> {
        self.features(state, player)
    }

    fn actor_input(&self, state: &[f64], player: usize) -> Vec<f64> {
        self.features(state, player)
    }

    fn build_step(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        actions: &[Vec<NodeId>],
    ) -> Vec<NodeId> {
        let states = chunk_state_nodes(state, self.n());
        let mode = self.env.spec().control_mode;
        let pairs: Vec<(NodeId, NodeId)> = actions
            .iter()
            .enumerate()
            .map(|(i, a)| match mode {
                ControlMode::LateralOnly => {
                    let zero = tape.scalar(0.0);
                    (zero, a[0])
                }
                ControlMode::Joint => {
                    // a_eff = a + max0(floor - a) = max(a, floor)
                    let floor = self.accel_floor_node(tape, states[i][4]);
                    let gap = tape.sub(floor, a[0]);
                    let lift = tape.max0(gap);
                    let accel = tape.add(a[0], lift);
                    (accel, a[1])
                }
            })
            .collect();
        self.env
            .step_nodes(tape, &states, &pairs)
            .into_iter()
            .flatten()
            .collect()
    }

    fn build_cost(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        actions: &[Vec<NodeId>],
        player: usize,
    ) -> NodeId {
        let states = chunk_state_nodes(state, self.n());
        let mode = self.env.spec().control_mode;
        let pairs: Vec<(NodeId, NodeId)> = actions
            .iter()
            .enumerate()
            .map(|(i, a)| match mode {
                ControlMode::LateralOnly => (a[0], a[0]),
                ControlMode::Joint => {
                    let floor = self.accel_floor_node(tape, states[i][4]);
                    let gap = tape.sub(floor, a[0]);
                    let lift = tape.max0(gap);
                    let accel = tape.add(a[0], lift);
                    (accel, a[1])
                }
            })
            .collect();
        self.env.cost_nodes(tape, &states, &pairs, player)
    }

    fn build_critic_input(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        player: usize,
        state_numeric: &[f64],
    ) -> NodeId {
        self.build_features(tape, state, player, state_numeric)
    }

    fn build_actor_input(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        player: usize,
        state_numeric: &[f64],
    ) -> NodeId {
        self.build_features(tape, state, player, state_numeric)
    }

    fn affine_view(&self, state: &[f64]) -> Option<AffineView> {
        if self.env.spec().control_mode != ControlMode::LateralOnly {
            return None;
        }
        let params = &self.env.spec().params;
        let gs = self.global_state(state);
        let n = self.n();
        let mut drift = Vec::with_capacity(n * STATE_DIM);
        let mut gains = Vec::with_capacity(n);
        for i in 0..n {
            let frame = self.env.spec().vehicles[i].frame;
            let terms = crate::dynamics::affine_terms(&gs.vehicles[i], params, frame)
                .expect("valid state");
            let cur = gs.vehicles[i].as_array();
            for c in 0..STATE_DIM {
                drift.push(cur[c] + params.dt * terms.drift[c]);
            }
            let mut col = vec![0.0; n * STATE_DIM];
            for c in 0..STATE_DIM {
                col[i * STATE_DIM + c] = params.dt * terms.input_gain[c];
            }
            gains.push(vec![col]);
        }
        Some(AffineView { drift, gains })
    }

    fn action_cost_diag(&self, _player: usize) -> Vec<f64> {
        let w = &self.env.spec().weights;
        match self.env.spec().control_mode {
            ControlMode::LateralOnly => vec![w.steer],
            ControlMode::Joint => vec![w.accel, w.steer],
        }
    }

    fn state_cost(&self, state: &[f64], player: usize) -> f64 {
        let gs = self.global_state(state);
        let zero = vec![VehicleAction::coast(); self.n()];
        let c = self.env.cost(&gs, &zero, player).expect("player index in range");
        c.tracking + c.efficiency + c.safety
    }
}

impl DrivingGame {
    fn accel_floor_node(&self, tape: &mut Tape, v_long: NodeId) -> NodeId {
        let dt = self.env.spec().params.dt;
        let min_speed = tape.scalar(MIN_SPEED);
        let deficit = tape.sub(min_speed, v_long);
        tape.scale(1.0 / dt, deficit)
    }
}
