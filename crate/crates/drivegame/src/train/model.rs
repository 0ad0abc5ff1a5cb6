//! The differentiable known-model game interface the trainer works
//! against.
//!
//! A [`DiffGame`] exposes every quantity twice: numerically (for rollouts,
//! replay targets and evaluation) and as tape builders (for the pathwise
//! actor gradient through cost, dynamics and critic). Tests cross-check
//! the two paths against each other.

use rand_chacha::ChaCha8Rng;

use crate::tape::{NodeId, Tape};

/// Control-affine view of a game at one state: the zero-action successor
/// and per-player input directions, `s' = drift + sum_i gain_i * u_i`.
#[derive(Debug, Clone)]
pub struct AffineView {
    pub drift: Vec<f64>,
    /// `gains[i]` has one column (length `state_dim`) per action channel.
    pub gains: Vec<Vec<Vec<f64>>>,
}

/// An N-player game with known, differentiable dynamics and costs.
pub trait DiffGame {
    fn num_players(&self) -> usize;

    /// Length of the flat global state vector.
    fn state_dim(&self) -> usize;

    fn action_dim(&self, player: usize) -> usize;

    /// Per-channel actor output scales; `None` selects an unbounded
    /// (identity-head) actor.
    fn amplitudes(&self, player: usize) -> Option<Vec<f64>>;

    fn critic_input_dim(&self) -> usize;

    fn actor_input_dim(&self) -> usize;

    /// Maximum episode length.
    fn horizon(&self) -> usize;

    /// Nominal (non-randomized) start state.
    fn nominal_state(&self) -> Vec<f64>;

    /// Randomized start state for one training episode.
    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;

    fn is_terminal(&self, state: &[f64]) -> bool;

    /// Numeric transition.
    fn step(&self, state: &[f64], actions: &[Vec<f64>]) -> Result<Vec<f64>, String>;

    /// Numeric stage cost of `player`.
    fn cost(&self, state: &[f64], actions: &[Vec<f64>], player: usize) -> f64;

    /// Numeric critic features of `player` at `state`.
    fn critic_input(&self, state: &[f64], player: usize) -> Vec<f64>;

    /// Numeric actor features of `player` at `state`.
    fn actor_input(&self, state: &[f64], player: usize) -> Vec<f64>;

    /// Records the transition over scalar state/action nodes.
    fn build_step(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        actions: &[Vec<NodeId>],
    ) -> Vec<NodeId>;

    /// Records `player`'s stage cost.
    fn build_cost(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        actions: &[Vec<NodeId>],
        player: usize,
    ) -> NodeId;

    /// Records `player`'s critic features. `state_numeric` fixes any
    /// data-dependent structure (neighbor ordering) at build time.
    fn build_critic_input(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        player: usize,
        state_numeric: &[f64],
    ) -> NodeId;

    /// Records `player`'s actor features.
    fn build_actor_input(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        player: usize,
        state_numeric: &[f64],
    ) -> NodeId;

    /// Control-affine structure at `state`, when the game has one. Games
    /// without it (non-affine control) return `None`, which disables the
    /// closed-form control law and the coupled Bellman residual.
    fn affine_view(&self, state: &[f64]) -> Option<AffineView>;

    /// Diagonal of `player`'s own action-cost matrix `R_ii`.
    fn action_cost_diag(&self, player: usize) -> Vec<f64>;

    /// State-dependent (non-action) cost terms `Q_i(state)`.
    fn state_cost(&self, state: &[f64], player: usize) -> f64;
}
