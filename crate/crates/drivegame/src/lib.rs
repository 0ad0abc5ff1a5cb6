//! Multi-vehicle driving at non-signalized intersections modeled as an
//! N-player non-zero-sum dynamic game, solved with actor-critic training
//! over the known dynamics model.
//!
//! The crate is organized around the pieces of that pipeline:
//!
//! - [`dynamics`]: 3-DOF single-track vehicle models (lateral affine and
//!   joint lateral/longitudinal).
//! - [`game`]: the N-player Markov game — global state, per-player costs,
//!   egocentric observations.
//! - [`tape`]: reverse-mode automatic differentiation over a small fixed
//!   primitive set.
//! - [`net`]: actor/critic multilayer perceptrons.
//! - [`replay`]: state replay buffer with a seeded uniform sampler.
//! - [`lq`]: coupled-Riccati solver for N-player linear-quadratic games,
//!   the ground-truth oracle for the trainer.
//! - [`train`]: the actor-critic training loops (per-player and
//!   parameter-shared self-play), the closed-form affine control law, and
//!   the coupled Bellman-residual diagnostic.
//!
//! Everything is deterministic given a seed; data-parallel inner loops
//! (batch gradients, evaluation rollouts, finite-difference sweeps) reduce
//! in fixed order so the `parallel` feature changes wall-clock time only,
//! never results.

pub mod dynamics;
pub mod game;
pub mod lq;
pub mod net;
pub mod par;
pub mod replay;
pub mod tape;
pub mod train;
