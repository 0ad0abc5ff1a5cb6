//! The closed-form affine control law and the coupled Bellman-residual
//! diagnostic.
//!
//! For control-affine games with quadratic action costs, stationarity of
//! `r_i + gamma V_i(s')` in player i's action gives
//! `u_i = -(gamma/2) R_ii^{-1} G_i^T grad V_i(s')`. The next state itself
//! depends on all actions, so the law is implicit; it is resolved either
//! by the drift-seeded fixed-point pass (small time steps contract the
//! map) or by solving the affine self-consistency system exactly (needed
//! for quadratic critics on generic linear games, where the fixed-point
//! map can expand).

use nalgebra::{DMatrix, DVector};

use crate::net::TapeNet;
use crate::tape::Tape;

use super::model::DiffGame;
use super::{Net, TrainError};

/// Critic value and its gradient with respect to the flat state, obtained
/// by differentiating through the feature map and the network.
pub fn critic_state_gradient<G: DiffGame>(
    game: &G,
    critic: &Net,
    state: &[f64],
    player: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut tape = Tape::new();
    let (gs, sv) = tape.input("state", game.state_dim());
    let nodes: Vec<_> = (0..game.state_dim()).map(|i| tape.slice(sv, i, 1)).collect();
    let feat = game.build_critic_input(&mut tape, &nodes, player, state);
    let net = TapeNet::register(&mut tape, &critic.spec, "critic");
    let v = net.forward_nodes(&mut tape, feat, None);
    tape.set_output(v);
    let mut b = crate::tape::Bindings::new();
    b.set(gs, state.to_vec());
    net.bind(&mut b, &critic.params);
    let eval = tape.forward(&b)?;
    let grads = tape.backward(&eval)?;
    Ok((eval.scalar(v), grads.group(gs).to_vec()))
}

fn net_for(critics: &[Net], player: usize) -> &Net {
    if critics.len() == 1 {
        &critics[0]
    } else {
        &critics[player]
    }
}

/// One evaluation of the stationarity law at a tentative next state.
fn law_at<G: DiffGame>(
    game: &G,
    critics: &[Net],
    gains: &[Vec<Vec<f64>>],
    next_state: &[f64],
    gamma: f64,
) -> Result<Vec<Vec<f64>>, TrainError> {
    (0..game.num_players())
        .map(|i| {
            let (_, grad) = critic_state_gradient(game, net_for(critics, i), next_state, i)?;
            let r_diag = game.action_cost_diag(i);
            Ok(gains[i]
                .iter()
                .zip(&r_diag)
                .map(|(col, r)| {
                    let g_dot: f64 = col.iter().zip(&grad).map(|(g, d)| g * d).sum();
                    -(gamma / (2.0 * r)) * g_dot
                })
                .collect())
        })
        .collect()
}

fn apply_actions(drift: &[f64], gains: &[Vec<Vec<f64>>], actions: &[Vec<f64>]) -> Vec<f64> {
    let mut s = drift.to_vec();
    for (cols, u) in gains.iter().zip(actions) {
        for (col, a) in cols.iter().zip(u) {
            for (si, g) in s.iter_mut().zip(col) {
                *si += g * a;
            }
        }
    }
    s
}

fn clamp_to_amplitudes<G: DiffGame>(game: &G, mut actions: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    for (i, u) in actions.iter_mut().enumerate() {
        if let Some(amp) = game.amplitudes(i) {
            for (a, m) in u.iter_mut().zip(amp) {
                *a = a.clamp(-m, m);
            }
        }
    }
    actions
}

/// The control law resolved by `passes` fixed-point evaluations seeded
/// with the drift-only (zero-action) next state.
pub fn closed_form_action_with_passes<G: DiffGame>(
    game: &G,
    critics: &[Net],
    state: &[f64],
    gamma: f64,
    passes: usize,
) -> Result<Vec<Vec<f64>>, TrainError> {
    assert!(passes >= 1);
    let view = game.affine_view(state).ok_or(TrainError::NonAffine)?;
    let mut next = view.drift.clone();
    let mut actions = Vec::new();
    for _ in 0..passes {
        actions = law_at(game, critics, &view.gains, &next, gamma)?;
        next = apply_actions(&view.drift, &view.gains, &actions);
    }
    Ok(clamp_to_amplitudes(game, actions))
}

/// Default control law: seed at the drift-only state, then one
/// fixed-point refinement.
pub fn closed_form_action<G: DiffGame>(
    game: &G,
    critics: &[Net],
    state: &[f64],
    gamma: f64,
) -> Result<Vec<Vec<f64>>, TrainError> {
    closed_form_action_with_passes(game, critics, state, gamma, 2)
}

/// Solves the self-consistency system of the control law exactly under the
/// affine model: the map `u -> law(grad V(drift + G u))` is affine for a
/// quadratic critic, so its fixed point is one small linear solve probed
/// with unit actions.
pub fn solve_stationary_actions<G: DiffGame>(
    game: &G,
    critics: &[Net],
    state: &[f64],
    gamma: f64,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let view = game.affine_view(state).ok_or(TrainError::NonAffine)?;
    let players = game.num_players();
    let dims: Vec<usize> = (0..players).map(|i| game.action_dim(i)).collect();
    let total: usize = dims.iter().sum();

    let flatten = |nested: &[Vec<f64>]| -> DVector<f64> {
        DVector::from_iterator(total, nested.iter().flatten().copied())
    };
    let unflatten = |flat: &DVector<f64>| -> Vec<Vec<f64>> {
        let mut at = 0;
        dims.iter()
            .map(|&d| {
                let part = flat.as_slice()[at..at + d].to_vec();
                at += d;
                part
            })
            .collect()
    };

    let eval_map = |u: &DVector<f64>| -> Result<DVector<f64>, TrainError> {
        let actions = unflatten(u);
        let next = apply_actions(&view.drift, &view.gains, &actions);
        Ok(flatten(&law_at(game, critics, &view.gains, &next, gamma)?))
    };

    let at_zero = eval_map(&DVector::zeros(total))?;
    let mut jac = DMatrix::<f64>::zeros(total, total);
    for k in 0..total {
        let mut probe = DVector::zeros(total);
        probe[k] = 1.0;
        let col = eval_map(&probe)? - &at_zero;
        jac.set_column(k, &col);
    }
    let lhs = DMatrix::<f64>::identity(total, total) - jac;
    let solved = lhs
        .lu()
        .solve(&at_zero)
        .ok_or(TrainError::Law("stationarity system is singular".into()))?;
    Ok(clamp_to_amplitudes(game, unflatten(&solved)))
}

/// Per-player coupled Bellman residual at `state`:
/// `Q_i(s) + gamma V_i(s') - V_i(s) + (gamma^2/4) sum_j grad V_j(s')^T
/// G_j R_jj^{-1} G_j^T grad V_j(s')`, with `s'` the closed-loop next state
/// under the stationarity actions. Zero for equilibrium value functions
/// of games where every player pays every action cost.
pub fn hjb_residual<G: DiffGame>(
    game: &G,
    critics: &[Net],
    state: &[f64],
    gamma: f64,
) -> Result<Vec<f64>, TrainError> {
    let view = game.affine_view(state).ok_or(TrainError::NonAffine)?;
    let actions = solve_stationary_actions(game, critics, state, gamma)?;
    let next = apply_actions(&view.drift, &view.gains, &actions);

    let mut quartic = 0.0;
    let mut value_now = vec![0.0; game.num_players()];
    let mut value_next = vec![0.0; game.num_players()];
    for j in 0..game.num_players() {
        let net = net_for(critics, j);
        let (v_next, grad_next) = critic_state_gradient(game, net, &next, j)?;
        let (v_now, _) = critic_state_gradient(game, net, state, j)?;
        value_now[j] = v_now;
        value_next[j] = v_next;
        let r_diag = game.action_cost_diag(j);
        for (col, r) in view.gains[j].iter().zip(&r_diag) {
            let g_dot: f64 = col.iter().zip(&grad_next).map(|(g, d)| g * d).sum();
            quartic += gamma * gamma / 4.0 * g_dot * g_dot / r;
        }
    }

    Ok((0..game.num_players())
        .map(|i| game.state_cost(state, i) + gamma * value_next[i] - value_now[i] + quartic)
        .collect())
}
