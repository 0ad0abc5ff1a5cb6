//! Linear-quadratic games as differentiable training models.
//!
//! Critic features are the quadratic monomials of the state, so a
//! zero-hidden-layer critic is linear in features and can represent the
//! true quadratic values exactly; the actor is a bare affine map whose
//! weights are (minus) the feedback gains. Training on these instances is
//! checked against the coupled-Riccati oracle.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::lq::LqGame;
use crate::net::{MlpSpec, OutputHead, ParamSet};
use crate::tape::{NodeId, Tape};

use super::model::{AffineView, DiffGame};

#[derive(Debug, Clone)]
pub struct LqDiffGame {
    game: LqGame,
    start_scale: f64,
    horizon: usize,
}

impl LqDiffGame {
    pub fn new(game: LqGame, start_scale: f64, horizon: usize) -> Self {
        assert!(start_scale > 0.0 && horizon > 0);
        Self { game, start_scale, horizon }
    }

    pub fn game(&self) -> &LqGame {
        &self.game
    }

    /// Number of quadratic monomials for an `n`-dimensional state.
    pub fn quad_dim(n: usize) -> usize {
        n * (n + 1) / 2
    }

    /// Monomial order: `(0,0), (0,1), .., (0,n-1), (1,1), ..`.
    fn monomials(n: usize) -> Vec<(usize, usize)> {
        (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
    }

    /// Critic weights that represent `V(s) = s^T P s` exactly.
    pub fn critic_params_from_value(p: &DMatrix<f64>) -> ParamSet {
        let n = p.nrows();
        let weights = Self::monomials(n)
            .into_iter()
            .map(|(i, j)| if i == j { p[(i, i)] } else { 2.0 * p[(i, j)] })
            .collect();
        ParamSet {
            layers: vec![crate::net::Layer { weights, biases: vec![0.0] }],
        }
    }

    /// The critic architecture matching [`Self::critic_input`].
    pub fn critic_spec(&self) -> MlpSpec {
        MlpSpec::new(Self::quad_dim(self.game.state_dim()), vec![], 1, OutputHead::Identity)
    }

    /// The linear actor architecture for `player`.
    pub fn actor_spec(&self, player: usize) -> MlpSpec {
        MlpSpec::new(
            self.game.state_dim(),
            vec![],
            self.game.action_dim(player),
            OutputHead::Identity,
        )
    }

    /// Feedback gain represented by a linear actor: `u = W s + b` means
    /// `K = -W`.
    pub fn gain_from_actor(params: &ParamSet, rows: usize, cols: usize) -> DMatrix<f64> {
        -DMatrix::from_row_slice(rows, cols, &params.layers[0].weights)
    }
}

impl DiffGame for LqDiffGame {
    fn num_players(&self) -> usize {
        self.game.num_players()
    }

    fn state_dim(&self) -> usize {
        self.game.state_dim()
    }

    fn action_dim(&self, player: usize) -> usize {
        self.game.action_dim(player)
    }

    fn amplitudes(&self, _player: usize) -> Option<Vec<f64>> {
        None
    }

    fn critic_input_dim(&self) -> usize {
        Self::quad_dim(self.game.state_dim())
    }

    fn actor_input_dim(&self) -> usize {
        self.game.state_dim()
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn nominal_state(&self) -> Vec<f64> {
        vec![self.start_scale; self.game.state_dim()]
    }

    fn initial_state(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.game.state_dim())
            .map(|_| rng.gen_range(-self.start_scale..=self.start_scale))
            .collect()
    }

    fn is_terminal(&self, _state: &[f64]) -> bool {
        false
    }

    fn step(&self, state: &[f64], actions: &[Vec<f64>]) -> Result<Vec<f64>, String> {
        let s = DVector::from_column_slice(state);
        let mut next = &self.game.a * s;
        for (b, u) in self.game.b.iter().zip(actions) {
            next += b * DVector::from_column_slice(u);
        }
        Ok(next.as_slice().to_vec())
    }

    fn cost(&self, state: &[f64], actions: &[Vec<f64>], player: usize) -> f64 {
        let s = DVector::from_column_slice(state);
        let mut c = (s.transpose() * &self.game.q[player] * &s)[(0, 0)];
        for (j, u) in actions.iter().enumerate() {
            let u = DVector::from_column_slice(u);
            c += (u.transpose() * &self.game.r[player][j] * &u)[(0, 0)];
        }
        c
    }

    fn critic_input(&self, state: &[f64], _player: usize) -> Vec<f64> {
        Self::monomials(state.len())
            .into_iter()
            .map(|(i, j)| state[i] * state[j])
            .collect()
    }

    fn actor_input(&self, state: &[f64], _player: usize) -> Vec<f64> {
        state.to_vec()
    }

    fn build_step(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        actions: &[Vec<NodeId>],
    ) -> Vec<NodeId> {
        let n = self.game.state_dim();
        let s = tape.concat(state);
        let a_const = tape.constant(row_major(&self.game.a));
        let mut next = tape.matvec(a_const, s, n, n);
        for (b, u) in self.game.b.iter().zip(actions) {
            let u_vec = tape.concat(u);
            let b_const = tape.constant(row_major(b));
            let bu = tape.matvec(b_const, u_vec, n, b.ncols());
            next = tape.add(next, bu);
        }
        (0..n).map(|i| tape.slice(next, i, 1)).collect()
    }

    fn build_cost(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        actions: &[Vec<NodeId>],
        player: usize,
    ) -> NodeId {
        let n = self.game.state_dim();
        let s = tape.concat(state);
        let q_const = tape.constant(row_major(&self.game.q[player]));
        let qs = tape.matvec(q_const, s, n, n);
        let mut total = tape.dot(s, qs);
        for (j, u) in actions.iter().enumerate() {
            let m = self.game.action_dim(j);
            let u_vec = tape.concat(u);
            let r_const = tape.constant(row_major(&self.game.r[player][j]));
            let ru = tape.matvec(r_const, u_vec, m, m);
            let uru = tape.dot(u_vec, ru);
            total = tape.add(total, uru);
        }
        total
    }

    fn build_critic_input(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        _player: usize,
        _state_numeric: &[f64],
    ) -> NodeId {
        let parts: Vec<NodeId> = Self::monomials(state.len())
            .into_iter()
            .map(|(i, j)| tape.mul(state[i], state[j]))
            .collect();
        tape.concat(&parts)
    }

    fn build_actor_input(
        &self,
        tape: &mut Tape,
        state: &[NodeId],
        _player: usize,
        _state_numeric: &[f64],
    ) -> NodeId {
        tape.concat(state)
    }

    fn affine_view(&self, state: &[f64]) -> Option<AffineView> {
        let s = DVector::from_column_slice(state);
        let drift = (&self.game.a * s).as_slice().to_vec();
        let gains = self
            .game
            .b
            .iter()
            .map(|b| {
                (0..b.ncols())
                    .map(|c| b.column(c).iter().copied().collect())
                    .collect()
            })
            .collect();
        Some(AffineView { drift, gains })
    }

    fn action_cost_diag(&self, player: usize) -> Vec<f64> {
        let r = &self.game.r[player][player];
        (0..r.nrows()).map(|i| r[(i, i)]).collect()
    }

    fn state_cost(&self, state: &[f64], player: usize) -> f64 {
        let s = DVector::from_column_slice(state);
        (s.transpose() * &self.game.q[player] * s)[(0, 0)]
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::critic_eval;
    use crate::tape::Bindings;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand_chacha::rand_core::SeedableRng;

    fn two_player() -> LqDiffGame {
        let r11 = DMatrix::from_row_slice(1, 1, &[1.0]);
        let r22 = DMatrix::from_row_slice(1, 1, &[1.3]);
        let game = LqGame {
            a: DMatrix::from_row_slice(2, 2, &[0.95, 0.05, -0.03, 0.9]),
            b: vec![
                DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
                DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            ],
            q: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.4]),
                DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 1.0]),
            ],
            r: vec![vec![r11.clone(), r22.clone()], vec![r11, r22]],
            horizon: crate::lq::Horizon::Infinite,
            discount: 1.0,
        };
        LqDiffGame::new(game, 2.0, 60)
    }

    #[test]
    fn numeric_and_tape_paths_agree() {
        let model = two_player();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let state = model.initial_state(&mut rng);
        let actions = vec![vec![0.3], vec![-0.5]];

        let mut tape = Tape::new();
        let (gs, sv) = tape.input("state", 2);
        let state_nodes: Vec<NodeId> = (0..2).map(|i| tape.slice(sv, i, 1)).collect();
        let (ga, av) = tape.input("actions", 2);
        let action_nodes = vec![vec![tape.slice(av, 0, 1)], vec![tape.slice(av, 1, 1)]];

        let next_nodes = model.build_step(&mut tape, &state_nodes, &action_nodes);
        let next_cat = tape.concat(&next_nodes);
        let c0 = model.build_cost(&mut tape, &state_nodes, &action_nodes, 0);
        let c1 = model.build_cost(&mut tape, &state_nodes, &action_nodes, 1);
        let feat = model.build_critic_input(&mut tape, &state_nodes, 0, &state);

        let mut b = Bindings::new();
        b.set(gs, state.clone());
        b.set(ga, vec![0.3, -0.5]);
        let eval = tape.forward(&b).unwrap();

        let next = model.step(&state, &actions).unwrap();
        for (g, w) in eval.value(next_cat).iter().zip(&next) {
            assert_relative_eq!(*g, *w, max_relative = 1e-13);
        }
        assert_relative_eq!(eval.scalar(c0), model.cost(&state, &actions, 0), max_relative = 1e-13);
        assert_relative_eq!(eval.scalar(c1), model.cost(&state, &actions, 1), max_relative = 1e-13);
        let want_feat = model.critic_input(&state, 0);
        for (g, w) in eval.value(feat).iter().zip(&want_feat) {
            assert_relative_eq!(*g, *w, max_relative = 1e-13);
        }
    }

    #[test]
    fn installed_value_matrix_reproduces_the_quadratic_form() {
        let model = two_player();
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let params = LqDiffGame::critic_params_from_value(&p);
        let spec = model.critic_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let s = model.initial_state(&mut rng);
            let feat = model.critic_input(&s, 0);
            let v = critic_eval(&spec, &params, &feat);
            let sv = DVector::from_column_slice(&s);
            let want = (sv.transpose() * &p * sv)[(0, 0)];
            assert_relative_eq!(v, want, max_relative = 1e-12);
        }
    }

    #[test]
    fn gain_extraction_negates_actor_weights() {
        let model = two_player();
        let mut params = ParamSet::zeros(&model.actor_spec(0));
        params.layers[0].weights = vec![0.4, -0.2];
        let k = LqDiffGame::gain_from_actor(&params, 1, 2);
        assert_eq!(k[(0, 0)], -0.4);
        assert_eq!(k[(0, 1)], 0.2);
    }
}
