//! Ground-truth solver for N-player discrete-time linear-quadratic
//! non-zero-sum games.
//!
//! Dynamics `s' = A s + sum_j B_j u_j`; player `i` pays
//! `s^T Q_i s + sum_j u_j^T R_ij u_j` per step, discounted by `gamma`.
//! With linear feedback `u_i = -K_i s` and quadratic values
//! `V_i(s) = s^T P_i s`, the per-player stationarity conditions couple all
//! value matrices. The solver iterates a synchronous best-response step on
//! the gains with exact (Lyapunov) policy evaluation and damping on the
//! value matrices, to a joint fixed point.
//!
//! These solutions anchor the trainer: a converged actor-critic run on the
//! same game must reproduce the oracle gains, and the oracle values must
//! zero the coupled Bellman residual.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LqError {
    #[error("dimension mismatch: {0}")]
    BadDimensions(String),
    #[error("{0} must be symmetric")]
    NotSymmetric(String),
    #[error("{0} must be positive definite")]
    NotPositiveDefinite(String),
    #[error("linear solve failed during {0}")]
    SolveFailed(&'static str),
    #[error("no convergence after {iterations} iterations, residual {residual:.3e}")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        /// Residual value per iteration, for diagnostics.
        trace: Vec<f64>,
    },
    #[error("closed loop is unstable (spectral radius {0:.6})")]
    UnstableClosedLoop(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

/// An N-player linear-quadratic game instance.
#[derive(Debug, Clone)]
pub struct LqGame {
    pub a: DMatrix<f64>,
    /// Per-player input matrices, `n x m_i`.
    pub b: Vec<DMatrix<f64>>,
    /// Per-player state cost matrices, symmetric PSD.
    pub q: Vec<DMatrix<f64>>,
    /// `r[i][j]`: weight player `i` pays on player `j`'s action;
    /// `r[i][i]` must be symmetric positive definite.
    pub r: Vec<Vec<DMatrix<f64>>>,
    pub horizon: Horizon,
    pub discount: f64,
}

/// Value matrices and feedback gains at the solved fixed point.
#[derive(Debug, Clone)]
pub struct LqSolution {
    /// `V_i(s) = s^T P_i s`.
    pub p: Vec<DMatrix<f64>>,
    /// `u_i = -K_i s`.
    pub gains: Vec<DMatrix<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-9 * m.amax().max(1.0)
}

impl LqGame {
    pub fn num_players(&self) -> usize {
        self.b.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self, player: usize) -> usize {
        self.b[player].ncols()
    }

    pub fn validate(&self) -> Result<(), LqError> {
        let n = self.state_dim();
        if self.a.ncols() != n {
            return Err(LqError::BadDimensions("A must be square".into()));
        }
        let players = self.num_players();
        if self.q.len() != players || self.r.len() != players {
            return Err(LqError::BadDimensions("q/r length must match player count".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(LqError::BadDimensions(format!(
                "discount {} outside (0, 1]",
                self.discount
            )));
        }
        for (i, b) in self.b.iter().enumerate() {
            if b.nrows() != n {
                return Err(LqError::BadDimensions(format!("B_{i} row count")));
            }
            if self.r[i].len() != players {
                return Err(LqError::BadDimensions(format!("r[{i}] length")));
            }
            if self.q[i].nrows() != n || self.q[i].ncols() != n {
                return Err(LqError::BadDimensions(format!("Q_{i} shape")));
            }
            if !is_symmetric(&self.q[i]) {
                return Err(LqError::NotSymmetric(format!("Q_{i}")));
            }
            let eig = self.q[i].clone().symmetric_eigenvalues();
            if eig.iter().any(|&e| e < -1e-9) {
                return Err(LqError::NotPositiveDefinite(format!("Q_{i} (needs PSD)")));
            }
            for (j, r) in self.r[i].iter().enumerate() {
                let m = self.action_dim(j);
                if r.nrows() != m || r.ncols() != m {
                    return Err(LqError::BadDimensions(format!("R_{i}{j} shape")));
                }
            }
            let rii = &self.r[i][i];
            if !is_symmetric(rii) {
                return Err(LqError::NotSymmetric(format!("R_{i}{i}")));
            }
            let eig = rii.clone().symmetric_eigenvalues();
            if eig.iter().any(|&e| e <= 0.0) {
                return Err(LqError::NotPositiveDefinite(format!("R_{i}{i}")));
            }
        }
        Ok(())
    }

    /// Joint feedback gains solving every player's stationarity condition
    /// simultaneously for fixed value matrices.
    fn gains_for(&self, p: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>, LqError> {
        let gamma = self.discount;
        let players = self.num_players();
        let n = self.state_dim();
        let dims: Vec<usize> = (0..players).map(|i| self.action_dim(i)).collect();
        let total: usize = dims.iter().sum();
        let offsets: Vec<usize> = dims
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();

        let mut lhs = DMatrix::<f64>::zeros(total, total);
        let mut rhs = DMatrix::<f64>::zeros(total, n);
        for i in 0..players {
            let bt_p = self.b[i].transpose() * &p[i];
            for j in 0..players {
                let mut block = &bt_p * &self.b[j] * gamma;
                if i == j {
                    block += &self.r[i][i];
                }
                lhs.view_mut((offsets[i], offsets[j]), (dims[i], dims[j]))
                    .copy_from(&block);
            }
            rhs.view_mut((offsets[i], 0), (dims[i], n))
                .copy_from(&(&bt_p * &self.a * gamma));
        }
        let stacked = lhs
            .lu()
            .solve(&rhs)
            .ok_or(LqError::SolveFailed("joint gain system"))?;
        Ok((0..players)
            .map(|i| stacked.rows(offsets[i], dims[i]).into_owned())
            .collect())
    }

    fn closed_loop(&self, gains: &[DMatrix<f64>]) -> DMatrix<f64> {
        let mut a_cl = self.a.clone();
        for (b, k) in self.b.iter().zip(gains) {
            a_cl -= b * k;
        }
        a_cl
    }

    /// Exact policy evaluation: solves the discounted Lyapunov equation
    /// `P_i = C_i + gamma * A_cl^T P_i A_cl` by vectorization.
    fn evaluate_values(&self, gains: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>, LqError> {
        let a_cl = self.closed_loop(gains);
        let n = self.state_dim();
        let at = a_cl.transpose();
        let kron = at.kronecker(&at);
        let lhs = DMatrix::<f64>::identity(n * n, n * n) - kron * self.discount;
        let lu = lhs.lu();
        (0..self.num_players())
            .map(|i| {
                let mut c = self.q[i].clone();
                for (j, k) in gains.iter().enumerate() {
                    c += k.transpose() * &self.r[i][j] * k;
                }
                let vec_c = DVector::from_column_slice(c.as_slice());
                let vec_p = lu
                    .solve(&vec_c)
                    .ok_or(LqError::SolveFailed("Lyapunov evaluation"))?;
                let p = DMatrix::from_column_slice(n, n, vec_p.as_slice());
                // enforce exact symmetry against rounding drift
                Ok((&p + p.transpose()) * 0.5)
            })
            .collect()
    }

    /// Worst violation of the stationarity and value-consistency conditions.
    pub fn fixed_point_residual(&self, p: &[DMatrix<f64>], gains: &[DMatrix<f64>]) -> f64 {
        let gamma = self.discount;
        let a_cl = self.closed_loop(gains);
        let mut worst = 0.0f64;
        for i in 0..self.num_players() {
            let stationarity =
                (&self.r[i][i] * &gains[i] - self.b[i].transpose() * &p[i] * &a_cl * gamma).amax();
            let mut c = self.q[i].clone();
            for (j, k) in gains.iter().enumerate() {
                c += k.transpose() * &self.r[i][j] * k;
            }
            let bellman = (&p[i] - (c + a_cl.transpose() * &p[i] * &a_cl * gamma)).amax();
            worst = worst.max(stationarity).max(bellman);
        }
        worst
    }

    pub fn spectral_radius(&self, gains: &[DMatrix<f64>]) -> f64 {
        self.closed_loop(gains)
            .complex_eigenvalues()
            .iter()
            .map(|e| e.norm())
            .fold(0.0, f64::max)
    }
}

/// Solves the game by damped synchronous best-response iteration on the
/// value matrices (infinite horizon) or exact backward recursion (finite
/// horizon, returning the time-0 matrices).
pub fn solve(game: &LqGame, tol: f64, max_iter: usize) -> Result<LqSolution, LqError> {
    game.validate()?;
    match game.horizon {
        Horizon::Finite(steps) => solve_finite(game, steps),
        Horizon::Infinite => solve_infinite(game, tol, max_iter),
    }
}

fn solve_infinite(game: &LqGame, tol: f64, max_iter: usize) -> Result<LqSolution, LqError> {
    const DAMPING: f64 = 0.5;
    let mut p: Vec<DMatrix<f64>> = game.q.clone();
    let mut trace = Vec::new();
    for iteration in 1..=max_iter {
        let gains = game.gains_for(&p)?;
        let p_new = game.evaluate_values(&gains)?;
        let mut step = 0.0f64;
        for i in 0..game.num_players() {
            step = step.max((&p_new[i] - &p[i]).amax());
            p[i] = &p[i] * (1.0 - DAMPING) + &p_new[i] * DAMPING;
        }
        let gains = game.gains_for(&p)?;
        let residual = game.fixed_point_residual(&p, &gains).max(step * DAMPING);
        trace.push(residual);
        if residual <= tol {
            let rho = game.spectral_radius(&gains);
            if rho >= 1.0 / game.discount.sqrt() {
                return Err(LqError::UnstableClosedLoop(rho));
            }
            return Ok(LqSolution { p, gains, iterations: iteration, residual });
        }
    }
    let residual = *trace.last().unwrap_or(&f64::INFINITY);
    Err(LqError::NoConvergence { iterations: max_iter, residual, trace })
}

fn solve_finite(game: &LqGame, steps: usize) -> Result<LqSolution, LqError> {
    // terminal value: the bare state cost
    let mut p: Vec<DMatrix<f64>> = game.q.clone();
    let mut gains = game.gains_for(&p)?;
    for _ in 0..steps {
        gains = game.gains_for(&p)?;
        let a_cl = game.closed_loop(&gains);
        p = (0..game.num_players())
            .map(|i| {
                let mut c = game.q[i].clone();
                for (j, k) in gains.iter().enumerate() {
                    c += k.transpose() * &game.r[i][j] * k;
                }
                let next = c + a_cl.transpose() * &p[i] * &a_cl * game.discount;
                (&next + next.transpose()) * 0.5
            })
            .collect();
    }
    let residual = game.fixed_point_residual(&p, &gains);
    Ok(LqSolution { p, gains, iterations: steps, residual })
}

/// Rolls the closed loop out for `t_steps` from `s0` and accumulates each
/// player's discounted quadratic cost exactly.
pub fn evaluate_policy(
    game: &LqGame,
    gains: &[DMatrix<f64>],
    s0: &DVector<f64>,
    t_steps: usize,
) -> Result<Vec<f64>, LqError> {
    if game.horizon == Horizon::Infinite {
        let rho = game.spectral_radius(gains);
        if rho >= 1.0 / game.discount.sqrt() {
            return Err(LqError::UnstableClosedLoop(rho));
        }
    }
    let players = game.num_players();
    let mut costs = vec![0.0; players];
    let mut s = s0.clone();
    let mut discount = 1.0;
    for _ in 0..t_steps {
        let actions: Vec<DVector<f64>> = gains.iter().map(|k| -(k * &s)).collect();
        for i in 0..players {
            let mut r = (&self_quad(&game.q[i], &s)) * 1.0;
            for (j, u) in actions.iter().enumerate() {
                r += self_quad(&game.r[i][j], u);
            }
            costs[i] += discount * r;
        }
        let mut next = &game.a * &s;
        for (b, u) in game.b.iter().zip(&actions) {
            next += b * u;
        }
        s = next;
        discount *= game.discount;
    }
    Ok(costs)
}

fn self_quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

/// `s0^T P_i s0` for each player.
pub fn predicted_values(p: &[DMatrix<f64>], s0: &DVector<f64>) -> Vec<f64> {
    p.iter().map(|pi| self_quad(pi, s0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn scalar_game() -> LqGame {
        LqGame {
            a: mat(1, 1, &[0.9]),
            b: vec![mat(1, 1, &[0.5])],
            q: vec![mat(1, 1, &[1.0])],
            r: vec![vec![mat(1, 1, &[0.4])]],
            horizon: Horizon::Infinite,
            discount: 1.0,
        }
    }

    /// Two players, scalar state, each also paying the other's action cost
    /// at the other's own weight.
    pub(crate) fn scalar_two_player() -> LqGame {
        let r11 = mat(1, 1, &[1.0]);
        let r22 = mat(1, 1, &[1.3]);
        LqGame {
            a: mat(1, 1, &[0.95]),
            b: vec![mat(1, 1, &[1.0]), mat(1, 1, &[0.8])],
            q: vec![mat(1, 1, &[1.0]), mat(1, 1, &[0.7])],
            r: vec![vec![r11.clone(), r22.clone()], vec![r11, r22]],
            horizon: Horizon::Infinite,
            discount: 1.0,
        }
    }

    /// Riccati difference recursion iterated to a fixed point: the
    /// independent value-iteration oracle for single-player instances.
    fn value_iteration_single(game: &LqGame, iters: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b, q, r) = (&game.a, &game.b[0], &game.q[0], &game.r[0][0]);
        let g = game.discount;
        let mut p = q.clone();
        for _ in 0..iters {
            let inner = (r + b.transpose() * &p * b * g)
                .try_inverse()
                .expect("invertible");
            p = q + a.transpose() * &p * a * g
                - a.transpose() * &p * b * g * &inner * b.transpose() * &p * a * g;
        }
        let k = (r + b.transpose() * &p * b * g)
            .try_inverse()
            .unwrap()
            * b.transpose()
            * &p
            * a
            * g;
        (p, k)
    }

    #[test]
    fn single_player_matches_value_iteration() {
        let game = scalar_game();
        let sol = solve(&game, 1e-12, 10_000).unwrap();
        let (p_vi, k_vi) = value_iteration_single(&game, 10_000);
        assert_relative_eq!(sol.p[0][(0, 0)], p_vi[(0, 0)], max_relative = 1e-8);
        assert_relative_eq!(sol.gains[0][(0, 0)], k_vi[(0, 0)], max_relative = 1e-8);

        // and a 2-state single-player instance
        let game = LqGame {
            a: mat(2, 2, &[0.9, 0.1, -0.05, 0.8]),
            b: vec![mat(2, 1, &[1.0, 0.3])],
            q: vec![mat(2, 2, &[1.0, 0.0, 0.0, 0.5])],
            r: vec![vec![mat(1, 1, &[0.7])]],
            horizon: Horizon::Infinite,
            discount: 0.97,
        };
        let sol = solve(&game, 1e-12, 10_000).unwrap();
        let (p_vi, k_vi) = value_iteration_single(&game, 20_000);
        assert!((&sol.p[0] - &p_vi).amax() <= 1e-8);
        assert!((&sol.gains[0] - &k_vi).amax() <= 1e-8);
    }

    #[test]
    fn decoupled_two_player_reduces_to_independent_riccati() {
        // block-diagonal A, disjoint inputs, costs only on own block/action
        let game = LqGame {
            a: mat(2, 2, &[0.9, 0.0, 0.0, 0.85]),
            b: vec![mat(2, 1, &[1.0, 0.0]), mat(2, 1, &[0.0, 1.0])],
            q: vec![
                mat(2, 2, &[1.0, 0.0, 0.0, 0.0]),
                mat(2, 2, &[0.0, 0.0, 0.0, 0.8]),
            ],
            r: vec![
                vec![mat(1, 1, &[0.5]), mat(1, 1, &[0.0])],
                vec![mat(1, 1, &[0.0]), mat(1, 1, &[0.9])],
            ],
            horizon: Horizon::Infinite,
            discount: 1.0,
        };
        let sol = solve(&game, 1e-12, 10_000).unwrap();

        for (idx, (a, q, r)) in [(0usize, (0.9, 1.0, 0.5)), (1, (0.85, 0.8, 0.9))]
            .iter()
            .map(|(i, t)| (*i, *t))
        {
            let single = LqGame {
                a: mat(1, 1, &[a]),
                b: vec![mat(1, 1, &[1.0])],
                q: vec![mat(1, 1, &[q])],
                r: vec![vec![mat(1, 1, &[r])]],
                horizon: Horizon::Infinite,
                discount: 1.0,
            };
            let ssol = solve(&single, 1e-12, 10_000).unwrap();
            assert_relative_eq!(
                sol.p[idx][(idx, idx)],
                ssol.p[0][(0, 0)],
                max_relative = 1e-8
            );
            assert_relative_eq!(
                sol.gains[idx][(0, idx)],
                ssol.gains[0][(0, 0)],
                max_relative = 1e-8
            );
        }
    }

    /// Coarse-to-fine alternating best response over gain grids; an
    /// implementation-independent check of the Nash fixed point.
    #[test]
    fn scalar_two_player_matches_grid_best_response() {
        let game = scalar_two_player();
        let sol = solve(&game, 1e-12, 20_000).unwrap();
        let s0 = DVector::from_column_slice(&[1.0]);
        let eval = |k1: f64, k2: f64| {
            let gains = vec![mat(1, 1, &[k1]), mat(1, 1, &[k2])];
            evaluate_policy(&game, &gains, &s0, 3_000).unwrap()
        };
        let (mut k1, mut k2) = (0.5, 0.5);
        let mut width = 0.5;
        for _ in 0..40 {
            let best = |other_fixed: f64, mine: f64, player: usize| {
                let mut best_k = mine;
                let mut best_c = f64::INFINITY;
                for step in -20..=20 {
                    let cand = mine + step as f64 * width / 20.0;
                    let costs = if player == 0 {
                        eval(cand, other_fixed)
                    } else {
                        eval(other_fixed, cand)
                    };
                    if costs[player] < best_c {
                        best_c = costs[player];
                        best_k = cand;
                    }
                }
                best_k
            };
            k1 = best(k2, k1, 0);
            k2 = best(k1, k2, 1);
            width *= 0.7;
        }
        assert!(
            (sol.gains[0][(0, 0)] - k1).abs() <= 1e-3,
            "gain 1: {} vs grid {}",
            sol.gains[0][(0, 0)],
            k1
        );
        assert!(
            (sol.gains[1][(0, 0)] - k2).abs() <= 1e-3,
            "gain 2: {} vs grid {}",
            sol.gains[1][(0, 0)],
            k2
        );
    }

    #[test]
    fn zero_gains_zero_dynamics_cost_is_the_initial_quadratic() {
        let game = LqGame {
            a: mat(2, 2, &[0.0; 4]),
            b: vec![mat(2, 1, &[1.0, 0.0])],
            q: vec![mat(2, 2, &[2.0, 0.0, 0.0, 3.0])],
            r: vec![vec![mat(1, 1, &[1.0])]],
            horizon: Horizon::Infinite,
            discount: 1.0,
        };
        let gains = vec![mat(1, 2, &[0.0, 0.0])];
        let s0 = DVector::from_column_slice(&[2.0, -1.0]);
        let costs = evaluate_policy(&game, &gains, &s0, 100).unwrap();
        assert_relative_eq!(costs[0], 2.0 * 4.0 + 3.0 * 1.0, max_relative = 1e-12);
    }

    #[test]
    fn rollout_value_matches_quadratic_form() {
        let game = scalar_two_player();
        let sol = solve(&game, 1e-12, 20_000).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..100 {
            let s0 = DVector::from_column_slice(&[rng.gen_range(-3.0..3.0)]);
            let rolled = evaluate_policy(&game, &sol.gains, &s0, 3_000).unwrap();
            let predicted = predicted_values(&sol.p, &s0);
            for (r, p) in rolled.iter().zip(&predicted) {
                assert!((r - p).abs() <= 1e-6, "rollout {r} vs quadratic {p}");
            }
        }
    }

    #[test]
    fn unilateral_deviations_never_pay_off() {
        let game = scalar_two_player();
        let sol = solve(&game, 1e-12, 20_000).unwrap();
        let s0 = DVector::from_column_slice(&[1.5]);
        let nash = evaluate_policy(&game, &sol.gains, &s0, 3_000).unwrap();
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..50 {
            let player = rng.gen_range(0..2);
            let mut gains = sol.gains.clone();
            gains[player][(0, 0)] += rng.gen_range(-0.1..0.1);
            if let Ok(dev) = evaluate_policy(&game, &gains, &s0, 3_000) {
                assert!(
                    dev[player] >= nash[player] - 1e-6,
                    "deviation improved player {player}: {} -> {}",
                    nash[player],
                    dev[player]
                );
            }
        }
    }

    #[test]
    fn gains_equal_the_control_law_applied_to_the_values() {
        // u_i = -gamma R_ii^{-1} B_i^T P_i A_cl s must reproduce K_i
        let game = scalar_two_player();
        let sol = solve(&game, 1e-13, 50_000).unwrap();
        let a_cl = game.closed_loop(&sol.gains);
        for i in 0..2 {
            let law = game.r[i][i].clone().try_inverse().unwrap()
                * game.b[i].transpose()
                * &sol.p[i]
                * &a_cl
                * game.discount;
            assert!(
                (&law - &sol.gains[i]).amax() <= 1e-10,
                "player {i}: law {law} vs gain {}",
                sol.gains[i]
            );
        }
    }

    #[test]
    fn instability_is_reported() {
        let game = LqGame {
            a: mat(1, 1, &[1.5]),
            b: vec![mat(1, 1, &[1.0])],
            q: vec![mat(1, 1, &[1.0])],
            r: vec![vec![mat(1, 1, &[1.0])]],
            horizon: Horizon::Infinite,
            discount: 1.0,
        };
        let zero_gain = vec![mat(1, 1, &[0.0])];
        let s0 = DVector::from_column_slice(&[1.0]);
        assert!(matches!(
            evaluate_policy(&game, &zero_gain, &s0, 100),
            Err(LqError::UnstableClosedLoop(_))
        ));
    }

    #[test]
    fn validation_rejects_bad_instances() {
        let mut game = scalar_two_player();
        game.q[0][(0, 0)] = -1.0;
        assert!(matches!(game.validate(), Err(LqError::NotPositiveDefinite(_))));
        let mut game = scalar_two_player();
        game.r[1][1][(0, 0)] = 0.0;
        assert!(matches!(game.validate(), Err(LqError::NotPositiveDefinite(_))));
        let mut game = scalar_two_player();
        game.discount = 1.5;
        assert!(matches!(game.validate(), Err(LqError::BadDimensions(_))));
    }

    #[test]
    fn finite_horizon_recursion_runs_and_is_consistent_at_long_horizons() {
        let mut game = scalar_two_player();
        game.horizon = Horizon::Finite(2_000);
        let finite = solve(&game, 1e-10, 1).unwrap();
        game.horizon = Horizon::Infinite;
        let infinite = solve(&game, 1e-12, 20_000).unwrap();
        for i in 0..2 {
            assert!(
                (&finite.p[i] - &infinite.p[i]).amax() <= 1e-6,
                "finite-horizon values should approach the stationary ones"
            );
        }
    }
}
