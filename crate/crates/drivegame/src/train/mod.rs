//! Actor-critic training over known-model games.
//!
//! Implements the two training regimes: per-player nets in mutual play
//! (every vehicle owns a critic and an actor over the global state) and
//! one parameter-shared pair in self-play (all vehicles run the same nets
//! over their egocentric observations).
//!
//! Each iteration runs one episode with the current actors, stores the
//! visited states in the replay buffer, then takes gradient steps on
//! uniformly sampled states: the critic minimizes the squared Bellman
//! residual against a held-fixed target `r + gamma V(s')`, the actor
//! minimizes `r(s, u) + gamma V(f(s, u))` with the gradient flowing
//! through the action into both the cost and the known dynamics.
//! Everything is recomputed from the current networks at sampling time;
//! the buffer stores only states.

pub mod driving;
pub mod law;
pub mod lq_model;
pub mod model;

pub use driving::{DrivingGame, ObservationView, StartRanges};
pub use law::{closed_form_action, closed_form_action_with_passes, hjb_residual, solve_stationary_actions};
pub use lq_model::LqDiffGame;
pub use model::{AffineView, DiffGame};

use std::time::{Duration, Instant};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{actor_eval, critic_eval, MlpSpec, OutputHead, ParamSet, TapeNet};
use crate::replay::ReplayBuffer;
use crate::tape::{GroupId, NodeId, Tape, TapeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("game step failed during training: {0}")]
    Step(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("operation requires a control-affine game mode")]
    NonAffine,
    #[error("control law failure: {0}")]
    Law(String),
}

/// Per-player nets versus one shared pair over egocentric views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Mutual,
    SelfPlay,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Gradient-descent step size (one constant rate for both nets).
    pub learning_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub episodes_max: usize,
    /// Iterations in each half of the convergence comparison window.
    pub convergence_window: usize,
    /// Relative change of the windowed mean critic loss that counts as
    /// converged.
    pub convergence_tol: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Discount factor in (0, 1].
    pub discount: f64,
    /// Gradient updates per collected episode.
    pub updates_per_episode: usize,
    /// Hidden-layer widths for both nets.
    pub hidden: Vec<usize>,
    /// A loss above this (or any non-finite loss) aborts the run.
    pub divergence_threshold: f64,
    /// Record the coupled Bellman residual trace (affine games only).
    pub track_hjb: bool,
    /// Start both nets at zero instead of the uniform init. Zero is the
    /// stable start for unbounded linear actors: the null policy leaves
    /// the plant's own (stable) dynamics in charge.
    pub zero_init: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 64,
            buffer_capacity: 100_000,
            episodes_max: 2000,
            convergence_window: 50,
            convergence_tol: 1e-3,
            seed: 0,
            mode: TrainMode::Mutual,
            discount: 0.97,
            updates_per_episode: 1,
            hidden: vec![64, 64],
            divergence_threshold: 1e6,
            track_hjb: false,
            zero_init: false,
        }
    }
}

/// One network: architecture plus parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

/// One episode's record.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Visited states `s_0 .. s_T`.
    pub states: Vec<Vec<f64>>,
    /// Raw actor outputs per step, per player.
    pub actions: Vec<Vec<Vec<f64>>>,
    /// Stage costs per step, per player.
    pub costs: Vec<Vec<f64>>,
    /// Set when a dynamics failure cut the episode short.
    pub aborted: Option<String>,
}

impl Trajectory {
    pub fn total_costs(&self, players: usize) -> Vec<f64> {
        let mut totals = vec![0.0; players];
        for step in &self.costs {
            for (t, c) in totals.iter_mut().zip(step) {
                *t += c;
            }
        }
        totals
    }
}

/// Everything a finished (or aborted) training run reports.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean critic loss per iteration, one series per network.
    pub critic_losses: Vec<Vec<f64>>,
    /// Mean actor loss per iteration, one series per network.
    pub actor_losses: Vec<Vec<f64>>,
    /// Undiscounted episode cost per player.
    pub episode_costs: Vec<Vec<f64>>,
    /// `(iteration, median coupled-residual magnitude)` when tracked.
    pub hjb_trace: Vec<(usize, f64)>,
    pub iterations: usize,
    pub converged: bool,
    /// Divergence diagnostic; training stopped early when set.
    pub diverged: Option<String>,
    pub wall_clock: Duration,
    pub critics: Vec<Net>,
    pub actors: Vec<Net>,
}

/// Actions of every player at `state` under the given actors (one net per
/// player, or one shared net).
pub fn policy_actions<G: DiffGame>(game: &G, actors: &[Net], state: &[f64]) -> Vec<Vec<f64>> {
    (0..game.num_players())
        .map(|i| {
            let net = if actors.len() == 1 { &actors[0] } else { &actors[i] };
            let input = game.actor_input(state, i);
            let amp = game.amplitudes(i).unwrap_or_default();
            actor_eval(&net.spec, &net.params, &input, &amp)
        })
        .collect()
}

/// Runs one episode from `start` under the given actors, recording states,
/// actions and per-player stage costs. Dynamics failures end the episode
/// early and are reported in `aborted`; the partial record stands.
pub fn rollout_policy<G: DiffGame>(game: &G, actors: &[Net], start: Vec<f64>) -> Trajectory {
    let mut traj = Trajectory {
        states: vec![start],
        actions: Vec::new(),
        costs: Vec::new(),
        aborted: None,
    };
    for _ in 0..game.horizon() {
        let state = traj.states.last().expect("nonempty").clone();
        if game.is_terminal(&state) {
            break;
        }
        let actions = policy_actions(game, actors, &state);
        let costs = (0..game.num_players())
            .map(|i| game.cost(&state, &actions, i))
            .collect();
        match game.step(&state, &actions) {
            Ok(next) => {
                traj.actions.push(actions);
                traj.costs.push(costs);
                traj.states.push(next);
            }
            Err(reason) => {
                traj.aborted = Some(reason);
                break;
            }
        }
    }
    traj
}

/// Gradient accumulator keyed to a net's layer shapes.
fn zero_grads(params: &ParamSet) -> Vec<(Vec<f64>, Vec<f64>)> {
    params
        .layers
        .iter()
        .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
        .collect()
}

fn add_grads(acc: &mut [(Vec<f64>, Vec<f64>)], g: &[(Vec<f64>, Vec<f64>)]) {
    for ((aw, ab), (gw, gb)) in acc.iter_mut().zip(g) {
        for (a, v) in aw.iter_mut().zip(gw) {
            *a += v;
        }
        for (a, v) in ab.iter_mut().zip(gb) {
            *a += v;
        }
    }
}

fn scale_grads(acc: &mut [(Vec<f64>, Vec<f64>)], s: f64) {
    for (aw, ab) in acc.iter_mut() {
        for a in aw.iter_mut() {
            *a *= s;
        }
        for a in ab.iter_mut() {
            *a *= s;
        }
    }
}

/// Reusable critic-loss tape: `(V(feat) - target)^2`.
struct CriticTape {
    tape: Tape,
    feat: GroupId,
    target: GroupId,
    net: TapeNet,
    loss: NodeId,
}

impl CriticTape {
    fn build(spec: &MlpSpec) -> Self {
        let mut tape = Tape::new();
        let (feat, fnode) = tape.input("feat", spec.input_dim);
        let (target, tnode) = tape.input("target", 1);
        let net = TapeNet::register(&mut tape, spec, "critic");
        let v = net.forward_nodes(&mut tape, fnode, None);
        let diff = tape.sub(v, tnode);
        let loss = tape.square(diff);
        tape.set_output(loss);
        Self { tape, feat, target, net, loss }
    }

    fn loss_and_grads(
        &self,
        params: &ParamSet,
        feat: &[f64],
        target: f64,
    ) -> Result<(f64, Vec<(Vec<f64>, Vec<f64>)>), TrainError> {
        let mut b = crate::tape::Bindings::new();
        b.set(self.feat, feat.to_vec());
        b.set(self.target, vec![target]);
        self.net.bind(&mut b, params);
        let eval = self.tape.forward(&b)?;
        let grads = self.tape.backward(&eval)?;
        Ok((eval.scalar(self.loss), self.net.gradients(&grads)))
    }
}

/// The trainer: nets, replay buffer and the training loop.
pub struct Trainer<G: DiffGame + Sync> {
    game: G,
    cfg: TrainConfig,
    critics: Vec<Net>,
    actors: Vec<Net>,
    buffer: ReplayBuffer,
    start_rng: ChaCha8Rng,
    critic_tape: CriticTape,
}

impl<G: DiffGame + Sync> Trainer<G> {
    pub fn new(game: G, cfg: TrainConfig) -> Self {
        let nets = match cfg.mode {
            TrainMode::Mutual => game.num_players(),
            TrainMode::SelfPlay => 1,
        };
        let mut seeder = ChaCha8Rng::seed_from_u64(cfg.seed);
        let critic_spec =
            MlpSpec::new(game.critic_input_dim(), cfg.hidden.clone(), 1, OutputHead::Identity);
        let critics: Vec<Net> = (0..nets)
            .map(|_| {
                let seed = seeder.next_u64();
                let params = if cfg.zero_init {
                    ParamSet::zeros(&critic_spec)
                } else {
                    ParamSet::init(&critic_spec, seed)
                };
                Net { spec: critic_spec.clone(), params }
            })
            .collect();
        let actors: Vec<Net> = (0..nets)
            .map(|i| {
                let player = if nets == 1 { 0 } else { i };
                let head = if game.amplitudes(player).is_some() {
                    OutputHead::TanhScaled
                } else {
                    OutputHead::Identity
                };
                let spec = MlpSpec::new(
                    game.actor_input_dim(),
                    cfg.hidden.clone(),
                    game.action_dim(player),
                    head,
                );
                let seed = seeder.next_u64();
                let params = if cfg.zero_init {
                    ParamSet::zeros(&spec)
                } else {
                    ParamSet::init(&spec, seed)
                };
                Net { spec, params }
            })
            .collect();
        let buffer = ReplayBuffer::new(cfg.buffer_capacity, seeder.next_u64());
        let start_rng = ChaCha8Rng::seed_from_u64(seeder.next_u64());
        let critic_tape = CriticTape::build(&critic_spec);
        Self { game, cfg, critics, actors, buffer, start_rng, critic_tape }
    }

    pub fn game(&self) -> &G {
        &self.game
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn critics(&self) -> &[Net] {
        &self.critics
    }

    pub fn actors(&self) -> &[Net] {
        &self.actors
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    fn net_index(&self, player: usize) -> usize {
        if self.cfg.mode == TrainMode::SelfPlay {
            0
        } else {
            player
        }
    }

    /// Runs one randomized-start episode with the current actors and
    /// appends every visited state to the replay buffer.
    pub fn rollout(&mut self) -> Trajectory {
        let start = self.game.initial_state(&mut self.start_rng);
        let traj = rollout_policy(&self.game, &self.actors, start);
        for s in &traj.states {
            self.buffer.push(s.clone());
        }
        traj
    }

    /// Critic value of `player` at `state` under the current parameters.
    pub fn critic_value(&self, state: &[f64], player: usize) -> f64 {
        let net = &self.critics[self.net_index(player)];
        critic_eval(&net.spec, &net.params, &self.game.critic_input(state, player))
    }

    /// Mean squared Bellman-residual loss and mean gradients of critic
    /// `net_idx` over a batch of states. Targets are recomputed from the
    /// current actors and the model, and held fixed in the gradient.
    pub fn critic_batch(
        &self,
        batch: &[Vec<f64>],
        net_idx: usize,
    ) -> Result<(f64, Vec<(Vec<f64>, Vec<f64>)>), TrainError> {
        let players: Vec<usize> = match self.cfg.mode {
            TrainMode::Mutual => vec![net_idx],
            TrainMode::SelfPlay => (0..self.game.num_players()).collect(),
        };
        let net = &self.critics[net_idx];
        let gamma = self.cfg.discount;

        let results = crate::par::map(batch, |state| {
            let actions = policy_actions(&self.game, &self.actors, state);
            let next = self.game.step(state, &actions).map_err(TrainError::Step)?;
            let mut out = Vec::with_capacity(players.len());
            for &p in &players {
                let reward = self.game.cost(state, &actions, p);
                let target = reward
                    + gamma * critic_eval(&net.spec, &net.params, &self.game.critic_input(&next, p));
                out.push(self.critic_tape.loss_and_grads(
                    &net.params,
                    &self.game.critic_input(state, p),
                    target,
                )?);
            }
            Ok::<_, TrainError>(out)
        });

        let mut total_loss = 0.0;
        let mut acc = zero_grads(&net.params);
        let mut count = 0usize;
        for sample in results {
            for (loss, grads) in sample? {
                total_loss += loss;
                add_grads(&mut acc, &grads);
                count += 1;
            }
        }
        let inv = 1.0 / count as f64;
        scale_grads(&mut acc, inv);
        Ok((total_loss * inv, acc))
    }

    /// Builds the tape of one actor-loss term: player `p` acts through its
    /// net, everyone else's action is a constant, and `r + gamma V(s')` is
    /// recorded through cost and dynamics.
    fn actor_term_parts(
        &self,
        state: &[f64],
        numeric_actions: &[Vec<f64>],
        p: usize,
    ) -> Result<(Tape, crate::tape::Bindings, TapeNet), TrainError> {
        let idx = self.net_index(p);
        let actor = &self.actors[idx];
        let critic = &self.critics[idx];
        let gamma = self.cfg.discount;
        let next_numeric = self.game.step(state, numeric_actions).map_err(TrainError::Step)?;

        let mut tape = Tape::new();
        let (gs, sv) = tape.input("state", self.game.state_dim());
        let state_nodes: Vec<NodeId> =
            (0..self.game.state_dim()).map(|i| tape.slice(sv, i, 1)).collect();
        let obs = self.game.build_actor_input(&mut tape, &state_nodes, p, state);
        let actor_net = TapeNet::register(&mut tape, &actor.spec, "actor");
        let amp = self.game.amplitudes(p);
        let u_vec = actor_net.forward_nodes(&mut tape, obs, amp.as_deref());

        let action_nodes: Vec<Vec<NodeId>> = (0..self.game.num_players())
            .map(|j| {
                if j == p {
                    (0..self.game.action_dim(p)).map(|c| tape.slice(u_vec, c, 1)).collect()
                } else {
                    numeric_actions[j].iter().map(|&v| tape.scalar(v)).collect()
                }
            })
            .collect();

        let reward = self.game.build_cost(&mut tape, &state_nodes, &action_nodes, p);
        let next_nodes = self.game.build_step(&mut tape, &state_nodes, &action_nodes);
        let feat = self.game.build_critic_input(&mut tape, &next_nodes, p, &next_numeric);
        let critic_net = TapeNet::register(&mut tape, &critic.spec, "critic");
        let v_next = critic_net.forward_nodes(&mut tape, feat, None);
        let discounted = tape.scale(gamma, v_next);
        let loss = tape.add(reward, discounted);
        tape.set_output(loss);

        let mut b = crate::tape::Bindings::new();
        b.set(gs, state.to_vec());
        actor_net.bind(&mut b, &actor.params);
        critic_net.bind(&mut b, &critic.params);
        Ok((tape, b, actor_net))
    }

    /// Evaluates one actor-loss term and its actor-parameter gradients.
    fn actor_term(
        &self,
        state: &[f64],
        numeric_actions: &[Vec<f64>],
        p: usize,
    ) -> Result<(f64, Vec<(Vec<f64>, Vec<f64>)>), TrainError> {
        let (tape, bindings, actor_net) = self.actor_term_parts(state, numeric_actions, p)?;
        let eval = tape.forward(&bindings)?;
        let grads = tape.backward(&eval)?;
        let loss = eval.scalar(tape.output().expect("output set"));
        Ok((loss, actor_net.gradients(&grads)))
    }

    /// Central finite-difference check of the full actor-loss tape at
    /// `state`, sweeping every actor and critic parameter coordinate.
    pub fn actor_fd_error(&self, state: &[f64], player: usize, eps: f64) -> Result<f64, TrainError> {
        let numeric_actions = policy_actions(&self.game, &self.actors, state);
        let (tape, bindings, _) = self.actor_term_parts(state, &numeric_actions, player)?;
        Ok(tape.finite_diff_check(&bindings, eps)?)
    }

    /// Central finite-difference check of the critic-loss tape on one real
    /// (features, target) sample.
    pub fn critic_fd_error(&self, state: &[f64], player: usize, eps: f64) -> Result<f64, TrainError> {
        let net = &self.critics[self.net_index(player)];
        let actions = policy_actions(&self.game, &self.actors, state);
        let next = self.game.step(state, &actions).map_err(TrainError::Step)?;
        let target = self.game.cost(state, &actions, player)
            + self.cfg.discount
                * critic_eval(&net.spec, &net.params, &self.game.critic_input(&next, player));
        let mut b = crate::tape::Bindings::new();
        b.set(self.critic_tape.feat, self.game.critic_input(state, player));
        b.set(self.critic_tape.target, vec![target]);
        self.critic_tape.net.bind(&mut b, &net.params);
        Ok(self.critic_tape.tape.finite_diff_check(&b, eps)?)
    }

    /// Total parameter coordinates in one critic/actor pair, as swept by
    /// the finite-difference checks.
    pub fn parameter_coordinates(&self) -> usize {
        self.critics[0].params.param_count() + self.actors[0].params.param_count()
    }

    /// Mean actor loss and gradients for net `net_idx` over a batch.
    pub fn actor_batch(
        &self,
        batch: &[Vec<f64>],
        net_idx: usize,
    ) -> Result<(f64, Vec<(Vec<f64>, Vec<f64>)>), TrainError> {
        let players: Vec<usize> = match self.cfg.mode {
            TrainMode::Mutual => vec![net_idx],
            TrainMode::SelfPlay => (0..self.game.num_players()).collect(),
        };

        let results = crate::par::map(batch, |state| {
            let numeric_actions = policy_actions(&self.game, &self.actors, state);
            players
                .iter()
                .map(|&p| self.actor_term(state, &numeric_actions, p))
                .collect::<Result<Vec<_>, _>>()
        });

        let mut total_loss = 0.0;
        let mut acc = zero_grads(&self.actors[net_idx].params);
        let mut count = 0usize;
        for sample in results {
            for (loss, grads) in sample? {
                total_loss += loss;
                add_grads(&mut acc, &grads);
                count += 1;
            }
        }
        let inv = 1.0 / count as f64;
        scale_grads(&mut acc, inv);
        Ok((total_loss * inv, acc))
    }

    /// One gradient update of every net from one sampled batch. Returns
    /// per-net (critic loss, actor loss).
    pub fn update_step(&mut self) -> Result<Vec<(f64, f64)>, TrainError> {
        let batch = self.buffer.sample(self.cfg.batch_size);
        let lr = self.cfg.learning_rate;
        let mut out = Vec::with_capacity(self.critics.len());
        for idx in 0..self.critics.len() {
            let (c_loss, c_grads) = self.critic_batch(&batch, idx)?;
            let (a_loss, a_grads) = self.actor_batch(&batch, idx)?;
            self.critics[idx].params.descend(&c_grads, lr);
            self.actors[idx].params.descend(&a_grads, lr);
            out.push((c_loss, a_loss));
        }
        Ok(out)
    }

    fn converged(series: &[f64], window: usize, tol: f64) -> bool {
        if series.len() < 2 * window {
            return false;
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let recent = mean(&series[series.len() - window..]);
        let previous = mean(&series[series.len() - 2 * window..series.len() - window]);
        (recent - previous).abs() / previous.abs().max(1e-12) < tol
    }

    pub fn train(&mut self) -> Result<TrainReport, TrainError> {
        self.train_with(|_, _, _| {})
    }

    /// Runs the training loop, calling `hook(iteration, critics, actors)`
    /// after every iteration (for checkpointing).
    pub fn train_with(
        &mut self,
        mut hook: impl FnMut(usize, &[Net], &[Net]),
    ) -> Result<TrainReport, TrainError> {
        let t0 = Instant::now();
        let nets = self.critics.len();
        let mut report = TrainReport {
            critic_losses: vec![Vec::new(); nets],
            actor_losses: vec![Vec::new(); nets],
            episode_costs: Vec::new(),
            hjb_trace: Vec::new(),
            iterations: 0,
            converged: false,
            diverged: None,
            wall_clock: Duration::ZERO,
            critics: self.critics.clone(),
            actors: self.actors.clone(),
        };
        let mut mean_critic_series: Vec<f64> = Vec::new();
        let mut hjb_probes: Option<Vec<Vec<f64>>> = None;
        let hjb_every = (self.cfg.episodes_max / 20).max(1);

        for episode in 0..self.cfg.episodes_max {
            let traj = self.rollout();
            report
                .episode_costs
                .push(traj.total_costs(self.game.num_players()));

            if self.cfg.track_hjb && hjb_probes.is_none() {
                let stride = (traj.states.len() / 16).max(1);
                hjb_probes = Some(traj.states.iter().step_by(stride).take(16).cloned().collect());
            }

            let mut c_means = vec![0.0; nets];
            let mut a_means = vec![0.0; nets];
            for _ in 0..self.cfg.updates_per_episode {
                let losses = self.update_step()?;
                for (i, (c, a)) in losses.iter().enumerate() {
                    c_means[i] += c;
                    a_means[i] += a;
                }
            }
            let inv = 1.0 / self.cfg.updates_per_episode as f64;
            for i in 0..nets {
                report.critic_losses[i].push(c_means[i] * inv);
                report.actor_losses[i].push(a_means[i] * inv);
            }
            report.iterations = episode + 1;

            let mean_c = c_means.iter().sum::<f64>() * inv / nets as f64;
            mean_critic_series.push(mean_c);

            if self.cfg.track_hjb && episode % hjb_every == 0 {
                if let Some(probes) = &hjb_probes {
                    if let Some(median) = self.median_hjb_magnitude(probes) {
                        report.hjb_trace.push((episode, median));
                    }
                }
            }

            let worst = c_means
                .iter()
                .chain(&a_means)
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            if !worst.is_finite() || worst * inv > self.cfg.divergence_threshold {
                report.diverged = Some(format!(
                    "loss magnitude {:.3e} at iteration {episode} exceeds the divergence threshold",
                    worst * inv
                ));
                break;
            }

            hook(episode, &self.critics, &self.actors);

            if Self::converged(
                &mean_critic_series,
                self.cfg.convergence_window,
                self.cfg.convergence_tol,
            ) {
                report.converged = true;
                break;
            }
        }

        report.critics = self.critics.clone();
        report.actors = self.actors.clone();
        report.wall_clock = t0.elapsed();
        Ok(report)
    }

    fn median_hjb_magnitude(&self, probes: &[Vec<f64>]) -> Option<f64> {
        let mut magnitudes: Vec<f64> = probes
            .iter()
            .filter_map(|s| {
                law::hjb_residual(&self.game, &self.critics, s, self.cfg.discount)
                    .ok()
                    .map(|r| r.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            })
            .collect();
        if magnitudes.is_empty() {
            return None;
        }
        magnitudes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(magnitudes[magnitudes.len() / 2])
    }
}
