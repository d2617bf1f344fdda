//! Constrained deep Q-learning with a Lagrange multiplier learned on a
//! slower timescale. The Q-network prices transmit power through the
//! multiplier beta, which itself ascends on the gap between the windowed
//! average power and the limit; with both step sizes held constant the pair
//! tracks drifting system statistics instead of freezing.

use crate::baselines::{argmax, GreedyNetPolicy, TinyWireless};
use crate::model::SystemConfig;
use crate::nn::{AdamConfig, Mlp};
use crate::queue::StrategyParams;
use crate::rl::{epsilon, ReplayMemory, Schedule};
use crate::sim::{PowerDecision, SimTrace, World};
use crate::substream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Step-size regime: decaying satisfies the two-timescale conditions for
/// stationary systems; constant steps trade convergence for tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    Decaying,
    ConstantStep,
}

#[derive(Debug, Clone)]
pub struct AcdqnConfig {
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub replay_capacity: usize,
    pub minibatch: usize,
    /// Transmissions between target-network refreshes.
    pub t_target: u64,
    /// Window length for the average-power estimate C_P.
    pub power_window: usize,
    pub eps0: f64,
    pub eps_decay: f64,
    pub eps_floor: f64,
    pub beta0: f64,
    pub beta_max: f64,
    pub eta1: Schedule,
    pub eta2: Schedule,
}

impl AcdqnConfig {
    pub fn decaying() -> Self {
        Self {
            hidden: vec![128, 64],
            gamma: 0.9,
            replay_capacity: 30_000,
            minibatch: 64,
            t_target: 100,
            power_window: 200,
            eps0: 1.0,
            eps_decay: 0.98,
            eps_floor: 0.01,
            beta0: 0.05,
            beta_max: 10.0,
            eta1: Schedule::InverseDecay { a: 0.001, b: 1e-5 },
            eta2: Schedule::InverseLogLogDecay { a: 0.0001, b: 1e-5 },
        }
    }

    /// Fixed steps for tracking time-varying statistics.
    pub fn constant_step() -> Self {
        Self {
            eta1: Schedule::Constant(0.001),
            eta2: Schedule::Constant(0.00003),
            ..Self::decaying()
        }
    }

    pub fn for_mode(mode: StepMode) -> Self {
        match mode {
            StepMode::Decaying => Self::decaying(),
            StepMode::ConstantStep => Self::constant_step(),
        }
    }
}

/// Instantaneous Lagrangian-modified reward: `raw - beta * power`.
pub fn lagrangian_reward(raw_reward: f64, power_w: f64, beta: f64) -> f64 {
    debug_assert!(beta >= 0.0);
    raw_reward - beta * power_w
}

/// Multiplier ascent on the constraint gap, clipped to a non-negative price.
pub fn lagrange_update(beta: f64, cp_avg_power: f64, p_limit: f64, eta2: f64, beta_max: f64) -> f64 {
    (beta + eta2 * (cp_avg_power - p_limit)).clamp(0.0, beta_max)
}

/// Epsilon-greedy action choice over the network outputs, ties to the lowest
/// index.
pub fn select_action<R: Rng>(net: &Mlp, state: &[f64], eps: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < eps {
        rng.gen_range(0..net.output_dim())
    } else {
        argmax(&net.forward(state))
    }
}

/// Bootstrap targets `Y_i = r_i + gamma * max_a Q_target(s'_i, a)`; a
/// continuing task, so no terminal masking.
pub fn dqn_targets(batch: &[ReplayItem], target_net: &Mlp, gamma: f64) -> Vec<f64> {
    batch
        .iter()
        .map(|item| {
            let q_next = target_net.forward(&item.next_state);
            item.reward + gamma * q_next.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// One stored transition, state already encoded for the network. The reward
/// carries the Lagrangian price at storage time; the windowed power rides
/// along for inspection.
#[derive(Debug, Clone)]
pub struct ReplayItem {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub cp_avg_power: f64,
    pub next_state: Vec<f64>,
}

/// An environment the Q-learner can drive: alternating `begin` (encoded
/// state) and `finish` (reward plus encoded next state) calls, one pair per
/// transmission.
pub trait DqnEnv {
    fn input_dim(&self) -> usize;
    fn power_levels(&self) -> &[f64];
    fn begin(&mut self) -> Vec<f64>;
    fn finish(&mut self, action: usize) -> EnvStep;
}

pub struct EnvStep {
    pub raw_reward: f64,
    pub next_state: Vec<f64>,
    pub sojourns: Vec<(usize, f64)>,
}

/// The multicast simulator exposed as a learning environment. Gains are
/// normalised per user by the 99th percentile of that user's fading
/// distribution so network inputs stay O(1).
pub struct MulticastEnv {
    world: World,
    scales: Vec<f64>,
}

impl MulticastEnv {
    pub fn new(cfg: SystemConfig, strategy: StrategyParams) -> Self {
        let scales = cfg.channels.iter().map(|c| c.model.p99()).collect();
        Self { world: World::new(cfg, strategy), scales }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn into_trace(self) -> SimTrace {
        self.world.into_trace()
    }
}

impl DqnEnv for MulticastEnv {
    fn input_dim(&self) -> usize {
        2 * self.scales.len()
    }

    fn power_levels(&self) -> &[f64] {
        &self.world.cfg().power_levels_w
    }

    fn begin(&mut self) -> Vec<f64> {
        self.world.begin_service().encode(&self.scales)
    }

    fn finish(&mut self, action: usize) -> EnvStep {
        let watts = self.world.cfg().power_levels_w[action];
        let out = self.world.finish_service(PowerDecision { action, watts });
        EnvStep {
            raw_reward: out.raw_reward as f64,
            next_state: out.transition.next_state.encode(&self.scales),
            sojourns: out.sojourns,
        }
    }
}

/// The i.i.d.-state tiny environment as a learning environment, for oracle
/// equivalence checks.
pub struct TinyDqnEnv {
    env: TinyWireless,
    rng: ChaCha8Rng,
    current: usize,
    staged: Option<usize>,
}

impl TinyDqnEnv {
    pub fn new(env: TinyWireless, seed: u64) -> Self {
        Self { env, rng: substream(seed, "tiny-env"), current: 0, staged: None }
    }

    pub fn inner(&self) -> &TinyWireless {
        &self.env
    }
}

impl DqnEnv for TinyDqnEnv {
    fn input_dim(&self) -> usize {
        self.env.encode(0).len()
    }

    fn power_levels(&self) -> &[f64] {
        &self.env.spec.powers
    }

    fn begin(&mut self) -> Vec<f64> {
        self.current = match self.staged.take() {
            Some(k) => k,
            None => self.env.sample_state(&mut self.rng),
        };
        self.env.encode(self.current)
    }

    fn finish(&mut self, action: usize) -> EnvStep {
        let raw = self.env.spec.rewards[self.current][action];
        let next = self.env.sample_state(&mut self.rng);
        self.staged = Some(next);
        EnvStep { raw_reward: raw, next_state: self.env.encode(next), sojourns: Vec::new() }
    }
}

/// Diagnostics one learner step reports back.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepDiag {
    pub beta: f64,
    pub cp_avg_power: f64,
    pub loss: Option<f64>,
    pub epsilon: f64,
}

/// Online Q-network, its delayed target copy, the transition replay, and the
/// Lagrange multiplier with its power window. One learner per run.
pub struct DqnLearner {
    pub net: Mlp,
    pub target: Mlp,
    replay: ReplayMemory<ReplayItem>,
    pub beta: f64,
    cp_window: VecDeque<f64>,
    power_levels: Vec<f64>,
    p_limit: f64,
    cfg: AcdqnConfig,
    adam: AdamConfig,
    t: u64,
}

impl DqnLearner {
    pub fn new<R: Rng>(
        cfg: AcdqnConfig,
        input_dim: usize,
        power_levels: Vec<f64>,
        p_limit: f64,
        rng_weights: &mut R,
    ) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(power_levels.len());
        let net = Mlp::new(&sizes, rng_weights);
        let mut target = Mlp::new(&sizes, rng_weights);
        target.copy_weights_from(&net);
        Self {
            replay: ReplayMemory::new(cfg.replay_capacity),
            beta: cfg.beta0,
            cp_window: VecDeque::with_capacity(cfg.power_window),
            power_levels,
            p_limit,
            adam: AdamConfig::default(),
            cfg,
            net,
            target,
            t: 0,
        }
    }

    pub fn transmissions(&self) -> u64 {
        self.t
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn replay_inserted(&self) -> u64 {
        self.replay.inserted()
    }

    /// Exploration probability for the upcoming action; decays once per
    /// target-sync period.
    pub fn epsilon_now(&self) -> f64 {
        epsilon(self.t / self.cfg.t_target, self.cfg.eps0, self.cfg.eps_decay, self.cfg.eps_floor)
    }

    pub fn act<R: Rng>(&self, state: &[f64], rng: &mut R) -> usize {
        select_action(&self.net, state, self.epsilon_now(), rng)
    }

    /// Windowed average power including the given latest draw.
    fn push_power(&mut self, watts: f64) -> f64 {
        if self.cp_window.len() == self.cfg.power_window {
            self.cp_window.pop_front();
        }
        self.cp_window.push_back(watts);
        self.cp_window.iter().sum::<f64>() / self.cp_window.len() as f64
    }

    /// Records one transition and performs the two-timescale update: one
    /// Adam step on the masked TD loss and one multiplier ascent step, then a
    /// target refresh on the period boundary. Gradient updates wait until
    /// the replay can fill a minibatch.
    pub fn observe_and_train<R: Rng>(
        &mut self,
        state: Vec<f64>,
        action: usize,
        raw_reward: f64,
        next_state: Vec<f64>,
        rng_replay: &mut R,
    ) -> StepDiag {
        self.t += 1;
        let watts = self.power_levels[action];
        let cp = self.push_power(watts);
        let reward = lagrangian_reward(raw_reward, watts, self.beta);
        self.replay.push(ReplayItem {
            state,
            action,
            reward,
            cp_avg_power: cp,
            next_state,
        });

        let mut loss = None;
        if self.replay.len() >= self.cfg.minibatch {
            let batch = self.replay.sample_minibatch(self.cfg.minibatch, rng_replay);
            let targets = dqn_targets(&batch, &self.target, self.cfg.gamma);
            let inputs: Vec<Vec<f64>> = batch.iter().map(|b| b.state.clone()).collect();
            let masked: Vec<(usize, f64)> =
                batch.iter().zip(&targets).map(|(b, &y)| (b.action, y)).collect();
            let (l, grads) = self.net.mse_and_grad(&inputs, &masked);
            self.net.adam_step(&grads, self.cfg.eta1.rate(self.t), &self.adam);
            self.beta =
                lagrange_update(self.beta, cp, self.p_limit, self.cfg.eta2.rate(self.t), self.cfg.beta_max);
            loss = Some(l);
        }
        if self.t % self.cfg.t_target == 0 {
            self.target.copy_weights_from(&self.net);
        }
        StepDiag { beta: self.beta, cp_avg_power: cp, loss, epsilon: self.epsilon_now() }
    }

    /// One full environment step: act epsilon-greedily, then observe and
    /// train. Returns the raw environment step and the diagnostics.
    pub fn step_env<E: DqnEnv, R: Rng, R2: Rng>(
        &mut self,
        env: &mut E,
        rng_explore: &mut R,
        rng_replay: &mut R2,
    ) -> (EnvStep, StepDiag) {
        let state = env.begin();
        let action = self.act(&state, rng_explore);
        let step = env.finish(action);
        let diag =
            self.observe_and_train(state, action, step.raw_reward, step.next_state.clone(), rng_replay);
        (step, diag)
    }
}

/// Outcome of a full AC-DQN training run on the multicast system.
pub struct AcdqnResult {
    pub sim: SimTrace,
    pub beta_series: Vec<f64>,
    pub epsilon_series: Vec<f64>,
    pub final_beta: f64,
    pub policy: GreedyNetPolicy,
}

/// Trains AC-DQN on the multicast system for `horizon` transmissions under a
/// fixed queueing strategy.
pub fn acdqn_train(
    cfg: &SystemConfig,
    acfg: &AcdqnConfig,
    strategy: StrategyParams,
    horizon: u64,
) -> AcdqnResult {
    let mut rng_weights = substream(cfg.seed, "weights");
    let mut rng_explore = substream(cfg.seed, "exploration");
    let mut rng_replay = substream(cfg.seed, "replay");
    let mut env = MulticastEnv::new(cfg.clone(), strategy);
    let mut learner = DqnLearner::new(
        acfg.clone(),
        env.input_dim(),
        cfg.power_levels_w.clone(),
        cfg.avg_power_limit_w,
        &mut rng_weights,
    );
    let mut beta_series = Vec::with_capacity(horizon as usize);
    let mut epsilon_series = Vec::with_capacity(horizon as usize);
    for _ in 0..horizon {
        let (_, diag) = learner.step_env(&mut env, &mut rng_explore, &mut rng_replay);
        beta_series.push(diag.beta);
        epsilon_series.push(diag.epsilon);
    }
    let scales = env.scales().to_vec();
    AcdqnResult {
        sim: env.into_trace(),
        final_beta: learner.beta,
        policy: GreedyNetPolicy {
            net: learner.net,
            scales,
            power_levels: cfg.power_levels_w.clone(),
        },
        beta_series,
        epsilon_series,
    }
}
