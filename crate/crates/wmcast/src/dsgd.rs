//! Surrogate-model stochastic gradient descent over the queueing-strategy
//! simplex. A small regression network learns the map from strategy
//! probabilities to observed mean sojourn time from a replay of noisy
//! measurements; strategy updates descend the surrogate's finite-difference
//! gradient, projected back onto the simplex, with decaying uniform
//! exploration noise.

use crate::model::SystemConfig;
use crate::nn::{AdamConfig, Mlp};
use crate::queue::StrategyParams;
use crate::rl::{epsilon, project_simplex, ReplayMemory, Schedule};
use crate::sim::{Policy, SimTrace, World};
use crate::substream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct DsgdConfig {
    /// Surrogate network shape (input 3, output 1).
    pub net_sizes: Vec<usize>,
    /// Replay of (strategy, observation) pairs.
    pub memory_capacity: usize,
    pub minibatch: usize,
    /// Iterations spent purely on uniform random strategies.
    pub t_train: u64,
    /// Multicast services per observation window.
    pub s_approx: u64,
    /// Central-difference probe step on the surrogate.
    pub fd_step: f64,
    /// Surrogate training rate (faster timescale).
    pub eta1: Schedule,
    /// Strategy descent rate (slower timescale).
    pub eta2: Schedule,
    pub eps0: f64,
    pub eps_decay: f64,
    pub eps_floor: f64,
}

impl Default for DsgdConfig {
    fn default() -> Self {
        Self {
            net_sizes: vec![3, 32, 16, 1],
            memory_capacity: 1000,
            minibatch: 50,
            t_train: 100,
            s_approx: 100,
            fd_step: 0.01,
            eta1: Schedule::InverseDecay { a: 0.01, b: 1e-5 },
            eta2: Schedule::InverseLogLogDecay { a: 0.001, b: 1e-5 },
            eps0: 1.0,
            eps_decay: 0.98,
            eps_floor: 0.01,
        }
    }
}

/// Central-difference gradient of the surrogate at `pbar`; probe points are
/// raw surrogate queries, not projected.
pub fn surrogate_gradient(net: &Mlp, pbar: [f64; 3], h: f64) -> [f64; 3] {
    assert!(h > 0.0);
    let mut grad = [0.0; 3];
    for k in 0..3 {
        let mut plus = pbar;
        plus[k] += h;
        let mut minus = pbar;
        minus[k] -= h;
        grad[k] = (net.forward(&plus)[0] - net.forward(&minus)[0]) / (2.0 * h);
    }
    grad
}

/// What one strategy update reported.
#[derive(Debug, Clone, Copy)]
pub struct TickReport {
    pub pbar: [f64; 3],
    /// Minibatch loss when the surrogate trained; `None` in the random phase.
    pub surrogate_loss: Option<f64>,
}

/// The DSGD learner state: surrogate net, measurement replay, current
/// strategy, and the tick counter. Shared verbatim by the integrated
/// algorithm, which drives it once per approximation window.
pub struct SurrogateLearner {
    net: Mlp,
    memory: ReplayMemory<([f64; 3], f64)>,
    pbar: [f64; 3],
    tick: u64,
    last_fhat: f64,
    cfg: DsgdConfig,
    adam: AdamConfig,
}

impl SurrogateLearner {
    pub fn new<R: Rng>(cfg: DsgdConfig, rng_weights: &mut R) -> Self {
        assert_eq!(cfg.net_sizes.first(), Some(&3));
        assert_eq!(cfg.net_sizes.last(), Some(&1));
        Self {
            net: Mlp::new(&cfg.net_sizes, rng_weights),
            memory: ReplayMemory::new(cfg.memory_capacity),
            pbar: [1.0 / 3.0; 3],
            tick: 0,
            last_fhat: 0.0,
            cfg,
            adam: AdamConfig::default(),
        }
    }

    pub fn pbar(&self) -> [f64; 3] {
        self.pbar
    }

    /// Fresh uniform-projected strategy draw, used by the integrated
    /// algorithm's initialisation.
    pub fn randomize_pbar<R: Rng>(&mut self, rng: &mut R) {
        self.pbar =
            project_simplex([rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()]);
    }

    pub fn strategy(&self) -> StrategyParams {
        StrategyParams(self.pbar)
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn memory(&self) -> &ReplayMemory<([f64; 3], f64)> {
        &self.memory
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    #[cfg(test)]
    fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    /// The strategy-update half of one iteration: a fresh uniform draw during
    /// the training phase, afterwards one surrogate Adam step on a replay
    /// minibatch followed by a projected, noise-perturbed descent step.
    pub fn update_pbar<R: Rng, R2: Rng>(
        &mut self,
        rng_explore: &mut R,
        rng_replay: &mut R2,
    ) -> TickReport {
        self.tick += 1;
        let t = self.tick;
        if t < self.cfg.t_train || self.memory.is_empty() {
            self.pbar = project_simplex([
                rng_explore.gen::<f64>(),
                rng_explore.gen::<f64>(),
                rng_explore.gen::<f64>(),
            ]);
            return TickReport { pbar: self.pbar, surrogate_loss: None };
        }
        let batch = self.memory.sample_minibatch(self.cfg.minibatch, rng_replay);
        let inputs: Vec<Vec<f64>> = batch.iter().map(|(p, _)| p.to_vec()).collect();
        let targets: Vec<(usize, f64)> = batch.iter().map(|&(_, f)| (0, f)).collect();
        let (loss, grads) = self.net.mse_and_grad(&inputs, &targets);
        self.net.adam_step(&grads, self.cfg.eta1.rate(t), &self.adam);

        let grad = surrogate_gradient(&self.net, self.pbar, self.cfg.fd_step);
        let eps = epsilon(t, self.cfg.eps0, self.cfg.eps_decay, self.cfg.eps_floor);
        let eta2 = self.cfg.eta2.rate(t);
        let mut raw = [0.0; 3];
        for k in 0..3 {
            raw[k] = self.pbar[k] - eta2 * grad[k] + rng_explore.gen::<f64>() * eps;
        }
        self.pbar = project_simplex(raw);
        TickReport { pbar: self.pbar, surrogate_loss: Some(loss) }
    }

    /// The record half: stores (current strategy, window observation) in the
    /// replay. An empty window reuses the previous observation.
    pub fn record(&mut self, observed: Option<f64>) -> f64 {
        let fhat = observed.unwrap_or(self.last_fhat);
        self.last_fhat = fhat;
        self.memory.push((self.pbar, fhat));
        fhat
    }

    pub fn last_fhat(&self) -> f64 {
        self.last_fhat
    }
}

/// Runs `s_approx` multicast services in place (system state carries over)
/// and returns the mean sojourn of the requests delivered during the window,
/// or `None` if nothing was delivered.
pub fn observe_fhat(world: &mut World, policy: &mut dyn Policy, s_approx: u64) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0u64;
    for _ in 0..s_approx {
        let out = world.step(policy);
        for &(_, s) in &out.sojourns {
            sum += s;
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// Per-iteration record of one DSGD run.
#[derive(Debug, Clone, Default)]
pub struct DsgdTrace {
    pub pbar: Vec<[f64; 3]>,
    pub fhat: Vec<f64>,
    pub surrogate_loss: Vec<Option<f64>>,
}

pub struct DsgdResult {
    pub final_pbar: [f64; 3],
    pub iterations: DsgdTrace,
    pub sim: SimTrace,
}

/// Full online DSGD run: `horizon` transmissions under the given power
/// policy, the queueing strategy re-chosen every `s_approx` services.
pub fn dsgd_train(
    cfg: &SystemConfig,
    dcfg: &DsgdConfig,
    mut power_policy: Box<dyn Policy>,
    horizon: u64,
) -> DsgdResult {
    let mut rng_weights = substream(cfg.seed, "weights");
    let mut rng_explore: ChaCha8Rng = substream(cfg.seed, "exploration");
    let mut rng_replay: ChaCha8Rng = substream(cfg.seed, "replay");
    let mut learner = SurrogateLearner::new(dcfg.clone(), &mut rng_weights);
    let mut world = World::new(cfg.clone(), learner.strategy());
    let mut trace = DsgdTrace::default();
    let iterations = horizon / dcfg.s_approx;
    for _ in 0..iterations {
        let report = learner.update_pbar(&mut rng_explore, &mut rng_replay);
        world.set_strategy(learner.strategy());
        let observed = observe_fhat(&mut world, power_policy.as_mut(), dcfg.s_approx);
        let fhat = learner.record(observed);
        trace.pbar.push(report.pbar);
        trace.fhat.push(fhat);
        trace.surrogate_loss.push(report.surrogate_loss);
    }
    DsgdResult { final_pbar: learner.pbar(), iterations: trace, sim: world.into_trace() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelModel, ChannelTag, MdpState, UserChannel};
    use crate::sim::PowerDecision;

    #[test]
    fn constant_surrogate_zero_gradient() {
        let mut rng = substream(1, "weights");
        let mut net = Mlp::new(&[3, 4, 1], &mut rng);
        net.set_params(0, &vec![0.0; 12], &[0.0; 4]);
        net.set_params(1, &vec![0.0; 4], &[2.5]);
        let g = surrogate_gradient(&net, [0.3, 0.3, 0.4], 0.01);
        assert_eq!(g, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn surrogate_gradient_of_linear_target() {
        // Train the surrogate on y = 2 * p1 over a dense grid of the unit
        // cube; its gradient at the simplex centre should approach (2, 0, 0).
        let mut rng = substream(2, "weights");
        let mut net = Mlp::new(&[3, 32, 16, 1], &mut rng);
        let mut grid: Vec<Vec<f64>> = Vec::new();
        for i in 0..=6 {
            for j in 0..=6 {
                for k in 0..=6 {
                    grid.push(vec![i as f64 / 6.0, j as f64 / 6.0, k as f64 / 6.0]);
                }
            }
        }
        let targets: Vec<(usize, f64)> = grid.iter().map(|p| (0, 2.0 * p[0])).collect();
        for _ in 0..1500 {
            let (_, g) = net.mse_and_grad(&grid, &targets);
            net.adam_step(&g, 0.005, &AdamConfig::default());
        }
        let g = surrogate_gradient(&net, [1.0 / 3.0; 3], 0.01);
        assert!((g[0] - 2.0).abs() < 0.1, "d/dp1 = {}", g[0]);
        assert!(g[1].abs() < 0.1 && g[2].abs() < 0.1, "{g:?}");
    }

    #[test]
    fn surrogate_gradient_matches_backprop_input_gradient() {
        let mut rng = substream(3, "weights");
        for _ in 0..10 {
            let net = Mlp::new(&[3, 8, 1], &mut rng);
            let p = [0.25, 0.35, 0.4];
            let fd = surrogate_gradient(&net, p, 1e-4);
            let exact = net.input_gradient(&p, 0);
            for k in 0..3 {
                assert!((fd[k] - exact[k]).abs() < 1e-5, "{} vs {}", fd[k], exact[k]);
            }
        }
    }

    #[test]
    fn random_phase_keeps_surrogate_untrained() {
        let dcfg = DsgdConfig { t_train: 10, ..Default::default() };
        let mut rng_w = substream(4, "weights");
        let mut learner = SurrogateLearner::new(dcfg, &mut rng_w);
        let digest0 = learner.net().params_digest();
        let mut rng_e = substream(4, "exploration");
        let mut rng_r = substream(4, "replay");
        for t in 1..10 {
            let rep = learner.update_pbar(&mut rng_e, &mut rng_r);
            assert!(rep.surrogate_loss.is_none(), "trained at t={t}");
            learner.record(Some(5.0));
        }
        assert_eq!(learner.net().params_digest(), digest0);
        // First post-training-phase tick trains.
        let rep = learner.update_pbar(&mut rng_e, &mut rng_r);
        assert!(rep.surrogate_loss.is_some());
    }

    #[test]
    fn pbar_stays_on_simplex_and_memory_ordered() {
        let dcfg = DsgdConfig { t_train: 5, memory_capacity: 40, ..Default::default() };
        let mut rng_w = substream(5, "weights");
        let mut learner = SurrogateLearner::new(dcfg, &mut rng_w);
        let mut rng_e = substream(5, "exploration");
        let mut rng_r = substream(5, "replay");
        let mut executed: Vec<([f64; 3], f64)> = Vec::new();
        for t in 0..60 {
            learner.update_pbar(&mut rng_e, &mut rng_r);
            let p = learner.pbar();
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let fhat = learner.record(Some(t as f64));
            executed.push((p, fhat));
        }
        let tail: Vec<([f64; 3], f64)> = executed[executed.len() - 40..].to_vec();
        let stored: Vec<([f64; 3], f64)> = learner.memory().iter_ordered().cloned().collect();
        assert_eq!(stored, tail);
    }

    #[test]
    fn empty_window_reuses_previous_fhat() {
        let dcfg = DsgdConfig::default();
        let mut rng_w = substream(6, "weights");
        let mut learner = SurrogateLearner::new(dcfg, &mut rng_w);
        learner.record(Some(42.0));
        let f = learner.record(None);
        assert_eq!(f, 42.0);
    }

    #[test]
    fn zero_gradient_zero_noise_fixed_point() {
        let dcfg = DsgdConfig {
            t_train: 1,
            eps0: 1e-300,
            eps_floor: 0.0,
            ..Default::default()
        };
        let mut rng_w = substream(7, "weights");
        let mut learner = SurrogateLearner::new(dcfg, &mut rng_w);
        let mut rng_e = substream(7, "exploration");
        let mut rng_r = substream(7, "replay");
        learner.record(Some(7.0));
        // Flat surrogate: zero the output layer so the gradient vanishes.
        let flatten = |l: &mut SurrogateLearner| {
            l.net_mut().set_params(2, &vec![0.0; 16], &[7.0]);
        };
        flatten(&mut learner);
        learner.update_pbar(&mut rng_e, &mut rng_r);
        let p0 = learner.pbar();
        for _ in 0..5 {
            flatten(&mut learner);
            learner.update_pbar(&mut rng_e, &mut rng_r);
            learner.record(Some(7.0));
            let p = learner.pbar();
            for k in 0..3 {
                assert!((p[k] - p0[k]).abs() < 1e-12, "{p:?} vs {p0:?}");
            }
        }
    }

    /// Planted-problem convergence: the simulator is replaced by a noisy
    /// convex objective with its optimum at a simplex vertex, scored on the
    /// sojourn-seconds scale the default rates are tuned for.
    #[test]
    fn planted_convex_problem_converges_to_vertex() {
        let target = [0.0, 0.0, 1.0];
        let dcfg = DsgdConfig::default();
        let mut rng_w = substream(8, "weights");
        let mut learner = SurrogateLearner::new(dcfg, &mut rng_w);
        let mut rng_e = substream(8, "exploration");
        let mut rng_r = substream(8, "replay");
        let mut noise_rng = substream(8, "noise");
        for _ in 0..2000 {
            learner.update_pbar(&mut rng_e, &mut rng_r);
            let p = learner.pbar();
            let dist2: f64 = (0..3).map(|k| (p[k] - target[k]).powi(2)).sum();
            let noisy = 300.0 * dist2 + 5.0 * noise_rng.gen::<f64>();
            learner.record(Some(noisy));
        }
        let p = learner.pbar();
        let dist: f64 = (0..3).map(|k| (p[k] - target[k]).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 0.1, "final pbar {p:?}, distance {dist}");
    }

    #[test]
    fn observe_fhat_deterministic_window() {
        // Single user, sure channel, no arrivals after seeding: every sojourn
        // equals its wait plus the service time.
        let cfg = SystemConfig {
            num_users: 1,
            catalog_size: 4,
            file_size_bits: 8e7,
            tx_rate_bps: 8e7,
            spectral_efficiency: 1.0,
            noise_power_w: 1.0,
            power_levels_w: vec![1.0, 10.0],
            avg_power_limit_w: 5.0,
            zipf_exponent: 0.0,
            arrival_rate_hz: 0.0,
            channels: vec![UserChannel {
                model: ChannelModel::DiscreteUniform { support: vec![1.0] },
                tag: ChannelTag::Good,
            }],
            horizon: 3,
            seed: 3,
        };
        let mut world = World::new(cfg, StrategyParams::LOOPBACK);
        world.seed_request(0, 0);
        world.seed_request(1, 0);
        world.seed_request(2, 0);
        let mut policy = |_: &MdpState| PowerDecision { action: 1, watts: 10.0 };
        let f = observe_fhat(&mut world, &mut policy, 3).unwrap();
        // Sojourns are 1, 2, 3 seconds; mean 2.
        assert!((f - 2.0).abs() < 1e-12);
    }
}
