//! Three-timescale integration: the constrained Q-learner runs every
//! transmission while the strategy-surrogate learner advances once per
//! approximation window, so the queueing strategy drifts slowly enough that
//! the power-control MDP underneath it stays quasi-stationary.

use crate::acdqn::{AcdqnConfig, DqnLearner, MulticastEnv};
use crate::baselines::GreedyNetPolicy;
use crate::dsgd::{DsgdConfig, SurrogateLearner};
use crate::model::SystemConfig;
use crate::rl::Schedule;
use crate::sim::SimTrace;
use crate::substream;
use thiserror::Error;

#[derive(Debug, Clone)]
pub struct IdaConfig {
    /// Inner power-control learner (rates eta1, eta2).
    pub acdqn: AcdqnConfig,
    /// Outer strategy learner (rates eta3 = its eta1, eta4 = its eta2);
    /// its `t_train` plays the role of the random-exploration tick budget.
    pub dsgd: DsgdConfig,
    /// Transmissions per strategy tick.
    pub t_approx: u64,
}

impl Default for IdaConfig {
    fn default() -> Self {
        // Constant steps at the decaying schedules' initial values.
        let mut acdqn = AcdqnConfig::decaying();
        acdqn.eta1 = Schedule::Constant(0.001);
        acdqn.eta2 = Schedule::Constant(0.0001);
        let mut dsgd = DsgdConfig::default();
        dsgd.eta1 = Schedule::Constant(0.01);
        dsgd.eta2 = Schedule::Constant(0.001);
        Self { acdqn, dsgd, t_approx: 100 }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("timescale ordering violated: need eta1 > eta2 >= eta3/T_approx > eta4/T_approx, got {eta1} / {eta2} / {eta3_scaled} / {eta4_scaled}")]
pub struct TimescaleError {
    pub eta1: f64,
    pub eta2: f64,
    pub eta3_scaled: f64,
    pub eta4_scaled: f64,
}

impl IdaConfig {
    /// Initial-rate ordering across the four coupled iterations. The default
    /// constants sit exactly on the middle boundary (eta2 = eta3/T_approx),
    /// so that comparison is non-strict.
    pub fn validate(&self) -> Result<(), TimescaleError> {
        let eta1 = self.acdqn.eta1.initial();
        let eta2 = self.acdqn.eta2.initial();
        let eta3_scaled = self.dsgd.eta1.initial() / self.t_approx as f64;
        let eta4_scaled = self.dsgd.eta2.initial() / self.t_approx as f64;
        if eta1 > eta2 && eta2 >= eta3_scaled && eta3_scaled > eta4_scaled {
            Ok(())
        } else {
            Err(TimescaleError { eta1, eta2, eta3_scaled, eta4_scaled })
        }
    }
}

/// Per-tick record of the embedded strategy learner.
#[derive(Debug, Clone, Default)]
pub struct IdaTickTrace {
    pub transmission: Vec<u64>,
    pub pbar: Vec<[f64; 3]>,
    pub fhat: Vec<f64>,
    pub surrogate_loss: Vec<Option<f64>>,
}

pub struct IdaResult {
    pub sim: SimTrace,
    pub beta_series: Vec<f64>,
    /// Strategy in force at each transmission.
    pub pbar_series: Vec<[f64; 3]>,
    pub ticks: IdaTickTrace,
    pub final_pbar: [f64; 3],
    pub final_beta: f64,
    pub policy: GreedyNetPolicy,
    /// Mean per-tick strategy movement |dp|_1, for timescale diagnostics.
    pub mean_tick_pbar_step: f64,
    /// Mean per-window accumulated |dbeta|, for timescale diagnostics.
    pub mean_window_beta_churn: f64,
}

/// Runs the integrated algorithm for `horizon` transmissions: the
/// constrained Q-learner steps every transmission, sojourn samples pool in a
/// window buffer, and once per `t_approx` transmissions the strategy learner
/// updates the simplex point and records the window's observation.
pub fn ida_train(cfg: &SystemConfig, icfg: &IdaConfig, horizon: u64) -> IdaResult {
    icfg.validate().expect("IDA timescale ordering");
    let mut rng_weights = substream(cfg.seed, "weights");
    let mut rng_explore = substream(cfg.seed, "exploration");
    let mut rng_replay = substream(cfg.seed, "replay");

    let mut learner = DqnLearner::new(
        icfg.acdqn.clone(),
        2 * cfg.num_users,
        cfg.power_levels_w.clone(),
        cfg.avg_power_limit_w,
        &mut rng_weights,
    );
    let mut surrogate = SurrogateLearner::new(icfg.dsgd.clone(), &mut rng_weights);
    surrogate.randomize_pbar(&mut rng_explore);
    let mut env = MulticastEnv::new(cfg.clone(), surrogate.strategy());

    let mut dbar: Vec<f64> = Vec::new();
    let mut beta_series = Vec::with_capacity(horizon as usize);
    let mut pbar_series = Vec::with_capacity(horizon as usize);
    let mut ticks = IdaTickTrace::default();
    let mut beta_churn_this_window = 0.0;
    let mut window_churns: Vec<f64> = Vec::new();
    let mut tick_steps: Vec<f64> = Vec::new();
    let mut prev_beta = learner.beta;

    for t in 1..=horizon {
        let (step, diag) = learner.step_env(&mut env, &mut rng_explore, &mut rng_replay);
        dbar.extend(step.sojourns.iter().map(|&(_, s)| s));
        beta_churn_this_window += (diag.beta - prev_beta).abs();
        prev_beta = diag.beta;
        beta_series.push(diag.beta);
        pbar_series.push(surrogate.pbar());

        if t % icfg.t_approx == 0 {
            let before = surrogate.pbar();
            let report = surrogate.update_pbar(&mut rng_explore, &mut rng_replay);
            env.world_mut().set_strategy(surrogate.strategy());
            let observed = if dbar.is_empty() {
                None
            } else {
                Some(dbar.iter().sum::<f64>() / dbar.len() as f64)
            };
            dbar.clear();
            let fhat = surrogate.record(observed);
            ticks.transmission.push(t);
            ticks.pbar.push(report.pbar);
            ticks.fhat.push(fhat);
            ticks.surrogate_loss.push(report.surrogate_loss);
            let after = surrogate.pbar();
            tick_steps.push((0..3).map(|k| (after[k] - before[k]).abs()).sum());
            window_churns.push(beta_churn_this_window);
            beta_churn_this_window = 0.0;
        }
    }

    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let scales = env.scales().to_vec();
    IdaResult {
        final_pbar: surrogate.pbar(),
        final_beta: learner.beta,
        policy: GreedyNetPolicy {
            net: learner.net,
            scales,
            power_levels: cfg.power_levels_w.clone(),
        },
        sim: env.into_trace(),
        beta_series,
        pbar_series,
        ticks,
        mean_tick_pbar_step: mean(&tick_steps),
        mean_window_beta_churn: mean(&window_churns),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelModel, ChannelTag, UserChannel};

    fn small_cfg(horizon: u64) -> SystemConfig {
        SystemConfig {
            num_users: 2,
            catalog_size: 10,
            file_size_bits: 8e7,
            tx_rate_bps: 8e7,
            spectral_efficiency: 1.0,
            noise_power_w: 1.0,
            power_levels_w: SystemConfig::power_grid(1.0, 10.0, 4),
            avg_power_limit_w: 4.0,
            zipf_exponent: 1.0,
            arrival_rate_hz: 1.0,
            channels: vec![
                UserChannel { model: ChannelModel::Rayleigh { mean_square: 0.3 }, tag: ChannelTag::Bad },
                UserChannel { model: ChannelModel::Rayleigh { mean_square: 1.0 }, tag: ChannelTag::Good },
            ],
            horizon,
            seed: 77,
        }
    }

    #[test]
    fn default_rates_validate() {
        assert_eq!(IdaConfig::default().validate(), Ok(()));
    }

    #[test]
    fn broken_ordering_rejected() {
        let mut icfg = IdaConfig::default();
        icfg.acdqn.eta1 = Schedule::Constant(1e-6);
        assert!(icfg.validate().is_err());
    }

    #[test]
    fn guard_never_fires_beyond_horizon() {
        // T_approx above the horizon degenerates to plain AC-DQN under the
        // initial random strategy.
        let cfg = small_cfg(60);
        let mut icfg = IdaConfig::default();
        icfg.t_approx = 1000;
        icfg.acdqn.minibatch = 8;
        icfg.acdqn.hidden = vec![8, 8];
        let result = ida_train(&cfg, &icfg, 60);
        assert!(tickless(&result));
        assert_eq!(result.sim.transmissions_completed, 60);
        // The strategy never moved off its initial draw.
        let p0 = result.pbar_series[0];
        assert!(result.pbar_series.iter().all(|p| *p == p0));
        assert_eq!(result.final_pbar, p0);
    }

    fn tickless(r: &IdaResult) -> bool {
        r.ticks.transmission.is_empty()
    }

    #[test]
    fn ticks_fire_on_schedule_and_pbar_stays_on_simplex() {
        let cfg = small_cfg(500);
        let mut icfg = IdaConfig::default();
        icfg.t_approx = 50;
        icfg.acdqn.minibatch = 16;
        icfg.acdqn.hidden = vec![16, 8];
        icfg.dsgd.t_train = 4;
        icfg.dsgd.minibatch = 4;
        // Keep the rate ordering valid at the shorter window.
        icfg.dsgd.eta1 = Schedule::Constant(0.005);
        icfg.dsgd.eta2 = Schedule::Constant(0.0005);
        let result = ida_train(&cfg, &icfg, 500);
        assert_eq!(result.ticks.transmission, (1..=10).map(|m| m * 50).collect::<Vec<u64>>());
        for p in &result.ticks.pbar {
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // Every transmission logged a beta and a strategy.
        assert_eq!(result.beta_series.len(), 500);
        assert_eq!(result.pbar_series.len(), 500);
        println!(
            "timescale diag: mean |dp|/tick = {:.5}, mean window beta churn = {:.5}",
            result.mean_tick_pbar_step, result.mean_window_beta_churn
        );
    }
}
