//! Episodic curtailment environment.
//!
//! An episode samples an operating condition, a disturbance and a
//! demand-response market, applies the disturbance at t = 0 and then lets a
//! controller request signed curtailment every 5 s for up to 200 steps.
//! Requests are dispatched cheapest bus first and rewarded by curtailment
//! cost plus discounted voltage penalties.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baseline::ShedConfig;
use crate::error::{Error, Result};
use crate::grid::Network;
use crate::neural::{gaussian_log_prob, GaussianPolicyOutput, Mlp};
use crate::ppo::{EpisodicEnv, Rollout};
use crate::seeding;
use crate::sim::{
    load_bus_positions, Disturbance, OperatingCondition, SimulationState, StabilityStatus, StabilityVerdict,
    DEFAULT_CONTROL_STEP_S, END_VOLTAGE_PU,
};

/// Control steps per episode (1000 s at 5 s).
pub const EPISODE_STEPS: usize = 200;
/// MW requested per unit of raw policy output.
pub const ACTION_SCALE_MW: f64 = 100.0;
/// Requests smaller than this are dropped in thresholded evaluation.
pub const DEFAULT_THRESHOLD_MW: f64 = 10.0;
pub const CAPACITY_RANGE_MW: (f64, f64) = (300.0, 500.0);
pub const PRICE_RANGE: (f64, f64) = (0.1, 0.2);
pub const UNSTABLE_PENALTY: f64 = 500.0;
pub const LOW_VOLTAGE_PENALTY: f64 = 1.0;
pub const PENALTY_DISCOUNT: f64 = 0.99;
/// Observations after which the normaliser freezes.
pub const NORMALIZER_SAMPLES: u64 = 10_000;
pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_BAND: (f64, f64) = (0.95, 1.05);
pub const MAX_SCENARIO_RETRIES: usize = 100;

/// Training disturbances of the built-in case: trips of corridor circuits 1–3.
pub fn default_training_menu() -> Vec<Disturbance> {
    (1..=3).map(Disturbance::line_trip).collect()
}

/// Disturbance withheld from training: trip of corridor circuit 4.
pub fn default_holdout() -> Disturbance {
    Disturbance::line_trip(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketBus {
    pub bus: u32,
    pub capacity_mw: f64,
    pub price_per_mw: f64,
    pub remaining_mw: f64,
}

/// Demand-response offers at the curtailment buses, in network order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurtailmentMarket {
    pub buses: Vec<MarketBus>,
}

impl CurtailmentMarket {
    /// Fresh market with full remaining capacity.
    pub fn new(offers: &[(u32, f64, f64)]) -> Self {
        Self {
            buses: offers
                .iter()
                .map(|&(bus, capacity_mw, price_per_mw)| MarketBus {
                    bus,
                    capacity_mw,
                    price_per_mw,
                    remaining_mw: capacity_mw,
                })
                .collect(),
        }
    }

    /// Draws capacity and price independently per curtailment bus.
    pub fn sample<R: Rng + ?Sized>(net: &Network, rng: &mut R) -> Self {
        let offers: Vec<(u32, f64, f64)> = net
            .curtailment_buses
            .iter()
            .map(|&b| {
                let cap = rng.random_range(CAPACITY_RANGE_MW.0..CAPACITY_RANGE_MW.1);
                let price = rng.random_range(PRICE_RANGE.0..PRICE_RANGE.1);
                (b, cap, price)
            })
            .collect();
        Self::new(&offers)
    }

    pub fn curtailed_mw(&self, k: usize) -> f64 {
        self.buses[k].capacity_mw - self.buses[k].remaining_mw
    }

    /// Bus indices from cheapest to most expensive (ties keep network order).
    fn price_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.buses.len()).collect();
        order.sort_by(|&a, &b| self.buses[a].price_per_mw.total_cmp(&self.buses[b].price_per_mw));
        order
    }

    /// Splits a signed request over the buses. Positive requests fill the
    /// cheapest bus first and spill to pricier ones, capped by remaining
    /// capacity; negative requests restore the most expensive curtailment
    /// first, capped by what is curtailed.
    pub fn dispatch(&self, total_delta_mw: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.buses.len()];
        if !total_delta_mw.is_finite() || total_delta_mw == 0.0 {
            return out;
        }
        let mut order = self.price_order();
        if total_delta_mw > 0.0 {
            let mut left = total_delta_mw;
            for k in order {
                let take = left.min(self.buses[k].remaining_mw.max(0.0));
                out[k] = take;
                left -= take;
                if left <= 0.0 {
                    break;
                }
            }
        } else {
            order.reverse();
            let mut left = -total_delta_mw;
            for k in order {
                let give = left.min(self.curtailed_mw(k).max(0.0));
                out[k] = -give;
                left -= give;
                if left <= 0.0 {
                    break;
                }
            }
        }
        out
    }

    /// Records curtailment actually applied.
    pub fn commit(&mut self, applied_mw: &[f64]) {
        for (b, &d) in self.buses.iter_mut().zip(applied_mw) {
            b.remaining_mw = (b.remaining_mw - d).clamp(0.0, b.capacity_mw);
        }
    }

    /// Action cost `C_a`: newly curtailed MW times price, as a negative
    /// number; restoration is free.
    pub fn cost(&self, applied_mw: &[f64]) -> f64 {
        -self
            .buses
            .iter()
            .zip(applied_mw)
            .map(|(b, &d)| b.price_per_mw * d.max(0.0))
            .sum::<f64>()
    }
}

/// Per-step reward: the action cost plus a penalty discounted by the step
/// index — 500 if the system became unstable, 1 if any transmission voltage
/// dipped below 0.90 pu, nothing otherwise.
pub fn reward(c_a: f64, verdict: &StabilityVerdict, any_vts_below_090: bool, t: usize) -> f64 {
    let discount = PENALTY_DISCOUNT.powi(t as i32);
    if verdict.is_unstable() {
        c_a - UNSTABLE_PENALTY * discount
    } else if any_vts_below_090 {
        c_a - LOW_VOLTAGE_PENALTY * discount
    } else {
        c_a
    }
}

/// Streaming per-dimension mean and population standard deviation that
/// freezes after a fixed number of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    frozen: bool,
    limit: u64,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self::with_limit(dim, NORMALIZER_SAMPLES)
    }

    pub fn with_limit(dim: usize, limit: u64) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            frozen: limit == 0,
            limit,
        }
    }

    /// Frozen normaliser with the given statistics.
    pub fn frozen_with(mean: Vec<f64>, std: Vec<f64>) -> Self {
        assert_eq!(mean.len(), std.len());
        let count = NORMALIZER_SAMPLES;
        Self {
            count,
            m2: std.iter().map(|s| s * s * count as f64).collect(),
            mean,
            frozen: true,
            limit: count,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Standard deviation per dimension, floored; 1 before any sample.
    pub fn std(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![1.0; self.dim()];
        }
        self.m2
            .iter()
            .map(|&m2| (m2 / self.count as f64).sqrt().max(STD_FLOOR))
            .collect()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Adds one sample unless frozen; returns whether it was used.
    pub fn update(&mut self, x: &[f64]) -> Result<bool> {
        self.check(x)?;
        if self.frozen {
            return Ok(false);
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
        if self.count >= self.limit {
            self.frozen = true;
        }
        Ok(true)
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let std = self.std();
        Ok(x.iter().zip(&self.mean).zip(&std).map(|((&v, &m), &s)| (v - m) / s).collect())
    }
}

/// Stacked policy input `normalize(obs_t) ++ normalize(obs_prev)`. When
/// `learn` is set, `obs_t` first updates the statistics (until frozen).
pub fn build_state(obs_t: &[f64], obs_prev: &[f64], normalizer: &mut Normalizer, learn: bool) -> Result<Vec<f64>> {
    if learn {
        normalizer.update(obs_t)?;
    }
    let mut s = normalizer.normalize(obs_t)?;
    s.extend(normalizer.normalize(obs_prev)?);
    Ok(s)
}

/// Raw observation: bus voltages, (P, Q) per branch, then (price,
/// remaining capacity) per curtailment bus.
pub fn measure(state: &SimulationState, market: &CurtailmentMarket) -> Vec<f64> {
    let mut obs = state.grid_measurements();
    for b in &market.buses {
        obs.push(b.price_per_mw);
        obs.push(b.remaining_mw);
    }
    obs
}

/// One episode's random draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u64,
    pub oc: OperatingCondition,
    pub disturbance: Disturbance,
    pub market: CurtailmentMarket,
}

/// Samples a feasible scenario: one uniform multiplier per load bus, one
/// disturbance chosen uniformly from `menu`, and a fresh market. Infeasible
/// operating conditions are redrawn up to [`MAX_SCENARIO_RETRIES`] times.
pub fn sample_scenario<R: Rng + ?Sized>(
    net: &Network,
    rng: &mut R,
    band: (f64, f64),
    menu: &[Disturbance],
    id: u64,
) -> Result<Scenario> {
    if menu.is_empty() {
        return Err(Error::Config("disturbance menu is empty".into()));
    }
    if !(band.0 <= band.1) || !(band.0 >= 0.0) {
        return Err(Error::Config(format!("invalid multiplier band [{}, {}]", band.0, band.1)));
    }
    let n_loads = load_bus_positions(net).len();
    for _ in 0..MAX_SCENARIO_RETRIES {
        let seed: u64 = rng.random();
        let load_multipliers = (0..n_loads)
            .map(|_| {
                if band.0 == band.1 {
                    band.0
                } else {
                    rng.random_range(band.0..band.1)
                }
            })
            .collect();
        let disturbance = menu[rng.random_range(0..menu.len())].clone();
        let market = CurtailmentMarket::sample(net, rng);
        let oc = OperatingCondition { load_multipliers, seed };
        if SimulationState::init(net, &oc).is_ok() {
            return Ok(Scenario {
                id,
                oc,
                disturbance,
                market,
            });
        }
    }
    Err(Error::Infeasible(format!(
        "no feasible operating condition in {MAX_SCENARIO_RETRIES} draws"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PolicyMode {
    /// Sample the Gaussian policy.
    Stochastic,
    /// Apply the mean.
    Deterministic,
    /// Apply the mean, dropping requests smaller than the threshold.
    DeterministicThresholded { threshold_mw: f64 },
}

/// Who decides the curtailment in an episode.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    Agent { actor: &'a Mlp<f64>, mode: PolicyMode },
    Baseline(&'a ShedConfig),
    Uncontrolled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: f64,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub log_prob_old: f64,
}

/// One control step of an episode trace (one JSON line on export).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub time_s: f64,
    pub state_raw: Vec<f64>,
    pub action_raw: f64,
    /// Requested total MW before dispatch clamping.
    pub delta_mw: f64,
    /// MW actually applied per curtailment bus.
    pub per_bus_delta: Vec<f64>,
    pub reward: f64,
    /// Lowest transmission voltage seen during the step; `None` when the
    /// step ended without an equilibrium before any voltage was sampled.
    pub vts_min: Option<f64>,
    pub verdict: String,
    /// Bus voltages after the step.
    pub bus_v: Vec<f64>,
    /// Active load drawn at each curtailment bus after the step, MW.
    pub load_mw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub scenario_id: u64,
    pub steps: Vec<StepRecord>,
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
    pub crashed: bool,
    pub verdict: StabilityVerdict,
    /// Net curtailment in force at the end, MW.
    pub curtailed_mw: f64,
}

impl EpisodeTrace {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut w, s).map_err(|e| Error::Simulation(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOptions {
    pub steps: usize,
    pub dt_s: f64,
    /// Feed observations to the normaliser (training only).
    pub learn_normalizer: bool,
    /// Keep per-step records (transitions are always kept for agents).
    pub record_steps: bool,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        Self {
            steps: EPISODE_STEPS,
            dt_s: DEFAULT_CONTROL_STEP_S,
            learn_normalizer: false,
            record_steps: true,
        }
    }
}

/// Runs one episode. `rng` is only consumed by the stochastic policy.
pub fn run_episode<R: Rng + ?Sized>(
    net: &Network,
    scenario: &Scenario,
    controller: Controller<'_>,
    normalizer: &mut Normalizer,
    opts: &EpisodeOptions,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    if let Controller::Agent { actor, .. } = controller {
        let want = 2 * net.observation_len();
        if actor.input_dim() != want || normalizer.dim() != net.observation_len() {
            return Err(Error::Dimension {
                expected: want,
                actual: actor.input_dim(),
            });
        }
    }
    let mut sim = SimulationState::init(net, &scenario.oc)?;
    sim.apply_disturbance(net, &scenario.disturbance)?;
    let mut market = scenario.market.clone();
    let mut trace = EpisodeTrace {
        scenario_id: scenario.id,
        steps: Vec::new(),
        transitions: Vec::new(),
        total_reward: 0.0,
        crashed: false,
        verdict: StabilityVerdict {
            status: StabilityStatus::Ongoing,
            violating_bus: None,
            at_time_s: 0.0,
        },
        curtailed_mw: 0.0,
    };
    let start = sim.refresh(net)?;
    if start.is_unstable() {
        trace.total_reward = reward(0.0, &start, true, 0);
        trace.crashed = true;
        trace.verdict = start;
        return Ok(trace);
    }

    let is_agent = matches!(controller, Controller::Agent { .. });
    let mut obs = measure(&sim, &market);
    let mut state = if is_agent {
        build_state(&obs, &obs, normalizer, opts.learn_normalizer)?
    } else {
        Vec::new()
    };

    for t in 0..opts.steps {
        let (action_raw, log_prob, delta_mw, request) = match controller {
            Controller::Agent { actor, mode } => {
                let out = GaussianPolicyOutput::from_outputs(&actor.predict(&state)?);
                let a = match mode {
                    PolicyMode::Stochastic => {
                        let z: f64 = rng.sample(StandardNormal);
                        out.mu + out.sigma * z
                    }
                    _ => out.mu,
                };
                let lp = gaussian_log_prob(out.mu, out.sigma, a);
                let mut mw = ACTION_SCALE_MW * a;
                if let PolicyMode::DeterministicThresholded { threshold_mw } = mode {
                    if mw.abs() < threshold_mw {
                        mw = 0.0;
                    }
                }
                (a, lp, mw, market.dispatch(mw))
            }
            Controller::Baseline(cfg) => {
                let avail: Vec<f64> = (0..net.curtailment_buses.len()).map(|k| sim.nominal_demand_mw(k)).collect();
                let req = cfg.step(sim.current_min_vts(), &avail);
                let total: f64 = req.iter().sum();
                (total / ACTION_SCALE_MW, 0.0, total, req)
            }
            Controller::Uncontrolled => (0.0, 0.0, 0.0, vec![0.0; net.curtailment_buses.len()]),
        };

        let out = sim.step(net, &request, opts.dt_s)?;
        let c_a = match controller {
            Controller::Agent { .. } => {
                let c = market.cost(&out.applied_mw);
                market.commit(&out.applied_mw);
                c
            }
            Controller::Baseline(cfg) => -cfg.cost_per_mw * out.applied_mw.iter().map(|d| d.max(0.0)).sum::<f64>(),
            Controller::Uncontrolled => 0.0,
        };
        let last = t + 1 == opts.steps;
        let mut verdict = out.verdict;
        if !verdict.is_unstable() && last {
            verdict = sim.end_of_episode_verdict(net);
        }
        let r = reward(c_a, &verdict, out.step_min_vts < END_VOLTAGE_PU, t);
        trace.total_reward += r;
        let terminal = verdict.is_unstable() || last;

        let next_obs = measure(&sim, &market);
        if is_agent {
            let next_state = build_state(&next_obs, &obs, normalizer, opts.learn_normalizer)?;
            trace.transitions.push(Transition {
                state: std::mem::replace(&mut state, next_state.clone()),
                action: action_raw,
                reward: r,
                next_state,
                terminal,
                log_prob_old: log_prob,
            });
        }
        if opts.record_steps {
            trace.steps.push(StepRecord {
                t,
                time_s: sim.time_s,
                state_raw: obs.clone(),
                action_raw,
                delta_mw,
                per_bus_delta: out.applied_mw.clone(),
                reward: r,
                vts_min: out.step_min_vts.is_finite().then_some(out.step_min_vts),
                verdict: verdict.label().to_string(),
                bus_v: sim.last_solution.v_mag.clone(),
                load_mw: net
                    .curtailment_buses
                    .iter()
                    .map(|&b| sim.modeled_load(net, net.bus_position(b).unwrap()).0)
                    .collect(),
            });
        }
        obs = next_obs;
        trace.verdict = verdict;
        if terminal {
            trace.crashed = verdict.is_unstable();
            break;
        }
    }
    trace.curtailed_mw = sim.total_curtailed_mw();
    Ok(trace)
}

/// Training environment over one network, band and disturbance menu.
#[derive(Debug, Clone)]
pub struct CurtailmentEnv {
    pub net: Network,
    pub band: (f64, f64),
    pub menu: Vec<Disturbance>,
    pub steps: usize,
}

impl CurtailmentEnv {
    pub fn new(net: Network, band: (f64, f64), menu: Vec<Disturbance>) -> Self {
        Self {
            net,
            band,
            menu,
            steps: EPISODE_STEPS,
        }
    }

    /// Scenario of training episode `episode` under `master_seed`.
    pub fn training_scenario(&self, master_seed: u64, episode: u64) -> Result<Scenario> {
        let mut rng = seeding::stream(master_seed, seeding::SCENARIO, episode);
        sample_scenario(&self.net, &mut rng, self.band, &self.menu, episode)
    }
}

impl EpisodicEnv for CurtailmentEnv {
    type Shared = Normalizer;

    fn state_dim(&self) -> usize {
        2 * self.net.observation_len()
    }

    fn initial_shared(&self) -> Normalizer {
        Normalizer::new(self.net.observation_len())
    }

    fn shared_is_frozen(&self, shared: &Normalizer) -> bool {
        shared.is_frozen()
    }

    fn rollout(&self, actor: &Mlp<f64>, shared: &mut Normalizer, master_seed: u64, episode: u64) -> Result<Rollout> {
        let scenario = self.training_scenario(master_seed, episode)?;
        let mut rng = seeding::stream(master_seed, seeding::POLICY_SAMPLING, episode);
        let opts = EpisodeOptions {
            steps: self.steps,
            learn_normalizer: true,
            record_steps: false,
            ..EpisodeOptions::default()
        };
        let controller = Controller::Agent {
            actor,
            mode: PolicyMode::Stochastic,
        };
        let trace = run_episode(&self.net, &scenario, controller, shared, &opts, &mut rng)?;
        Ok(Rollout {
            transitions: trace.transitions,
            total_reward: trace.total_reward,
            crashed: trace.crashed,
            curtailed_mw: trace.curtailed_mw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(status: StabilityStatus) -> StabilityVerdict {
        StabilityVerdict {
            status,
            violating_bus: None,
            at_time_s: 0.0,
        }
    }

    #[test]
    fn dispatch_fill_then_spill() {
        let m = CurtailmentMarket::new(&[(4, 400.0, 0.12), (5, 350.0, 0.18)]);
        assert_eq!(m.dispatch(450.0), vec![400.0, 50.0]);
        assert_eq!(m.dispatch(1000.0), vec![400.0, 350.0]);
        assert_eq!(m.dispatch(0.0), vec![0.0, 0.0]);
        // Price order, not declaration order, decides.
        let m = CurtailmentMarket::new(&[(4, 400.0, 0.19), (5, 350.0, 0.11)]);
        assert_eq!(m.dispatch(100.0), vec![0.0, 100.0]);
    }

    #[test]
    fn dispatch_restores_expensive_first() {
        let mut m = CurtailmentMarket::new(&[(4, 400.0, 0.12), (5, 350.0, 0.18)]);
        m.commit(&m.dispatch(450.0));
        assert_eq!(m.dispatch(-100.0), vec![-50.0, -50.0]);
        assert_eq!(m.dispatch(-1000.0), vec![-400.0, -50.0]);
        let fresh = CurtailmentMarket::new(&[(4, 400.0, 0.12), (5, 350.0, 0.18)]);
        assert_eq!(fresh.dispatch(-10.0), vec![0.0, 0.0]);
    }

    #[test]
    fn cost_charges_only_new_curtailment() {
        let m = CurtailmentMarket::new(&[(4, 400.0, 0.15), (5, 350.0, 0.2)]);
        assert!((m.cost(&[100.0, 0.0]) + 15.0).abs() < 1e-12);
        assert_eq!(m.cost(&[-100.0, 0.0]), 0.0);
    }

    #[test]
    fn reward_branches() {
        let ongoing = verdict(StabilityStatus::Ongoing);
        let unstable = verdict(StabilityStatus::UnstableNoEquilibrium);
        assert_eq!(reward(0.0, &unstable, false, 0), -500.0);
        assert_eq!(reward(0.0, &unstable, true, 0), -500.0);
        assert_eq!(reward(0.0, &ongoing, false, 7), 0.0);
        assert!((reward(0.0, &ongoing, true, 2) + 0.9801).abs() < 1e-12);
        assert!((reward(-15.0, &ongoing, false, 3) + 15.0).abs() < 1e-12);
    }

    #[test]
    fn normalizer_basics() {
        let mut n = Normalizer::new(2);
        assert_eq!(n.normalize(&[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        for x in [[1.0, 5.0], [3.0, 5.0]] {
            n.update(&x).unwrap();
        }
        assert_eq!(n.mean(), &[2.0, 5.0]);
        assert_eq!(n.std(), vec![1.0, STD_FLOOR]);
        assert_eq!(n.normalize(&[4.0, 5.0]).unwrap(), vec![2.0, 0.0]);
        assert!(matches!(n.update(&[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn normalizer_freezes_at_limit() {
        let mut n = Normalizer::with_limit(1, 3);
        for k in 0..3 {
            assert!(!n.is_frozen());
            assert!(n.update(&[k as f64]).unwrap());
        }
        assert!(n.is_frozen());
        let snapshot = n.clone();
        assert!(!n.update(&[100.0]).unwrap());
        assert_eq!(n, snapshot);
    }

    #[test]
    fn frozen_statistics_apply() {
        let mut n = Normalizer::frozen_with(vec![1.0], vec![2.0]);
        assert_eq!(n.normalize(&[3.0]).unwrap(), vec![1.0]);
        assert!(!n.update(&[9.0]).unwrap());
    }

    #[test]
    fn build_state_stacks_halves() {
        let mut n = Normalizer::with_limit(2, 0);
        let s = build_state(&[1.0, 2.0], &[3.0, 4.0], &mut n, true).unwrap();
        assert_eq!(s, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
