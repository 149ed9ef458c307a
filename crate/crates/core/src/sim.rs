//! Quasi-steady-state long-term dynamics.
//!
//! Fast dynamics are replaced by the power-flow equilibrium; only the slow
//! states are integrated: transformer taps, overexcitation limiter timers and
//! restorative-load recovery. The simulation advances in control steps
//! (default 5 s) made of 1 s inner steps.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BusKind, Network};
use crate::powerflow::{self, Injection, PowerFlowSolution, SolverOptions, Ybus};

pub const DEFAULT_CONTROL_STEP_S: f64 = 5.0;
pub const INNER_STEP_S: f64 = 1.0;
/// Any transmission voltage below this ends the episode immediately.
pub const COLLAPSE_VOLTAGE_PU: f64 = 0.7;
/// Transmission voltages must end at or above this level.
pub const END_VOLTAGE_PU: f64 = 0.90;

const TIME_EPS: f64 = 1e-9;

/// Randomised pre-disturbance loading: one multiplier per load bus, in the
/// order of [`load_bus_positions`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingCondition {
    pub load_multipliers: Vec<f64>,
    pub seed: u64,
}

impl OperatingCondition {
    pub fn uniform(net: &Network, multiplier: f64) -> Self {
        Self {
            load_multipliers: vec![multiplier; load_bus_positions(net).len()],
            seed: 0,
        }
    }
}

/// Positions of buses carrying a nonzero nominal load.
pub fn load_bus_positions(net: &Network) -> Vec<usize> {
    net.buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.p_load != 0.0 || b.q_load != 0.0)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DisturbanceKind {
    LineTrip,
    GeneratorTrip,
    LoadStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub kind: DisturbanceKind,
    /// Branch id, generator id or bus id depending on `kind`.
    pub target: u32,
    #[serde(default)]
    pub apply_time_s: f64,
    /// MW added at the target bus (LoadStep only).
    #[serde(default)]
    pub magnitude: f64,
}

impl Disturbance {
    pub fn line_trip(branch: u32) -> Self {
        Self {
            kind: DisturbanceKind::LineTrip,
            target: branch,
            apply_time_s: 0.0,
            magnitude: 0.0,
        }
    }

    pub fn generator_trip(generator: u32) -> Self {
        Self {
            kind: DisturbanceKind::GeneratorTrip,
            target: generator,
            apply_time_s: 0.0,
            magnitude: 0.0,
        }
    }

    pub fn load_step(bus: u32, mw: f64) -> Self {
        Self {
            kind: DisturbanceKind::LoadStep,
            target: bus,
            apply_time_s: 0.0,
            magnitude: mw,
        }
    }

    /// Checks that the target resolves in `net`.
    pub fn validate(&self, net: &Network) -> Result<()> {
        let ok = match self.kind {
            DisturbanceKind::LineTrip => net.branch_position(self.target).is_some(),
            DisturbanceKind::GeneratorTrip => net.generator_position(self.target).is_some(),
            DisturbanceKind::LoadStep => net.bus_position(self.target).is_some(),
        };
        if !ok {
            return Err(Error::Config(format!("disturbance target {self} does not exist")));
        }
        if self.apply_time_s < 0.0 {
            return Err(Error::Config(format!("disturbance {self} has negative apply time")));
        }
        Ok(())
    }
}

impl fmt::Display for Disturbance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DisturbanceKind::LineTrip => write!(f, "line-trip:{}", self.target),
            DisturbanceKind::GeneratorTrip => write!(f, "gen-trip:{}", self.target),
            DisturbanceKind::LoadStep => write!(f, "load-step:{}:{}", self.target, self.magnitude),
        }
    }
}

/// Per-control-step record of a run, exported as CSV with columns
/// `time_s, bus_<id>_v..., branch_<id>_p, branch_<id>_q..., curtail_<bus>..., verdict`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    header: Vec<String>,
    rows: Vec<(Vec<f64>, &'static str)>,
}

impl Trajectory {
    pub fn new(net: &Network) -> Self {
        let mut header = vec!["time_s".to_string()];
        header.extend(net.buses.iter().map(|b| format!("bus_{}_v", b.id)));
        for br in &net.branches {
            header.push(format!("branch_{}_p", br.id));
            header.push(format!("branch_{}_q", br.id));
        }
        header.extend(net.curtailment_buses.iter().map(|b| format!("curtail_{b}")));
        header.push("verdict".into());
        Self { header, rows: Vec::new() }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Numeric columns of row `k` (everything except the verdict).
    pub fn values(&self, k: usize) -> &[f64] {
        &self.rows[k].0
    }

    pub fn verdict(&self, k: usize) -> &'static str {
        self.rows[k].1
    }

    pub fn record(&mut self, state: &SimulationState, verdict: &StabilityVerdict) {
        let mut vals = Vec::with_capacity(self.header.len() - 1);
        vals.push(state.time_s);
        vals.extend(state.grid_measurements());
        vals.extend_from_slice(&state.curtailed_mw);
        self.rows.push((vals, verdict.label()));
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", self.header.join(","))?;
        for (vals, verdict) in &self.rows {
            for v in vals {
                write!(w, "{v},")?;
            }
            writeln!(w, "{verdict}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

impl std::str::FromStr for Disturbance {
    type Err = Error;

    /// Parses the [`Display`](fmt::Display) form: `line-trip:<branch>`,
    /// `gen-trip:<generator>` or `load-step:<bus>:<mw>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse disturbance {s:?}"));
        let parts: Vec<&str> = s.split(':').collect();
        let id = |p: &str| p.parse::<u32>().map_err(|_| bad());
        match parts.as_slice() {
            ["line-trip", b] => Ok(Self::line_trip(id(b)?)),
            ["gen-trip", g] => Ok(Self::generator_trip(id(g)?)),
            ["load-step", b, mw] => Ok(Self::load_step(id(b)?, mw.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilityStatus {
    Ongoing,
    StableAtEnd,
    UnstableLowVoltage,
    UnstableNoEquilibrium,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub status: StabilityStatus,
    pub violating_bus: Option<u32>,
    pub at_time_s: f64,
}

impl StabilityVerdict {
    fn ongoing(t: f64) -> Self {
        Self {
            status: StabilityStatus::Ongoing,
            violating_bus: None,
            at_time_s: t,
        }
    }

    pub fn is_unstable(&self) -> bool {
        matches!(
            self.status,
            StabilityStatus::UnstableLowVoltage | StabilityStatus::UnstableNoEquilibrium
        )
    }

    pub fn label(&self) -> &'static str {
        match self.status {
            StabilityStatus::Ongoing => "ongoing",
            StabilityStatus::StableAtEnd => "stable",
            StabilityStatus::UnstableLowVoltage => "unstable_low_voltage",
            StabilityStatus::UnstableNoEquilibrium => "unstable_no_equilibrium",
        }
    }
}

/// What [`SimulationState::apply_disturbance`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DisturbanceEffect {
    Applied,
    /// The element was already out of service; nothing changed.
    AlreadyOut,
}

/// Result of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub verdict: StabilityVerdict,
    /// Curtailment actually applied per curtailment bus after clamping, MW.
    pub applied_mw: Vec<f64>,
    /// Lowest transmission voltage seen during the step's inner solves.
    pub step_min_vts: f64,
}

/// Evolving long-term state of one simulation run.
#[derive(Debug, Clone)]
pub struct SimulationState {
    pub time_s: f64,
    /// Tap ratio per LTC, in network declaration order.
    pub taps: Vec<f64>,
    pub ltc_timers: Vec<f64>,
    /// True once an LTC has moved during the current out-of-band excursion.
    pub ltc_in_sequence: Vec<bool>,
    /// Continuous-violation time per generator (0 for generators without OEL).
    pub oel_timers: Vec<f64>,
    pub oel_active: Vec<bool>,
    /// Recovery state per load model (1 at initialisation).
    pub load_scale: Vec<f64>,
    /// Voltage at initialisation per load model; the exponential load draws
    /// its nominal power at this voltage.
    pub load_v0: Vec<f64>,
    /// Cumulative curtailment per curtailment bus, MW.
    pub curtailed_mw: Vec<f64>,
    pub branch_in_service: Vec<bool>,
    pub gen_in_service: Vec<bool>,
    /// Operating-condition load per bus before curtailment, MW/Mvar.
    pub base_p: Vec<f64>,
    pub base_q: Vec<f64>,
    pub last_solution: PowerFlowSolution<f64>,
    pub min_vts_seen: f64,
    pub alive: bool,
    pub warnings: Vec<String>,
    ybus: Ybus<f64>,
    ybus_dirty: bool,
    /// Index of each bus's load model, if any.
    load_model_of_bus: Vec<Option<usize>>,
    curtail_pos: Vec<usize>,
    transmission: Vec<usize>,
    bus_ids: Vec<u32>,
}

impl SimulationState {
    /// Solves the pre-disturbance equilibrium for an operating condition.
    ///
    /// Loads are held at constant power for this solve; their recovery
    /// reference voltage is then taken from the solution so that the initial
    /// state is an exact long-term equilibrium.
    pub fn init(net: &Network, oc: &OperatingCondition) -> Result<Self> {
        let load_pos = load_bus_positions(net);
        if oc.load_multipliers.len() != load_pos.len() {
            return Err(Error::Dimension {
                expected: load_pos.len(),
                actual: oc.load_multipliers.len(),
            });
        }
        let n = net.buses.len();
        let mut base_p: Vec<f64> = net.buses.iter().map(|b| b.p_load).collect();
        let mut base_q: Vec<f64> = net.buses.iter().map(|b| b.q_load).collect();
        for (&i, &m) in load_pos.iter().zip(&oc.load_multipliers) {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::Infeasible(format!("load multiplier {m} is not valid")));
            }
            base_p[i] *= m;
            base_q[i] *= m;
        }

        let mut load_model_of_bus = vec![None; n];
        for (k, m) in net.load_models.iter().enumerate() {
            load_model_of_bus[net.bus_position(m.bus).expect("validated")] = Some(k);
        }
        let taps: Vec<f64> = net
            .ltcs
            .iter()
            .map(|l| net.branches[net.branch_position(l.branch).unwrap()].tap_ratio)
            .collect();
        let branch_in_service: Vec<bool> = net.branches.iter().map(|b| b.in_service).collect();
        let ybus = powerflow::build_ybus_with_status(net, &taps, &branch_in_service);
        let n_gen = net.generators.len();
        let n_loads = net.load_models.len();

        let placeholder = PowerFlowSolution {
            v_mag: vec![1.0; n],
            v_ang: vec![0.0; n],
            p_inj: vec![0.0; n],
            q_inj: vec![0.0; n],
            branch_flows: Vec::new(),
            iterations: 0,
            converged: false,
            max_mismatch: f64::INFINITY,
        };
        let mut state = Self {
            time_s: 0.0,
            ltc_timers: vec![0.0; taps.len()],
            ltc_in_sequence: vec![false; taps.len()],
            taps,
            oel_timers: vec![0.0; n_gen],
            oel_active: vec![false; n_gen],
            load_scale: vec![1.0; n_loads],
            load_v0: vec![1.0; n_loads],
            curtailed_mw: vec![0.0; net.curtailment_buses.len()],
            branch_in_service,
            gen_in_service: net.generators.iter().map(|g| g.in_service).collect(),
            base_p,
            base_q,
            last_solution: placeholder,
            min_vts_seen: f64::INFINITY,
            alive: true,
            warnings: Vec::new(),
            ybus,
            ybus_dirty: false,
            load_model_of_bus,
            curtail_pos: net
                .curtailment_buses
                .iter()
                .map(|&b| net.bus_position(b).expect("validated"))
                .collect(),
            transmission: net.transmission_positions(),
            bus_ids: net.buses.iter().map(|b| b.id).collect(),
        };

        let sol = state
            .solve_equilibrium(net, true, true)
            .ok_or_else(|| Error::Infeasible("base-case power flow did not converge".into()))?;
        if let Some((bus, v)) = state.lowest_vts(&sol) {
            if v < COLLAPSE_VOLTAGE_PU {
                return Err(Error::Infeasible(format!(
                    "base case voltage {v:.3} pu at bus {bus} is below {COLLAPSE_VOLTAGE_PU}"
                )));
            }
        }
        for (k, m) in net.load_models.iter().enumerate() {
            state.load_v0[k] = sol.v_mag[net.bus_position(m.bus).unwrap()];
        }
        state.min_vts_seen = state.lowest_vts(&sol).map_or(f64::INFINITY, |(_, v)| v);
        state.last_solution = sol;
        Ok(state)
    }

    /// Applies a disturbance at the current time. The network is re-solved by
    /// the next [`refresh`](Self::refresh) or [`step`](Self::step).
    pub fn apply_disturbance(&mut self, net: &Network, d: &Disturbance) -> Result<DisturbanceEffect> {
        d.validate(net)?;
        if (d.apply_time_s - self.time_s).abs() > TIME_EPS {
            return Err(Error::Simulation(format!(
                "disturbance {d} scheduled at {} s applied at {} s",
                d.apply_time_s, self.time_s
            )));
        }
        match d.kind {
            DisturbanceKind::LineTrip => {
                let k = net.branch_position(d.target).unwrap();
                if !self.branch_in_service[k] {
                    self.warnings.push(format!("branch {} already out of service", d.target));
                    return Ok(DisturbanceEffect::AlreadyOut);
                }
                self.branch_in_service[k] = false;
                self.ybus_dirty = true;
            }
            DisturbanceKind::GeneratorTrip => {
                let k = net.generator_position(d.target).unwrap();
                let bus = net.bus_position(net.generators[k].bus).unwrap();
                if net.buses[bus].kind == BusKind::Slack {
                    return Err(Error::Simulation(format!(
                        "generator {} holds the slack bus and cannot be tripped",
                        d.target
                    )));
                }
                if !self.gen_in_service[k] {
                    self.warnings.push(format!("generator {} already out of service", d.target));
                    return Ok(DisturbanceEffect::AlreadyOut);
                }
                self.gen_in_service[k] = false;
            }
            DisturbanceKind::LoadStep => {
                let bus = net.bus_position(d.target).unwrap();
                let ratio = if self.base_p[bus] != 0.0 {
                    self.base_q[bus] / self.base_p[bus]
                } else {
                    0.0
                };
                self.base_p[bus] += d.magnitude;
                self.base_q[bus] += d.magnitude * ratio;
            }
        }
        Ok(DisturbanceEffect::Applied)
    }

    /// Re-solves the network at the current time without advancing any
    /// long-term state (used right after a disturbance).
    pub fn refresh(&mut self, net: &Network) -> Result<StabilityVerdict> {
        if !self.alive {
            return Err(Error::Simulation("refresh on a terminated simulation".into()));
        }
        let verdict = match self.solve_equilibrium(net, false, false) {
            None => self.kill(StabilityStatus::UnstableNoEquilibrium, None),
            Some(sol) => self.accept_solution(sol),
        };
        Ok(verdict)
    }

    /// Advances one control step. `curtailment_delta_mw` holds one signed
    /// delta per curtailment bus and is applied in the first inner step.
    pub fn step(
        &mut self,
        net: &Network,
        curtailment_delta_mw: &[f64],
        dt_control_s: f64,
    ) -> Result<StepOutcome> {
        if !self.alive {
            return Err(Error::Simulation("step on a terminated simulation".into()));
        }
        if curtailment_delta_mw.len() != self.curtailed_mw.len() {
            return Err(Error::Dimension {
                expected: self.curtailed_mw.len(),
                actual: curtailment_delta_mw.len(),
            });
        }
        if !(dt_control_s > 0.0) {
            return Err(Error::Simulation(format!("invalid control step {dt_control_s}")));
        }
        let inner = (dt_control_s / INNER_STEP_S).round().max(1.0) as usize;
        let dt = dt_control_s / inner as f64;
        let mut applied = vec![0.0; self.curtailed_mw.len()];
        let mut step_min = f64::INFINITY;

        for sub in 0..inner {
            self.integrate_loads(net, dt);
            if sub == 0 {
                for (k, &delta) in curtailment_delta_mw.iter().enumerate() {
                    let bus = self.curtail_pos[k];
                    let available = self.base_p[bus].max(0.0);
                    let before = self.curtailed_mw[k];
                    let after = (before + delta).clamp(0.0, available);
                    self.curtailed_mw[k] = after;
                    applied[k] = after - before;
                }
            }
            self.time_s += dt;

            let sol = match self.solve_equilibrium(net, false, false) {
                Some(sol) => sol,
                None => {
                    let verdict = self.kill(StabilityStatus::UnstableNoEquilibrium, None);
                    return Ok(StepOutcome {
                        verdict,
                        applied_mw: applied,
                        step_min_vts: step_min,
                    });
                }
            };
            // A limiter that latches now takes effect in this same sub-step.
            let sol = if self.update_oels(net, &sol, dt) {
                match self.solve_equilibrium(net, false, false) {
                    Some(sol) => sol,
                    None => {
                        let verdict = self.kill(StabilityStatus::UnstableNoEquilibrium, None);
                        return Ok(StepOutcome {
                            verdict,
                            applied_mw: applied,
                            step_min_vts: step_min,
                        });
                    }
                }
            } else {
                sol
            };
            self.update_ltcs(net, &sol, dt);
            if let Some((_, v)) = self.lowest_vts(&sol) {
                step_min = step_min.min(v);
            }
            let verdict = self.accept_solution(sol);
            if verdict.is_unstable() {
                return Ok(StepOutcome {
                    verdict,
                    applied_mw: applied,
                    step_min_vts: step_min,
                });
            }
        }
        // Snap accumulated round-off so control-step times stay exact multiples.
        self.time_s = (self.time_s * 1e6).round() / 1e6;
        Ok(StepOutcome {
            verdict: StabilityVerdict::ongoing(self.time_s),
            applied_mw: applied,
            step_min_vts: step_min,
        })
    }

    /// Applies the end-of-episode rule: every transmission voltage must be at
    /// least 0.90 pu for the run to count as stable.
    pub fn end_of_episode_verdict(&self, net: &Network) -> StabilityVerdict {
        if !self.alive {
            return StabilityVerdict {
                status: StabilityStatus::UnstableNoEquilibrium,
                violating_bus: None,
                at_time_s: self.time_s,
            };
        }
        match self.lowest_vts(&self.last_solution) {
            Some((bus, v)) if v < END_VOLTAGE_PU => StabilityVerdict {
                status: StabilityStatus::UnstableLowVoltage,
                violating_bus: Some(net.buses[bus].id),
                at_time_s: self.time_s,
            },
            _ => StabilityVerdict {
                status: StabilityStatus::StableAtEnd,
                violating_bus: None,
                at_time_s: self.time_s,
            },
        }
    }

    /// Lowest transmission-bus voltage of the current solution.
    pub fn current_min_vts(&self) -> f64 {
        self.lowest_vts(&self.last_solution).map_or(f64::INFINITY, |(_, v)| v)
    }

    /// Voltage magnitudes, then (P, Q) from-end flows per branch, in network
    /// declaration order. Out-of-service branches read exactly zero.
    pub fn grid_measurements(&self) -> Vec<f64> {
        let sol = &self.last_solution;
        let mut out = Vec::with_capacity(sol.v_mag.len() + 2 * sol.branch_flows.len());
        out.extend_from_slice(&sol.v_mag);
        for (f, &on) in sol.branch_flows.iter().zip(&self.branch_in_service) {
            if on {
                out.push(f.p_from);
                out.push(f.q_from);
            } else {
                out.push(0.0);
                out.push(0.0);
            }
        }
        out
    }

    /// Nominal (pre-voltage-dependence) active demand at a curtailment bus
    /// after curtailment, MW.
    pub fn nominal_demand_mw(&self, curtail_index: usize) -> f64 {
        self.base_p[self.curtail_pos[curtail_index]] - self.curtailed_mw[curtail_index]
    }

    /// Active and reactive power drawn by the load at a bus in the current
    /// solution, MW/Mvar.
    pub fn modeled_load(&self, net: &Network, bus_pos: usize) -> (f64, f64) {
        let inj = &self.injections(net, false)[bus_pos];
        let v = self.last_solution.v_mag[bus_pos];
        (inj.p_load * v.powf(inj.alpha_p), inj.q_load * v.powf(inj.alpha_q))
    }

    pub fn total_curtailed_mw(&self) -> f64 {
        self.curtailed_mw.iter().sum()
    }

    fn kill(&mut self, status: StabilityStatus, bus: Option<u32>) -> StabilityVerdict {
        self.alive = false;
        StabilityVerdict {
            status,
            violating_bus: bus,
            at_time_s: self.time_s,
        }
    }

    fn accept_solution(&mut self, sol: PowerFlowSolution<f64>) -> StabilityVerdict {
        let low = self.lowest_vts(&sol);
        if let Some((_, v)) = low {
            self.min_vts_seen = self.min_vts_seen.min(v);
        }
        self.last_solution = sol;
        match low {
            Some((bus, v)) if v < COLLAPSE_VOLTAGE_PU => {
                let id = self.bus_ids[bus];
                self.kill(StabilityStatus::UnstableLowVoltage, Some(id))
            }
            _ => StabilityVerdict::ongoing(self.time_s),
        }
    }

    fn lowest_vts(&self, sol: &PowerFlowSolution<f64>) -> Option<(usize, f64)> {
        self.transmission
            .iter()
            .map(|&i| (i, sol.v_mag[i]))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    /// Operating-condition load at a bus net of curtailment, MW/Mvar. Reactive
    /// demand is curtailed in proportion so the power factor is preserved.
    fn nominal_load(&self, bus: usize) -> (f64, f64) {
        let p = self.base_p[bus];
        let q = self.base_q[bus];
        match self.curtail_pos.iter().position(|&c| c == bus) {
            Some(k) if p != 0.0 => {
                let remaining = p - self.curtailed_mw[k];
                (remaining, q * remaining / p)
            }
            _ => (p, q),
        }
    }

    fn integrate_loads(&mut self, net: &Network, dt: f64) {
        for (k, m) in net.load_models.iter().enumerate() {
            if !m.restores_to_nominal || m.recovery_time_s <= 0.0 {
                continue;
            }
            let bus = net.bus_position(m.bus).unwrap();
            let ratio = self.last_solution.v_mag[bus] / self.load_v0[k];
            let z = self.load_scale[k];
            self.load_scale[k] = z + dt / m.recovery_time_s * (1.0 - z * ratio.powf(m.alpha_p));
        }
    }

    fn injections(&self, net: &Network, constant_power: bool) -> Vec<Injection<f64>> {
        net.buses
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let (mut p, mut q) = self.nominal_load(i);
                let (mut ap, mut aq) = (0.0, 0.0);
                if let (Some(k), false) = (self.load_model_of_bus[i], constant_power) {
                    let m = &net.load_models[k];
                    let z = self.load_scale[k];
                    let v0 = self.load_v0[k];
                    ap = m.alpha_p;
                    aq = m.alpha_q;
                    p *= z / v0.powf(ap);
                    q *= z / v0.powf(aq);
                }
                let mut p_gen = 0.0;
                let mut has_gen = false;
                for (g, &on) in net.generators.iter().zip(&self.gen_in_service) {
                    if on && g.bus == b.id {
                        p_gen += g.p_gen;
                        has_gen = true;
                    }
                }
                let kind = match b.kind {
                    BusKind::PV if !has_gen => BusKind::PQ,
                    k => k,
                };
                Injection {
                    kind,
                    v_setpoint: b.v_setpoint.unwrap_or(1.0),
                    p_gen,
                    q_gen: 0.0,
                    p_load: p,
                    q_load: q,
                    alpha_p: ap,
                    alpha_q: aq,
                }
            })
            .collect()
    }

    /// Upper reactive limit currently enforceable at each PV bus, summed over
    /// its in-service generators.
    fn q_limits(&self, net: &Network, bus_id: u32) -> (f64, f64) {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for (k, g) in net.generators.iter().enumerate() {
            if self.gen_in_service[k] && g.bus == bus_id {
                lo += g.q_min;
                hi += match (&g.oel, self.oel_active[k]) {
                    (Some(oel), true) => oel.q_limit,
                    _ => g.q_max,
                };
            }
        }
        (lo, hi)
    }

    /// Solves the network with PV→PQ switching at reactive limits.
    fn solve_equilibrium(&mut self, net: &Network, flat: bool, constant_power: bool) -> Option<PowerFlowSolution<f64>> {
        if self.ybus_dirty {
            self.ybus = powerflow::build_ybus_with_status(net, &self.taps, &self.branch_in_service);
            self.ybus_dirty = false;
        }
        let mut inj = self.injections(net, constant_power);
        let opts = SolverOptions {
            flat_start: flat,
            ..SolverOptions::default()
        };
        let mut start = if flat { None } else { Some(self.last_solution.clone()) };
        for _ in 0..=net.buses.len() {
            let sol = powerflow::solve_with(
                net,
                &self.ybus,
                &self.branch_in_service,
                &self.taps,
                &inj,
                &opts,
                start.as_ref(),
            );
            if !sol.converged {
                return None;
            }
            let mut switched = false;
            for (i, b) in net.buses.iter().enumerate() {
                if inj[i].kind != BusKind::PV {
                    continue;
                }
                let q_gen = sol.q_inj[i] + inj[i].q_load * sol.v_mag[i].powf(inj[i].alpha_q);
                let (lo, hi) = self.q_limits(net, b.id);
                let clamp = if q_gen > hi + 1e-9 {
                    Some(hi)
                } else if q_gen < lo - 1e-9 {
                    Some(lo)
                } else {
                    None
                };
                if let Some(qlim) = clamp {
                    inj[i].kind = BusKind::PQ;
                    inj[i].q_gen = qlim;
                    switched = true;
                }
            }
            if !switched {
                return Some(sol);
            }
            start = Some(sol);
        }
        None
    }

    /// Reactive output per generator implied by a solution, Mvar.
    pub fn generator_q(&self, net: &Network, sol: &PowerFlowSolution<f64>) -> Vec<f64> {
        let mut out = vec![0.0; net.generators.len()];
        let injections = self.injections(net, false);
        for (i, b) in net.buses.iter().enumerate() {
            let gens: Vec<usize> = (0..net.generators.len())
                .filter(|&k| self.gen_in_service[k] && net.generators[k].bus == b.id)
                .collect();
            if gens.is_empty() {
                continue;
            }
            let inj = &injections[i];
            let q_bus = sol.q_inj[i] + inj.q_load * sol.v_mag[i].powf(inj.alpha_q);
            let total_cap: f64 = gens.iter().map(|&k| net.generators[k].q_max.abs().max(1e-9)).sum();
            for &k in &gens {
                out[k] = q_bus * net.generators[k].q_max.abs().max(1e-9) / total_cap;
            }
        }
        out
    }

    /// Advances limiter timers; returns true if any limiter latched.
    fn update_oels(&mut self, net: &Network, sol: &PowerFlowSolution<f64>, dt: f64) -> bool {
        if !net.generators.iter().any(|g| g.oel.is_some()) {
            return false;
        }
        let mut latched = false;
        let q = self.generator_q(net, sol);
        for (k, g) in net.generators.iter().enumerate() {
            let Some(oel) = &g.oel else { continue };
            if !self.gen_in_service[k] || self.oel_active[k] {
                continue;
            }
            if q[k] > oel.q_limit + 1e-9 {
                self.oel_timers[k] += dt;
                if self.oel_timers[k] >= oel.delay_s - TIME_EPS {
                    self.oel_active[k] = true;
                    latched = true;
                }
            } else {
                self.oel_timers[k] = 0.0;
            }
        }
        latched
    }

    fn update_ltcs(&mut self, net: &Network, sol: &PowerFlowSolution<f64>, dt: f64) {
        for (k, l) in net.ltcs.iter().enumerate() {
            let bus = net.bus_position(l.controlled_bus).unwrap();
            let dev = sol.v_mag[bus] - l.v_ref;
            if dev.abs() <= l.deadband {
                self.ltc_timers[k] = 0.0;
                self.ltc_in_sequence[k] = false;
                continue;
            }
            self.ltc_timers[k] += dt;
            let delay = if self.ltc_in_sequence[k] {
                l.subsequent_delay_s
            } else {
                l.initial_delay_s
            };
            if self.ltc_timers[k] >= delay - TIME_EPS {
                // Voltage low: lower the from-side ratio to raise the controlled side.
                let dir = if dev < 0.0 { -1.0 } else { 1.0 };
                let next = (self.taps[k] + dir * l.tap_step).clamp(l.tap_min, l.tap_max);
                if next != self.taps[k] {
                    self.taps[k] = next;
                    self.ybus_dirty = true;
                }
                self.ltc_timers[k] = 0.0;
                self.ltc_in_sequence[k] = true;
            }
        }
    }
}
