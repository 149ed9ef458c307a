//! Static grid description, the `.grid` file format and built-in cases.
//!
//! A `.grid` file is a JSON document:
//!
//! ```json
//! { "schema": "grid-v1", "mva_base": 100.0,
//!   "curtailment_buses": [4, 5],
//!   "buses": [...], "branches": [...], "generators": [...],
//!   "ltcs": [...], "load_models": [...] }
//! ```
//!
//! Powers are in MW/Mvar, impedances in per-unit on `mva_base`, voltages in
//! per-unit and times in seconds. Element order in each array is significant:
//! it fixes the layout of observations and trajectory exports.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "grid-v1";

const LTVS5_SOURCE: &str = include_str!("../cases/ltvs5.grid");

/// Names accepted by [`builtin_case`].
pub const BUILTIN_CASES: &[&str] = &["ltvs5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    PV,
    PQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    pub base_kv: f64,
    /// Voltage magnitude setpoint, per-unit. Required for Slack and PV buses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_setpoint: Option<f64>,
    /// Participates in the transmission-voltage stability check.
    pub is_transmission: bool,
    pub p_load: f64,
    pub q_load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub id: u32,
    pub from_bus: u32,
    pub to_bus: u32,
    pub r: f64,
    pub x: f64,
    pub b_shunt: f64,
    pub tap_ratio: f64,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OelConfig {
    /// Reactive output ceiling enforced once the limiter acts, Mvar.
    pub q_limit: f64,
    pub delay_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub id: u32,
    pub bus: u32,
    pub p_gen: f64,
    pub q_min: f64,
    pub q_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oel: Option<OelConfig>,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtcConfig {
    /// Branch id of the transformer; the tap sits on its from-side.
    pub branch: u32,
    pub controlled_bus: u32,
    pub v_ref: f64,
    pub deadband: f64,
    pub tap_step: f64,
    pub tap_min: f64,
    pub tap_max: f64,
    pub initial_delay_s: f64,
    pub subsequent_delay_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadModel {
    pub bus: u32,
    pub alpha_p: f64,
    pub alpha_q: f64,
    /// First-order recovery time constant; 0 disables recovery.
    pub recovery_time_s: f64,
    pub restores_to_nominal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Network {
    pub schema: String,
    pub mva_base: f64,
    /// Buses whose load may be curtailed, in dispatch/observation order.
    #[serde(default)]
    pub curtailment_buses: Vec<u32>,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub generators: Vec<Generator>,
    #[serde(default)]
    pub ltcs: Vec<LtcConfig>,
    #[serde(default)]
    pub load_models: Vec<LoadModel>,
}

/// Reads and validates a `.grid` file.
pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Network::from_grid_str(&text, &path.display().to_string())
}

/// Returns a built-in test case without touching the filesystem.
pub fn builtin_case(name: &str) -> Result<Network> {
    match name {
        "ltvs5" => Network::from_grid_str(LTVS5_SOURCE, "builtin:ltvs5"),
        other => Err(Error::UnknownCase(other.to_string())),
    }
}

/// Source text of a built-in case, byte-identical to the shipped file.
pub fn builtin_source(name: &str) -> Result<&'static str> {
    match name {
        "ltvs5" => Ok(LTVS5_SOURCE),
        other => Err(Error::UnknownCase(other.to_string())),
    }
}

impl Network {
    pub fn from_grid_str(text: &str, context: &str) -> Result<Self> {
        let net: Network = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: context.to_string(),
            message: e.to_string(),
        })?;
        net.validate()?;
        Ok(net)
    }

    pub fn to_grid_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("network serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_grid_string()).map_err(|e| Error::io(path, e))
    }

    pub fn bus_position(&self, id: u32) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn branch_position(&self, id: u32) -> Option<usize> {
        self.branches.iter().position(|b| b.id == id)
    }

    pub fn generator_position(&self, id: u32) -> Option<usize> {
        self.generators.iter().position(|g| g.id == id)
    }

    pub fn slack_position(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated network has a slack bus")
    }

    /// Positions of buses flagged `is_transmission`, in declaration order.
    pub fn transmission_positions(&self) -> Vec<usize> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.is_transmission)
            .map(|(i, _)| i)
            .collect()
    }

    /// Length of the raw observation vector: one voltage per bus, (P, Q) per
    /// branch and (price, remaining capacity) per curtailment bus.
    pub fn observation_len(&self) -> usize {
        self.buses.len() + 2 * self.branches.len() + 2 * self.curtailment_buses.len()
    }

    /// Checks every structural invariant. Called by all constructors.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));

        if self.schema != SCHEMA_VERSION {
            return fail(format!(
                "schema {:?} is not supported (expected {SCHEMA_VERSION:?})",
                self.schema
            ));
        }
        if !(self.mva_base > 0.0) {
            return fail(format!("mva_base must be positive, got {}", self.mva_base));
        }
        if self.buses.is_empty() {
            return fail("network has no buses".into());
        }

        let mut bus_ids = BTreeSet::new();
        for b in &self.buses {
            if !bus_ids.insert(b.id) {
                return fail(format!("duplicate bus id {}", b.id));
            }
            if !(b.base_kv > 0.0) {
                return fail(format!("bus {}: base_kv must be positive", b.id));
            }
            match (b.kind, b.v_setpoint) {
                (BusKind::PQ, _) => {}
                (_, None) => return fail(format!("bus {}: missing v_setpoint", b.id)),
                (_, Some(v)) if !(0.8..=1.2).contains(&v) => {
                    return fail(format!("bus {}: v_setpoint {v} outside [0.8, 1.2]", b.id))
                }
                _ => {}
            }
            if !b.p_load.is_finite() || !b.q_load.is_finite() {
                return fail(format!("bus {}: non-finite load", b.id));
            }
        }
        match self.buses.iter().filter(|b| b.kind == BusKind::Slack).count() {
            0 => return fail("no slack bus".into()),
            1 => {}
            _ => return fail("multiple slack buses".into()),
        }

        let mut branch_ids = BTreeSet::new();
        for br in &self.branches {
            if !branch_ids.insert(br.id) {
                return fail(format!("duplicate branch id {}", br.id));
            }
            for end in [br.from_bus, br.to_bus] {
                if !bus_ids.contains(&end) {
                    return fail(format!("branch {} references missing bus {end}", br.id));
                }
            }
            if br.from_bus == br.to_bus {
                return fail(format!("branch {} connects bus {} to itself", br.id, br.from_bus));
            }
            if br.x == 0.0 || !br.x.is_finite() {
                return fail(format!("branch {}: reactance must be nonzero", br.id));
            }
            if !(0.8..=1.2).contains(&br.tap_ratio) {
                return fail(format!("branch {}: tap_ratio {} outside [0.8, 1.2]", br.id, br.tap_ratio));
            }
        }

        let mut gen_ids = BTreeSet::new();
        for g in &self.generators {
            if !gen_ids.insert(g.id) {
                return fail(format!("duplicate generator id {}", g.id));
            }
            if !bus_ids.contains(&g.bus) {
                return fail(format!("generator {} references missing bus {}", g.id, g.bus));
            }
            if g.q_min > g.q_max {
                return fail(format!("generator {}: q_min > q_max", g.id));
            }
            if let Some(oel) = &g.oel {
                if oel.delay_s < 0.0 {
                    return fail(format!("generator {}: OEL delay must be >= 0", g.id));
                }
                if oel.q_limit > g.q_max {
                    return fail(format!("generator {}: OEL q_limit exceeds q_max", g.id));
                }
            }
        }
        for b in &self.buses {
            if b.kind == BusKind::PV
                && !self.generators.iter().any(|g| g.bus == b.id && g.in_service)
            {
                return fail(format!("PV bus {} has no in-service generator", b.id));
            }
        }

        let mut ltc_branches = BTreeSet::new();
        for l in &self.ltcs {
            if !branch_ids.contains(&l.branch) {
                return fail(format!("LTC references missing branch {}", l.branch));
            }
            if !ltc_branches.insert(l.branch) {
                return fail(format!("branch {} has more than one LTC", l.branch));
            }
            if !bus_ids.contains(&l.controlled_bus) {
                return fail(format!("LTC references missing bus {}", l.controlled_bus));
            }
            if !(l.deadband > l.tap_step / 2.0) {
                return fail(format!("LTC on branch {}: deadband must exceed tap_step/2", l.branch));
            }
            if !(l.tap_min < l.tap_max) {
                return fail(format!("LTC on branch {}: tap_min must be below tap_max", l.branch));
            }
            if !(l.initial_delay_s > 0.0 && l.subsequent_delay_s > 0.0) {
                return fail(format!("LTC on branch {}: delays must be positive", l.branch));
            }
            let br = &self.branches[self.branch_position(l.branch).unwrap()];
            if !(l.tap_min..=l.tap_max).contains(&br.tap_ratio) {
                return fail(format!("LTC on branch {}: initial tap outside its range", l.branch));
            }
        }

        let mut load_buses = BTreeSet::new();
        for m in &self.load_models {
            if !bus_ids.contains(&m.bus) {
                return fail(format!("load model references missing bus {}", m.bus));
            }
            if !load_buses.insert(m.bus) {
                return fail(format!("bus {} has more than one load model", m.bus));
            }
            if m.alpha_p < 0.0 || m.alpha_q < 0.0 {
                return fail(format!("load model at bus {}: negative voltage exponent", m.bus));
            }
            if m.recovery_time_s < 0.0 {
                return fail(format!("load model at bus {}: negative recovery time", m.bus));
            }
        }

        let mut seen = BTreeSet::new();
        for &c in &self.curtailment_buses {
            if !bus_ids.contains(&c) {
                return fail(format!("curtailment bus {c} does not exist"));
            }
            if !seen.insert(c) {
                return fail(format!("curtailment bus {c} listed twice"));
            }
        }

        self.check_connected()
    }

    fn check_connected(&self) -> Result<()> {
        let pos: HashMap<u32, usize> = self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in self.branches.iter().filter(|b| b.in_service) {
            let (f, t) = (pos[&br.from_bus], pos[&br.to_bus]);
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(Error::Validation(format!(
                "network is not connected: bus {} is isolated",
                self.buses[i].id
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ltvs5_value() -> serde_json::Value {
        serde_json::from_str(LTVS5_SOURCE).unwrap()
    }

    fn parse(v: &serde_json::Value) -> Result<Network> {
        Network::from_grid_str(&v.to_string(), "test")
    }

    #[test]
    fn ltvs5_shape() {
        let net = builtin_case("ltvs5").unwrap();
        assert_eq!(net.buses.len(), 5);
        let count = |k| net.buses.iter().filter(|b| b.kind == k).count();
        assert_eq!((count(BusKind::Slack), count(BusKind::PV), count(BusKind::PQ)), (1, 1, 3));
        assert_eq!(net.branches.len(), 6);
        assert_eq!(net.curtailment_buses.len(), 2);
        assert_eq!(net.observation_len(), 21);
    }

    #[test]
    fn unknown_cases_rejected() {
        assert!(matches!(builtin_case("nordic32"), Err(Error::UnknownCase(_))));
        assert!(matches!(builtin_case(""), Err(Error::UnknownCase(_))));
    }

    #[test]
    fn two_slack_buses_rejected() {
        let mut v = ltvs5_value();
        v["buses"][1]["kind"] = "Slack".into();
        v["buses"][1]["v_setpoint"] = 1.0.into();
        let err = parse(&v).unwrap_err();
        assert!(err.to_string().contains("multiple slack buses"), "{err}");
    }

    #[test]
    fn dangling_branch_rejected() {
        let mut v = ltvs5_value();
        v["branches"][0]["to_bus"] = 99.into();
        let err = parse(&v).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("missing bus 99"), "{err}");
    }

    #[test]
    fn hunting_ltc_rejected() {
        let mut v = ltvs5_value();
        v["ltcs"][0]["deadband"] = 0.004.into();
        let err = parse(&v).unwrap_err();
        assert!(err.to_string().contains("deadband"), "{err}");
    }

    #[test]
    fn zero_reactance_and_self_loop_rejected() {
        let mut v = ltvs5_value();
        v["branches"][2]["x"] = 0.0.into();
        assert!(parse(&v).is_err());
        let mut v = ltvs5_value();
        v["branches"][2]["to_bus"] = v["branches"][2]["from_bus"].clone();
        assert!(parse(&v).is_err());
    }

    #[test]
    fn schema_version_required() {
        let mut v = ltvs5_value();
        v["schema"] = "grid-v0".into();
        assert!(parse(&v).is_err());
        v.as_object_mut().unwrap().remove("schema");
        let err = parse(&v).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn parse_error_carries_position() {
        let err = Network::from_grid_str("{\n \"schema\": \"grid-v1\",\n \"mva_base\": x }", "f.grid")
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("f.grid") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn disconnected_network_rejected() {
        let mut v = ltvs5_value();
        for i in 0..2 {
            v["branches"][i]["in_service"] = false.into();
        }
        let err = parse(&v).unwrap_err();
        assert!(err.to_string().contains("not connected"), "{err}");
    }

    #[test]
    fn oel_limit_above_qmax_rejected() {
        let mut v = ltvs5_value();
        v["generators"][0]["oel"]["q_limit"] = 1.0e4.into();
        assert!(parse(&v).is_err());
    }

    #[test]
    fn serialize_round_trip_is_structural_identity() {
        let net = builtin_case("ltvs5").unwrap();
        let again = Network::from_grid_str(&net.to_grid_string(), "rt").unwrap();
        assert_eq!(net, again);
    }

    #[test]
    fn shipped_file_matches_builtin() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("cases/ltvs5.grid");
        let on_disk = std::fs::read_to_string(&path).unwrap();
        assert_eq!(on_disk, builtin_source("ltvs5").unwrap());
        assert_eq!(load_network(&path).unwrap(), builtin_case("ltvs5").unwrap());
    }
}
