//! Rule-based undervoltage load shedding used as the reference control.
//!
//! Once per control step, if any transmission voltage is below the
//! threshold, a fixed block of load is shed, split equally over the
//! designated buses. Shedding is irreversible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShedConfig {
    pub v_threshold: f64,
    pub block_mw: f64,
    /// Cost per shed MW (charged as a negative reward).
    pub cost_per_mw: f64,
}

impl Default for ShedConfig {
    fn default() -> Self {
        Self {
            v_threshold: 0.90,
            block_mw: 100.0,
            cost_per_mw: 0.15,
        }
    }
}

impl ShedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.block_mw > 0.0) {
            return Err(Error::Config(format!("shedding block {} MW must be positive", self.block_mw)));
        }
        if !(self.v_threshold > 0.5 && self.v_threshold < 1.0) {
            return Err(Error::Config(format!(
                "shedding threshold {} pu must lie in (0.5, 1.0)",
                self.v_threshold
            )));
        }
        if !(self.cost_per_mw >= 0.0) {
            return Err(Error::Config("shedding cost must be non-negative".into()));
        }
        Ok(())
    }

    /// Shedding request for one control step given the lowest transmission
    /// voltage sampled at the step instant and the load still connected at
    /// each designated bus (MW).
    pub fn step(&self, min_vts: f64, sheddable_mw: &[f64]) -> Vec<f64> {
        if !(min_vts < self.v_threshold) || sheddable_mw.is_empty() {
            return vec![0.0; sheddable_mw.len()];
        }
        let share = self.block_mw / sheddable_mw.len() as f64;
        sheddable_mw.iter().map(|&avail| share.min(avail.max(0.0))).collect()
    }
}
