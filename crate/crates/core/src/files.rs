//! File schemas shared by the CLI, the fixtures, and the tests.
//!
//! All payload files are deterministic: serialization order is fixed by
//! struct field order and canonical polynomial term order, and no timestamps
//! or durations appear in them. Run metadata (wall time, command line) goes
//! to a separate `.meta.json` file next to each output.

use serde::{Deserialize, Serialize};

use crate::graph::SwitchingSchedule;
use crate::poly::Polynomial;

/// A synthesis/verification/simulation problem description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemFile {
    /// 1 for single-integrator agents, 2 for the second-order error dynamics.
    pub order: u8,
    /// Number of state variables per agent.
    pub vars: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Polynomial>,
    /// First-order coupling function (one entry per state variable).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<Vec<Polynomial>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h1: Option<Vec<Polynomial>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h2: Option<Vec<Polynomial>>,
    /// Monomial entries of the q-hat vector, as exponent tuples.
    pub qhat: Vec<Vec<u32>>,
    /// Even exponent of the coordinate lower bound in the PSD condition;
    /// defaults to twice the maximum q-hat entry degree.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent_2m: Option<u32>,
    /// Per-coefficient tolerance for the gradient-symmetry identity check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a42_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<SwitchingSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader_position: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader_velocity: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_positions: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_velocities: Option<Vec<Vec<f64>>>,
}

impl ProblemFile {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("problem serialization cannot fail")
    }
}
