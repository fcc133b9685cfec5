//! Run flags and the serializable summary written by every command.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Conditions under which a run completes but its result is not certified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Flag {
    /// The horizon is at or below the geometric time threshold.
    NonAdmissible,
    /// CG stopped at its iteration cap before the gradient tolerance.
    ConvergenceNotReached,
    /// Every stage of the penalty schedule left a terminal norm above kappa.
    TargetNotReached,
    /// The outer iteration on p stopped at its iteration cap.
    FixedPointNotReached,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::NonAdmissible => "NON_ADMISSIBLE",
            Flag::ConvergenceNotReached => "CONVERGENCE_NOT_REACHED",
            Flag::TargetNotReached => "TARGET_NOT_REACHED",
            Flag::FixedPointNotReached => "FIXED_POINT_NOT_REACHED",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Flag::NonAdmissible => "control horizon does not exceed the geometric threshold",
            Flag::ConvergenceNotReached => "conjugate gradients hit max_cg_iters",
            Flag::TargetNotReached => "terminal norms above kappa after the last penalty stage",
            Flag::FixedPointNotReached => "fixed-point loop hit max_outer_iters",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Adds `flag` unless already present, keeping the list sorted.
pub fn push_flag(flags: &mut Vec<Flag>, flag: Flag) {
    if let Err(pos) = flags.binary_search(&flag) {
        flags.insert(pos, flag);
    }
}

/// Summary of one command. Scalars are keyed by name in a sorted map so the
/// serialized form is stable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub command: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub flags: Vec<Flag>,
    pub scalars: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub series: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

impl SolveReport {
    pub fn new(command: &str, scenario_hash: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            scenario_hash: scenario_hash.to_string(),
            seed,
            ..Self::default()
        }
    }

    pub fn scalar(&mut self, key: &str, value: f64) -> &mut Self {
        self.scalars.insert(key.to_string(), value);
        self
    }

    pub fn series(&mut self, key: &str, values: Vec<f64>) -> &mut Self {
        self.series.insert(key.to_string(), values);
        self
    }

    pub fn note(&mut self, key: &str, value: impl Into<String>) -> &mut Self {
        self.notes.insert(key.to_string(), value.into());
        self
    }

    pub fn flag_all(&mut self, flags: &[Flag]) -> &mut Self {
        for &f in flags {
            push_flag(&mut self.flags, f);
        }
        self
    }

    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }

    /// Pretty JSON; non-finite scalars become `null`.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_serialize_in_screaming_case() {
        let json = serde_json::to_string(&Flag::FixedPointNotReached).unwrap();
        assert_eq!(json, "\"FIXED_POINT_NOT_REACHED\"");
        assert_eq!(Flag::NonAdmissible.to_string(), "NON_ADMISSIBLE");
    }

    #[test]
    fn push_flag_dedups_and_sorts() {
        let mut v = Vec::new();
        push_flag(&mut v, Flag::TargetNotReached);
        push_flag(&mut v, Flag::NonAdmissible);
        push_flag(&mut v, Flag::TargetNotReached);
        assert_eq!(v, vec![Flag::NonAdmissible, Flag::TargetNotReached]);
    }

    #[test]
    fn report_json_is_stable() {
        let mut r = SolveReport::new("control", "abc", 7);
        r.scalar("z", 1.0).scalar("a", 2.0).flag_all(&[Flag::NonAdmissible]);
        let a = r.to_json();
        let back: SolveReport = serde_json::from_str(&a).unwrap();
        assert_eq!(back, r);
        assert!(a.find("\"a\"").unwrap() < a.find("\"z\"").unwrap());
    }
}
