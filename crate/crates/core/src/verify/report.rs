use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Evidence attached to a check: the permutation and input that produced
/// `deviation`, or a description of the failing case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub description: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<Vec<Vec<f64>>>,
    pub deviation: f64,
}

impl Witness {
    pub fn new(description: impl Into<String>, deviation: f64) -> Self {
        Self {
            description: description.into(),
            permutation: None,
            input: None,
            deviation,
        }
    }

    pub fn with_permutation(mut self, perm: &[usize]) -> Self {
        self.permutation = Some(perm.to_vec());
        self
    }

    pub fn with_input(mut self, x: &Tensor) -> Self {
        self.input = Some((0..x.rows()).map(|i| x.row(i).to_vec()).collect());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub check_name: String,
    pub trials: usize,
    pub passed: bool,
    /// Trials that violated the property.
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    pub tolerances: BTreeMap<String, f64>,
    /// Summary statistics of what was measured.
    pub observed: BTreeMap<String, f64>,
    pub seed: u64,
    pub detail: String,
}

impl VerifyReport {
    pub fn new(check_name: &str, seed: u64) -> Self {
        Self {
            check_name: check_name.to_string(),
            trials: 0,
            passed: false,
            failures: 0,
            witness: None,
            tolerances: BTreeMap::new(),
            observed: BTreeMap::new(),
            seed,
            detail: String::new(),
        }
    }

    pub fn tolerance(mut self, name: &str, value: f64) -> Self {
        self.tolerances.insert(name.to_string(), value);
        self
    }

    pub fn observe(&mut self, name: &str, value: f64) {
        self.observed.insert(name.to_string(), value);
    }

    /// One line for terminals: `PASS equivalence 100/100 …`.
    pub fn summary_line(&self) -> String {
        format!(
            "{} {} {}/{} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.check_name,
            self.trials - self.failures.min(self.trials),
            self.trials,
            self.detail
        )
    }
}
