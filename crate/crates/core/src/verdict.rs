//! Uniform pass/fail records emitted by every probe.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    /// SHA-256 of the canonical JSON of the probe inputs.
    pub inputs_digest: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Full probe report.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub detail: serde_json::Value,
}

pub fn digest_of<T: Serialize + ?Sized>(inputs: &T) -> Result<String> {
    let bytes = serde_json::to_vec(inputs)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Verdict {
    pub fn new<I: Serialize + ?Sized, D: Serialize + ?Sized>(
        check: &str,
        inputs: &I,
        statistic: f64,
        tolerance: f64,
        pass: bool,
        detail: &D,
    ) -> Result<Self> {
        Ok(Self {
            check: check.to_string(),
            inputs_digest: digest_of(inputs)?,
            statistic,
            tolerance,
            pass,
            detail: serde_json::to_value(detail)?,
        })
    }

    /// One line: `PASS|FAIL check statistic=… tolerance=…`.
    pub fn summary(&self) -> String {
        format!(
            "{} {} statistic={:.6e} tolerance={:.6e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.check,
            self.statistic,
            self.tolerance
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_input_sensitive() {
        let a = digest_of(&("m2", 1.0, [1, 2])).unwrap();
        assert_eq!(a, digest_of(&("m2", 1.0, [1, 2])).unwrap());
        assert_ne!(a, digest_of(&("m2", 1.5, [1, 2])).unwrap());
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn json_round_trip() {
        let v = Verdict::new("ito", &(0.01, 7u64), 0.02, 0.04, true, &serde_json::json!({"h": 0.01})).unwrap();
        let back: Verdict = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(v.summary().starts_with("PASS ito"));
    }
}
