use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{EngineConfig, Method};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Free-energy surrogate for the variational engines; Monte Carlo
    /// estimate of the complete-data log-likelihood for MCEM.
    pub objective: f64,
    /// Wall-clock time of the engine step, excluding observers.
    pub elapsed_ms: f64,
    /// Relative Frobenius change of the speech power estimate.
    pub rel_change: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub si_sdr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhanceReport {
    pub method: Method,
    pub config: EngineConfig,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_si_sdr: Option<f64>,
}

impl EnhanceReport {
    pub(crate) fn new(config: &EngineConfig) -> Self {
        Self {
            method: config.method,
            config: config.clone(),
            iterations: Vec::new(),
            converged: false,
            final_si_sdr: None,
        }
    }

    pub fn iterations_used(&self) -> usize {
        self.iterations.len()
    }

    pub fn total_ms(&self) -> f64 {
        self.iterations.iter().map(|r| r.elapsed_ms).sum()
    }

    pub fn mean_ms_per_iter(&self) -> f64 {
        if self.iterations.is_empty() {
            0.0
        } else {
            self.total_ms() / self.iterations.len() as f64
        }
    }

    /// Per-iteration SI-SDR values, when every iteration recorded one.
    pub fn sdr_trace(&self) -> Option<Vec<f64>> {
        self.iterations.iter().map(|r| r.si_sdr).collect()
    }

    /// One JSON object per iteration, newline-terminated.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            method: Method,
            #[serde(flatten)]
            record: &'a IterationRecord,
        }
        for record in &self.iterations {
            serde_json::to_writer(
                &mut out,
                &Line {
                    method: self.method,
                    record,
                },
            )?;
            out.write_all(b"\n")
                .map_err(|e| crate::error::Error::io("<report>", e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_has_one_line_per_iteration() {
        let mut r = EnhanceReport::new(&EngineConfig::default());
        for i in 1..=3 {
            r.iterations.push(IterationRecord {
                iteration: i,
                objective: -(i as f64),
                elapsed_ms: 0.5,
                rel_change: 0.1,
                si_sdr: if i == 2 { Some(4.0) } else { None },
            });
        }
        let mut buf = Vec::new();
        r.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["method"], "vem");
        assert_eq!(v["iteration"], 2);
        assert_eq!(v["si_sdr"], 4.0);
        assert!(serde_json::from_str::<serde_json::Value>(lines[0]).unwrap().get("si_sdr").is_none());
        assert_eq!(r.total_ms(), 1.5);
        assert!(r.sdr_trace().is_none());
    }
}
