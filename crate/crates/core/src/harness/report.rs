use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::RunConfig;
use crate::training::MetricRow;

const REFERENCES: &str = include_str!("../../assets/references.json");

/// Published reference numbers shipped with the crate.
pub fn references() -> serde_json::Value {
    serde_json::from_str(REFERENCES).expect("embedded references parse")
}

/// One section of the references, e.g. `ablation` or `efficiency`.
pub fn reference_section(name: &str) -> serde_json::Value {
    references().get(name).cloned().unwrap_or(serde_json::Value::Null)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_eval_loss: f64,
    /// Mean train loss over the first and last 20 updates.
    pub train_loss_start: f64,
    pub train_loss_end: f64,
    pub frozen_checksum: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub num_a: usize,
    pub num_b: usize,
    /// Trainable entries of the adapters alone.
    pub adapter_params: usize,
    /// Adapters plus head.
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub trainable_fraction: f64,
    /// Adapter FLOPs of one sequence, summed over layers.
    pub adapter_flops: u64,
    pub lora_adapter_flops: u64,
    pub flops_ratio_vs_lora: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub adapter: String,
    pub seeds: Vec<SeedResult>,
    pub mean_accuracy: f64,
    pub stderr_accuracy: f64,
    pub counts: Counts,
}

/// Mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV text of serializable rows.
pub fn csv_string<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn references_embedded() {
        let r = references();
        assert_eq!(r["efficiency"]["flops_ratio"]["vl"], 1.009);
        assert_eq!(r["efficiency"]["flops_ratio"]["avl"], 1.021);
        assert_eq!(r["matrix_counts"]["rows"][5]["num_b"], "1");
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[0.5, 0.5, 0.5]), (0.5, 0.0));
        let (m, s) = mean_stderr(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn metrics_csv_header() {
        let rows = vec![MetricRow {
            step: 0,
            split: "eval".into(),
            loss: 2.0,
            accuracy: 0.125,
            lr: 0.001,
        }];
        assert_eq!(
            csv_string(&rows).unwrap(),
            "step,split,loss,accuracy,lr\n0,eval,2.0,0.125,0.001\n"
        );
    }
}
