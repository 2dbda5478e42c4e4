//! Backward pass versus central differences for every shipped adapter.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSpec, CrossMode, Variant};
use crate::error::Result;
use crate::netmodel::{NetDims, ToyNetwork};
use crate::numkernel::{fd_gradient, relative_error, Matrix, RngStream, Tape};
use crate::seqmodel::ModalityId;

use super::task::{Sample, Task, TaskSpec};
use super::train::{batch_loss, gradients};

/// Hook applied to each analytic gradient before comparison.
pub type Corruption<'a> = &'a dyn Fn(&str, &mut Matrix<f64>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub k: usize,
    pub d: usize,
    pub depth: usize,
    pub classes: usize,
    pub rank: usize,
    pub samples: usize,
    pub step: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            k: 8,
            d: 8,
            depth: 2,
            classes: 4,
            rank: 2,
            samples: 2,
            step: 1e-5,
            threshold: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub adapter: String,
    pub parameter: String,
    pub rel_error: f64,
    pub passed: bool,
}

/// Every variant, with MokA expanded over all cross modes. Non-default
/// interaction weights are used so that they are exercised too.
pub fn gradcheck_specs(modalities: &[ModalityId], rank: usize) -> Vec<AdapterSpec> {
    let mut specs: Vec<AdapterSpec> = Variant::ALL
        .into_iter()
        .filter(|v| *v != Variant::Moka)
        .map(|v| AdapterSpec::new(v, rank))
        .collect();
    for mode in CrossMode::all_for(modalities) {
        let mut s = AdapterSpec::moka(rank, mode);
        for (i, m) in modalities.iter().filter(|m| !m.is_text).enumerate() {
            s = s.with_lambda(&m.name, 0.6 + 0.3 * i as f64);
        }
        s.extra_lambda = 0.7;
        s.text_lambda = 0.8;
        specs.push(s);
    }
    specs
}

/// Relative error per trainable tensor of `net` on the mean loss of `samples`.
pub fn gradcheck_network(
    net: &ToyNetwork<f64>,
    samples: &[Sample<f64>],
    step: f64,
    corrupt: Option<Corruption<'_>>,
) -> Result<Vec<(String, f64)>> {
    let (_, mut analytic, _) = gradients(net, samples)?;
    let names: Vec<String> = net.trainable_parameters().into_iter().map(|(n, _)| n).collect();
    if let Some(f) = corrupt {
        for (n, g) in names.iter().zip(analytic.iter_mut()) {
            f(n, g);
        }
    }
    let params: Vec<Matrix<f64>> = net.trainable_parameters().into_iter().map(|(_, m)| m.clone()).collect();
    let loss_at = |ps: &[Matrix<f64>]| {
        let mut probe = net.clone();
        for ((_, slot), p) in probe.trainable_parameters_mut().into_iter().zip(ps) {
            *slot = p.clone();
        }
        let mut tape = Tape::new();
        let vars = probe.bind(&mut tape);
        let (loss, _) = batch_loss(&probe, &mut tape, &vars, samples, None).expect("loss");
        tape.value(loss).get(0, 0)
    };
    let numeric = fd_gradient(loss_at, &params, step);
    Ok(names
        .into_iter()
        .zip(analytic.iter().zip(&numeric))
        .map(|(n, (a, b))| (n, relative_error(a, b)))
        .collect())
}

/// Randomized small network for `spec` over a three-modality task.
pub fn gradcheck_fixture(spec: &AdapterSpec, cfg: &GradcheckConfig) -> Result<(ToyNetwork<f64>, Vec<Sample<f64>>)> {
    let task = Task::new(TaskSpec {
        tokens: vec![cfg.classes.max(3), 2, 3],
        k: cfg.k,
        classes: cfg.classes,
        noise: 0.5,
        seed: cfg.seed,
        ..TaskSpec::default()
    })?;
    let dims = NetDims {
        k: cfg.k,
        d: cfg.d,
        depth: cfg.depth,
        classes: cfg.classes,
        ..NetDims::default()
    };
    let mut net = ToyNetwork::new(
        dims,
        task.modalities(),
        Some(&spec.clone().with_seed(cfg.seed)),
        cfg.seed,
    )?;
    let mut rng = RngStream::new(cfg.seed, 5);
    for (_, m) in net.trainable_parameters_mut() {
        *m = rng.normal_matrix(m.rows(), m.cols(), 0.5);
    }
    let samples = task.samples(cfg.samples, &mut rng);
    Ok((net, samples))
}

/// Runs the check for every spec of `gradcheck_specs`.
pub fn gradcheck_suite(cfg: &GradcheckConfig, corrupt: Option<Corruption<'_>>) -> Result<Vec<GradcheckRow>> {
    let probe = Task::new(TaskSpec::default())?;
    let mut rows = Vec::new();
    for spec in gradcheck_specs(probe.modalities(), cfg.rank) {
        let (net, samples) = gradcheck_fixture(&spec, cfg)?;
        for (parameter, err) in gradcheck_network(&net, &samples, cfg.step, corrupt)? {
            rows.push(GradcheckRow {
                adapter: spec.label(),
                parameter,
                rel_error: err,
                passed: err < cfg.threshold,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(spec: AdapterSpec) -> Vec<(String, f64)> {
        let cfg = GradcheckConfig::default();
        let (net, samples) = gradcheck_fixture(&spec, &cfg).unwrap();
        gradcheck_network(&net, &samples, cfg.step, None).unwrap()
    }

    #[test]
    fn lora_passes() {
        for (n, e) in check(AdapterSpec::new(Variant::Lora, 2)) {
            assert!(e < 1e-4, "{n}: {e}");
        }
    }

    #[test]
    fn moka_task_centric_passes() {
        for (n, e) in check(AdapterSpec::moka(2, CrossMode::TaskCentric)) {
            assert!(e < 1e-4, "{n}: {e}");
        }
    }

    #[test]
    fn doubled_gradient_is_caught() {
        let cfg = GradcheckConfig::default();
        let (net, samples) = gradcheck_fixture(&AdapterSpec::new(Variant::Lora, 2), &cfg).unwrap();
        let double = |name: &str, g: &mut Matrix<f64>| {
            if name == "layers.0.adapter.b" {
                *g = g.scale(2.0);
            }
        };
        let rows = gradcheck_network(&net, &samples, cfg.step, Some(&double)).unwrap();
        let bad = rows.iter().find(|(n, _)| n == "layers.0.adapter.b").unwrap();
        assert!(bad.1 > 0.3);
        assert!(rows
            .iter()
            .filter(|(n, _)| n != "layers.0.adapter.b")
            .all(|(_, e)| *e < 1e-4));
    }
}
