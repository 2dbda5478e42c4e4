//! Fixtures shared by the adapter benchmarks.

use moka_core::adapters::{Adapter, AdapterSpec, CrossMode, Variant};
use moka_core::harness::RunConfig;
use moka_core::training::Task;
use moka_core::{SegmentedSequence, ToyNetwork};

/// Every variant, with MokA in each single-pair cross mode.
pub fn bench_specs(rank: usize) -> Vec<AdapterSpec> {
    let mut out: Vec<AdapterSpec> = Variant::ALL
        .into_iter()
        .filter(|v| *v != Variant::Moka)
        .map(|v| AdapterSpec::new(v, rank))
        .collect();
    for mode in [
        CrossMode::None,
        CrossMode::TaskCentric,
        CrossMode::ReversedQuery,
        CrossMode::Naive,
        CrossMode::Projected,
    ] {
        out.push(AdapterSpec::moka(rank, mode));
    }
    out
}

/// One adapter of width `k = d` with random weights, and a sequence of the
/// default task layout.
pub fn adapter_fixture(spec: &AdapterSpec, width: usize) -> (Adapter<f32>, SegmentedSequence<f32>) {
    let mut cfg = RunConfig::default();
    cfg.task.k = width;
    let task = Task::new(cfg.task).expect("default task");
    let mut adapter = Adapter::init(spec, task.modalities(), width, width, 0).expect("valid spec");
    adapter.randomize(&mut moka_core::RngStream::new(1, 0), 0.1);
    let seq = task.held_out::<f32>(1).remove(0).seq;
    (adapter, seq)
}

/// A default-config network with the given adapter, and one held-out sample.
pub fn network_fixture(spec: &AdapterSpec) -> (ToyNetwork<f32>, SegmentedSequence<f32>) {
    let cfg = RunConfig::default();
    let task = Task::new(cfg.task.clone()).expect("default task");
    let net = ToyNetwork::new(cfg.network, task.modalities(), Some(spec), 0).expect("valid network");
    (net, task.held_out::<f32>(1).remove(0).seq)
}
