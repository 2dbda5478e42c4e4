use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{count_matrices, flop_count, param_count, Adapter, AdapterSpec, CrossMode, Variant};
use crate::error::{Error, Result};
use crate::netmodel::ToyNetwork;
use crate::numkernel::{Matrix, Precision, Scalar, Tape};
use crate::seqmodel::{make_routing_mask, modality_set, ModalityId, ModalitySpan, RoutingMask};
use crate::training::{
    evaluate, gradcheck_suite, smoothed_ends, train, Evaluation, GradcheckConfig, GradcheckRow, Sample, Task,
    TrainOutcome,
};

use super::checkpoint::{inspect, load_checkpoint, save_checkpoint};
use super::config::RunConfig;
use super::report::{
    mean_stderr, reference_section, write_csv, write_json, write_metrics, Counts, RunReport, SeedResult,
};

/// Updates averaged at each end of the loss curve.
const LOSS_WINDOW: usize = 20;

fn task_of(cfg: &RunConfig) -> Result<Task> {
    cfg.validate()?;
    Task::new(cfg.task.clone())
}

/// Fresh network of a run: frozen weights from the task seed, adapters from `seed`.
pub fn build_network<T: Scalar>(cfg: &RunConfig, seed: u64) -> Result<(Task, ToyNetwork<T>)> {
    let task = task_of(cfg)?;
    let net = ToyNetwork::new(
        cfg.network,
        task.modalities(),
        Some(&cfg.adapter_spec(seed)),
        cfg.task.seed,
    )?;
    Ok((task, net))
}

/// Contiguous spans with the task's token counts.
pub fn spans_for(modalities: &[ModalityId], tokens: &[usize]) -> Vec<ModalitySpan> {
    let mut start = 0;
    modalities
        .iter()
        .zip(tokens)
        .map(|(m, &len)| {
            let s = ModalitySpan {
                modality: m.clone(),
                start,
                len,
            };
            start += len;
            s
        })
        .collect()
}

fn analytic_flops(spec: &AdapterSpec, cfg: &RunConfig, spans: &[ModalitySpan]) -> Result<u64> {
    let mut total = 0;
    for l in 0..cfg.network.depth {
        total += flop_count(spec, cfg.network.d, cfg.network.layer_in(l), spans)?;
    }
    Ok(total)
}

/// Operation-counter FLOPs of every adapter `Δ` for one sequence.
pub fn instrumented_flops<T: Scalar>(net: &ToyNetwork<T>, spans: &[ModalitySpan]) -> Result<u64> {
    let len = spans.iter().map(|s| s.len).sum();
    let mut total = 0;
    for b in net.blocks() {
        if let Some(a) = &b.adapter {
            total += adapter_flops(a, len, spans)?;
        }
    }
    Ok(total)
}

fn adapter_flops<T: Scalar>(a: &Adapter<T>, len: usize, spans: &[ModalitySpan]) -> Result<u64> {
    let mut tape = Tape::new();
    let vars = a.bind(&mut tape);
    let x = tape.constant(Matrix::zeros(len, a.in_dim()));
    let start = tape.flops();
    a.delta(&mut tape, &vars, x, spans, None, None)?;
    Ok(tape.flops() - start)
}

/// Matrix, parameter and FLOP counts of a config.
pub fn counts(cfg: &RunConfig) -> Result<Counts> {
    let (task, net) = build_network::<f64>(cfg, 0)?;
    let spans = spans_for(task.modalities(), &cfg.task.tokens);
    let spec = cfg.adapter_spec(0);
    let n = task.modalities().len();
    let (num_a, num_b) = count_matrices(&spec, n);
    let head = cfg.network.classes * (cfg.network.d + 1);
    let trainable = net.num_trainable();
    let frozen = net.num_frozen();
    let adapter_flops = analytic_flops(&spec, cfg, &spans)?;
    let lora_flops = analytic_flops(&AdapterSpec::new(Variant::Lora, cfg.rank), cfg, &spans)?;
    Ok(Counts {
        num_a,
        num_b,
        adapter_params: trainable - head,
        trainable_params: trainable,
        frozen_params: frozen,
        trainable_fraction: trainable as f64 / (trainable + frozen) as f64,
        adapter_flops,
        lora_adapter_flops: lora_flops,
        flops_ratio_vs_lora: adapter_flops as f64 / lora_flops as f64,
    })
}

/// A trained network with its training record.
pub struct TrainedRun<T: Scalar> {
    pub task: Task,
    pub net: ToyNetwork<T>,
    pub outcome: TrainOutcome,
    pub result: SeedResult,
}

pub fn train_network<T: Scalar>(cfg: &RunConfig, seed: u64) -> Result<TrainedRun<T>> {
    let (task, mut net) = build_network::<T>(cfg, seed)?;
    let started = Instant::now();
    let outcome = train(&mut net, &task, &cfg.train_config(), seed)?;
    let (start, end) = smoothed_ends(&outcome.train_losses, LOSS_WINDOW);
    let result = SeedResult {
        seed,
        initial_accuracy: outcome.initial.accuracy,
        final_accuracy: outcome.last.accuracy,
        final_eval_loss: outcome.last.loss,
        train_loss_start: start,
        train_loss_end: end,
        frozen_checksum: outcome.frozen_checksum,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun {
        task,
        net,
        outcome,
        result,
    })
}

/// Directory of one seed of a run below `root`.
pub fn seed_dir(root: &Path, cfg: &RunConfig, seed: u64) -> PathBuf {
    root.join(cfg.run_name()).join(format!("seed-{seed}"))
}

fn write_seed<T: Scalar>(dir: &Path, cfg: &RunConfig, run: &TrainedRun<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut echo = cfg.clone();
    echo.seeds = vec![run.result.seed];
    std::fs::write(dir.join("config.json"), echo.to_json())?;
    save_checkpoint(&dir.join("model.moka"), &run.net.named_tensors())?;
    write_metrics(&dir.join("metrics.csv"), &run.outcome.metrics)?;
    write_json(&dir.join("report.json"), &run.result)
}

fn train_seed_typed<T: Scalar>(cfg: &RunConfig, seed: u64, root: Option<&Path>) -> Result<SeedResult> {
    let run = train_network::<T>(cfg, seed)?;
    if let Some(root) = root {
        write_seed(&seed_dir(root, cfg, seed), cfg, &run)?;
    }
    Ok(run.result)
}

/// Trains one seed; with `root`, writes config, checkpoint, metrics and report.
pub fn train_seed(cfg: &RunConfig, seed: u64, root: Option<&Path>) -> Result<SeedResult> {
    match cfg.precision {
        Precision::F32 => train_seed_typed::<f32>(cfg, seed, root),
        Precision::F64 => train_seed_typed::<f64>(cfg, seed, root),
    }
}

/// Trains every seed of `cfg`.
pub fn run_train(cfg: &RunConfig, root: Option<&Path>) -> Result<RunReport> {
    let counts = counts(cfg)?;
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &s in &cfg.seeds {
        seeds.push(train_seed(cfg, s, root)?);
    }
    let accs: Vec<f64> = seeds.iter().map(|s| s.final_accuracy).collect();
    let (mean, se) = mean_stderr(&accs);
    let report = RunReport {
        config: cfg.clone(),
        adapter: cfg.adapter_spec(0).label(),
        seeds,
        mean_accuracy: mean,
        stderr_accuracy: se,
        counts,
    };
    if let Some(root) = root {
        let dir = root.join(cfg.run_name());
        std::fs::create_dir_all(&dir)?;
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}

fn restore<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<(Task, ToyNetwork<T>)> {
    let (task, mut net) = build_network::<T>(cfg, 0)?;
    net.load_tensors(&load_checkpoint::<T>(checkpoint)?)?;
    Ok((task, net))
}

fn eval_typed<T: Scalar>(cfg: &RunConfig, checkpoint: &Path) -> Result<Evaluation> {
    let (task, net) = restore::<T>(cfg, checkpoint)?;
    evaluate(&net, &task.held_out::<T>(cfg.eval_samples), None)
}

/// Held-out loss and accuracy of a checkpoint. The stored precision wins
/// over the config's.
pub fn eval_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<Evaluation> {
    match inspect(&std::fs::read(checkpoint)?)? {
        Precision::F32 => eval_typed::<f32>(cfg, checkpoint),
        Precision::F64 => eval_typed::<f64>(cfg, checkpoint),
    }
}

/// One row of the partial-modality table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialRow {
    /// Modalities routed through the adapters, joined by `+`.
    pub subset: String,
    pub tag: String,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub note: String,
}

fn subset_tag(subset: &[String], all: &[ModalityId]) -> String {
    if subset.is_empty() {
        return "no-adapter".into();
    }
    if all.iter().all(|m| subset.contains(&m.name)) {
        return "full".into();
    }
    match subset {
        [one] if all.iter().any(|m| m.is_text && &m.name == one) => "text-only".into(),
        [one] => format!("{one}-only"),
        _ => "partial".into(),
    }
}

/// Evaluates `net` with each subset of modalities routed through the
/// adapters; the frozen path always sees every token. The full-modality row
/// comes first whether or not it was requested.
pub fn partial_modality_protocol<T: Scalar>(
    net: &ToyNetwork<T>,
    samples: &[Sample<T>],
    subsets: &[Vec<String>],
) -> Result<Vec<PartialRow>> {
    let all = net.modalities();
    let full: Vec<String> = all.iter().map(|m| m.name.clone()).collect();
    let mut wanted = vec![full.clone()];
    for s in subsets {
        let mut sorted: Vec<String> = full.iter().filter(|n| s.contains(n)).cloned().collect();
        sorted.dedup();
        for name in s {
            if !full.contains(name) {
                return Err(Error::UnknownModality(name.clone()));
            }
        }
        if !wanted.contains(&sorted) {
            wanted.push(sorted);
        }
    }
    let mut rows = Vec::with_capacity(wanted.len());
    for subset in wanted {
        let names: Vec<&str> = subset.iter().map(String::as_str).collect();
        let mask: RoutingMask = make_routing_mask(&names, all)?;
        let (accuracy, loss, note) = match evaluate(net, samples, Some(&mask)) {
            Ok(e) => (Some(e.accuracy), Some(e.loss), String::new()),
            Err(Error::Protocol(msg)) => (None, None, msg),
            Err(e) => return Err(e),
        };
        rows.push(PartialRow {
            subset: if subset.is_empty() {
                "-".into()
            } else {
                subset.join("+")
            },
            tag: subset_tag(&subset, all),
            accuracy,
            loss,
            note,
        });
    }
    Ok(rows)
}

fn partial_typed<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    seed: u64,
    subsets: &[Vec<String>],
) -> Result<Vec<PartialRow>> {
    let (task, net) = match checkpoint {
        Some(p) => restore::<T>(cfg, p)?,
        None => {
            let run = train_network::<T>(cfg, seed)?;
            (run.task, run.net)
        }
    };
    partial_modality_protocol(&net, &task.held_out::<T>(cfg.eval_samples), subsets)
}

/// Partial-modality table of a checkpoint, or of a run trained on the spot.
pub fn partial_infer(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    seed: u64,
    subsets: &[Vec<String>],
) -> Result<Vec<PartialRow>> {
    let precision = match checkpoint {
        Some(p) => inspect(&std::fs::read(p)?)?,
        None => cfg.precision,
    };
    match precision {
        Precision::F32 => partial_typed::<f32>(cfg, checkpoint, seed, subsets),
        Precision::F64 => partial_typed::<f64>(cfg, checkpoint, seed, subsets),
    }
}

/// One (method, seed) row of a comparison protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub protocol: String,
    pub method: String,
    pub rank: usize,
    pub seed: u64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub final_eval_loss: f64,
    pub train_loss_start: f64,
    pub train_loss_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub method: String,
    pub rank: usize,
    pub mean_accuracy: f64,
    pub stderr_accuracy: f64,
    pub seeds: usize,
    /// Published full-scale numbers for the same method, for context only.
    pub reference: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: String,
    pub rows: Vec<ProtocolRow>,
    pub summary: Vec<ProtocolSummary>,
}

/// Adapter configurations of the ablation: LoRA, Multiple LoRA, MokA
/// without and with cross-attention.
pub fn ablation_configs(base: &RunConfig) -> Vec<RunConfig> {
    vec![
        base.with_adapter(Variant::Lora, CrossMode::None),
        base.with_adapter(Variant::MultipleLora, CrossMode::None),
        base.with_adapter(Variant::Moka, CrossMode::None),
        base.with_adapter(Variant::Moka, CrossMode::TaskCentric),
    ]
}

/// Cross-modal variants; `extended` adds projected and extra-pair attention.
pub fn variant_configs(base: &RunConfig, extended: bool) -> Result<Vec<RunConfig>> {
    let mut out = vec![
        base.with_adapter(Variant::Lora, CrossMode::None),
        base.with_adapter(Variant::MultipleLora, CrossMode::None),
        base.with_adapter(Variant::Moka, CrossMode::ReversedQuery),
        base.with_adapter(Variant::Moka, CrossMode::Naive),
        base.with_adapter(Variant::Moka, CrossMode::TaskCentric),
    ];
    if extended {
        out.push(base.with_adapter(Variant::Moka, CrossMode::Projected));
        let task = Task::new(base.task.clone())?;
        for mode in CrossMode::all_for(task.modalities()) {
            if matches!(mode, CrossMode::ExtraPair { .. }) {
                out.push(base.with_adapter(Variant::Moka, mode));
            }
        }
    }
    Ok(out)
}

pub const SWEEP_RANKS: [usize; 3] = [4, 8, 12];

/// LoRA and task-centric MokA at each rank.
pub fn rank_sweep_configs(base: &RunConfig, ranks: &[usize]) -> Vec<RunConfig> {
    let mut out = Vec::new();
    for adapter in [
        (Variant::Lora, CrossMode::None),
        (Variant::Moka, CrossMode::TaskCentric),
    ] {
        for &r in ranks {
            let mut c = base.with_adapter(adapter.0, adapter.1.clone());
            c.rank = r;
            out.push(c);
        }
    }
    out
}

fn reference_for(protocol: &str, method: &str, rank: usize) -> serde_json::Value {
    let section = match protocol {
        "ablate" => "ablation",
        "rank-sweep" => "rank_sweep",
        other => other,
    };
    let rows = reference_section(section)["rows"]
        .as_array()
        .cloned()
        .unwrap_or_default();
    rows.into_iter()
        .find(|r| r["method"] == method && r.get("rank").is_none_or(|v| v == rank))
        .unwrap_or(serde_json::Value::Null)
}

/// Trains every config over its seeds and tabulates the held-out accuracy.
pub fn run_protocol(protocol: &str, configs: &[RunConfig], root: Option<&Path>) -> Result<ProtocolReport> {
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let dir = root.map(|r| r.join(protocol));
    for cfg in configs {
        cfg.validate()?;
        let method = cfg.run_name();
        let run_root = dir.as_ref().map(|d| {
            if protocol == "rank-sweep" {
                d.join(format!("rank-{}", cfg.rank))
            } else {
                d.clone()
            }
        });
        let mut accs = Vec::new();
        for &seed in &cfg.seeds {
            let r = train_seed(cfg, seed, run_root.as_deref())?;
            accs.push(r.final_accuracy);
            rows.push(ProtocolRow {
                protocol: protocol.to_string(),
                method: method.clone(),
                rank: cfg.rank,
                seed,
                initial_accuracy: r.initial_accuracy,
                final_accuracy: r.final_accuracy,
                final_eval_loss: r.final_eval_loss,
                train_loss_start: r.train_loss_start,
                train_loss_end: r.train_loss_end,
            });
        }
        let (mean, se) = mean_stderr(&accs);
        summary.push(ProtocolSummary {
            reference: reference_for(protocol, &method, cfg.rank),
            method,
            rank: cfg.rank,
            mean_accuracy: mean,
            stderr_accuracy: se,
            seeds: accs.len(),
        });
    }
    let report = ProtocolReport {
        protocol: protocol.to_string(),
        rows,
        summary,
    };
    if let Some(d) = dir {
        std::fs::create_dir_all(&d)?;
        write_csv(&d.join("results.csv"), &report.rows)?;
        write_json(&d.join("summary.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub method: String,
    pub num_a: usize,
    pub num_b: usize,
    pub adapter_params: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    pub trainable_fraction: f64,
    pub analytic_flops: u64,
    pub instrumented_flops: u64,
    pub flops_ratio: f64,
    /// Median wall time of one full forward pass, microseconds.
    pub forward_median_us: f64,
    pub forward_time_ratio: f64,
}

/// Adapter-only FLOPs at a given width and token layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub setting: String,
    pub k: usize,
    pub d: usize,
    pub rank: usize,
    pub tokens: String,
    pub lora_flops: u64,
    pub moka_flops: u64,
    pub instrumented_moka_flops: u64,
    pub flops_ratio: f64,
    pub reference_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
    pub scale: Vec<ScaleRow>,
    pub forward_passes: usize,
    pub reference: serde_json::Value,
}

pub const MIN_TIMED_PASSES: usize = 100;
const WARMUP_PASSES: usize = 10;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_forward<T: Scalar>(net: &ToyNetwork<T>, sample: &Sample<T>, passes: usize) -> Result<f64> {
    for _ in 0..WARMUP_PASSES {
        net.forward(&sample.seq, None)?;
    }
    let mut times = Vec::with_capacity(passes);
    for _ in 0..passes {
        let t = Instant::now();
        std::hint::black_box(net.forward(&sample.seq, None)?);
        times.push(t.elapsed().as_secs_f64() * 1e6);
    }
    Ok(median(times))
}

/// The six adapter families, MokA with the config's cross mode (task-centric
/// when the config is not MokA).
pub fn efficiency_configs(base: &RunConfig) -> Vec<RunConfig> {
    let mode = if base.variant == Variant::Moka {
        base.cross_mode()
    } else {
        CrossMode::TaskCentric
    };
    Variant::ALL
        .into_iter()
        .map(|v| {
            let m = if v == Variant::Moka {
                mode.clone()
            } else {
                CrossMode::None
            };
            base.with_adapter(v, m)
        })
        .collect()
}

fn efficiency_row<T: Scalar>(cfg: &RunConfig, passes: usize) -> Result<(EfficiencyRow, f64)> {
    let (task, net) = build_network::<T>(cfg, cfg.seeds[0])?;
    let c = counts(cfg)?;
    let spans = spans_for(task.modalities(), &cfg.task.tokens);
    let instrumented = instrumented_flops(&net, &spans)?;
    let rel = (instrumented as f64 - c.adapter_flops as f64).abs() / c.adapter_flops.max(1) as f64;
    if rel > 0.01 {
        return Err(Error::Invariant(format!(
            "{}: analytic FLOPs {} vs instrumented {}",
            cfg.run_name(),
            c.adapter_flops,
            instrumented
        )));
    }
    let spec = cfg.adapter_spec(0);
    let n = task.modalities().len();
    let mut formula = 0;
    for l in 0..cfg.network.depth {
        formula += param_count(&spec, cfg.network.d, cfg.network.layer_in(l), n);
    }
    if formula != c.adapter_params {
        return Err(Error::Invariant(format!(
            "{}: parameter formula {} vs {} enumerated",
            cfg.run_name(),
            formula,
            c.adapter_params
        )));
    }
    let sample = task.held_out::<T>(1).remove(0);
    let t = time_forward(&net, &sample, passes)?;
    Ok((
        EfficiencyRow {
            method: cfg.run_name(),
            num_a: c.num_a,
            num_b: c.num_b,
            adapter_params: c.adapter_params,
            trainable_params: c.trainable_params,
            frozen_params: c.frozen_params,
            trainable_fraction: c.trainable_fraction,
            analytic_flops: c.adapter_flops,
            instrumented_flops: instrumented,
            flops_ratio: c.flops_ratio_vs_lora,
            forward_median_us: t,
            forward_time_ratio: f64::NAN,
        },
        t,
    ))
}

/// Token layouts with the proportions of real audio-visual-text and
/// visual-text inputs.
pub fn full_scale_layouts() -> Vec<(&'static str, Vec<(&'static str, usize)>)> {
    vec![
        ("vl", vec![("visual", 32), ("text", 64)]),
        ("avl", vec![("audio", 32), ("visual", 32), ("text", 64)]),
    ]
}

/// MokA versus LoRA adapter FLOPs for one layer of width `k = d`.
pub fn scale_row(
    setting: &str,
    layout: &[(&str, usize)],
    width: usize,
    rank: usize,
    mode: CrossMode,
) -> Result<ScaleRow> {
    let names: Vec<&str> = layout.iter().map(|(n, _)| *n).collect();
    let mods = modality_set(&names, "text")?;
    let tokens: Vec<usize> = layout.iter().map(|(_, t)| *t).collect();
    let spans = spans_for(&mods, &tokens);
    let lora = flop_count(&AdapterSpec::new(Variant::Lora, rank), width, width, &spans)?;
    let spec = AdapterSpec::moka(rank, mode);
    let moka = flop_count(&spec, width, width, &spans)?;
    let adapter = Adapter::<f32>::init(&spec, &mods, width, width, 0)?;
    let instrumented = adapter_flops(&adapter, tokens.iter().sum(), &spans)?;
    let reference = reference_section("efficiency")["flops_ratio"][setting].as_f64();
    Ok(ScaleRow {
        setting: setting.to_string(),
        k: width,
        d: width,
        rank,
        tokens: tokens.iter().map(usize::to_string).collect::<Vec<_>>().join("/"),
        lora_flops: lora,
        moka_flops: moka,
        instrumented_moka_flops: instrumented,
        flops_ratio: moka as f64 / lora as f64,
        reference_ratio: reference,
    })
}

pub const FULL_WIDTH: usize = 4096;

/// Parameter, matrix, FLOP and timing comparison against LoRA. With
/// `full_scale`, also reports adapter FLOPs at a 4096-wide layer.
pub fn efficiency(base: &RunConfig, passes: usize, full_scale: bool, root: Option<&Path>) -> Result<EfficiencyReport> {
    if passes < MIN_TIMED_PASSES {
        return Err(Error::Config(format!(
            "at least {MIN_TIMED_PASSES} timed passes are required"
        )));
    }
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for cfg in efficiency_configs(base) {
        let (row, t) = match cfg.precision {
            Precision::F32 => efficiency_row::<f32>(&cfg, passes)?,
            Precision::F64 => efficiency_row::<f64>(&cfg, passes)?,
        };
        rows.push(row);
        times.push(t);
    }
    let lora_time = times[0];
    for (row, t) in rows.iter_mut().zip(&times) {
        row.forward_time_ratio = t / lora_time;
    }
    let mut scale = Vec::new();
    if full_scale {
        let mode = if base.variant == Variant::Moka {
            base.cross_mode()
        } else {
            CrossMode::TaskCentric
        };
        for (setting, layout) in full_scale_layouts() {
            scale.push(scale_row(setting, &layout, FULL_WIDTH, base.rank, mode.clone())?);
        }
    }
    let report = EfficiencyReport {
        rows,
        scale,
        forward_passes: passes,
        reference: reference_section("efficiency"),
    };
    if let Some(root) = root {
        let dir = root.join("efficiency");
        std::fs::create_dir_all(&dir)?;
        write_csv(&dir.join("efficiency.csv"), &report.rows)?;
        if !report.scale.is_empty() {
            write_csv(&dir.join("scale.csv"), &report.scale)?;
        }
        write_json(&dir.join("efficiency.json"), &report)?;
    }
    Ok(report)
}

/// One attention matrix written by `dump_attention`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub file: String,
    pub attachment: String,
    pub query_modality: String,
    pub key_modality: String,
    pub rows: usize,
    pub cols: usize,
    pub max_row_deviation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionCell {
    pub query_index: usize,
    pub key_index: usize,
    pub weight: f64,
}

pub const ROW_STOCHASTIC_TOLERANCE: f64 = 1e-6;

fn dump_typed<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    seed: u64,
    dir: &Path,
) -> Result<Vec<AttentionDump>> {
    let (task, net) = match checkpoint {
        Some(p) => restore::<T>(cfg, p)?,
        None => build_network::<T>(cfg, seed)?,
    };
    let sample = task.held_out::<T>(1).remove(0);
    let (_, records) = net.forward_with_attention(&sample.seq, None)?;
    std::fs::create_dir_all(dir)?;
    let mut dumps = Vec::with_capacity(records.len());
    for rec in records {
        let (dev, bounded) = rec.stochasticity();
        if dev > ROW_STOCHASTIC_TOLERANCE || !bounded {
            return Err(Error::Invariant(format!(
                "{} {}->{} attention is not row-stochastic (deviation {dev:e})",
                rec.attachment, rec.query_modality, rec.key_modality
            )));
        }
        let file = format!("{}.{}-{}.csv", rec.attachment, rec.query_modality, rec.key_modality);
        let w = &rec.weights;
        let cells: Vec<AttentionCell> = (0..w.rows())
            .flat_map(|q| {
                (0..w.cols()).map(move |k| AttentionCell {
                    query_index: q,
                    key_index: k,
                    weight: w.get(q, k).as_f64(),
                })
            })
            .collect();
        write_csv(&dir.join(&file), &cells)?;
        dumps.push(AttentionDump {
            file,
            attachment: rec.attachment.clone(),
            query_modality: rec.query_modality.clone(),
            key_modality: rec.key_modality.clone(),
            rows: w.rows(),
            cols: w.cols(),
            max_row_deviation: dev,
        });
    }
    write_json(&dir.join("attention.json"), &dumps)?;
    Ok(dumps)
}

/// Writes every attention matrix of one held-out sample as CSV, plus an
/// `attention.json` index. Fails if any matrix is not row-stochastic.
pub fn dump_attention(cfg: &RunConfig, checkpoint: Option<&Path>, seed: u64, dir: &Path) -> Result<Vec<AttentionDump>> {
    let precision = match checkpoint {
        Some(p) => inspect(&std::fs::read(p)?)?,
        None => cfg.precision,
    };
    match precision {
        Precision::F32 => dump_typed::<f32>(cfg, checkpoint, seed, dir),
        Precision::F64 => dump_typed::<f64>(cfg, checkpoint, seed, dir),
    }
}

/// Runs the gradient check over every adapter; with `dir`, writes `gradcheck.csv`.
pub fn run_gradcheck(cfg: &GradcheckConfig, dir: Option<&Path>) -> Result<Vec<GradcheckRow>> {
    let rows = gradcheck_suite(cfg, None)?;
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        write_csv(&d.join("gradcheck.csv"), &rows)?;
    }
    Ok(rows)
}
