//! Configuration, checkpoints, reports and the experiment protocols.

mod checkpoint;
mod config;
mod protocols;
mod report;

pub use checkpoint::{decode, encode, inspect, load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use protocols::{
    ablation_configs, build_network, counts, dump_attention, efficiency, efficiency_configs, eval_checkpoint,
    full_scale_layouts, instrumented_flops, partial_infer, partial_modality_protocol, rank_sweep_configs,
    run_gradcheck, run_protocol, run_train, scale_row, seed_dir, spans_for, train_network, train_seed, variant_configs,
    AttentionCell, AttentionDump, EfficiencyReport, EfficiencyRow, PartialRow, ProtocolReport, ProtocolRow,
    ProtocolSummary, ScaleRow, TrainedRun, FULL_WIDTH, MIN_TIMED_PASSES, ROW_STOCHASTIC_TOLERANCE, SWEEP_RANKS,
};
pub use report::{
    csv_string, mean_stderr, reference_section, references, write_csv, write_json, Counts, RunReport, SeedResult,
};
