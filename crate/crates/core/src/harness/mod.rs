//! Configuration, artifact containers, experiment orchestration and reports.

mod config;
mod container;
mod pipeline;
mod report;

pub use config::{apply_override, session_seed, stage_seed, DataConfig, DtfsConfig, ExperimentConfig, Stage, SEED_ENV};
pub use container::{
    hex, load_container, read_manifest, save_container, sha256_hex, ArrayEntry, Container, Dtype, Manifest, NamedArray,
    MANIFEST, SCHEMA_VERSION,
};
pub use pipeline::{
    content_hash, decode_tokens, encode_tokens, load_checkpoint, load_dataset, load_vae, pair_frames, paired_frames,
    prerequisites, run_command, save_checkpoint, score, scored_cells, train_diffusion, window_features, BandAblation,
    BandRow, CabAblation, CellTrace, Command, Dataset, Evaluation, Layout, PairedFrames, Provenance, Scored, Superres,
    RESULTS,
};
pub use report::{collect_report, emit_report, Curve, MetricRow, ReportData};
