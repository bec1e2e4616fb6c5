//! Two-phase MoE training: configuration, synthetic corpora, the model,
//! the optimizer, checkpointing and metrics/trace logging.

mod adam;
pub mod checkpoint;
mod config;
mod corpus;
mod metrics;
mod model;
mod params;
mod train;

pub use adam::{adam_step, lr_at, AdamSlot, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use config::{every_other_moe, Arch, Config, CorpusConfig, CorpusKind, GateKind, ModelConfig, TrainParams};
pub use corpus::{eval_windows, make_corpus, sample_batch, Corpus, Split};
pub use metrics::{
    coefficient_of_variation, log_routing, parse_routing_csv, routing_csv, MetricsRecord,
    RoutingRecord, RoutingStats, TopPreceding, TrackedTokenRecord,
};
pub use model::{objective, phase_of, ForwardPass, Model, Phase};
pub use train::{
    evaluate_split, gate_sweep, train, train_with, RngBundle, SweepRow, TrainOptions, TrainRun,
    TrainState,
};
