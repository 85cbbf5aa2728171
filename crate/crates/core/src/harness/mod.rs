//! Training, evaluation, traces and rendering.

pub mod config;
pub mod render;
pub mod run;
pub mod trace;

pub use config::{Preset, RunConfig, TaskSelect};
pub use render::{render, render_frame};
pub use run::{
    episode_seed, episodes_csv, eval_threads, evaluate, run_episode, train, trace_episode, EpisodeMetrics,
    EvalOutput, RunState, Summary, TrainOutput,
};
pub use trace::{read_trace, write_trace, TraceHeader, TraceRecord, VehicleSnap};
