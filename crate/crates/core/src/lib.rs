//! Core of the parlor conversation engine: configuration, participants,
//! hosts, the session loop, transcripts and batch runs.

pub mod backend;
pub mod batch;
pub mod canonical;
pub mod config;
pub mod engine;
pub mod host;
pub mod human;
pub mod model;
pub mod participants;
pub mod rng;
pub mod testkit;
pub mod transcript;

pub use config::{parse_config, ExperimentConfig};
pub use engine::{run_session, RunOptions, Session, SessionResult};
pub use participants::{Participant, PersonFactory};
pub use transcript::{load_transcript_file, EventRecord, EventSink, JsonlSink, MemorySink};
