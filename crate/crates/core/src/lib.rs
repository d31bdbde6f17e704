//! Core of duplexkit: persona-conditioned barge-in handling for full-duplex
//! spoken dialogue studies.
//!
//! The crate is organised around the path a single interruption takes:
//!
//! * [`config`] loads the four researcher-facing JSON files.
//! * [`cutoff`] turns a playback progress report into cutoff/remaining text.
//! * [`turn_policy`] classifies the interruption, samples a strategy and
//!   builds the strategy-conditioned prompt.
//! * [`providers`] routes ASR, LLM, TTS and intent calls to mock or HTTP backends.
//! * [`session`] is the per-session lifecycle state machine and event log.
//! * [`survey`] renders post-session surveys and aggregates responses.
//! * [`export`] serializes records as canonical JSON and CSV.

pub mod config;
pub mod cutoff;
pub mod export;
pub mod providers;
pub mod session;
pub mod survey;
pub mod turn_policy;

pub use config::{
    ConfigError, InterruptionMatrix, MatrixMode, ModelConfig, PersonaCatalog, PersonaConfig,
    ProviderRoute, Quadrant, SessionConfig, StrategyWeights, StudyConfig, Style, SurveyQuestion,
};
pub use cutoff::{split_on_barge_in, CutoffResult, UtterancePlayback};
pub use session::{Session, SessionRecord, SessionState, TurnEvent};
pub use turn_policy::{InterruptIntent, Strategy, StrategyDecision};
