//! Character-mimicking dialogue engine built on pseudo dialog prompting.
//!
//! Given a handful of utterances of a character, each utterance is paired with
//! a pseudo-context retrieved from a fixed candidate pool by bi-encoder dot
//! products. The pairs are laid out as a dialog in front of the live user turn
//! and the prompt is sent to a pluggable completion backend. The `style_eval`
//! module scores how strongly replies carry the character's style.
//!
//! Pool scoring, batch embedding and evaluation sweeps run on rayon when the
//! `parallel` feature (default) is enabled; see [`Execution`].

pub mod candidate_index;
pub mod config;
pub mod embedding;
pub mod engine;
mod error;
pub mod exec;
pub mod generation;
pub mod matcher;
pub mod prompt_builder;
pub mod style_eval;
pub mod transcript;

pub use candidate_index::{build_index, CandidateContext, CandidateIndex};
pub use config::EngineConfig;
pub use embedding::{
    dot, Embedding, EmbeddingBackend, EmbeddingBackendConfig, MockHashBackend, PrecomputedBackend,
    Side,
};
pub use engine::{Engine, PreparedPrompt, Reply};
pub use error::{Error, Result};
pub use exec::Execution;
pub use generation::{
    complete, postprocess, CompletionBackend, CompletionRequest, DecodingConfig, EchoBackend,
    GeneratedResponse, LmBackendConfig, RecordingBackend,
};
pub use matcher::{
    build_pseudo_dialog, match_dynamic, match_random, match_static, CharacterCard, ContextMatch,
    MatchOptions, MatchStrategy, MatchedPair, RegisteredCharacter, StrategyKind,
};
pub use prompt_builder::{
    display_name, truncate_to_budget, DialogHistory, PromptBuilder, PromptFormat, RenderedPrompt,
    Speaker, Turn,
};
pub use style_eval::{
    ngram_overlap, tokenize, EvalConfig, EvalMethod, EvalReport, StyleClassifier,
};
