use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pdp", version, about = "Character-style dialogue via pseudo dialog prompting")]
pub struct Cli {
    /// JSON engine configuration; flags override its values.
    #[arg(long, global = true, env = "PDP_CONFIG", value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(flatten)]
    pub embedding: EmbeddingArgs,

    #[command(flatten)]
    pub lm: LmArgs,

    /// Log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Mock,
    Remote,
    Precomputed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LmArg {
    Echo,
    Remote,
}

#[derive(Debug, Args)]
pub struct EmbeddingArgs {
    /// Embedding backend.
    #[arg(long, global = true)]
    pub backend: Option<BackendArg>,
    /// Embedding dimension of the mock encoder.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    /// Base URL of the remote embedding server.
    #[arg(long, global = true, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Seed of the mock encoder.
    #[arg(long = "embed-seed", global = true)]
    pub embed_seed: Option<u64>,
    /// Vector table for the precomputed backend.
    #[arg(long, global = true, value_name = "FILE")]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LmArgs {
    /// Completion backend.
    #[arg(long, global = true)]
    pub lm: Option<LmArg>,
    /// Base URL of the remote completion server.
    #[arg(long = "lm-endpoint", global = true, value_name = "URL")]
    pub lm_endpoint: Option<String>,
    /// Make the echo backend always answer with this text.
    #[arg(long = "echo-text", global = true)]
    pub echo_text: Option<String>,
}

#[derive(Debug, Args)]
pub struct DecodingArgs {
    /// Top-k sampling width (default 20).
    #[arg(long = "top-k")]
    pub top_k: Option<u32>,
    /// Minimum generated length in tokens (default 10).
    #[arg(long = "min-length")]
    pub min_length: Option<u32>,
    /// Beam size (default 5).
    #[arg(long = "beam-size")]
    pub beam_size: Option<u32>,
    /// Block repeated n-grams of this size (default 5).
    #[arg(long = "ngram-block")]
    pub ngram_block: Option<u32>,
    /// Generation length cap in tokens (default 64).
    #[arg(long = "max-new-tokens")]
    pub max_new_tokens: Option<u32>,
}

#[derive(Debug, Args)]
pub struct CharacterArgs {
    /// Character card JSON.
    #[arg(long, value_name = "FILE")]
    pub card: PathBuf,
    /// Candidate index written by build-index.
    #[arg(long, value_name = "FILE")]
    pub index: PathBuf,
}

#[derive(Debug, Args)]
pub struct TurnArgs {
    #[command(flatten)]
    pub character: CharacterArgs,
    /// The live user turn.
    #[arg(long)]
    pub context: String,
    /// static, dynamic, random or gold; the configured default otherwise.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Seed for random matching.
    #[arg(long)]
    pub seed: Option<u64>,
    /// pdp, only_utterances, zero_shot or guest.
    #[arg(long, default_value = "pdp")]
    pub format: String,
    /// JSONL transcript providing earlier turns.
    #[arg(long, value_name = "FILE")]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Embed a candidate pool and save the index.
    BuildIndex {
        /// One candidate context per line.
        #[arg(long, value_name = "FILE")]
        pool: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Validate a card and show its cached static matches.
    Register {
        #[command(flatten)]
        character: CharacterArgs,
        /// Write the normalized card here.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Print the ordered pseudo-dialog pairs.
    Match {
        #[command(flatten)]
        character: CharacterArgs,
        #[arg(long)]
        context: String,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Emit the pairs as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Print the rendered prompt verbatim.
    Prompt(TurnArgs),
    /// Run match, prompt and completion once and print the reply.
    Generate {
        #[command(flatten)]
        turn: TurnArgs,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Interactive chat; every exchange is appended to the transcript.
    Chat {
        #[command(flatten)]
        character: CharacterArgs,
        #[arg(long, value_name = "FILE")]
        transcript: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "pdp")]
        format: String,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Evaluate methods over a contexts file.
    Eval {
        /// Fixed dialog contexts, one per line.
        #[arg(long, value_name = "FILE")]
        contexts: PathBuf,
        /// Character card; repeat for several characters.
        #[arg(long = "card", value_name = "FILE", required = true)]
        cards: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        index: PathBuf,
        /// Comma-separated methods: static, dynamic, random, gold, only_utterances, zero_shot.
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<String>,
        /// Report JSON destination.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long = "min-context-length")]
        min_context_length: Option<usize>,
        #[arg(long = "ngram-n")]
        ngram_n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSONL of externally judged coherency scores to merge in.
        #[arg(long, value_name = "FILE")]
        coherency: Option<PathBuf>,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long, value_name = "FILE")]
        index: Option<PathBuf>,
        #[arg(long, value_name = "ADDR")]
        bind: Option<String>,
    },
}
