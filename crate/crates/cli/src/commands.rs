use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::{info, warn};

use pdp_core::candidate_index::{read_pool, CandidateIndex};
use pdp_core::embedding::EmbeddingKind;
use pdp_core::generation::LmKind;
use pdp_core::style_eval::{run_eval, EvalConfig, EvalMethod, StyleClassifier};
use pdp_core::transcript::{append_exchange, replay, ExchangeRecord};
use pdp_core::{
    CharacterCard, DecodingConfig, DialogHistory, Engine, EngineConfig, MatchStrategy,
    MatchedPair, PromptFormat, RegisteredCharacter, StrategyKind,
};

use crate::args::{BackendArg, CharacterArgs, Cli, Command, DecodingArgs, LmArg, TurnArgs};

const DEFAULT_MOCK_DIM: usize = 64;

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let config = resolve_config(&cli)?;
    match cli.command {
        Command::BuildIndex { pool, out: path } => build_index(&config, &pool, &path, out),
        Command::Register { character, out: card_out } => register(&config, &character, card_out.as_deref(), out),
        Command::Match {
            character,
            context,
            strategy,
            seed,
            json,
        } => {
            let (engine, ch) = load_character(&config, &character)?;
            let strategy = strategy_of(&config, strategy.as_deref(), seed)?;
            let pairs = engine.pseudo_dialog(&ch, &context, strategy)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&pairs)?)?;
            } else {
                out.write_all(pair_table(&pairs).as_bytes())?;
            }
            Ok(())
        }
        Command::Prompt(turn) => {
            let (engine, ch, history, strategy, format) = prepare_turn(&config, &turn)?;
            let prepared = engine.prepare(&ch, &turn.context, &history, strategy, format)?;
            out.write_all(prepared.prompt.text.as_bytes())?;
            Ok(())
        }
        Command::Generate { turn, decoding } => {
            let (engine, ch, history, strategy, format) = prepare_turn(&config, &turn)?;
            let decoding = decoding_of(&config, &decoding)?;
            let reply = engine.respond(&ch, &turn.context, &history, strategy, format, Some(&decoding))?;
            info!(
                "prompt {} chars, backend {} ms",
                reply.response.prompt_chars, reply.response.backend_latency_ms
            );
            writeln!(out, "{}", reply.response.text)?;
            Ok(())
        }
        Command::Chat {
            character,
            transcript,
            strategy,
            seed,
            format,
            decoding,
        } => {
            let (engine, ch) = load_character(&config, &character)?;
            let strategy = strategy_of(&config, strategy.as_deref(), seed)?;
            let format: PromptFormat = format.parse()?;
            let decoding = decoding_of(&config, &decoding)?;
            chat(&engine, &ch, &transcript, strategy, format, &decoding, out)
        }
        Command::Eval {
            contexts,
            cards,
            index,
            strategies,
            out: report_path,
            min_context_length,
            ngram_n,
            seed,
            coherency,
            decoding,
        } => {
            let mut engine = engine_for_index(&config, &index)?;
            engine.decoding = decoding_of(&config, &decoding)?;
            let characters = cards
                .iter()
                .map(|p| {
                    let card = CharacterCard::load(p)?.normalized()?;
                    Ok(engine.register(card)?)
                })
                .collect::<Result<Vec<RegisteredCharacter>>>()?;
            let methods = strategies
                .iter()
                .map(|s| s.parse::<EvalMethod>())
                .collect::<pdp_core::Result<Vec<_>>>()?;
            let classifier = if characters.len() >= 2 {
                Some(StyleClassifier::from_cards(characters.iter().map(|c| &c.card))?)
            } else {
                warn!("style metrics need at least two characters; reporting n-gram overlap only");
                None
            };
            let mut eval_config = EvalConfig::default();
            if let Some(m) = min_context_length {
                eval_config.min_context_length = m;
            }
            if let Some(n) = ngram_n {
                eval_config.ngram_n = n;
            }
            if let Some(s) = seed {
                eval_config.seed = s;
            }
            let mut report = run_eval(&engine, &contexts, &characters, &methods, classifier.as_ref(), &eval_config)?;
            if let Some(path) = coherency {
                report.attach_external_coherency_file(&path)?;
            }
            fs::write(&report_path, report.to_json())
                .with_context(|| format!("writing {}", report_path.display()))?;
            if report.failures > 0 {
                warn!("{} samples failed", report.failures);
            }
            out.write_all(report.to_table().as_bytes())?;
            Ok(())
        }
        Command::Serve { index, bind } => {
            let mut config = config;
            if index.is_some() {
                config.index_path = index;
            }
            if let Some(addr) = bind {
                config.bind_addr = addr;
            }
            if config.embedding_backend.kind == EmbeddingKind::MockHash && config.embedding_backend.dim.is_none() {
                if let Some(path) = &config.index_path {
                    config.embedding_backend.dim = Some(CandidateIndex::load(path, None)?.dim());
                }
            }
            let state = Arc::new(pdp_service::AppState::from_config(&config)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(pdp_service::serve(state, &config.bind_addr))?;
            Ok(())
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<EngineConfig> {
    let mut config = match &cli.config {
        Some(path) => EngineConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => {
            let mut c = EngineConfig::offline(DEFAULT_MOCK_DIM);
            c.embedding_backend.dim = None;
            c.apply_env(|k| std::env::var(k).ok());
            c
        }
    };
    let e = &cli.embedding;
    let backend = &mut config.embedding_backend;
    if let Some(kind) = e.backend {
        backend.kind = match kind {
            BackendArg::Mock => EmbeddingKind::MockHash,
            BackendArg::Remote => EmbeddingKind::Remote,
            BackendArg::Precomputed => EmbeddingKind::Precomputed,
        };
    }
    if e.dim.is_some() {
        backend.dim = e.dim;
    }
    if e.endpoint.is_some() {
        backend.endpoint_url = e.endpoint.clone();
    }
    if e.embed_seed.is_some() {
        backend.seed = e.embed_seed;
    }
    if e.table.is_some() {
        backend.table_path = e.table.clone();
    }
    let l = &cli.lm;
    let lm = &mut config.lm_backend;
    if let Some(kind) = l.lm {
        lm.kind = match kind {
            LmArg::Echo => LmKind::Echo,
            LmArg::Remote => LmKind::Remote,
        };
    }
    if l.lm_endpoint.is_some() {
        lm.endpoint_url = l.lm_endpoint.clone();
    }
    if l.echo_text.is_some() {
        lm.echo_text = l.echo_text.clone();
    }
    Ok(config)
}

fn build_index(config: &EngineConfig, pool: &Path, path: &Path, out: &mut dyn Write) -> Result<()> {
    let mut backend_config = config.embedding_backend.clone();
    if backend_config.kind == EmbeddingKind::MockHash && backend_config.dim.is_none() {
        backend_config.dim = Some(DEFAULT_MOCK_DIM);
    }
    let backend = backend_config.build()?;
    let texts = read_pool(pool)?;
    let index = CandidateIndex::build(texts, backend.as_ref())?;
    index.save(path)?;
    writeln!(out, "indexed {} candidates", index.len())?;
    writeln!(out, "fingerprint {}", index.fingerprint())?;
    Ok(())
}

/// Loads the index and pairs it with the configured encoder. A mock encoder
/// without an explicit dim takes the index's.
fn engine_for_index(config: &EngineConfig, path: &Path) -> Result<Engine> {
    let index = CandidateIndex::load(path, None)?;
    let mut backend_config = config.embedding_backend.clone();
    if backend_config.kind == EmbeddingKind::MockHash && backend_config.dim.is_none() {
        backend_config.dim = Some(index.dim());
    }
    let embedder = backend_config.build()?;
    let lm = config.lm_backend.build()?;
    let mut engine = Engine::new(Arc::new(index), embedder, lm)?;
    engine.decoding = config.default_decoding.clone();
    engine.max_prompt_chars = config.max_prompt_chars;
    Ok(engine)
}

fn load_character(config: &EngineConfig, args: &CharacterArgs) -> Result<(Engine, RegisteredCharacter)> {
    let card = CharacterCard::load(&args.card)?.normalized()?;
    let engine = engine_for_index(config, &args.index)?;
    let ch = engine.register(card)?;
    Ok((engine, ch))
}

fn strategy_of(config: &EngineConfig, name: Option<&str>, seed: Option<u64>) -> Result<MatchStrategy> {
    let kind = match name {
        Some(s) => s.parse::<StrategyKind>()?,
        None => config.default_strategy,
    };
    Ok(MatchStrategy { kind, seed })
}

fn decoding_of(config: &EngineConfig, args: &DecodingArgs) -> Result<DecodingConfig> {
    let mut d = config.default_decoding.clone();
    let overrides = [
        (&mut d.top_k, args.top_k),
        (&mut d.min_length, args.min_length),
        (&mut d.beam_size, args.beam_size),
        (&mut d.ngram_block, args.ngram_block),
        (&mut d.max_new_tokens, args.max_new_tokens),
    ];
    for (field, value) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    d.validate()?;
    Ok(d)
}

type PreparedTurn = (Engine, RegisteredCharacter, DialogHistory, MatchStrategy, PromptFormat);

fn prepare_turn(config: &EngineConfig, turn: &TurnArgs) -> Result<PreparedTurn> {
    let (engine, ch) = load_character(config, &turn.character)?;
    let strategy = strategy_of(config, turn.strategy.as_deref(), turn.seed)?;
    let format: PromptFormat = turn.format.parse()?;
    let history = match &turn.transcript {
        Some(path) => replay(path)?,
        None => DialogHistory::new(),
    };
    Ok((engine, ch, history, strategy, format))
}

fn register(config: &EngineConfig, args: &CharacterArgs, card_out: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (engine, ch) = load_character(config, args)?;
    writeln!(out, "registered {} ({} utterances)", ch.id(), ch.card.k())?;
    for (u, m) in ch.card.utterances.iter().zip(ch.static_matches()) {
        let context = engine.index.text(m.candidate_id).unwrap_or_default();
        writeln!(out, "{u}\t{context}\t{}\t{:.6}", m.candidate_id, m.score)?;
    }
    if let Some(path) = card_out {
        let json = serde_json::to_string_pretty(&ch.card)?;
        fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn pair_table(pairs: &[MatchedPair]) -> String {
    let mut s = String::from("utterance\tpseudo_context\tcandidate_id\tscore\torder_key\n");
    for p in pairs {
        let id = p.candidate_id.map_or_else(|| "-".to_string(), |i| i.to_string());
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\n",
            p.utterance, p.pseudo_context, id, p.match_score, p.order_key
        ));
    }
    s
}

fn chat(
    engine: &Engine,
    ch: &RegisteredCharacter,
    transcript: &Path,
    strategy: MatchStrategy,
    format: PromptFormat,
    decoding: &DecodingConfig,
    out: &mut dyn Write,
) -> Result<()> {
    let mut history = replay(transcript)?;
    let session_id = transcript
        .file_stem()
        .map_or_else(|| "chat".to_string(), |s| s.to_string_lossy().into_owned());
    let name = pdp_core::display_name(&ch.card);
    eprintln!("chatting with {name}; {} earlier exchanges. Empty line or /quit ends.", history.len() / 2);
    let mut failed = 0usize;
    let stdin = io::stdin();
    loop {
        eprint!("> ");
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() || text == "/quit" {
            break;
        }
        match engine.respond(ch, text, &history, strategy, format, Some(decoding)) {
            Ok(reply) => {
                let record = ExchangeRecord::now(
                    &session_id,
                    history.len() / 2,
                    text,
                    &reply.response.text,
                    reply.response.prompt_chars,
                );
                append_exchange(transcript, &record)?;
                history.push_exchange(text, reply.response.text.clone());
                writeln!(out, "{}", reply.response.text)?;
                out.flush()?;
            }
            Err(e) => {
                failed += 1;
                eprintln!("error: {e}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} messages failed");
    }
    Ok(())
}
