use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ngram_overlap, StyleClassifier};
use crate::candidate_index::read_pool;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::matcher::{MatchStrategy, RegisteredCharacter, StrategyKind};
use crate::prompt_builder::{DialogHistory, PromptFormat};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A row of the evaluation table: a matching strategy (pseudo-dialog prompt)
/// or one of the utterance-list / zero-shot baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EvalMethod {
    Match(StrategyKind),
    OnlyUtterances,
    ZeroShot,
}

impl EvalMethod {
    pub fn format(self) -> PromptFormat {
        match self {
            EvalMethod::Match(_) => PromptFormat::Pdp,
            EvalMethod::OnlyUtterances => PromptFormat::OnlyUtterances,
            EvalMethod::ZeroShot => PromptFormat::ZeroShot,
        }
    }
}

impl fmt::Display for EvalMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMethod::Match(kind) => f.write_str(kind.as_str()),
            EvalMethod::OnlyUtterances => f.write_str("only_utterances"),
            EvalMethod::ZeroShot => f.write_str("zero_shot"),
        }
    }
}

impl FromStr for EvalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "only_utterances" => Ok(EvalMethod::OnlyUtterances),
            "zero_shot" => Ok(EvalMethod::ZeroShot),
            other => other.parse().map(EvalMethod::Match).map_err(|_| {
                Error::InvalidInput(format!("unknown evaluation method {other:?}"))
            }),
        }
    }
}

impl TryFrom<String> for EvalMethod {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EvalMethod> for String {
    fn from(m: EvalMethod) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Minimum context length in characters.
    pub min_context_length: usize,
    pub ngram_n: usize,
    /// Base seed for random matching; each context derives its own.
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            min_context_length: 30,
            ngram_n: 2,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub sample_id: String,
    pub method: EvalMethod,
    pub character_id: String,
    pub context_index: usize,
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub method: EvalMethod,
    pub character_id: String,
    /// Absent when the report was produced without a classifier.
    pub style_prob: Option<f64>,
    pub style_accuracy: Option<f64>,
    pub ngram_overlap: f64,
    pub n_samples: usize,
    pub n_failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_coherency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub min_context_length: usize,
    pub ngram_n: usize,
    pub n_contexts: usize,
    pub n_filtered_out: usize,
    /// Samples whose generation failed; excluded from every aggregate.
    pub failures: usize,
    pub cells: Vec<EvalCell>,
    pub samples: Vec<EvalSample>,
}

fn sample_seed(base: u64, context_index: usize) -> u64 {
    base ^ (context_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Reads the contexts file and evaluates it; see [`run_eval_on`].
pub fn run_eval(
    engine: &Engine,
    contexts_file: &Path,
    characters: &[RegisteredCharacter],
    methods: &[EvalMethod],
    classifier: Option<&StyleClassifier>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    let contexts = read_pool(contexts_file)?;
    run_eval_on(engine, &contexts, characters, methods, classifier, config)
}

/// Generates one response per (method, character, context) and aggregates the
/// metrics per (method, character) cell. Samples may run in parallel; results
/// are reduced in sample order, so the report is deterministic whenever the
/// backends are.
pub fn run_eval_on(
    engine: &Engine,
    contexts: &[String],
    characters: &[RegisteredCharacter],
    methods: &[EvalMethod],
    classifier: Option<&StyleClassifier>,
    config: &EvalConfig,
) -> Result<EvalReport> {
    if characters.is_empty() {
        return Err(Error::InvalidInput("no characters to evaluate".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidInput("no evaluation methods given".into()));
    }
    if let Some(model) = classifier {
        for ch in characters {
            if model.label_index(ch.id()).is_none() {
                return Err(Error::Config(format!(
                    "classifier has no class for {}",
                    ch.id()
                )));
            }
        }
    }
    let kept: Vec<&str> = contexts
        .iter()
        .map(|c| c.trim())
        .filter(|c| c.chars().count() >= config.min_context_length)
        .collect();
    if kept.is_empty() {
        return Err(Error::InvalidInput("no contexts after filter".into()));
    }

    let n_kept = kept.len();
    let jobs: Vec<(EvalMethod, &RegisteredCharacter, usize)> = methods
        .iter()
        .flat_map(|&m| {
            characters
                .iter()
                .flat_map(move |ch| (0..n_kept).map(move |i| (m, ch, i)))
        })
        .collect();

    let history = DialogHistory::new();
    let samples: Vec<EvalSample> = config.execution.map(&jobs, |&(method, ch, i)| {
        let strategy = match method {
            EvalMethod::Match(kind) => MatchStrategy {
                kind,
                seed: Some(sample_seed(config.seed, i)),
            },
            _ => MatchStrategy::new(StrategyKind::Static),
        };
        let outcome = engine.respond(ch, kept[i], &history, strategy, method.format(), None);
        let (response, error) = match outcome {
            Ok(reply) => (Some(reply.response.text), None),
            Err(e) if e.is_backend_failure() => (None, Some(e.to_string())),
            Err(e) => return Err(e),
        };
        Ok(EvalSample {
            sample_id: format!("{method}/{}/{i}", ch.id()),
            method,
            character_id: ch.id().to_string(),
            context_index: i,
            context: kept[i].to_string(),
            response,
            error,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    let mut failures = 0;
    let per_cell = kept.len();
    for (chunk, (method, ch)) in samples.chunks(per_cell).zip(
        methods
            .iter()
            .flat_map(|&m| characters.iter().map(move |ch| (m, ch))),
    ) {
        let responses: Vec<&str> = chunk.iter().filter_map(|s| s.response.as_deref()).collect();
        let n_failures = chunk.len() - responses.len();
        failures += n_failures;
        if responses.is_empty() {
            log::warn!("{method}/{}: every sample failed", ch.id());
            continue;
        }
        let overlap = responses
            .iter()
            .map(|r| ngram_overlap(r, &ch.card.utterances, config.ngram_n))
            .sum::<f64>()
            / responses.len() as f64;
        let (style_prob, style_accuracy) = match classifier {
            Some(model) => (
                Some(model.style_prob(&responses, ch.id())?),
                Some(model.style_accuracy(&responses, ch.id())?),
            ),
            None => (None, None),
        };
        cells.push(EvalCell {
            method,
            character_id: ch.id().to_string(),
            style_prob,
            style_accuracy,
            ngram_overlap: overlap,
            n_samples: responses.len(),
            n_failures,
            external_coherency: None,
        });
    }
    if failures > 0 {
        log::warn!("{failures} evaluation samples failed and were excluded");
    }

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        run_id: None,
        min_context_length: config.min_context_length,
        ngram_n: config.ngram_n,
        n_contexts: kept.len(),
        n_filtered_out: contexts.len() - kept.len(),
        failures,
        cells,
        samples,
    })
}

#[derive(Deserialize)]
struct CoherencyScore {
    sample_id: String,
    score: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn cell(&self, method: EvalMethod, character_id: &str) -> Option<&EvalCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.character_id == character_id)
    }

    /// Averages externally computed per-sample coherency scores (JSONL lines
    /// `{"sample_id", "score"}`) into each cell. Unknown sample ids are ignored.
    pub fn attach_external_coherency(&mut self, jsonl: &str) -> Result<()> {
        let mut by_sample = HashMap::new();
        for (n, line) in jsonl.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let s: CoherencyScore = serde_json::from_str(line)
                .map_err(|e| Error::format("coherency scores", format!("line {}: {e}", n + 1)))?;
            by_sample.insert(s.sample_id, s.score);
        }
        for cell in &mut self.cells {
            let scores: Vec<f64> = self
                .samples
                .iter()
                .filter(|s| s.method == cell.method && s.character_id == cell.character_id)
                .filter(|s| s.response.is_some())
                .filter_map(|s| by_sample.get(&s.sample_id).copied())
                .collect();
            cell.external_coherency = (!scores.is_empty())
                .then(|| scores.iter().sum::<f64>() / scores.len() as f64);
        }
        Ok(())
    }

    pub fn attach_external_coherency_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.attach_external_coherency(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, one row per cell.
    pub fn to_table(&self) -> String {
        let header = [
            "Method",
            "Character",
            "StyleProb",
            "StyleAcc",
            &format!("{}-gram", self.ngram_n),
            "Coherency",
            "n",
        ]
        .map(str::to_string);
        let rows: Vec<[String; 7]> = self
            .cells
            .iter()
            .map(|c| {
                [
                    c.method.to_string(),
                    c.character_id.clone(),
                    fmt_opt(c.style_prob),
                    fmt_opt(c.style_accuracy),
                    format!("{:.4}", c.ngram_overlap),
                    fmt_opt(c.external_coherency),
                    c.n_samples.to_string(),
                ]
            })
            .collect();
        let mut widths = header.clone().map(|h| h.len());
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let mut push_row = |row: &[String; 7]| {
            let line: Vec<String> = row
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (cell, w))| {
                    if i < 2 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        };
        push_row(&header);
        let rule = widths.map(|w| "-".repeat(w));
        push_row(&rule);
        for row in &rows {
            push_row(row);
        }
        if self.failures > 0 {
            let _ = writeln!(out, "({} failed samples excluded)", self.failures);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::candidate_index::CandidateIndex;
    use crate::embedding::MockHashBackend;
    use crate::generation::{CompletionBackend, CompletionRequest, EchoBackend};
    use crate::matcher::CharacterCard;

    fn engine_with(lm: Arc<dyn CompletionBackend>) -> Engine {
        let embedder = Arc::new(MockHashBackend::new(8).unwrap());
        let index = CandidateIndex::build(
            vec!["how was your weekend".into(), "do you like the sea".into()],
            embedder.as_ref(),
        )
        .unwrap();
        Engine::new(Arc::new(index), embedder, lm).unwrap()
    }

    fn chars(engine: &Engine) -> Vec<RegisteredCharacter> {
        let a = CharacterCard::new("Alpha", None, vec!["zorp zorp blip".into(), "blip zorp".into()]);
        let b = CharacterCard::new("Beta", None, vec!["glim glam".into(), "glam glim glom".into()]);
        vec![engine.register(a).unwrap(), engine.register(b).unwrap()]
    }

    fn contexts(n: usize) -> Vec<String> {
        (0..n)
            .map(|i| format!("this is a sufficiently long context number {i}"))
            .collect()
    }

    #[test]
    fn method_names() {
        for s in ["static", "dynamic", "random", "gold", "only_utterances", "zero_shot"] {
            assert_eq!(s.parse::<EvalMethod>().unwrap().to_string(), s);
        }
        assert!("pdp".parse::<EvalMethod>().is_err());
    }

    #[test]
    fn filter_keeps_long_contexts() {
        let e = engine_with(Arc::new(EchoBackend::last_character_line()));
        let ch = chars(&e);
        let ctx = vec!["hi".to_string(), "a context string exceeding thirty chars".to_string()];
        let r = run_eval_on(&e, &ctx, &ch[..1], &[EvalMethod::ZeroShot], None, &EvalConfig::default())
            .unwrap();
        assert_eq!(r.n_contexts, 1);
        assert_eq!(r.n_filtered_out, 1);
        assert_eq!(r.samples[0].context, "a context string exceeding thirty chars");
        let short = vec!["hi".to_string()];
        assert!(matches!(
            run_eval_on(&e, &short, &ch, &[EvalMethod::ZeroShot], None, &EvalConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn fixed_utterance_echo_scores_full_overlap() {
        let e = engine_with(Arc::new(EchoBackend::fixed("zorp zorp blip")));
        let ch = chars(&e);
        let r = run_eval_on(&e, &contexts(2), &ch[..1], &[EvalMethod::ZeroShot], None, &EvalConfig::default())
            .unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0].ngram_overlap, 1.0);
        assert_eq!(r.cells[0].n_samples, 2);
        assert_eq!(r.cells[0].style_prob, None);
    }

    #[test]
    fn cell_cardinality() {
        let e = engine_with(Arc::new(EchoBackend::last_character_line()));
        let ch = chars(&e);
        let model = StyleClassifier::from_cards(ch.iter().map(|c| &c.card)).unwrap();
        let methods = [EvalMethod::Match(StrategyKind::Static), EvalMethod::Match(StrategyKind::Dynamic)];
        let r = run_eval_on(&e, &contexts(3), &ch, &methods, Some(&model), &EvalConfig::default()).unwrap();
        assert_eq!(r.cells.len(), 4);
        assert!(r.cells.iter().all(|c| c.n_samples == 3));
        assert_eq!(r.samples.len(), 12);
        let table = r.to_table();
        assert_eq!(table.lines().count(), 6);
        assert!(table.starts_with("Method"));
    }

    #[test]
    fn sequential_and_parallel_reports_match() {
        let e = engine_with(Arc::new(EchoBackend::last_character_line()));
        let ch = chars(&e);
        let methods = [EvalMethod::Match(StrategyKind::Random), EvalMethod::OnlyUtterances];
        let seq = EvalConfig { execution: Execution::Sequential, seed: 5, ..Default::default() };
        let par = EvalConfig { execution: Execution::Parallel, seed: 5, ..Default::default() };
        let a = run_eval_on(&e, &contexts(6), &ch, &methods, None, &seq).unwrap();
        let b = run_eval_on(&e, &contexts(6), &ch, &methods, None, &par).unwrap();
        assert_eq!(a, b);
    }

    struct FailOdd;
    impl CompletionBackend for FailOdd {
        fn complete_raw(&self, request: &CompletionRequest) -> Result<String> {
            if request.prompt.contains("number 1") {
                Err(Error::Backend { status: Some(500), message: "boom".into() })
            } else {
                Ok("fine".into())
            }
        }
    }

    #[test]
    fn failures_are_excluded_and_counted() {
        let e = engine_with(Arc::new(FailOdd));
        let ch = chars(&e);
        let r = run_eval_on(&e, &contexts(3), &ch[..1], &[EvalMethod::ZeroShot], None, &EvalConfig::default())
            .unwrap();
        assert_eq!(r.failures, 1);
        assert_eq!(r.cells[0].n_samples, 2);
        assert_eq!(r.cells[0].n_failures, 1);
        assert!(r.samples[1].error.is_some());
    }

    #[test]
    fn external_coherency_is_averaged_per_cell() {
        let e = engine_with(Arc::new(EchoBackend::fixed("ok then")));
        let ch = chars(&e);
        let mut r = run_eval_on(&e, &contexts(2), &ch[..1], &[EvalMethod::ZeroShot], None, &EvalConfig::default())
            .unwrap();
        let ids: Vec<_> = r.samples.iter().map(|s| s.sample_id.clone()).collect();
        let jsonl = format!(
            "{{\"sample_id\":\"{}\",\"score\":0.2}}\n{{\"sample_id\":\"{}\",\"score\":0.6}}\n{{\"sample_id\":\"nope\",\"score\":9}}\n",
            ids[0], ids[1]
        );
        r.attach_external_coherency(&jsonl).unwrap();
        assert!((r.cells[0].external_coherency.unwrap() - 0.4).abs() < 1e-12);
        assert!(r.attach_external_coherency("{bad").is_err());
    }

    #[test]
    fn configuration_errors_abort_the_run() {
        let e = engine_with(Arc::new(EchoBackend::fixed("ok then")));
        let ch = chars(&e);
        assert!(matches!(
            run_eval_on(&e, &contexts(1), &ch, &[EvalMethod::Match(StrategyKind::Gold)], None, &EvalConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn report_json_round_trip() {
        let e = engine_with(Arc::new(EchoBackend::fixed("ok then")));
        let ch = chars(&e);
        let r = run_eval_on(&e, &contexts(1), &ch, &[EvalMethod::ZeroShot], None, &EvalConfig::default())
            .unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
