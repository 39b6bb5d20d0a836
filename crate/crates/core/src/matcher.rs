//! Pseudo-context selection for each character utterance and the ordering of
//! the resulting (pseudo-context, utterance) pairs.
//!
//! * static: `argmax_c e_ctx(c)·e_resp(u_i)`
//! * dynamic: `argmax_c e_ctx(c)·e_ctx(x) + e_ctx(c)·e_resp(u_i)`
//! * random: uniform over the pool, seeded
//! * gold: the card's annotated contexts, copied verbatim
//!
//! Every strategy's pairs are then sorted ascending by `e_ctx(x)·e_resp(u_i)`,
//! so the pair most relevant to the input sits right before it in the prompt.
//! Argmax ties go to the lowest candidate id.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidate_index::CandidateIndex;
use crate::embedding::{dot, Embedding, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// A character: identity plus its handful of curated utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterCard {
    /// Slug; derived from `name` when left empty.
    #[serde(default)]
    pub character_id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub show: Option<String>,
    pub utterances: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_contexts: Option<Vec<String>>,
}

/// Lowercase ASCII slug: alphanumeric runs joined by single dashes.
pub fn slugify(name: &str) -> String {
    let mut slug = String::with_capacity(name.len());
    for ch in name.chars() {
        if ch.is_ascii_alphanumeric() {
            slug.push(ch.to_ascii_lowercase());
        } else if !slug.is_empty() && !slug.ends_with('-') {
            slug.push('-');
        }
    }
    while slug.ends_with('-') {
        slug.pop();
    }
    slug
}

fn is_slug(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('-')
        && !s.ends_with('-')
        && !s.contains("--")
        && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-')
}

impl CharacterCard {
    pub fn new(name: impl Into<String>, show: Option<&str>, utterances: Vec<String>) -> Self {
        let name = name.into();
        CharacterCard {
            character_id: slugify(&name),
            name,
            show: show.map(str::to_string),
            utterances,
            gold_contexts: None,
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let card: CharacterCard =
            serde_json::from_str(json).map_err(|e| Error::format("character card", e))?;
        card.normalized()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&json)
    }

    /// Fills in a missing id and checks every card invariant.
    pub fn normalized(mut self) -> Result<Self> {
        if self.character_id.trim().is_empty() {
            self.character_id = slugify(&self.name);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::InvalidInput("character name is empty".into()));
        }
        if !is_slug(&self.character_id) {
            return Err(Error::InvalidInput(format!(
                "character_id {:?} is not a lowercase slug",
                self.character_id
            )));
        }
        if self.utterances.is_empty() {
            return Err(Error::InvalidInput(format!(
                "character {} has no utterances",
                self.character_id
            )));
        }
        if let Some(pos) = self.utterances.iter().position(|u| u.trim().is_empty()) {
            return Err(Error::InvalidInput(format!("utterance {pos} is blank")));
        }
        if let Some(gold) = &self.gold_contexts {
            if gold.len() != self.utterances.len() {
                return Err(Error::InvalidInput(format!(
                    "{} gold contexts for {} utterances",
                    gold.len(),
                    self.utterances.len()
                )));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.utterances.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Static,
    #[default]
    Dynamic,
    Random,
    Gold,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Static,
        StrategyKind::Dynamic,
        StrategyKind::Random,
        StrategyKind::Gold,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Static => "static",
            StrategyKind::Dynamic => "dynamic",
            StrategyKind::Random => "random",
            StrategyKind::Gold => "gold",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown match strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchStrategy {
    pub kind: StrategyKind,
    /// Random matching only. Unset means seed 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl MatchStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        MatchStrategy { kind, seed: None }
    }

    pub fn random(seed: u64) -> Self {
        MatchStrategy {
            kind: StrategyKind::Random,
            seed: Some(seed),
        }
    }
}

impl From<StrategyKind> for MatchStrategy {
    fn from(kind: StrategyKind) -> Self {
        MatchStrategy::new(kind)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    /// Greedy assignment where each candidate is used at most once.
    #[serde(default)]
    pub without_replacement: bool,
}

/// Winner of an argmax over the pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextMatch {
    pub candidate_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub utterance_index: usize,
    /// `None` for gold contexts, which do not come from the pool.
    pub candidate_id: Option<usize>,
    pub pseudo_context: String,
    pub utterance: String,
    /// `s_stat` or `s_dyn`; 0 for random and gold.
    pub match_score: f64,
    /// `e_ctx(x)·e_resp(u_i)`.
    pub order_key: f64,
}

/// A card after registration against an index: response embeddings and static
/// matches are computed once and reused.
#[derive(Debug, Clone)]
pub struct RegisteredCharacter {
    pub card: CharacterCard,
    resp_embeddings: Vec<Embedding>,
    static_matches: Vec<ContextMatch>,
}

impl RegisteredCharacter {
    pub fn register(
        card: CharacterCard,
        index: &CandidateIndex,
        backend: &dyn EmbeddingBackend,
    ) -> Result<Self> {
        let card = card.normalized()?;
        let resp_embeddings = backend.embed_responses(&card.utterances)?;
        Self::with_embeddings(card, resp_embeddings, index)
    }

    pub fn with_embeddings(
        card: CharacterCard,
        resp_embeddings: Vec<Embedding>,
        index: &CandidateIndex,
    ) -> Result<Self> {
        card.validate()?;
        if resp_embeddings.len() != card.k() {
            return Err(Error::InvalidInput(format!(
                "{} response embeddings for {} utterances",
                resp_embeddings.len(),
                card.k()
            )));
        }
        for e in &resp_embeddings {
            index.check_dim(e)?;
        }
        let static_matches = Execution::default()
            .map(&resp_embeddings, |u| best_static(index, u))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(RegisteredCharacter {
            card,
            resp_embeddings,
            static_matches,
        })
    }

    pub fn id(&self) -> &str {
        &self.card.character_id
    }

    pub fn resp_embeddings(&self) -> &[Embedding] {
        &self.resp_embeddings
    }

    /// Cached static selections, one per utterance.
    pub fn static_matches(&self) -> &[ContextMatch] {
        &self.static_matches
    }

    fn utterance_embedding(&self, i: usize) -> Result<&Embedding> {
        self.resp_embeddings.get(i).ok_or_else(|| {
            Error::InvalidInput(format!(
                "utterance index {i} out of range for k={}",
                self.card.k()
            ))
        })
    }
}

/// Lowest-id argmax over `(id, score)` pairs.
fn argmax(scores: impl IntoIterator<Item = (usize, f64)>) -> Option<ContextMatch> {
    let mut best: Option<ContextMatch> = None;
    for (candidate_id, score) in scores {
        if best.is_none_or(|b| score > b.score) {
            best = Some(ContextMatch {
                candidate_id,
                score,
            });
        }
    }
    best
}

fn best_static(index: &CandidateIndex, utterance: &Embedding) -> Result<ContextMatch> {
    let scores = index.score_all(utterance)?;
    argmax(scores).ok_or_else(|| Error::InvalidInput("candidate index is empty".into()))
}

fn dynamic_scores(
    index: &CandidateIndex,
    context_sim: &[(usize, f64)],
    utterance: &Embedding,
) -> Result<Vec<(usize, f64)>> {
    let stat = index.score_all(utterance)?;
    Ok(context_sim
        .iter()
        .zip(stat)
        .map(|(&(id, ctx), (_, s))| (id, ctx + s))
        .collect())
}

/// Static match for utterance `i`, computed against the pool.
pub fn match_static(
    index: &CandidateIndex,
    character: &RegisteredCharacter,
    i: usize,
) -> Result<ContextMatch> {
    best_static(index, character.utterance_embedding(i)?)
}

/// Dynamic match for utterance `i` given the context embedding of the input.
pub fn match_dynamic(
    index: &CandidateIndex,
    character: &RegisteredCharacter,
    i: usize,
    x_ctx: &Embedding,
) -> Result<ContextMatch> {
    let context_sim = index.score_all(x_ctx)?;
    let scores = dynamic_scores(index, &context_sim, character.utterance_embedding(i)?)?;
    argmax(scores).ok_or_else(|| Error::InvalidInput("candidate index is empty".into()))
}

/// Uniform draw from the pool; score is recorded as 0.
pub fn match_random<R: Rng + ?Sized>(index: &CandidateIndex, rng: &mut R) -> Result<ContextMatch> {
    if index.is_empty() {
        return Err(Error::InvalidInput("candidate index is empty".into()));
    }
    Ok(ContextMatch {
        candidate_id: rng.gen_range(0..index.len()),
        score: 0.0,
    })
}

/// Greedy one-to-one assignment: repeatedly commit the highest remaining
/// (utterance, candidate) score and retire that candidate.
fn assign_without_replacement(score_rows: &[Vec<(usize, f64)>]) -> Result<Vec<ContextMatch>> {
    let k = score_rows.len();
    let n = score_rows.first().map_or(0, Vec::len);
    if n < k {
        return Err(Error::Config(format!(
            "matching without replacement needs at least {k} candidates, pool has {n}"
        )));
    }
    let mut used = vec![false; n];
    let mut out: Vec<Option<ContextMatch>> = vec![None; k];
    for _ in 0..k {
        let mut best: Option<(usize, ContextMatch)> = None;
        for (u, row) in score_rows.iter().enumerate() {
            if out[u].is_some() {
                continue;
            }
            let cand = argmax(row.iter().copied().filter(|(id, _)| !used[*id]));
            if let Some(c) = cand {
                if best.is_none_or(|(_, b)| c.score > b.score) {
                    best = Some((u, c));
                }
            }
        }
        let (u, c) = best.expect("pool larger than remaining utterances");
        used[c.candidate_id] = true;
        out[u] = Some(c);
    }
    Ok(out.into_iter().map(|m| m.expect("every row assigned")).collect())
}

/// Selects a pseudo-context for every utterance and orders the pairs ascending
/// by `e_ctx(x)·e_resp(u_i)` (stable, so equal keys keep card order).
pub fn build_pseudo_dialog(
    index: &CandidateIndex,
    character: &RegisteredCharacter,
    x_ctx: &Embedding,
    strategy: MatchStrategy,
    options: MatchOptions,
) -> Result<Vec<MatchedPair>> {
    index.check_dim(x_ctx)?;
    let card = &character.card;
    let k = card.k();

    let pool_choice = |m: &ContextMatch| (Some(m.candidate_id), index.text(m.candidate_id).unwrap_or_default().to_string(), m.score);

    let choices: Vec<(Option<usize>, String, f64)> = match strategy.kind {
        StrategyKind::Static if !options.without_replacement => {
            character.static_matches().iter().map(pool_choice).collect()
        }
        StrategyKind::Static => {
            let rows = character
                .resp_embeddings()
                .iter()
                .map(|u| index.score_all(u))
                .collect::<Result<Vec<_>>>()?;
            assign_without_replacement(&rows)?.iter().map(pool_choice).collect()
        }
        StrategyKind::Dynamic => {
            let context_sim = index.score_all(x_ctx)?;
            let rows = Execution::default()
                .map(character.resp_embeddings(), |u| {
                    dynamic_scores(index, &context_sim, u)
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let matches = if options.without_replacement {
                assign_without_replacement(&rows)?
            } else {
                rows.into_iter()
                    .map(|row| argmax(row).expect("non-empty index"))
                    .collect()
            };
            matches.iter().map(pool_choice).collect()
        }
        StrategyKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed.unwrap_or(0));
            if options.without_replacement {
                if index.len() < k {
                    return Err(Error::Config(format!(
                        "matching without replacement needs at least {k} candidates, pool has {}",
                        index.len()
                    )));
                }
                rand::seq::index::sample(&mut rng, index.len(), k)
                    .into_iter()
                    .map(|id| pool_choice(&ContextMatch { candidate_id: id, score: 0.0 }))
                    .collect()
            } else {
                (0..k)
                    .map(|_| match_random(index, &mut rng).map(|m| pool_choice(&m)))
                    .collect::<Result<Vec<_>>>()?
            }
        }
        StrategyKind::Gold => {
            let gold = card.gold_contexts.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "gold matching requested but {} has no gold_contexts",
                    card.character_id
                ))
            })?;
            gold.iter().map(|g| (None, g.clone(), 0.0)).collect()
        }
    };

    let mut pairs = choices
        .into_iter()
        .enumerate()
        .map(|(i, (candidate_id, pseudo_context, match_score))| {
            Ok(MatchedPair {
                utterance_index: i,
                candidate_id,
                pseudo_context,
                utterance: card.utterances[i].clone(),
                match_score,
                order_key: dot(x_ctx, &character.resp_embeddings()[i])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    pairs.sort_by(|a, b| a.order_key.total_cmp(&b.order_key));
    Ok(pairs)
}
