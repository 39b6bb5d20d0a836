//! The match → prompt → complete pipeline over shared backends.

use std::sync::Arc;

use serde::Serialize;

use crate::candidate_index::CandidateIndex;
use crate::embedding::{EmbeddingBackend, Side};
use crate::error::{Error, Result};
use crate::generation::{complete, CompletionBackend, DecodingConfig, GeneratedResponse};
use crate::matcher::{
    build_pseudo_dialog, CharacterCard, MatchOptions, MatchStrategy, MatchedPair,
    RegisteredCharacter,
};
use crate::prompt_builder::{truncate_to_budget, DialogHistory, PromptBuilder, PromptFormat, RenderedPrompt};

/// A rendered prompt together with the pairs that went into it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreparedPrompt {
    pub prompt: RenderedPrompt,
    pub pairs: Vec<MatchedPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reply {
    pub prompt: RenderedPrompt,
    pub pairs: Vec<MatchedPair>,
    pub response: GeneratedResponse,
}

/// Shared, thread-safe engine state.
#[derive(Clone)]
pub struct Engine {
    pub index: Arc<CandidateIndex>,
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub lm: Arc<dyn CompletionBackend>,
    pub prompts: PromptBuilder,
    pub decoding: DecodingConfig,
    pub match_options: MatchOptions,
    /// Character budget for pseudo-dialog prompts.
    pub max_prompt_chars: Option<usize>,
}

impl Engine {
    /// Fails with a stale-index error when `embedder` is not the encoder the
    /// index was built with.
    pub fn new(
        index: Arc<CandidateIndex>,
        embedder: Arc<dyn EmbeddingBackend>,
        lm: Arc<dyn CompletionBackend>,
    ) -> Result<Self> {
        let expected = embedder.fingerprint(index.dim());
        if expected != index.fingerprint() {
            return Err(Error::StaleIndex {
                expected,
                found: index.fingerprint().to_string(),
            });
        }
        Ok(Engine {
            index,
            embedder,
            lm,
            prompts: PromptBuilder::default(),
            decoding: DecodingConfig::default(),
            match_options: MatchOptions::default(),
            max_prompt_chars: None,
        })
    }

    pub fn register(&self, card: CharacterCard) -> Result<RegisteredCharacter> {
        RegisteredCharacter::register(card, &self.index, self.embedder.as_ref())
    }

    pub fn pseudo_dialog(
        &self,
        character: &RegisteredCharacter,
        x: &str,
        strategy: MatchStrategy,
    ) -> Result<Vec<MatchedPair>> {
        if x.trim().is_empty() {
            return Err(Error::InvalidInput("input context is empty".into()));
        }
        let x_ctx = self.embedder.embed_one(x, Side::Context)?;
        build_pseudo_dialog(&self.index, character, &x_ctx, strategy, self.match_options)
    }

    /// Builds the prompt for `x`. Only the pseudo-dialog format runs matching.
    pub fn prepare(
        &self,
        character: &RegisteredCharacter,
        x: &str,
        history: &DialogHistory,
        strategy: MatchStrategy,
        format: PromptFormat,
    ) -> Result<PreparedPrompt> {
        let card = &character.card;
        let pairs = match format {
            PromptFormat::Pdp => {
                let pairs = self.pseudo_dialog(character, x, strategy)?;
                match self.max_prompt_chars {
                    Some(budget) => truncate_to_budget(card, &pairs, history, x, budget)?,
                    None => pairs,
                }
            }
            _ => Vec::new(),
        };
        let prompt = self.prompts.render(format, card, &pairs, history, x)?;
        Ok(PreparedPrompt { prompt, pairs })
    }

    pub fn respond(
        &self,
        character: &RegisteredCharacter,
        x: &str,
        history: &DialogHistory,
        strategy: MatchStrategy,
        format: PromptFormat,
        decoding: Option<&DecodingConfig>,
    ) -> Result<Reply> {
        let PreparedPrompt { prompt, pairs } = self.prepare(character, x, history, strategy, format)?;
        let response = complete(&prompt, decoding.unwrap_or(&self.decoding), self.lm.as_ref())?;
        Ok(Reply {
            prompt,
            pairs,
            response,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::MockHashBackend;
    use crate::generation::EchoBackend;
    use crate::matcher::StrategyKind;

    fn engine() -> Engine {
        let embedder = Arc::new(MockHashBackend::new(8).unwrap());
        let index = CandidateIndex::build(
            vec!["do you like rain".into(), "what do you eat".into(), "can you swim".into()],
            embedder.as_ref(),
        )
        .unwrap();
        Engine::new(Arc::new(index), embedder, Arc::new(EchoBackend::last_character_line())).unwrap()
    }

    fn pie() -> CharacterCard {
        CharacterCard::new(
            "Pie the Duck",
            None,
            vec!["I like rainy day!! Quack Quack!!".into(), "I really like swimming, Quack!".into()],
        )
    }

    #[test]
    fn rejects_mismatched_encoder() {
        let e = engine();
        let other = Arc::new(MockHashBackend::with_seed(8, 99).unwrap());
        assert!(matches!(
            Engine::new(e.index.clone(), other, e.lm.clone()),
            Err(Error::StaleIndex { .. })
        ));
    }

    #[test]
    fn respond_echoes_the_most_relevant_utterance() {
        let e = engine();
        let ch = e.register(pie()).unwrap();
        let reply = e
            .respond(&ch, "Do you go swimming?", &DialogHistory::new(), StrategyKind::Dynamic.into(), PromptFormat::Pdp, None)
            .unwrap();
        assert_eq!(reply.pairs.len(), 2);
        assert_eq!(reply.response.text, reply.pairs.last().unwrap().utterance);
        assert_eq!(reply.response.prompt_chars, reply.prompt.char_len());
    }

    #[test]
    fn non_pdp_formats_skip_matching() {
        let e = engine();
        let ch = e.register(pie()).unwrap();
        let p = e
            .prepare(&ch, "hello", &DialogHistory::new(), StrategyKind::Gold.into(), PromptFormat::ZeroShot)
            .unwrap();
        assert!(p.pairs.is_empty());
        assert_eq!(p.prompt.text, "Dialogue:\nUser: hello\nPie the Duck: ");
    }

    #[test]
    fn budget_drops_low_key_pairs() {
        let mut e = engine();
        let ch = e.register(pie()).unwrap();
        let full = e
            .prepare(&ch, "hello", &DialogHistory::new(), StrategyKind::Static.into(), PromptFormat::Pdp)
            .unwrap();
        e.max_prompt_chars = Some(full.prompt.char_len() - 1);
        let cut = e
            .prepare(&ch, "hello", &DialogHistory::new(), StrategyKind::Static.into(), PromptFormat::Pdp)
            .unwrap();
        assert_eq!(cut.pairs, full.pairs[1..].to_vec());
    }
}
