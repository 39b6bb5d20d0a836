//! Byte-exact prompt rendering.
//!
//! Four layouts are supported: the pseudo-dialog prompt, the utterance-list
//! prompt, the zero-shot dialogue prompt and its anonymous `Guest` variant.
//! Lines are separated by `\n`; every prompt ends in `"{speaker}: "` with a
//! single trailing space and no newline.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{CharacterCard, MatchedPair};

pub const GUEST: &str = "Guest";
pub const USER: &str = "User";
pub const DEFAULT_END_OF_TURN: &str = "<EOT>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFormat {
    Pdp,
    OnlyUtterances,
    ZeroShot,
    Guest,
}

impl PromptFormat {
    pub const ALL: [PromptFormat; 4] = [
        PromptFormat::Pdp,
        PromptFormat::OnlyUtterances,
        PromptFormat::ZeroShot,
        PromptFormat::Guest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptFormat::Pdp => "pdp",
            PromptFormat::OnlyUtterances => "only_utterances",
            PromptFormat::ZeroShot => "zero_shot",
            PromptFormat::Guest => "guest",
        }
    }
}

impl fmt::Display for PromptFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown prompt format {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Character,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogHistory {
    pub turns: Vec<Turn>,
}

impl DialogHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, speaker: Speaker, text: impl Into<String>) {
        self.turns.push(Turn {
            speaker,
            text: text.into(),
        });
    }

    /// Appends one user message and the character's reply.
    pub fn push_exchange(&mut self, user: impl Into<String>, reply: impl Into<String>) {
        self.push(Speaker::User, user);
        self.push(Speaker::Character, reply);
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    fn validate(&self) -> Result<()> {
        match self.turns.iter().position(|t| t.text.trim().is_empty()) {
            Some(pos) => Err(Error::InvalidInput(format!("history turn {pos} is blank"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub format: PromptFormat,
    pub stop_sequences: Vec<String>,
}

impl RenderedPrompt {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// `"{name} from {show}"`, or just the name when no show is set.
pub fn display_name(card: &CharacterCard) -> String {
    match card.show.as_deref().map(str::trim) {
        Some(show) if !show.is_empty() => format!("{} from {show}", card.name),
        _ => card.name.clone(),
    }
}

/// Renders prompts and attaches the stop sequences every format shares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBuilder {
    /// Extra stop token; `<EOT>` unless configured otherwise.
    #[serde(default = "default_eot")]
    pub end_of_turn: Option<String>,
}

fn default_eot() -> Option<String> {
    Some(DEFAULT_END_OF_TURN.to_string())
}

impl Default for PromptBuilder {
    fn default() -> Self {
        PromptBuilder {
            end_of_turn: default_eot(),
        }
    }
}

fn line(out: &mut String, speaker: &str, text: &str) {
    let _ = writeln!(out, "{speaker}: {text}");
}

fn push_history(out: &mut String, history: &DialogHistory, character: &str) {
    for turn in &history.turns {
        let speaker = match turn.speaker {
            Speaker::User => USER,
            Speaker::Character => character,
        };
        line(out, speaker, &turn.text);
    }
}

fn push_tail(out: &mut String, x: &str, speaker: &str) {
    line(out, USER, x);
    let _ = write!(out, "{speaker}: ");
}

fn check_x(x: &str) -> Result<()> {
    if x.trim().is_empty() {
        return Err(Error::InvalidInput("input context is empty".into()));
    }
    Ok(())
}

impl PromptBuilder {
    pub fn stop_sequences(&self) -> Vec<String> {
        let mut stops = vec!["\n".to_string(), format!("{USER}:")];
        if let Some(eot) = self.end_of_turn.as_deref().filter(|s| !s.is_empty()) {
            stops.push(eot.to_string());
        }
        stops
    }

    fn finish(&self, text: String, format: PromptFormat) -> RenderedPrompt {
        RenderedPrompt {
            text,
            format,
            stop_sequences: self.stop_sequences(),
        }
    }

    fn pdp_text(
        card: &CharacterCard,
        pairs: &[MatchedPair],
        history: &DialogHistory,
        x: &str,
    ) -> String {
        let name = display_name(card);
        let mut out = format!("The below are quotes of {name} during conversation.\n");
        for pair in pairs {
            line(&mut out, USER, &pair.pseudo_context);
            line(&mut out, &name, &pair.utterance);
        }
        push_history(&mut out, history, &name);
        push_tail(&mut out, x, &name);
        out
    }

    /// Pseudo-dialog prompt: header, the ordered pairs, session history, then
    /// the live user turn.
    pub fn render_pdp(
        &self,
        card: &CharacterCard,
        pairs: &[MatchedPair],
        history: &DialogHistory,
        x: &str,
    ) -> Result<RenderedPrompt> {
        check_x(x)?;
        history.validate()?;
        if pairs.is_empty() {
            return Err(Error::InvalidInput(
                "pseudo-dialog prompt needs at least one pair; use zero_shot".into(),
            ));
        }
        Ok(self.finish(Self::pdp_text(card, pairs, history, x), PromptFormat::Pdp))
    }

    pub fn render_only_utterances(
        &self,
        card: &CharacterCard,
        history: &DialogHistory,
        x: &str,
    ) -> Result<RenderedPrompt> {
        check_x(x)?;
        history.validate()?;
        if card.utterances.is_empty() {
            return Err(Error::InvalidInput("card has no utterances".into()));
        }
        let name = display_name(card);
        let mut out = format!("The below are quotes of {name} during conversation.\n");
        for u in &card.utterances {
            let _ = writeln!(out, "- {u}");
        }
        let _ = writeln!(out, "The below are conversation between User and {name}.");
        push_history(&mut out, history, &name);
        push_tail(&mut out, x, &name);
        Ok(self.finish(out, PromptFormat::OnlyUtterances))
    }

    fn dialogue(&self, speaker: &str, history: &DialogHistory, x: &str) -> Result<String> {
        check_x(x)?;
        history.validate()?;
        let mut out = String::from("Dialogue:\n");
        push_history(&mut out, history, speaker);
        push_tail(&mut out, x, speaker);
        Ok(out)
    }

    pub fn render_zero_shot(
        &self,
        card: &CharacterCard,
        history: &DialogHistory,
        x: &str,
    ) -> Result<RenderedPrompt> {
        let text = self.dialogue(&display_name(card), history, x)?;
        Ok(self.finish(text, PromptFormat::ZeroShot))
    }

    /// Zero-shot layout with the character replaced by an anonymous `Guest`.
    pub fn render_guest(&self, history: &DialogHistory, x: &str) -> Result<RenderedPrompt> {
        let text = self.dialogue(GUEST, history, x)?;
        Ok(self.finish(text, PromptFormat::Guest))
    }

    /// Renders `format`; `pairs` is only consulted for the pseudo-dialog layout.
    pub fn render(
        &self,
        format: PromptFormat,
        card: &CharacterCard,
        pairs: &[MatchedPair],
        history: &DialogHistory,
        x: &str,
    ) -> Result<RenderedPrompt> {
        match format {
            PromptFormat::Pdp => self.render_pdp(card, pairs, history, x),
            PromptFormat::OnlyUtterances => self.render_only_utterances(card, history, x),
            PromptFormat::ZeroShot => self.render_zero_shot(card, history, x),
            PromptFormat::Guest => self.render_guest(history, x),
        }
    }
}

/// Drops pairs from the front (lowest order key first) until the pseudo-dialog
/// prompt fits in `max_chars` characters. History and `x` are never dropped.
pub fn truncate_to_budget(
    card: &CharacterCard,
    pairs: &[MatchedPair],
    history: &DialogHistory,
    x: &str,
    max_chars: usize,
) -> Result<Vec<MatchedPair>> {
    let len = |pairs: &[MatchedPair]| {
        PromptBuilder::pdp_text(card, pairs, history, x)
            .chars()
            .count()
    };
    let minimum = len(&[]);
    if max_chars < minimum {
        return Err(Error::Budget {
            budget: max_chars,
            minimum,
        });
    }
    let start = (0..=pairs.len())
        .find(|&drop| len(&pairs[drop..]) <= max_chars)
        .unwrap_or(pairs.len());
    Ok(pairs[start..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn card(k: usize) -> CharacterCard {
        CharacterCard::new(
            "Spock",
            Some("Star Trek"),
            (0..k).map(|i| format!("Utterance {i}.")).collect(),
        )
    }

    fn pairs(card: &CharacterCard) -> Vec<MatchedPair> {
        card.utterances
            .iter()
            .enumerate()
            .map(|(i, u)| MatchedPair {
                utterance_index: i,
                candidate_id: Some(i),
                pseudo_context: format!("Context {i}?"),
                utterance: u.clone(),
                match_score: 0.0,
                order_key: i as f64,
            })
            .collect()
    }

    fn count_prefix(text: &str, prefix: &str) -> usize {
        text.lines().filter(|l| l.starts_with(prefix)).count()
    }

    #[test]
    fn display_names() {
        assert_eq!(display_name(&card(1)), "Spock from Star Trek");
        let pie = CharacterCard::new("Pie the Duck", None, vec!["Quack!".into()]);
        assert_eq!(display_name(&pie), "Pie the Duck");
        let blank_show = CharacterCard::new("Pie the Duck", Some("  "), vec!["Quack!".into()]);
        assert_eq!(display_name(&blank_show), "Pie the Duck");
    }

    #[test]
    fn pdp_line_counts() {
        let b = PromptBuilder::default();
        let c = card(1);
        let p = b.render_pdp(&c, &pairs(&c), &DialogHistory::new(), "Hi there").unwrap();
        assert_eq!(count_prefix(&p.text, "User: "), 2);
        assert!(p.text.ends_with("Spock from Star Trek: "));
        assert!(!p.text.ends_with('\n'));

        let mut history = DialogHistory::new();
        history.push_exchange("Hello", "Greetings.");
        let with_history = b.render_pdp(&c, &pairs(&c), &history, "Hi there").unwrap();
        assert_eq!(
            with_history.text.lines().count(),
            p.text.lines().count() + 2
        );
        let lines: Vec<_> = with_history.text.lines().collect();
        assert_eq!(lines[3], "User: Hello");
        assert_eq!(lines[4], "Spock from Star Trek: Greetings.");
        assert_eq!(lines[5], "User: Hi there");
    }

    #[test]
    fn pdp_requires_pairs_and_context() {
        let b = PromptBuilder::default();
        let c = card(1);
        assert!(b.render_pdp(&c, &[], &DialogHistory::new(), "x").is_err());
        assert!(b.render_pdp(&c, &pairs(&c), &DialogHistory::new(), " ").is_err());
    }

    #[test]
    fn only_utterances_bullets() {
        let b = PromptBuilder::default();
        let p = b.render_only_utterances(&card(3), &DialogHistory::new(), "Hi").unwrap();
        assert_eq!(count_prefix(&p.text, "- "), 3);
        assert_eq!(count_prefix(&p.text, "User: "), 1);
    }

    #[test]
    fn zero_shot_and_guest_shapes() {
        let b = PromptBuilder::default();
        let z = b.render_zero_shot(&card(2), &DialogHistory::new(), "Hi").unwrap();
        assert_eq!(z.text, "Dialogue:\nUser: Hi\nSpock from Star Trek: ");
        assert_eq!(z.text.split('\n').count(), 3);
        let mut history = DialogHistory::new();
        history.push_exchange("Hello", "Hey.");
        let g = b.render_guest(&history, "Hi").unwrap();
        assert_eq!(g.text, "Dialogue:\nUser: Hello\nGuest: Hey.\nUser: Hi\nGuest: ");
    }

    #[test]
    fn stop_sequences_include_end_of_turn() {
        let b = PromptBuilder::default();
        assert_eq!(b.stop_sequences(), vec!["\n", "User:", "<EOT>"]);
        let none = PromptBuilder { end_of_turn: None };
        assert_eq!(none.stop_sequences(), vec!["\n", "User:"]);
    }

    #[test]
    fn format_names_round_trip() {
        for f in PromptFormat::ALL {
            assert_eq!(f.as_str().parse::<PromptFormat>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{f}\""));
        }
        assert!("pdp2".parse::<PromptFormat>().is_err());
    }

    #[test]
    fn truncation_policy() {
        let b = PromptBuilder::default();
        let c = card(3);
        let ps = pairs(&c);
        let h = DialogHistory::new();
        let full = b.render_pdp(&c, &ps, &h, "Hi").unwrap().char_len();
        assert_eq!(truncate_to_budget(&c, &ps, &h, "Hi", full + 100).unwrap(), ps);
        assert_eq!(truncate_to_budget(&c, &ps, &h, "Hi", full).unwrap(), ps);
        let kept = truncate_to_budget(&c, &ps, &h, "Hi", full - 1).unwrap();
        assert_eq!(kept, ps[1..].to_vec());
        let floor = PromptBuilder::pdp_text(&c, &[], &h, "Hi").chars().count();
        assert!(truncate_to_budget(&c, &ps, &h, "Hi", floor).unwrap().is_empty());
        assert!(matches!(
            truncate_to_budget(&c, &ps, &h, "Hi", floor - 1),
            Err(Error::Budget { .. })
        ));
    }
}
