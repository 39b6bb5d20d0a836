//! Automatic style metrics: tokenization, n-gram overlap against a character's
//! utterances, a Naive Bayes character classifier (StyleProb, Style Accuracy)
//! and the batch evaluation runner.

mod classifier;
mod runner;

use std::collections::HashSet;

pub use classifier::{Prior, StyleClassifier};
pub use runner::{
    run_eval, run_eval_on, EvalCell, EvalConfig, EvalMethod, EvalReport, EvalSample,
};

/// Lowercases, splits on whitespace and strips ASCII punctuation from both
/// ends of each piece. Pieces that become empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|piece| piece.trim_matches(|c: char| c.is_ascii_punctuation()))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Fraction of the response's token n-grams (counted with multiplicity) that
/// occur in any of the character's utterances. Responses shorter than `n`
/// tokens, and `n == 0`, score 0.
pub fn ngram_overlap<S: AsRef<str>>(response: &str, character_utterances: &[S], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let tokens = tokenize(response);
    if tokens.len() < n {
        return 0.0;
    }
    let reference: HashSet<Vec<String>> = character_utterances
        .iter()
        .flat_map(|u| {
            let toks = tokenize(u.as_ref());
            toks.windows(n).map(<[String]>::to_vec).collect::<Vec<_>>()
        })
        .collect();
    let grams: Vec<&[String]> = tokens.windows(n).collect();
    let hits = grams.iter().filter(|g| reference.contains(**g)).count();
    hits as f64 / grams.len() as f64
}
