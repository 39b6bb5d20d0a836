use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::tokenize;
use crate::error::{Error, Result};
use crate::matcher::CharacterCard;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prior {
    #[default]
    Uniform,
    /// Proportional to each class's number of training utterances.
    Frequency,
}

/// Multinomial Naive Bayes over unigram tokens with additive smoothing.
///
/// Tokens outside the training vocabulary carry no evidence and are skipped,
/// so text made only of unseen tokens classifies to the prior.
#[derive(Debug, Clone)]
pub struct StyleClassifier {
    labels: Vec<String>,
    vocab: BTreeSet<String>,
    counts: Vec<HashMap<String, u64>>,
    totals: Vec<u64>,
    documents: Vec<usize>,
    alpha: f64,
    prior: Prior,
}

impl StyleClassifier {
    /// Trains with `alpha = 1` and a uniform prior.
    pub fn train<L, U>(classes: &[(L, U)]) -> Result<Self>
    where
        L: AsRef<str>,
        U: AsRef<[String]>,
    {
        Self::train_with(classes, 1.0, Prior::Uniform)
    }

    pub fn train_with<L, U>(classes: &[(L, U)], alpha: f64, prior: Prior) -> Result<Self>
    where
        L: AsRef<str>,
        U: AsRef<[String]>,
    {
        if classes.len() < 2 {
            return Err(Error::Config(format!(
                "style classifier needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("smoothing alpha must be positive, got {alpha}")));
        }
        let mut labels = Vec::with_capacity(classes.len());
        let mut vocab = BTreeSet::new();
        let mut counts = Vec::with_capacity(classes.len());
        let mut totals = Vec::with_capacity(classes.len());
        let mut documents = Vec::with_capacity(classes.len());
        for (label, utterances) in classes {
            let label = label.as_ref().to_string();
            let utterances = utterances.as_ref();
            if labels.contains(&label) {
                return Err(Error::Config(format!("duplicate class label {label:?}")));
            }
            if utterances.is_empty() {
                return Err(Error::Config(format!("class {label:?} has no utterances")));
            }
            let mut class_counts: HashMap<String, u64> = HashMap::new();
            let mut total = 0u64;
            for token in utterances.iter().flat_map(|u| tokenize(u)) {
                vocab.insert(token.clone());
                *class_counts.entry(token).or_default() += 1;
                total += 1;
            }
            labels.push(label);
            counts.push(class_counts);
            totals.push(total);
            documents.push(utterances.len());
        }
        Ok(StyleClassifier {
            labels,
            vocab,
            counts,
            totals,
            documents,
            alpha,
            prior,
        })
    }

    /// One class per card, labelled by `character_id`.
    pub fn from_cards<'a>(cards: impl IntoIterator<Item = &'a CharacterCard>) -> Result<Self> {
        let classes: Vec<(&str, &[String])> = cards
            .into_iter()
            .map(|c| (c.character_id.as_str(), c.utterances.as_slice()))
            .collect();
        Self::train(&classes)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    pub fn count(&self, token: &str, label: &str) -> u64 {
        self.label_index(label)
            .and_then(|i| self.counts[i].get(token).copied())
            .unwrap_or(0)
    }

    pub fn total(&self, label: &str) -> u64 {
        self.label_index(label).map_or(0, |i| self.totals[i])
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    fn log_prior(&self, class: usize) -> f64 {
        match self.prior {
            Prior::Uniform => -(self.labels.len() as f64).ln(),
            Prior::Frequency => {
                let all: usize = self.documents.iter().sum();
                (self.documents[class] as f64 / all as f64).ln()
            }
        }
    }

    /// Posterior over classes, in label order.
    pub fn classify(&self, text: &str) -> Vec<f64> {
        let tokens: Vec<String> = tokenize(text)
            .into_iter()
            .filter(|t| self.vocab.contains(t))
            .collect();
        let v = self.vocab.len() as f64;
        let log_joint: Vec<f64> = (0..self.labels.len())
            .map(|c| {
                let denom = (self.totals[c] as f64 + self.alpha * v).ln();
                tokens.iter().fold(self.log_prior(c), |acc, t| {
                    let n = self.counts[c].get(t).copied().unwrap_or(0) as f64;
                    acc + (n + self.alpha).ln() - denom
                })
            })
            .collect();
        let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_joint.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        weights.into_iter().map(|w| w / z).collect()
    }

    /// Label with the highest posterior; ties go to the earlier label.
    pub fn predict(&self, text: &str) -> usize {
        let post = self.classify(text);
        let mut best = 0;
        for (i, p) in post.iter().enumerate() {
            if *p > post[best] {
                best = i;
            }
        }
        best
    }

    fn target(&self, target: &str) -> Result<usize> {
        self.label_index(target)
            .ok_or_else(|| Error::Config(format!("unknown style label {target:?}")))
    }

    /// Mean posterior probability of `target` over `responses`.
    pub fn style_prob<S: AsRef<str>>(&self, responses: &[S], target: &str) -> Result<f64> {
        let t = self.target(target)?;
        if responses.is_empty() {
            return Err(Error::InvalidInput("no responses to score".into()));
        }
        let sum: f64 = responses.iter().map(|r| self.classify(r.as_ref())[t]).sum();
        Ok(sum / responses.len() as f64)
    }

    /// Fraction of responses whose predicted label is `target`.
    pub fn style_accuracy<S: AsRef<str>>(&self, responses: &[S], target: &str) -> Result<f64> {
        let t = self.target(target)?;
        if responses.is_empty() {
            return Err(Error::InvalidInput("no responses to score".into()));
        }
        let hits = responses.iter().filter(|r| self.predict(r.as_ref()) == t).count();
        Ok(hits as f64 / responses.len() as f64)
    }
}
