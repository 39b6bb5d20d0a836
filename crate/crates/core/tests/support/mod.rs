//! Randomized matcher instances and a brute-force selection oracle that does
//! not go through the index or matcher code paths.
#![allow(dead_code)]

use pdp_core::{CandidateContext, CandidateIndex, CharacterCard, Embedding, RegisteredCharacter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub pool: Vec<Vec<f32>>,
    pub utterances: Vec<Vec<f32>>,
    pub context: Vec<f32>,
}

fn vector(rng: &mut ChaCha8Rng, dim: usize, coarse: bool) -> Vec<f32> {
    (0..dim)
        .map(|_| {
            if coarse {
                rng.gen_range(-2i32..=2) as f32 * 0.5
            } else {
                rng.gen_range(-1.0f32..1.0)
            }
        })
        .collect()
}

impl Instance {
    /// N <= 100, dim <= 8, k <= 8. Roughly a third of the instances use coarse
    /// values and duplicated candidates so argmax ties actually occur.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=100);
        let dim = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=8);
        let coarse = rng.gen_bool(0.35);
        let mut pool: Vec<Vec<f32>> = (0..n).map(|_| vector(&mut rng, dim, coarse)).collect();
        if coarse && n > 1 {
            for _ in 0..rng.gen_range(1..=n.min(10)) {
                let from = rng.gen_range(0..n);
                let to = rng.gen_range(0..n);
                pool[to] = pool[from].clone();
            }
        }
        let utterances = (0..k).map(|_| vector(&mut rng, dim, coarse)).collect();
        let context = vector(&mut rng, dim, coarse);
        Instance {
            pool,
            utterances,
            context,
        }
    }

    pub fn index(&self) -> CandidateIndex {
        self.index_scaled(1.0)
    }

    pub fn index_scaled(&self, factor: f32) -> CandidateIndex {
        CandidateIndex::from_parts(
            (0..self.pool.len())
                .map(|id| CandidateContext {
                    id,
                    text: format!("candidate {id}"),
                })
                .collect(),
            self.pool
                .iter()
                .map(|v| Embedding::new(v.iter().map(|x| x * factor).collect()).unwrap())
                .collect(),
            "oracle".into(),
        )
        .unwrap()
    }

    pub fn character(&self, index: &CandidateIndex) -> RegisteredCharacter {
        let card = CharacterCard::new(
            "Oracle",
            None,
            (0..self.utterances.len()).map(|i| format!("utterance {i}")).collect(),
        );
        RegisteredCharacter::with_embeddings(
            card,
            self.utterances
                .iter()
                .map(|v| Embedding::new(v.clone()).unwrap())
                .collect(),
            index,
        )
        .unwrap()
    }

    pub fn context_embedding(&self) -> Embedding {
        Embedding::new(self.context.clone()).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.context.len()
    }
}

fn inner(a: &[f32], b: &[f32]) -> f64 {
    let mut total = 0.0f64;
    for i in 0..a.len() {
        total += a[i] as f64 * b[i] as f64;
    }
    total
}

/// Enumerates every candidate; the first maximum (lowest id) wins.
pub fn brute_force_argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for id in 1..scores.len() {
        if scores[id] > scores[best] {
            best = id;
        }
    }
    best
}

pub fn oracle_static(pool: &[Vec<f32>], utterance: &[f32]) -> usize {
    let scores: Vec<f64> = pool.iter().map(|c| inner(c, utterance)).collect();
    brute_force_argmax(&scores)
}

pub fn oracle_dynamic(pool: &[Vec<f32>], utterance: &[f32], context: &[f32]) -> usize {
    let scores: Vec<f64> = pool
        .iter()
        .map(|c| inner(c, context) + inner(c, utterance))
        .collect();
    brute_force_argmax(&scores)
}

pub fn oracle_order_key(context: &[f32], utterance: &[f32]) -> f64 {
    inner(context, utterance)
}

/// True when the static argmax is shared by more than one candidate.
pub fn static_tie(pool: &[Vec<f32>], utterance: &[f32]) -> bool {
    let scores: Vec<f64> = pool.iter().map(|c| inner(c, utterance)).collect();
    let best = scores[brute_force_argmax(&scores)];
    scores.iter().filter(|&&s| s == best).count() > 1
}
