//! Synthetic few-shot classification task with a matching simulated model.
//!
//! Every class owns a set of cue words and a set of label words. Cue words
//! of class `c` share a direction `u_c` in embedding space; label words share
//! `v_c = u_c ⊙ m_c`, where `m_c` is a balanced random sign pattern, so the
//! two are nearly orthogonal. The hidden layers are close to the identity,
//! which makes the prompt-free model roughly blind to the class signal while
//! per-coordinate prompt offsets can gate it into agreement with the label
//! words. Examples mix own-class cues, other-class cues and neutral filler.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Oracle, SimulatedBackend, SimulatedModelSpec};
use crate::corpus::{Example, FewShotCorpus, TokenId, Vocabulary};
use crate::error::Result;
use crate::initseek::{Template, SENTIMENT_TEMPLATE};
use crate::verbalizer::VerbalizerSet;

pub const INSTRUCTION_WORDS: [&str; 6] = ["Decide", "which", "class", "the", "text", "shows"];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureParams {
    pub layers: usize,
    pub prompt_dim: usize,
    pub cue_words: usize,
    pub label_words: usize,
    pub neutral_words: usize,
    pub example_len: usize,
    /// Chance that a token is one of the example's own class cues.
    pub cue_rate: f64,
    /// Chance that a token is a cue of some other class.
    pub cross_rate: f64,
    /// Background std of every embedding entry.
    pub embedding_noise: f64,
    /// Per-coordinate scale of the class directions.
    pub signal: f64,
    /// Diagonal of each hidden transform.
    pub hidden_diag: f64,
    /// Std scale of the off-diagonal mixing (divided by `√D`).
    pub hidden_mix: f64,
    /// `U_l = inject_gain · I`.
    pub inject_gain: f64,
}

impl Default for FixtureParams {
    fn default() -> Self {
        Self {
            layers: 3,
            prompt_dim: 128,
            cue_words: 8,
            label_words: 4,
            neutral_words: 48,
            example_len: 8,
            cue_rate: 0.4,
            cross_rate: 0.1,
            embedding_noise: 1.0,
            signal: 1.0,
            hidden_diag: 1.0,
            hidden_mix: 0.3,
            inject_gain: 1.0,
        }
    }
}

/// Everything needed to run the pipeline against the fixture model.
#[derive(Debug, Clone)]
pub struct FixtureTask {
    pub vocab: Vocabulary,
    pub corpus: FewShotCorpus,
    pub spec: Arc<SimulatedModelSpec>,
    pub template: Template,
    pub instruction: Vec<TokenId>,
    /// First label word per class.
    pub manual: VerbalizerSet,
    /// All label words per class, manual word first.
    pub label_words: Vec<Vec<TokenId>>,
}

impl FixtureTask {
    pub fn backend(&self) -> SimulatedBackend {
        SimulatedBackend::new(Arc::clone(&self.spec), self.manual.clone())
            .expect("fixture label words are in the vocabulary")
    }

    pub fn oracle(&self) -> Oracle {
        Oracle::simulated(self.backend())
    }
}

pub fn make_fixture_task(seed: u64, classes: usize, shots: usize) -> Result<FixtureTask> {
    make_fixture_task_with(&FixtureParams::default(), seed, classes, shots)
}

pub fn make_fixture_task_with(params: &FixtureParams, seed: u64, classes: usize, shots: usize) -> Result<FixtureTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.prompt_dim;

    let mut words: Vec<String> = [".", "It", "was"].iter().map(|s| s.to_string()).collect();
    words.extend(INSTRUCTION_WORDS.iter().map(|s| s.to_string()));
    let cue_start = words.len() + 2;
    for c in 0..classes {
        words.extend((0..params.cue_words).map(|i| format!("cue{c}_{i}")));
    }
    let label_start = words.len() + 2;
    for c in 0..classes {
        words.extend((0..params.label_words).map(|i| format!("label{c}_{i}")));
    }
    let neutral_start = words.len() + 2;
    words.extend((0..params.neutral_words).map(|i| format!("w{i}")));
    let vocab = Vocabulary::new(words)?;
    let v = vocab.len();

    let cue = |c: usize, i: usize| (cue_start + c * params.cue_words + i) as TokenId;
    let label = |c: usize, i: usize| (label_start + c * params.label_words + i) as TokenId;

    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let directions: Vec<Vec<f64>> = if classes == 2 {
        let u: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        vec![u.clone(), u.iter().map(|x| -x).collect()]
    } else {
        (0..classes).map(|_| (0..d).map(|_| gauss(&mut rng)).collect()).collect()
    };
    let mut signs: Vec<f64> = (0..d).map(|i| if i < d / 2 { 1.0 } else { -1.0 }).collect();
    signs.shuffle(&mut rng);
    let label_dirs: Vec<Vec<f64>> = directions
        .iter()
        .map(|u| u.iter().zip(&signs).map(|(a, s)| a * s).collect())
        .collect();

    let mut embeddings = DMatrix::from_fn(v, d, |_, _| 0.0);
    for mut row in embeddings.row_iter_mut() {
        for x in row.iter_mut() {
            *x = params.embedding_noise * gauss(&mut rng);
        }
    }
    for c in 0..classes {
        for i in 0..params.cue_words {
            let mut row = embeddings.row_mut(cue(c, i) as usize);
            for (x, u) in row.iter_mut().zip(&directions[c]) {
                *x += params.signal * u;
            }
        }
        for i in 0..params.label_words {
            let mut row = embeddings.row_mut(label(c, i) as usize);
            for (x, u) in row.iter_mut().zip(&label_dirs[c]) {
                *x += params.signal * u;
            }
        }
    }

    let mix = params.hidden_mix / (d as f64).sqrt();
    let hidden = (0..params.layers)
        .map(|_| {
            let mut w = DMatrix::from_fn(d, d, |_, _| 0.0);
            for x in w.iter_mut() {
                *x = mix * gauss(&mut rng);
            }
            for i in 0..d {
                w[(i, i)] += params.hidden_diag;
            }
            w
        })
        .collect();
    let inject = (0..params.layers)
        .map(|_| DMatrix::identity(d, d) * params.inject_gain)
        .collect();
    let spec = Arc::new(SimulatedModelSpec::from_parts(embeddings, hidden, inject)?);

    let sample = |label_c: usize, rng: &mut ChaCha8Rng| -> Example {
        let tokens = (0..params.example_len)
            .map(|_| {
                let r: f64 = rng.random();
                if r < params.cue_rate {
                    cue(label_c, rng.random_range(0..params.cue_words))
                } else if r < params.cue_rate + params.cross_rate && classes > 1 {
                    let mut other = rng.random_range(0..classes - 1);
                    if other >= label_c {
                        other += 1;
                    }
                    cue(other, rng.random_range(0..params.cue_words))
                } else {
                    (neutral_start + rng.random_range(0..params.neutral_words)) as TokenId
                }
            })
            .collect();
        Example::single(tokens, label_c)
    };
    let split = |rng: &mut ChaCha8Rng| -> Vec<Example> {
        let mut out: Vec<Example> = (0..classes)
            .flat_map(|c| (0..shots).map(move |_| c))
            .map(|c| sample(c, rng))
            .collect();
        out.shuffle(rng);
        out
    };
    let train = split(&mut rng);
    let validation = split(&mut rng);
    let corpus = FewShotCorpus::new(train, validation, classes, shots)?;

    let label_words: Vec<Vec<TokenId>> = (0..classes)
        .map(|c| (0..params.label_words).map(|i| label(c, i)).collect())
        .collect();
    let manual = VerbalizerSet::manual(label_words.iter().map(|ws| vec![ws[0]]).collect())?;
    let template = Template::parse(SENTIMENT_TEMPLATE, &vocab)?;
    let instruction = INSTRUCTION_WORDS.iter().map(|w| vocab.id(w)).collect::<Result<Vec<_>>>()?;
    Ok(FixtureTask {
        vocab,
        corpus,
        spec,
        template,
        instruction,
        manual,
        label_words,
    })
}
