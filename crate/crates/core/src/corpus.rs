//! Vocabulary and few-shot corpora.
//!
//! Tokens are opaque strings keyed by integer id; text is split on
//! whitespace and every piece must already be in the vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type TokenId = u32;

pub const MASK_TOKEN: &str = "[MASK]";
/// Separator between instruction, demonstration and input.
pub const SEP_TOKEN: &str = "</s>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary with `[MASK]` at id 0 and `</s>` at id 1, followed
    /// by `words` in order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![MASK_TOKEN.to_string(), SEP_TOKEN.to_string()];
        all.extend(words.into_iter().map(Into::into));
        Self::from_tokens(all)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != MASK_TOKEN || tokens[1] != SEP_TOKEN {
            return Err(Error::Format("vocabulary must start with [MASK] and </s>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(invalid(format!("token {t:?} must be non-empty without whitespace")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(invalid(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownToken(format!("#{id}")))
    }

    pub fn mask_id(&self) -> TokenId {
        0
    }

    pub fn sep_id(&self) -> TokenId {
        1
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id < 2
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    /// Whitespace tokenization against the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let words = ids.iter().map(|&i| self.token(i)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// One labeled input; pair tasks carry two segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub segments: Vec<Vec<TokenId>>,
    pub label: usize,
}

impl Example {
    pub fn single(tokens: Vec<TokenId>, label: usize) -> Self {
        Self {
            segments: vec![tokens],
            label,
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.segments.iter().flatten().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// `k` labeled examples per class in both the training and validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotCorpus {
    train: Vec<Example>,
    validation: Vec<Example>,
    num_classes: usize,
    shots: usize,
}

impl FewShotCorpus {
    pub fn new(train: Vec<Example>, validation: Vec<Example>, num_classes: usize, shots: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid("a corpus needs at least two classes"));
        }
        if shots == 0 {
            return Err(invalid("shots per class must be >= 1"));
        }
        for (name, split) in [("train", &train), ("validation", &validation)] {
            let mut counts = vec![0usize; num_classes];
            for ex in split {
                if ex.label >= num_classes {
                    return Err(invalid(format!(
                        "{name} label {} out of range for {num_classes} classes",
                        ex.label
                    )));
                }
                counts[ex.label] += 1;
            }
            if let Some((c, n)) = counts.iter().enumerate().find(|(_, &n)| n != shots) {
                return Err(invalid(format!("{name} split has {n} examples for class {c}, expected {shots}")));
            }
        }
        Ok(Self {
            train,
            validation,
            num_classes,
            shots,
        })
    }

    pub fn train(&self) -> &[Example] {
        &self.train
    }

    pub fn validation(&self) -> &[Example] {
        &self.validation
    }

    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn class_examples(&self, split: Split, class: usize) -> impl Iterator<Item = &Example> {
        self.split(split).iter().filter(move |e| e.label == class)
    }
}
