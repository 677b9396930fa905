//! Prompt templates, instruction/demonstration rendering, and the
//! initial-prompt search: every training sample is tried as the single
//! in-context demonstration and the one with the best validation accuracy
//! seeds `p0`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, FewShotCorpus, TokenId, Vocabulary, MASK_TOKEN};
use crate::error::{Error, OracleError, Result};
use crate::oracle::{BatchItem, Oracle, OracleRequest};
use crate::subspace::PromptVector;
use crate::task::evaluate_batch;
use crate::verbalizer::VerbalizerSet;

/// Template texts in the whitespace-token syntax of [`Template::parse`].
pub const SENTIMENT_TEMPLATE: &str = "<P> <S> . It was [MASK]";
pub const TOPIC_TEMPLATE: &str = "<P> [MASK] News: <S>";
pub const CATEGORY_TEMPLATE: &str = "<P> [ Category: [MASK] ] <S>";
pub const PAIR_TEMPLATE: &str = "<P> <S1> ? [MASK] , <S2>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Prompt,
    Sentence(usize),
    Mask,
    Word(TokenId),
}

/// Input pattern with sentence slots and exactly one `[MASK]`.
///
/// `<P>` marks where the continuous prompt sits; it renders to nothing
/// because the prompt reaches the model as vectors, not tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pieces: Vec<Piece>,
    arity: usize,
    text: String,
}

impl Template {
    pub fn parse(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut pieces = Vec::new();
        let mut single = false;
        let mut numbered = Vec::new();
        for word in text.split_whitespace() {
            let piece = match word {
                "<P>" => Piece::Prompt,
                "<S>" => {
                    single = true;
                    Piece::Sentence(0)
                }
                MASK_TOKEN => Piece::Mask,
                w if w.starts_with("<S") && w.ends_with('>') => {
                    let n: usize = w[2..w.len() - 1]
                        .parse()
                        .map_err(|_| Error::Template(format!("bad slot `{w}`")))?;
                    if n == 0 {
                        return Err(Error::Template("slots are numbered from <S1>".into()));
                    }
                    numbered.push(n - 1);
                    Piece::Sentence(n - 1)
                }
                w => {
                    let id = vocab.id(w)?;
                    if vocab.is_special(id) {
                        return Err(Error::Template(format!("`{w}` cannot appear literally")));
                    }
                    Piece::Word(id)
                }
            };
            pieces.push(piece);
        }
        if pieces.iter().filter(|p| **p == Piece::Mask).count() != 1 {
            return Err(Error::Template("template needs exactly one [MASK]".into()));
        }
        if single && !numbered.is_empty() {
            return Err(Error::Template("cannot mix <S> with numbered slots".into()));
        }
        let arity = if single {
            if pieces.iter().filter(|p| matches!(p, Piece::Sentence(_))).count() != 1 {
                return Err(Error::Template("<S> may appear once".into()));
            }
            1
        } else {
            let mut sorted = numbered.clone();
            sorted.sort_unstable();
            if sorted.is_empty() || sorted.iter().enumerate().any(|(i, &n)| i != n) {
                return Err(Error::Template("numbered slots must be <S1>..<Sn>, each once".into()));
            }
            sorted.len()
        };
        let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
        Ok(Self { pieces, arity, text })
    }

    /// Normalized source text, parseable again with the same vocabulary.
    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    /// Fills the slots with `example`'s segments; `fill` replaces `[MASK]`
    /// when given.
    fn fill(&self, example: &Example, fill: Option<TokenId>) -> Result<(Vec<TokenId>, usize)> {
        if example.segments.len() != self.arity {
            return Err(Error::Template(format!(
                "template has {} slot(s) but the example has {} segment(s)",
                self.arity,
                example.segments.len()
            )));
        }
        let mut tokens = Vec::new();
        let mut mask = 0;
        for piece in &self.pieces {
            match *piece {
                Piece::Prompt => {}
                Piece::Sentence(i) => tokens.extend_from_slice(&example.segments[i]),
                Piece::Mask => {
                    mask = tokens.len();
                    tokens.push(fill.unwrap_or(0));
                }
                Piece::Word(t) => tokens.push(t),
            }
        }
        Ok((tokens, mask))
    }
}

/// A training sample rendered with its label word in place of the mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub index: usize,
    pub tokens: Vec<TokenId>,
}

impl Demonstration {
    pub fn from_example(
        index: usize,
        example: &Example,
        template: &Template,
        verbalizers: &VerbalizerSet,
    ) -> Result<Self> {
        if example.label >= verbalizers.num_classes() {
            return Err(Error::Verbalizer(format!("no label word for class {}", example.label)));
        }
        let (tokens, _) = template.fill(example, Some(verbalizers.first_token(example.label)))?;
        Ok(Self { index, tokens })
    }
}

fn check_plain(what: &str, tokens: impl IntoIterator<Item = TokenId>) -> Result<()> {
    if tokens.into_iter().any(|t| t < 2) {
        return Err(Error::Template(format!("{what} may not contain [MASK] or </s>")));
    }
    Ok(())
}

/// `instruction ⊕ </s> ⊕ demonstration ⊕ </s> ⊕ templated input`, or the
/// templated input alone when there is neither instruction nor
/// demonstration. Separators keep the rendering injective.
pub fn render_prompt_text(
    instruction: &[TokenId],
    demonstration: Option<&Demonstration>,
    input: &Example,
    template: &Template,
) -> Result<BatchItem> {
    check_plain("instruction", instruction.iter().copied())?;
    check_plain("input", input.tokens())?;
    let (body, mask) = template.fill(input, None)?;
    if instruction.is_empty() && demonstration.is_none() {
        return Ok(BatchItem {
            tokens: body,
            mask,
            label: input.label,
        });
    }
    let mut tokens = instruction.to_vec();
    tokens.push(1);
    if let Some(d) = demonstration {
        check_plain("demonstration", d.tokens.iter().copied())?;
        tokens.extend_from_slice(&d.tokens);
    }
    tokens.push(1);
    let offset = tokens.len();
    tokens.extend(body);
    Ok(BatchItem {
        tokens,
        mask: offset + mask,
        label: input.label,
    })
}

/// Token sequence whose mean embedding becomes the input layer's `p0`.
pub fn initial_prompt_tokens(instruction: &[TokenId], demonstration: Option<&Demonstration>) -> Vec<TokenId> {
    let mut tokens = instruction.to_vec();
    if let Some(d) = demonstration {
        tokens.extend_from_slice(&d.tokens);
    }
    tokens
}

/// Per-layer `p0`: mean token embedding at layer 0, zeros deeper.
pub fn embed_initial_prompt(tokens: &[TokenId], oracle: &Oracle) -> Result<Vec<PromptVector>> {
    let info = oracle.info();
    if tokens.is_empty() {
        return Err(Error::Template("initial prompt text is empty".into()));
    }
    let mut mean = vec![0.0; info.prompt_dim];
    for &t in tokens {
        let e = oracle.embedding(t).ok_or_else(|| {
            if (t as usize) < info.vocab_size {
                Error::InvalidParameter("backend does not expose its embedding table".into())
            } else {
                Error::UnknownToken(format!("#{t}"))
            }
        })?;
        crate::error::check_len("embedding", info.prompt_dim, e.len())?;
        for (m, v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    let n = tokens.len() as f64;
    let mut out = vec![PromptVector::new(mean.into_iter().map(|v| v / n).collect(), 0)?];
    out.extend((1..info.layers).map(|l| PromptVector::zeros(info.prompt_dim, l)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoScore {
    pub index: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSelection {
    pub demonstration: Demonstration,
    pub scores: Vec<DemoScore>,
}

#[derive(Debug, thiserror::Error)]
#[error("demonstration search failed after {} of {} candidates: {source}", .partial.len(), .total)]
pub struct DemoSearchError {
    pub partial: Vec<DemoScore>,
    pub total: usize,
    #[source]
    pub source: Error,
}

/// Tries every training sample as the demonstration under the zero prompt
/// and returns the one with the highest validation accuracy (lowest index on
/// ties). Performs exactly one oracle call per training sample.
pub fn select_demonstration(
    corpus: &FewShotCorpus,
    instruction: &[TokenId],
    template: &Template,
    oracle: &Oracle,
    verbalizers: &VerbalizerSet,
) -> std::result::Result<DemoSelection, DemoSearchError> {
    let total = corpus.train().len();
    let fail = |partial, source| DemoSearchError { partial, total, source };
    let demos = corpus
        .train()
        .iter()
        .enumerate()
        .map(|(i, ex)| Demonstration::from_example(i, ex, template, verbalizers))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| fail(Vec::new(), e))?;
    let info = oracle.info();
    let zero = vec![vec![0.0; info.prompt_dim]; info.layers];
    let outcomes: Vec<Result<DemoScore>> = demos
        .par_iter()
        .map(|demo| {
            let batch = corpus
                .validation()
                .iter()
                .map(|ex| render_prompt_text(instruction, Some(demo), ex, template))
                .collect::<Result<Vec<_>>>()?;
            let eval = evaluate_batch(
                oracle,
                &OracleRequest {
                    prompts: zero.clone(),
                    batch,
                    id: demo.index as u64,
                },
                verbalizers,
            )?;
            Ok(DemoScore {
                index: demo.index,
                accuracy: eval.accuracy,
                loss: eval.loss,
            })
        })
        .collect();
    let mut scores = Vec::with_capacity(total);
    let mut first_err = None;
    for o in outcomes {
        match o {
            Ok(s) => scores.push(s),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(fail(scores, e));
    }
    let best = argmax_accuracy(&scores).ok_or_else(|| fail(Vec::new(), OracleError::Rejected("empty training set".into()).into()))?;
    Ok(DemoSelection {
        demonstration: demos[best].clone(),
        scores,
    })
}

/// Index of the highest accuracy, lowest index on ties.
pub fn argmax_accuracy(scores: &[DemoScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s.accuracy > scores[b].accuracy) {
            best = Some(i);
        }
    }
    best
}
