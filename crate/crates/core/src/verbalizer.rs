//! Label-word ensembles: manual lists, TF-IDF search over the few-shot
//! corpus, oracle-ranked candidates, and probability-averaged class scoring.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{FewShotCorpus, Split, TokenId, Vocabulary};
use crate::error::{invalid, Error, OracleError, Result};
use crate::initseek::{render_prompt_text, Template};
use crate::oracle::{BatchItem, Oracle, OracleRequest};

/// Default number of label words kept per class.
pub const DEFAULT_PER_CLASS_CAP: usize = 3;

const NORMALIZED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Manual,
    Tfidf,
    Auto,
}

/// Per-class scores; `normalized` scores sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    probs: Vec<f64>,
    normalized: bool,
}

impl ClassScores {
    pub fn raw(probs: Vec<f64>) -> Self {
        Self {
            probs,
            normalized: false,
        }
    }

    pub fn normalized(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("class probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZED_TOL {
            return Err(invalid(format!("class probabilities sum to {total}, not 1")));
        }
        Ok(Self {
            probs,
            normalized: true,
        })
    }

    /// Rescales to sum one; an all-zero vector becomes uniform.
    pub fn normalize(self) -> Self {
        if self.normalized {
            return self;
        }
        let total: f64 = self.probs.iter().sum();
        let n = self.probs.len() as f64;
        let probs = if total > 0.0 {
            self.probs.iter().map(|p| p / total).collect()
        } else {
            vec![1.0 / n; self.probs.len()]
        };
        Self {
            probs,
            normalized: true,
        }
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (c, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelToken {
    pub token: TokenId,
    pub source: Provenance,
}

/// Disjoint, non-empty per-class label word lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbalizerSet {
    classes: Vec<Vec<LabelToken>>,
}

impl VerbalizerSet {
    pub fn new(classes: Vec<Vec<LabelToken>>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Verbalizer("need label words for at least two classes".into()));
        }
        let mut owner = HashMap::new();
        for (c, words) in classes.iter().enumerate() {
            if words.is_empty() {
                return Err(Error::Verbalizer(format!("class {c} has no label words")));
            }
            for w in words {
                if let Some(prev) = owner.insert(w.token, c) {
                    let msg = if prev == c {
                        format!("token {} listed twice for class {c}", w.token)
                    } else {
                        format!("token {} claimed by classes {prev} and {c}", w.token)
                    };
                    return Err(Error::Verbalizer(msg));
                }
            }
        }
        Ok(Self { classes })
    }

    /// Single-provenance set from plain token lists.
    pub fn manual(classes: Vec<Vec<TokenId>>) -> Result<Self> {
        Self::new(
            classes
                .into_iter()
                .map(|ts| {
                    ts.into_iter()
                        .map(|token| LabelToken {
                            token,
                            source: Provenance::Manual,
                        })
                        .collect()
                })
                .collect(),
        )
    }

    /// Looks words up in `vocab`, one list per class.
    pub fn from_words(vocab: &Vocabulary, classes: &[&[&str]]) -> Result<Self> {
        let ids = classes
            .iter()
            .map(|ws| ws.iter().map(|w| vocab.id(w)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let set = Self::manual(ids)?;
        set.check_vocab(vocab)?;
        Ok(set)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        for t in self.all_tokens() {
            if !vocab.contains(t) {
                return Err(Error::UnknownToken(format!("#{t}")));
            }
            if vocab.is_special(t) {
                return Err(Error::Verbalizer(format!("special token {} cannot be a label word", vocab.token(t)?)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, c: usize) -> &[LabelToken] {
        &self.classes[c]
    }

    pub fn class_tokens(&self, c: usize) -> Vec<TokenId> {
        self.classes[c].iter().map(|w| w.token).collect()
    }

    pub fn classes(&self) -> &[Vec<LabelToken>] {
        &self.classes
    }

    pub fn all_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.classes.iter().flatten().map(|w| w.token)
    }

    /// Word used to verbalize class `c` inside a demonstration.
    pub fn first_token(&self, c: usize) -> TokenId {
        self.classes[c][0].token
    }

    /// Keeps only the `i`-th word of every class.
    pub fn member(&self, i: usize) -> Result<Self> {
        let classes = self
            .classes
            .iter()
            .enumerate()
            .map(|(c, ws)| {
                ws.get(i)
                    .map(|w| vec![*w])
                    .ok_or_else(|| Error::Verbalizer(format!("class {c} has no word #{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes)
    }

    pub fn to_json(&self, vocab: &Vocabulary) -> Result<String> {
        let doc = VerbalizerDoc {
            classes: self
                .classes
                .iter()
                .enumerate()
                .map(|(label, ws)| {
                    Ok(ClassDoc {
                        label,
                        tokens: ws
                            .iter()
                            .map(|w| {
                                Ok(TokenDoc {
                                    token: vocab.token(w.token)?.to_string(),
                                    source: w.source,
                                })
                            })
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<_>>()?,
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut doc: VerbalizerDoc = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        doc.classes.sort_by_key(|c| c.label);
        if doc.classes.iter().enumerate().any(|(i, c)| c.label != i) {
            return Err(Error::Format("class labels must be 0..C without gaps".into()));
        }
        let classes = doc
            .classes
            .into_iter()
            .map(|c| {
                c.tokens
                    .into_iter()
                    .map(|t| {
                        Ok(LabelToken {
                            token: vocab.id(&t.token)?,
                            source: t.source,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let set = Self::new(classes)?;
        set.check_vocab(vocab)?;
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct VerbalizerDoc {
    classes: Vec<ClassDoc>,
}

#[derive(Serialize, Deserialize)]
struct ClassDoc {
    label: usize,
    tokens: Vec<TokenDoc>,
}

#[derive(Serialize, Deserialize)]
struct TokenDoc {
    token: String,
    source: Provenance,
}

/// Mean mask-position probability of each class's label words (unnormalized).
pub fn score_classes(mask_probs: &[f64], verbalizers: &VerbalizerSet) -> Result<ClassScores> {
    let mut scores = Vec::with_capacity(verbalizers.num_classes());
    for (c, words) in verbalizers.classes().iter().enumerate() {
        if words.is_empty() {
            return Err(Error::Verbalizer(format!("class {c} has no label words")));
        }
        let mut sum = 0.0;
        for w in words {
            let p = *mask_probs
                .get(w.token as usize)
                .ok_or_else(|| Error::UnknownToken(format!("#{}", w.token)))?;
            if !(p >= 0.0) {
                return Err(invalid(format!("mask probability {p} for token {} is negative", w.token)));
            }
            sum += p;
        }
        scores.push(sum / words.len() as f64);
    }
    Ok(ClassScores::raw(scores))
}

/// Top `k` words per class by class-document TF-IDF.
///
/// Each class's training texts form one document; `tf` is the raw count in
/// that document and `idf = ln((1 + C) / (1 + df))` with `df` the number of
/// class documents containing the word. Words scoring zero are dropped.
pub fn tfidf_candidates(corpus: &FewShotCorpus, vocab: &Vocabulary, k_per_class: usize) -> Result<Vec<Vec<TokenId>>> {
    if k_per_class < 1 {
        return Err(invalid("k_per_class must be >= 1"));
    }
    let classes = corpus.num_classes();
    let mut tf: Vec<HashMap<TokenId, usize>> = vec![HashMap::new(); classes];
    for ex in corpus.train() {
        for t in ex.tokens().filter(|&t| !vocab.is_special(t)) {
            *tf[ex.label].entry(t).or_default() += 1;
        }
    }
    if let Some(c) = tf.iter().position(HashMap::is_empty) {
        return Err(invalid(format!("class {c} has no training text")));
    }
    let mut df: HashMap<TokenId, usize> = HashMap::new();
    for counts in &tf {
        for &t in counts.keys() {
            *df.entry(t).or_default() += 1;
        }
    }
    let c1 = (1 + classes) as f64;
    tf.iter()
        .map(|counts| {
            let mut scored = counts
                .iter()
                .map(|(&t, &n)| Ok((n as f64 * (c1 / (1 + df[&t]) as f64).ln(), vocab.token(t)?, t)))
                .collect::<Result<Vec<_>>>()?;
            scored.retain(|(s, _, _)| *s > 0.0);
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
            Ok(scored.into_iter().take(k_per_class).map(|(_, _, t)| t).collect())
        })
        .collect()
}

/// Top `k` words per class by mean mask probability under the zero prompt.
///
/// One oracle call per class over that class's training examples. Specials
/// are never proposed; a word goes to the lowest class index ranking it.
pub fn auto_candidates(
    corpus: &FewShotCorpus,
    oracle: &Oracle,
    template: &Template,
    vocab: &Vocabulary,
    k_per_class: usize,
) -> Result<Vec<Vec<TokenId>>> {
    if k_per_class < 1 {
        return Err(invalid("k_per_class must be >= 1"));
    }
    let info = oracle.info();
    let zero = vec![vec![0.0; info.prompt_dim]; info.layers];
    let mut claimed = HashSet::new();
    let mut out = Vec::with_capacity(corpus.num_classes());
    for c in 0..corpus.num_classes() {
        let batch = corpus
            .class_examples(Split::Train, c)
            .map(|ex| render_prompt_text(&[], None, ex, template))
            .collect::<Result<Vec<BatchItem>>>()?;
        let response = oracle.evaluate(&OracleRequest {
            prompts: zero.clone(),
            batch,
            id: c as u64,
        })?;
        let mut mean = vec![0.0; info.vocab_size];
        for p in &response.probs {
            if p.len() != info.vocab_size {
                return Err(OracleError::Protocol(format!(
                    "probability vector has length {}, expected {}",
                    p.len(),
                    info.vocab_size
                ))
                .into());
            }
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        let mut ranked: Vec<TokenId> = (0..info.vocab_size as TokenId)
            .filter(|&t| !vocab.is_special(t) && !claimed.contains(&t))
            .collect();
        ranked.sort_by(|&a, &b| mean[b as usize].total_cmp(&mean[a as usize]).then(a.cmp(&b)));
        ranked.truncate(k_per_class);
        claimed.extend(ranked.iter().copied());
        out.push(ranked);
    }
    Ok(out)
}

/// Merges the three routes into one disjoint set of at most `cap` words per
/// class. Sources are taken in the order manual, tfidf, auto; within a
/// source, classes claim words in index order and the first claim wins.
pub fn assemble_m2(
    manual: &[Vec<TokenId>],
    tfidf: &[Vec<TokenId>],
    auto: &[Vec<TokenId>],
    per_class_cap: usize,
) -> Result<VerbalizerSet> {
    if per_class_cap < 1 {
        return Err(invalid("per_class_cap must be >= 1"));
    }
    let classes = manual.len().max(tfidf.len()).max(auto.len());
    let mut owner: HashMap<TokenId, usize> = HashMap::new();
    let mut out: Vec<Vec<LabelToken>> = vec![Vec::new(); classes];
    for (lists, source) in [
        (manual, Provenance::Manual),
        (tfidf, Provenance::Tfidf),
        (auto, Provenance::Auto),
    ] {
        for (c, list) in lists.iter().enumerate() {
            for &token in list {
                if out[c].len() >= per_class_cap {
                    break;
                }
                if owner.contains_key(&token) {
                    continue;
                }
                owner.insert(token, c);
                out[c].push(LabelToken { token, source });
            }
        }
    }
    VerbalizerSet::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Example;
    use proptest::prelude::*;

    fn manual(lists: &[&[TokenId]]) -> VerbalizerSet {
        VerbalizerSet::manual(lists.iter().map(|l| l.to_vec()).collect()).unwrap()
    }

    #[test]
    fn mean_of_class_probabilities() {
        let probs = [0.0, 0.8, 0.6, 0.1, 0.5];
        let s = score_classes(&probs, &manual(&[&[1, 2], &[3]])).unwrap();
        assert!((s.probs()[0] - 0.7).abs() < 1e-15);
        assert_eq!(s.probs()[1], 0.1);
        assert!(!s.is_normalized());
        let swapped = score_classes(&probs, &manual(&[&[2, 1], &[3]])).unwrap();
        assert_eq!(s, swapped);
        let single = score_classes(&probs, &manual(&[&[4], &[3]])).unwrap();
        assert_eq!(single.probs(), &[0.5, 0.1]);
    }

    #[test]
    fn normalization_and_argmax() {
        let s = ClassScores::raw(vec![0.3, 0.1]).normalize();
        assert!((s.probs()[0] - 0.75).abs() < 1e-15);
        assert_eq!(s.argmax(), 0);
        assert_eq!(ClassScores::raw(vec![0.0, 0.0]).normalize().probs(), &[0.5, 0.5]);
        assert_eq!(ClassScores::raw(vec![0.2, 0.2, 0.1]).argmax(), 0);
        assert!(ClassScores::normalized(vec![0.6, 0.6]).is_err());
    }

    #[test]
    fn rejects_overlap_and_empty_classes() {
        assert!(VerbalizerSet::manual(vec![vec![1], vec![1]]).is_err());
        assert!(VerbalizerSet::manual(vec![vec![1], vec![]]).is_err());
        assert!(VerbalizerSet::manual(vec![vec![1, 1], vec![2]]).is_err());
        assert!(score_classes(&[0.5, 0.5], &manual(&[&[0], &[5]])).is_err());
    }

    #[test]
    fn tfidf_prefers_class_exclusive_words() {
        // Class A = "good good fine", class B = "bad awful", C = 2.
        // idf of a word in one class: ln(3/2) = 0.405465; "good" scores
        // 2 × 0.405465 = 0.81093 and "fine" 0.405465, so A's top-1 is "good".
        let vocab = Vocabulary::new(["good", "fine", "bad", "awful", "the"]).unwrap();
        let enc = |s: &str| vocab.encode(s).unwrap();
        let train = vec![
            Example::single(enc("good good fine the"), 0),
            Example::single(enc("bad awful the the the"), 1),
        ];
        let corpus = FewShotCorpus::new(train.clone(), train, 2, 1).unwrap();
        let top = tfidf_candidates(&corpus, &vocab, 1).unwrap();
        assert_eq!(top[0], vec![vocab.id("good").unwrap()]);
        // "the" appears in both classes: idf = ln(3/3) = 0, never ranked.
        let all = tfidf_candidates(&corpus, &vocab, 10).unwrap();
        assert!(!all.iter().flatten().any(|&t| t == vocab.id("the").unwrap()));
        assert_eq!(vocab.decode(&all[1]).unwrap(), "awful bad");
        assert!(tfidf_candidates(&corpus, &vocab, 0).is_err());
    }

    #[test]
    fn assembly_rules() {
        let m = vec![vec![2], vec![3]];
        let only = assemble_m2(&m, &[vec![], vec![]], &[vec![], vec![]], 3).unwrap();
        assert_eq!(only, VerbalizerSet::manual(m.clone()).unwrap());

        let t = vec![vec![4, 3], vec![5]];
        let a = vec![vec![4, 6, 7], vec![8, 2]];
        let set = assemble_m2(&m, &t, &a, 3).unwrap();
        assert_eq!(set.class_tokens(0), vec![2, 4, 6]);
        assert_eq!(set.class_tokens(1), vec![3, 5, 8]);
        assert_eq!(set.class(0)[1].source, Provenance::Tfidf);
        assert_eq!(set.class(0)[2].source, Provenance::Auto);

        assert!(assemble_m2(&[vec![2], vec![]], &[vec![], vec![2]], &[vec![], vec![]], 3).is_err());
    }

    #[test]
    fn json_round_trip() {
        let vocab = Vocabulary::new(["addictive", "sensational", "boring", "worse"]).unwrap();
        let set = assemble_m2(
            &[vec![vocab.id("addictive").unwrap()], vec![vocab.id("boring").unwrap()]],
            &[vec![vocab.id("sensational").unwrap()], vec![vocab.id("worse").unwrap()]],
            &[vec![], vec![]],
            3,
        )
        .unwrap();
        let text = set.to_json(&vocab).unwrap();
        assert!(text.contains("\"tfidf\""));
        assert_eq!(VerbalizerSet::from_json(&text, &vocab).unwrap(), set);
        assert!(VerbalizerSet::from_json(r#"{"classes":[{"label":0,"tokens":[]}]}"#, &vocab).is_err());
    }

    fn brute_force(probs: &[f64], lists: &[Vec<TokenId>]) -> Vec<f64> {
        let mut out = Vec::new();
        for list in lists {
            let mut total = 0.0;
            let mut n = 0.0;
            for i in 0..list.len() {
                total += probs[list[i] as usize];
                n += 1.0;
            }
            out.push(total / n);
        }
        out
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            probs in prop::collection::vec(0.0f64..1.0, 12),
            split in 1usize..11,
            cut in 0usize..11,
        ) {
            let first: Vec<TokenId> = (0..split as TokenId).collect();
            let second: Vec<TokenId> = (split as TokenId..12).take(cut.max(1)).collect();
            let lists = vec![first, second];
            let set = VerbalizerSet::manual(lists.clone()).unwrap();
            let got = score_classes(&probs, &set).unwrap();
            let expected = brute_force(&probs, &lists);
            prop_assert_eq!(got.probs(), expected.as_slice());
        }

        #[test]
        fn adding_mean_valued_word_keeps_score(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let mean = (a + b) / 2.0;
            let probs = [a, b, mean, 0.3];
            let before = score_classes(&probs, &manual(&[&[0, 1], &[3]])).unwrap();
            let after = score_classes(&probs, &manual(&[&[0, 1, 2], &[3]])).unwrap();
            prop_assert!((before.probs()[0] - after.probs()[0]).abs() <= 1e-15);
        }

        #[test]
        fn assembled_sets_are_disjoint(
            lists in prop::collection::vec(prop::collection::vec(0u32..8, 0..5), 6),
            cap in 1usize..4,
        ) {
            let m = vec![vec![20], vec![21]];
            if let Ok(set) = assemble_m2(&m, &lists[0..2], &lists[2..4], cap) {
                let all: Vec<_> = set.all_tokens().collect();
                let unique: HashSet<_> = all.iter().collect();
                prop_assert_eq!(all.len(), unique.len());
                for c in 0..2 {
                    prop_assert!(set.class(c).len() <= cap);
                }
            }
        }
    }
}
