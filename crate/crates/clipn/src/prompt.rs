//! Prompt pools, tokenization and prompt-ensemble features.
//!
//! Two default pools ship with the crate: ten positive templates and ten
//! negation templates. Each template contains exactly one `{}` placeholder
//! for the class name. Pools can be overridden through the manifest.

use crate::numkernel::{self, EmbeddingMatrix, NumError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("class name must be nonempty")]
    EmptyClassName,
    #[error("text is empty after trimming and punctuation stripping")]
    EmptyText,
    #[error("template {0:?} must contain exactly one {{}} placeholder")]
    BadTemplate(String),
    #[error("prompt pool must contain at least one template")]
    EmptyPool,
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Whether a pool carries positive or negation phrasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Standard,
    Negation,
}

/// Ordered list of templates, each with one `{}` placeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPool {
    templates: Vec<String>,
    polarity: Polarity,
}

const DEFAULT_STANDARD: [&str; 10] = [
    "a photo of {}",
    "a photograph of {}",
    "an image of {}",
    "a picture of {}",
    "a photo of the {}",
    "a good photo of {}",
    "a cropped photo of {}",
    "a bright photo of {}",
    "a blurry photo of {}",
    "a photo showing {}",
];

const DEFAULT_NEGATION: [&str; 10] = [
    "a photo without {}",
    "a photo not appearing {}",
    "a photo not containing {}",
    "a photo not of {}",
    "a photo with no {}",
    "an image without {}",
    "a picture without {}",
    "a photo not including {}",
    "a photo not having {}",
    "a photo lacking {}",
];

impl PromptPool {
    pub fn new(templates: Vec<String>, polarity: Polarity) -> Result<Self, PromptError> {
        if templates.is_empty() {
            return Err(PromptError::EmptyPool);
        }
        for t in &templates {
            if t.matches("{}").count() != 1 {
                return Err(PromptError::BadTemplate(t.clone()));
            }
        }
        Ok(PromptPool { templates, polarity })
    }

    pub fn default_standard() -> Self {
        PromptPool::new(
            DEFAULT_STANDARD.iter().map(|s| s.to_string()).collect(),
            Polarity::Standard,
        )
        .expect("default standard pool is valid")
    }

    pub fn default_negation() -> Self {
        PromptPool::new(
            DEFAULT_NEGATION.iter().map(|s| s.to_string()).collect(),
            Polarity::Negation,
        )
        .expect("default negation pool is valid")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }
}

/// Token ids into a [`Vocabulary`]; always nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

/// Word -> dense index map. Index 0 is reserved for unknown words.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    index: BTreeMap<String, usize>,
}

pub const UNKNOWN_TOKEN: usize = 0;

impl Vocabulary {
    /// Builds a vocabulary from words in order; duplicates keep their first
    /// index. Index 0 stays reserved for unknown tokens.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut index = BTreeMap::new();
        let mut next = 1;
        for w in words {
            let w = normalize_word(w.as_ref());
            if w.is_empty() {
                continue;
            }
            index.entry(w).or_insert_with(|| {
                let i = next;
                next += 1;
                i
            });
        }
        Vocabulary { index }
    }

    /// Number of distinct indices including the reserved unknown slot.
    pub fn size(&self) -> usize {
        self.index.len() + 1
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNKNOWN_TOKEN)
    }

    /// Words in index order (excludes the unknown slot).
    pub fn words(&self) -> Vec<String> {
        let mut pairs: Vec<(usize, &String)> = self.index.iter().map(|(w, i)| (*i, w)).collect();
        pairs.sort();
        pairs.into_iter().map(|(_, w)| w.clone()).collect()
    }
}

fn normalize_word(w: &str) -> String {
    w.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect()
}

/// Substitutes `class_name` into every template of the pool, preserving
/// template order.
pub fn expand_prompts(class_name: &str, pool: &PromptPool) -> Result<Vec<String>, PromptError> {
    if class_name.trim().is_empty() {
        return Err(PromptError::EmptyClassName);
    }
    Ok(pool
        .templates
        .iter()
        .map(|t| t.replacen("{}", class_name, 1))
        .collect())
}

/// Lowercases, splits on whitespace, strips punctuation, maps unknown
/// words to index 0.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSequence, PromptError> {
    if text.trim().is_empty() {
        return Err(PromptError::EmptyText);
    }
    let ids: Vec<usize> = text
        .split_whitespace()
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .map(|w| vocab.lookup(&w))
        .collect();
    if ids.is_empty() {
        return Err(PromptError::EmptyText);
    }
    Ok(TokenSequence { ids })
}

/// Sums per-prompt unit features and renormalizes. A single-row input is
/// returned unchanged so ensembling one prompt is exact.
pub fn ensemble_features(features: &EmbeddingMatrix) -> Result<Vec<f64>, PromptError> {
    if features.rows() == 1 {
        return Ok(features.row(0).to_vec());
    }
    let mut sum = vec![0.0; features.dim()];
    for i in 0..features.rows() {
        for (acc, v) in sum.iter_mut().zip(features.row(i)) {
            *acc += v;
        }
    }
    Ok(numkernel::l2_normalize(&sum)?)
}

/// Words that occur in negation templates but not in standard templates,
/// sorted for determinism. These seed the learnable "no" tokens.
pub fn negative_keywords(no_pool: &PromptPool, std_pool: &PromptPool) -> Vec<String> {
    let split = |pool: &PromptPool| -> Vec<String> {
        pool.templates
            .iter()
            .flat_map(|t| t.split_whitespace())
            .map(normalize_word)
            .filter(|w| !w.is_empty())
            .collect()
    };
    let std_words: std::collections::BTreeSet<String> = split(std_pool).into_iter().collect();
    let mut out: Vec<String> = split(no_pool)
        .into_iter()
        .filter(|w| !std_words.contains(w))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    out.sort();
    out
}
