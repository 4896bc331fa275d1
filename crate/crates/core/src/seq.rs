//! Vocabulary, tokenization and the masking corruption process.
//!
//! Sequences are stored at a fixed length `t_max` with a contiguous suffix
//! of padding tokens. The same corruption routine is used to build DAE
//! training examples and to initialize the latent inner loop.

use std::collections::HashMap;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

/// Fraction of non-padding tokens masked when training the MLM head.
pub const TRAINING_MASK_RATIO: f64 = 0.125;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeqError {
    #[error("character {0:?} is not in the vocabulary")]
    UnknownToken(char),
    #[error("sequence of length {len} exceeds maximum length {t_max}")]
    SequenceTooLong { len: usize, t_max: usize },
    #[error("sequence contains a masking token")]
    ContainsMask,
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("requested {requested} positions but only {available} are eligible")]
    NotEnoughPositions { requested: usize, available: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
}

pub type TokenId = usize;

/// Ordered discrete vocabulary with padding and masking specials.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    padding_id: TokenId,
    masking_id: TokenId,
}

const AMINO_ACIDS: &str = "ACDEFGHIKLMNPQRSTVWY";
const PAD: &str = "[PAD]";
const MASK: &str = "[MASK]";
const SPECIALS_DIRECTIVE: &str = "#specials";

impl Vocabulary {
    pub fn new(tokens: Vec<String>, padding: &str, masking: &str) -> Result<Self, SeqError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(SeqError::InvalidVocabulary("empty token".into()));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(SeqError::InvalidVocabulary(format!(
                    "duplicate token {tok:?}"
                )));
            }
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| SeqError::InvalidVocabulary(format!("special {name:?} not listed")))
        };
        let padding_id = lookup(padding)?;
        let masking_id = lookup(masking)?;
        if padding_id == masking_id {
            return Err(SeqError::InvalidVocabulary(
                "padding and masking tokens coincide".into(),
            ));
        }
        Ok(Self {
            tokens,
            index,
            padding_id,
            masking_id,
        })
    }

    /// The 20 standard amino acids preceded by `[PAD]` and `[MASK]`.
    pub fn amino_acids() -> Self {
        let tokens = [PAD, MASK]
            .iter()
            .map(|s| s.to_string())
            .chain(AMINO_ACIDS.chars().map(String::from))
            .collect();
        Self::new(tokens, PAD, MASK).expect("preset vocabulary is valid")
    }

    /// Parses the preset file format.
    ///
    /// The first non-empty line is `#specials <padding> <masking>`; every
    /// following non-empty line holds one token, in id order. Both specials
    /// must appear in the token list.
    pub fn parse(text: &str) -> Result<Self, SeqError> {
        let mut lines = text.lines().map(str::trim_end).filter(|l| !l.is_empty());
        let directive = lines
            .next()
            .ok_or_else(|| SeqError::InvalidVocabulary("empty vocabulary file".into()))?;
        let mut parts = directive.split_whitespace();
        if parts.next() != Some(SPECIALS_DIRECTIVE) {
            return Err(SeqError::InvalidVocabulary(format!(
                "first line must start with {SPECIALS_DIRECTIVE}"
            )));
        }
        let (pad, mask) = match (parts.next(), parts.next(), parts.next()) {
            (Some(p), Some(m), None) => (p.to_string(), m.to_string()),
            _ => {
                return Err(SeqError::InvalidVocabulary(
                    "directive needs exactly a padding and a masking token".into(),
                ))
            }
        };
        let tokens = lines.map(String::from).collect();
        Self::new(tokens, &pad, &mask)
    }

    /// Inverse of [`Vocabulary::parse`].
    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "{SPECIALS_DIRECTIVE} {} {}\n",
            self.tokens[self.padding_id], self.tokens[self.masking_id]
        );
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn padding_id(&self) -> TokenId {
        self.padding_id
    }

    pub fn masking_id(&self) -> TokenId {
        self.masking_id
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.padding_id || id == self.masking_id
    }

    /// Ids of every token that may appear in a finished sequence.
    pub fn regular_ids(&self) -> Vec<TokenId> {
        (0..self.len()).filter(|&i| !self.is_special(i)).collect()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }
}

/// Token ids right-padded to a fixed maximum length.
#[derive(
    Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    /// Builds a sequence from raw ids, checking the padding layout.
    pub fn from_ids(ids: Vec<TokenId>, vocab: &Vocabulary) -> Result<Self, SeqError> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.len()) {
            return Err(SeqError::InvalidSequence(format!(
                "token id {bad} out of range"
            )));
        }
        let pad = vocab.padding_id();
        let len = ids.iter().position(|&i| i == pad).unwrap_or(ids.len());
        if ids[len..].iter().any(|&i| i != pad) {
            return Err(SeqError::InvalidSequence(
                "padding is not a contiguous suffix".into(),
            ));
        }
        if len == 0 {
            return Err(SeqError::InvalidSequence("no non-padding tokens".into()));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn t_max(&self) -> usize {
        self.ids.len()
    }

    /// Number of non-padding tokens.
    pub fn len(&self, vocab: &Vocabulary) -> usize {
        let pad = vocab.padding_id();
        self.ids
            .iter()
            .position(|&i| i == pad)
            .unwrap_or(self.ids.len())
    }

    /// Positions that a corruption may touch: non-padding, non-special.
    pub fn eligible_positions(&self, vocab: &Vocabulary) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| !vocab.is_special(id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn contains_mask(&self, vocab: &Vocabulary) -> bool {
        self.ids.contains(&vocab.masking_id())
    }

    /// `true` at non-padding positions.
    pub fn padding_mask(&self, vocab: &Vocabulary) -> Vec<bool> {
        let len = self.len(vocab);
        (0..self.ids.len()).map(|i| i < len).collect()
    }

    /// Number of positions at which two equal-length sequences differ.
    pub fn hamming(&self, other: &TokenSequence) -> usize {
        self.ids
            .iter()
            .zip(&other.ids)
            .filter(|(a, b)| a != b)
            .count()
    }

    pub(crate) fn set(&mut self, pos: usize, id: TokenId) {
        self.ids[pos] = id;
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.ids)
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, t_max: usize) -> Result<TokenSequence, SeqError> {
    let mut ids = Vec::with_capacity(t_max);
    let mut buf = [0u8; 4];
    for c in text.chars() {
        let id = vocab
            .id(c.encode_utf8(&mut buf))
            .ok_or(SeqError::UnknownToken(c))?;
        if vocab.is_special(id) {
            return Err(SeqError::UnknownToken(c));
        }
        ids.push(id);
    }
    if ids.len() > t_max {
        return Err(SeqError::SequenceTooLong {
            len: ids.len(),
            t_max,
        });
    }
    ids.resize(t_max, vocab.padding_id());
    TokenSequence::from_ids(ids, vocab)
}

pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String, SeqError> {
    let len = seq.len(vocab);
    if len == 0 {
        return Err(SeqError::InvalidSequence("no non-padding tokens".into()));
    }
    if seq.contains_mask(vocab) {
        return Err(SeqError::ContainsMask);
    }
    Ok(seq.ids()[..len].iter().map(|&i| vocab.token(i)).collect())
}

/// Positions selected for corruption. Only substitutions by the masking
/// token are supported, so the operation tag is implicit.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorruptionPlan {
    positions: Vec<usize>,
}

impl CorruptionPlan {
    /// Validates the positions against `seq`.
    pub fn new(
        positions: Vec<usize>,
        seq: &TokenSequence,
        vocab: &Vocabulary,
    ) -> Result<Self, SeqError> {
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != positions.len() {
            return Err(SeqError::InvalidSequence(
                "duplicate corruption position".into(),
            ));
        }
        for &p in &positions {
            if p >= seq.t_max() || vocab.is_special(seq.ids()[p]) {
                return Err(SeqError::InvalidSequence(format!(
                    "position {p} is not eligible"
                )));
            }
        }
        Ok(Self { positions: sorted })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn num_ops(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Samples `n` distinct eligible positions uniformly without replacement.
pub fn select_positions<R: Rng + ?Sized>(
    seq: &TokenSequence,
    n: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<CorruptionPlan, SeqError> {
    let eligible = seq.eligible_positions(vocab);
    if n > eligible.len() {
        return Err(SeqError::NotEnoughPositions {
            requested: n,
            available: eligible.len(),
        });
    }
    let mut positions: Vec<usize> = index::sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    positions.sort_unstable();
    Ok(CorruptionPlan { positions })
}

pub fn apply_mask_corruption(
    seq: &TokenSequence,
    plan: &CorruptionPlan,
    vocab: &Vocabulary,
) -> TokenSequence {
    let mut out = seq.clone();
    for &p in plan.positions() {
        out.set(p, vocab.masking_id());
    }
    out
}

/// Corruption count used for MLM training: `round(ratio * length)`.
pub fn training_mask_count(seq: &TokenSequence, vocab: &Vocabulary) -> usize {
    let eligible = seq.eligible_positions(vocab).len();
    let n = (TRAINING_MASK_RATIO * seq.len(vocab) as f64).round() as usize;
    n.clamp(1, eligible.max(1))
}
