//! Vocabulary, prompts, stochastic matrices and frequency vectors.
//!
//! Tokens are 0-based: token `k` here is token `k + 1` in 1-based notation.
//! Transition matrices are column-stochastic throughout: column `i` is the
//! distribution of the next state when the chain sits in state `i`.

use std::collections::HashSet;
use std::fmt;
use std::ops::Deref;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for "sums to one" when validating stored probability objects.
pub const VALIDATION_TOL: f64 = 1e-12;
/// Tolerance accepted by [`sample_categorical`].
pub const SAMPLING_TOL: f64 = 1e-9;
/// Probabilities at or below this are treated as exact zeros in support checks.
pub const ZERO_PROB: f64 = 1e-15;

/// Index into a vocabulary of size `K`, `0 <= value < K`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub usize);

impl TokenId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn check(self, vocab: usize) -> Result<Self> {
        if self.0 < vocab {
            Ok(self)
        } else {
            Err(Error::InvalidToken {
                token: self.0,
                vocab,
            })
        }
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for TokenId {
    fn from(v: usize) -> Self {
        TokenId(v)
    }
}

/// Which positions act as attention keys.
///
/// Self-attention uses every token of the prompt as a key (the query is
/// among them). Cross-attention uses all but the last token; the last token
/// is only the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnVariant {
    SelfAttn,
    CrossAttn,
}

impl AttnVariant {
    pub fn min_len(self) -> usize {
        match self {
            AttnVariant::SelfAttn => 1,
            AttnVariant::CrossAttn => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttnVariant::SelfAttn => "self",
            AttnVariant::CrossAttn => "cross",
        }
    }
}

/// A token sequence together with its key semantics.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Prompt {
    tokens: Vec<TokenId>,
    variant: AttnVariant,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, variant: AttnVariant, vocab: usize) -> Result<Self> {
        if tokens.len() < variant.min_len() {
            return Err(Error::PromptTooShort {
                variant: variant.name(),
                min: variant.min_len(),
                len: tokens.len(),
            });
        }
        for &t in &tokens {
            t.check(vocab)?;
        }
        Ok(Prompt { tokens, variant })
    }

    /// Convenience constructor from raw 0-based indices.
    pub fn from_indices(tokens: &[usize], variant: AttnVariant, vocab: usize) -> Result<Self> {
        Self::new(tokens.iter().map(|&t| TokenId(t)).collect(), variant, vocab)
    }

    /// Parse whitespace-separated 0-based token indices.
    pub fn parse(s: &str, variant: AttnVariant, vocab: usize) -> Result<Self> {
        let tokens = s
            .split_whitespace()
            .map(|w| {
                w.parse::<usize>()
                    .map(TokenId)
                    .map_err(|e| Error::Parse(format!("token `{w}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(tokens, variant, vocab)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn variant(&self) -> AttnVariant {
        self.variant
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The query token `x_L`.
    pub fn last(&self) -> TokenId {
        *self.tokens.last().expect("prompts are non-empty")
    }

    /// Key positions: the whole prompt for self-attention, all but the last
    /// token for cross-attention.
    pub fn keys(&self) -> &[TokenId] {
        match self.variant {
            AttnVariant::SelfAttn => &self.tokens,
            AttnVariant::CrossAttn => &self.tokens[..self.tokens.len() - 1],
        }
    }

    /// Copy of this prompt with one more token appended.
    pub fn extended(&self, next: TokenId) -> Prompt {
        let mut tokens = self.tokens.clone();
        tokens.push(next);
        Prompt {
            tokens,
            variant: self.variant,
        }
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Empirical token frequencies `m(X)` over the counted (key) positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyVector(Vec<f64>);

impl FrequencyVector {
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FrequencyVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for FrequencyVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Per-token counts over the key positions of `prompt`.
pub fn key_counts(prompt: &Prompt, vocab: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; vocab];
    for &t in prompt.keys() {
        counts[t.check(vocab)?.0] += 1;
    }
    Ok(counts)
}

/// Frequency vector of the key positions of `prompt`.
///
/// ```
/// use ccmc::data::{frequency_vector, AttnVariant, Prompt};
/// // 1-based [1, 2, 1] is [0, 1, 0] here.
/// let x = Prompt::from_indices(&[0, 1, 0], AttnVariant::SelfAttn, 3).unwrap();
/// let m = frequency_vector(&x, 3).unwrap();
/// assert_eq!(m.weights(), &[2.0 / 3.0, 1.0 / 3.0, 0.0]);
/// ```
pub fn frequency_vector(prompt: &Prompt, vocab: usize) -> Result<FrequencyVector> {
    let counts = key_counts(prompt, vocab)?;
    let n = prompt.keys().len() as f64;
    Ok(FrequencyVector(
        counts.into_iter().map(|c| c as f64 / n).collect(),
    ))
}

/// Per-column diagnostics of a candidate stochastic matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    /// `|sum(column) - 1|` for each column.
    pub column_sum_deviation: Vec<f64>,
    pub min_entry: f64,
    pub strictly_positive: bool,
    pub square: bool,
    pub finite: bool,
    pub valid: bool,
}

/// Check a raw matrix for column-stochasticity at [`VALIDATION_TOL`].
pub fn validate_transition_matrix(m: &DMatrix<f64>) -> ValidationReport {
    let square = m.nrows() == m.ncols() && m.nrows() > 0;
    let finite = m.iter().all(|x| x.is_finite());
    let column_sum_deviation: Vec<f64> = m
        .column_iter()
        .map(|c| (c.sum() - 1.0).abs())
        .collect();
    let min_entry = m.iter().copied().fold(f64::INFINITY, f64::min);
    let sums_ok = column_sum_deviation.iter().all(|&d| d <= VALIDATION_TOL);
    ValidationReport {
        strictly_positive: min_entry > 0.0,
        valid: square && finite && sums_ok && min_entry >= 0.0,
        column_sum_deviation,
        min_entry,
        square,
        finite,
    }
}

/// A validated `K x K` column-stochastic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    m: DMatrix<f64>,
}

impl TransitionMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let report = validate_transition_matrix(&m);
        if !report.valid {
            let worst = report
                .column_sum_deviation
                .iter()
                .copied()
                .fold(0.0, f64::max);
            return Err(Error::InvalidTransitionMatrix(format!(
                "{}x{} matrix, max column-sum deviation {worst:e}, min entry {:e}",
                m.nrows(),
                m.ncols(),
                report.min_entry
            )));
        }
        Ok(TransitionMatrix { m })
    }

    /// Build from columns; `columns[i]` is the distribution out of state `i`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let k = columns.len();
        if columns.iter().any(|c| c.len() != k) {
            return Err(Error::InvalidTransitionMatrix(
                "columns must all have length K".into(),
            ));
        }
        Self::new(DMatrix::from_fn(k, k, |r, c| columns[c][r]))
    }

    pub fn uniform(k: usize) -> Self {
        TransitionMatrix {
            m: DMatrix::from_element(k, k, 1.0 / k as f64),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.m.ncols()
    }

    /// Column `from`: the next-state distribution out of state `from`.
    pub fn column(&self, from: usize) -> &[f64] {
        let k = self.vocab_size();
        &self.m.as_slice()[from * k..(from + 1) * k]
    }

    /// Probability of moving from `from` to `to`.
    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.m[(to, from)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn min_entry(&self) -> f64 {
        self.m.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.min_entry() > 0.0
    }

    pub fn validate(&self) -> ValidationReport {
        validate_transition_matrix(&self.m)
    }

    /// Row-major CSV with header `k0,...,k{K-1}`: row `r` holds the
    /// probabilities of moving *to* state `r` from each column state.
    pub fn to_csv(&self) -> String {
        let k = self.vocab_size();
        let mut out = header_row(k);
        for r in 0..k {
            let row: Vec<String> = (0..k).map(|c| format!("{}", self.m[(r, c)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(s: &str) -> Result<Self> {
        Self::new(matrix_from_csv(s)?)
    }
}

pub(crate) fn header_row(k: usize) -> String {
    let mut out = (0..k).map(|i| format!("k{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    out
}

/// Parse a row-major CSV matrix with a header line.
pub fn matrix_from_csv(s: &str) -> Result<DMatrix<f64>> {
    let mut lines = s.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty matrix CSV".into()))?;
    let ncols = header.split(',').count();
    let mut data = Vec::new();
    let mut nrows = 0;
    for (i, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {i}: `{c}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != ncols {
            return Err(Error::Parse(format!(
                "row {i} has {} fields, header has {ncols}",
                row.len()
            )));
        }
        data.extend(row);
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &data))
}

/// Row-major CSV of an arbitrary matrix with header `k0,...`.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = header_row(m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{}", m[(r, c)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// A finite-support distribution over prompts sharing one attention variant.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptDistribution {
    support: Vec<(Prompt, f64)>,
    variant: AttnVariant,
    vocab: usize,
}

impl PromptDistribution {
    pub fn new(support: Vec<(Prompt, f64)>, vocab: usize) -> Result<Self> {
        let Some((first, _)) = support.first() else {
            return Err(Error::InvalidDistribution("empty support".into()));
        };
        let variant = first.variant();
        let mut seen = HashSet::new();
        let mut total = 0.0;
        for (p, w) in &support {
            if p.variant() != variant {
                return Err(Error::InvalidDistribution(
                    "prompts mix self- and cross-attention".into(),
                ));
            }
            for &t in p.tokens() {
                t.check(vocab)?;
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidDistribution(format!("weight {w} for `{p}`")));
            }
            if !seen.insert(p.tokens().to_vec()) {
                return Err(Error::InvalidDistribution(format!("duplicate prompt `{p}`")));
            }
            total += w;
        }
        if (total - 1.0).abs() > VALIDATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(PromptDistribution {
            support,
            variant,
            vocab,
        })
    }

    /// Uniform weights over distinct prompts.
    pub fn uniform(prompts: Vec<Prompt>, vocab: usize) -> Result<Self> {
        let w = 1.0 / prompts.len().max(1) as f64;
        let support: Vec<_> = prompts.into_iter().map(|p| (p, w)).collect();
        // Accumulated rounding in 1/n can exceed 1e-12 only for absurd n.
        Self::new(support, vocab)
    }

    pub fn support(&self) -> &[(Prompt, f64)] {
        &self.support
    }

    pub fn variant(&self) -> AttnVariant {
        self.variant
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// Support restricted to positive weights.
    pub fn active(&self) -> impl Iterator<Item = &(Prompt, f64)> {
        self.support.iter().filter(|(_, w)| *w > 0.0)
    }
}

/// One `(prompt, next token)` observation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub prompt: Prompt,
    pub next: TokenId,
}

/// Labelled prompts. Every label occurs among its prompt's key tokens.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
    vocab: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, vocab: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            s.next.check(vocab)?;
            for &t in s.prompt.tokens() {
                t.check(vocab)?;
            }
            if !s.prompt.keys().contains(&s.next) {
                return Err(Error::InvalidDataset(format!(
                    "sample {i}: label {} does not occur among the keys of `{}`",
                    s.next, s.prompt
                )));
            }
        }
        Ok(Dataset { samples, vocab })
    }

    /// No label check; the loss then reports unreachable labels as infinite.
    pub fn new_unchecked(samples: Vec<Sample>, vocab: usize) -> Self {
        Dataset { samples, vocab }
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// CSV with columns `prompt,next`; prompts are space-separated indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("prompt,next\n");
        for s in &self.samples {
            out.push_str(&format!("{},{}\n", s.prompt, s.next));
        }
        out
    }

    pub fn from_csv(s: &str, variant: AttnVariant, vocab: usize) -> Result<Self> {
        let mut lines = s.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "prompt,next" => {}
            other => {
                return Err(Error::Parse(format!(
                    "expected header `prompt,next`, got {other:?}"
                )))
            }
        }
        let samples = lines
            .enumerate()
            .map(|(i, line)| {
                let (p, n) = line
                    .split_once(',')
                    .ok_or_else(|| Error::Parse(format!("line {i}: missing comma")))?;
                let next = n
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {i}: {e}")))?;
                Ok(Sample {
                    prompt: Prompt::parse(p, variant, vocab)?,
                    next: TokenId(next),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples, vocab)
    }
}

/// Check that `probs` is a probability vector within `tol`.
pub fn check_probabilities(probs: &[f64], tol: f64) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::InvalidProbabilities("empty vector".into()));
    }
    if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidProbabilities(format!("entry {i} is {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(Error::InvalidProbabilities(format!("sum is {total}")));
    }
    Ok(())
}

/// Draw an index with probability `probs[k]` by inverse-CDF on one uniform.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<TokenId> {
    check_probabilities(probs, SAMPLING_TOL)?;
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = k;
            if u < acc {
                return Ok(TokenId(k));
            }
        }
    }
    // u landed in the rounding gap above the final partial sum.
    Ok(TokenId(last_positive))
}
