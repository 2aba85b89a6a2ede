//! Context-conditioned Markov chains.
//!
//! A CCMC reweights the base-chain column of the current state by the
//! empirical token frequencies of the whole observed sequence:
//!
//! ```text
//! P(x_{L+1} = j | X) = m_j * pi_{x_L, j} / sum_k m_k * pi_{x_L, k}
//! ```
//!
//! Tokens absent from the (key positions of the) prompt can never be
//! produced, and frequent tokens reinforce themselves.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::{frequency_vector, sample_categorical, Prompt, TokenId, TransitionMatrix};
use crate::error::{Error, Result};

/// Reweight column `state` of `p` by the mask `m` and renormalize.
///
/// `m` need not be normalized; any positive rescaling gives the same result.
pub fn masked_transition(p: &TransitionMatrix, m: &[f64], state: TokenId) -> Result<Vec<f64>> {
    let k = p.vocab_size();
    state.check(k)?;
    if m.len() != k {
        return Err(Error::InvalidProbabilities(format!(
            "mask has length {}, vocabulary is {k}",
            m.len()
        )));
    }
    let column = p.column(state.0);
    let mut out: Vec<f64> = m.iter().zip(column).map(|(mj, pj)| mj * pj).collect();
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateMask { state: state.0 });
    }
    for x in &mut out {
        *x /= total;
    }
    Ok(out)
}

/// A CCMC over a base transition matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CcmcModel {
    p: TransitionMatrix,
}

impl CcmcModel {
    pub fn new(p: TransitionMatrix) -> Self {
        CcmcModel { p }
    }

    pub fn transition(&self) -> &TransitionMatrix {
        &self.p
    }

    pub fn vocab_size(&self) -> usize {
        self.p.vocab_size()
    }

    /// Next-token law given `prompt`, using key-position frequencies.
    pub fn next_distribution(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        let m = frequency_vector(prompt, self.vocab_size())?;
        masked_transition(&self.p, &m, prompt.last())
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, prompt: &Prompt, rng: &mut R) -> Result<TokenId> {
        let probs = self.next_distribution(prompt)?;
        sample_categorical(&probs, rng)
    }
}

/// A CCMC whose mask is enriched by absolute-position factors.
///
/// For a prompt of length `L` the next-token law is
///
/// ```text
/// P(j | X) ∝ b_j * pi_{x_L, j} * sum_i a_i * V[i, x_L] * 1(x_i = j)
/// ```
///
/// where `i` runs over the key positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalCcmcModel {
    p: TransitionMatrix,
    a: DVector<f64>,
    b: DVector<f64>,
    v: DMatrix<f64>,
}

impl PositionalCcmcModel {
    pub fn new(p: TransitionMatrix, a: DVector<f64>, b: DVector<f64>, v: DMatrix<f64>) -> Result<Self> {
        let k = p.vocab_size();
        let l = a.len();
        if b.len() != k || v.nrows() != l || v.ncols() != k {
            return Err(Error::Config(format!(
                "positional factors have shapes a:{l}, b:{}, V:{}x{} for K={k}",
                b.len(),
                v.nrows(),
                v.ncols()
            )));
        }
        let positive = |x: &f64| *x > 0.0 && x.is_finite();
        if !(a.iter().all(positive) && b.iter().all(positive) && v.iter().all(positive)) {
            return Err(Error::Config("positional factors must be positive and finite".into()));
        }
        Ok(PositionalCcmcModel { p, a, b, v })
    }

    /// Factors that reduce the model to a plain CCMC.
    pub fn trivial(p: TransitionMatrix, len: usize) -> Self {
        let k = p.vocab_size();
        PositionalCcmcModel {
            p,
            a: DVector::from_element(len, 1.0),
            b: DVector::from_element(k, 1.0),
            v: DMatrix::from_element(len, k, 1.0),
        }
    }

    pub fn transition(&self) -> &TransitionMatrix {
        &self.p
    }

    pub fn prompt_len(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn next_distribution(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        let k = self.p.vocab_size();
        if prompt.len() != self.prompt_len() {
            return Err(Error::Precondition(format!(
                "positional model expects prompts of length {}, got {}",
                self.prompt_len(),
                prompt.len()
            )));
        }
        let state = prompt.last().check(k)?.0;
        let mut mask = vec![0.0; k];
        for (i, &t) in prompt.keys().iter().enumerate() {
            mask[t.check(k)?.0] += self.a[i] * self.v[(i, state)];
        }
        for (j, m) in mask.iter_mut().enumerate() {
            *m *= self.b[j];
        }
        masked_transition(&self.p, &mask, TokenId(state))
    }
}
