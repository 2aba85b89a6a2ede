//! One-layer attention with identity values and a tied classifier head.
//!
//! With token embeddings `E` (rows `e_k`), key-query weights `W` and a
//! classifier `C` obeying `C Eᵀ = I`, the self-attention output of a prompt
//! is a convex combination of its embedded tokens, and the classifier reads
//! back exactly the CCMC next-token law of the base chain
//!
//! ```text
//! P^W = [pi_1 ... pi_K],   pi_i = softmax(E W e_i).
//! ```
//!
//! Only the component of `W` in `S_E = span{(e_i - e_j) e_kᵀ}` influences
//! outputs; [`EmbeddingConfig::project_to_se`] computes it, and
//! [`EmbeddingConfig::weights_from_transition`] inverts `W ↦ P^W` on `S_E`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::chain::PositionalCcmcModel;
use crate::data::{AttnVariant, Prompt, TransitionMatrix};
use crate::error::{Error, Result};
use crate::numeric::softmax_in_place;

/// Tolerance for the structural assumptions on `E`, `C` and `U`.
pub const ASSUMPTION_TOL: f64 = 1e-10;

/// Key-query weights, `d x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    w: DMatrix<f64>,
    in_subspace: bool,
}

impl AttentionWeights {
    pub fn new(w: DMatrix<f64>) -> Self {
        AttentionWeights {
            w,
            in_subspace: false,
        }
    }

    pub fn zeros(d: usize) -> Self {
        AttentionWeights {
            w: DMatrix::zeros(d, d),
            in_subspace: true,
        }
    }

    /// I.i.d. `N(0, scale^2)` entries.
    pub fn random<R: Rng + ?Sized>(d: usize, scale: f64, rng: &mut R) -> Self {
        let w = DMatrix::from_fn(d, d, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        });
        AttentionWeights::new(w)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.w
    }

    /// Whether this value was produced as the canonical `S_E` representative.
    pub fn in_subspace(&self) -> bool {
        self.in_subspace
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Embeddings, classifier head and optional absolute positions.
///
/// Construction enforces `rank(E) = K`, `C Eᵀ = I_K` and, with positions,
/// `C Uᵀ = 0`.
#[derive(Clone, Debug)]
pub struct EmbeddingConfig {
    e: DMatrix<f64>,
    c: DMatrix<f64>,
    u: Option<DMatrix<f64>>,
    /// `d x K` with `E * right_inverse = I_K`.
    right_inverse: DMatrix<f64>,
    /// Orthonormal basis of `S_E`, each element a column-major `d*d` vector.
    se_basis: Vec<Vec<f64>>,
}

impl EmbeddingConfig {
    pub fn new(e: DMatrix<f64>, c: DMatrix<f64>, u: Option<DMatrix<f64>>) -> Result<Self> {
        let (k, d) = e.shape();
        if k == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        if d < k {
            return Err(Error::Config(format!(
                "embedding dimension {d} is below vocabulary size {k}"
            )));
        }
        if c.shape() != (k, d) {
            return Err(Error::Config(format!(
                "classifier is {}x{}, expected {k}x{d}",
                c.nrows(),
                c.ncols()
            )));
        }
        if e.clone().rank(1e-10 * e.amax().max(1.0)) < k {
            return Err(Error::Config("token embeddings are linearly dependent".into()));
        }
        let gram_inv = (&e * e.transpose())
            .try_inverse()
            .ok_or_else(|| Error::Config("token embeddings are linearly dependent".into()))?;
        let ce = &c * e.transpose();
        let dev = (&ce - DMatrix::<f64>::identity(k, k)).amax();
        if dev > ASSUMPTION_TOL {
            return Err(Error::Config(format!(
                "classifier violates C Eᵀ = I (max deviation {dev:e})"
            )));
        }
        if let Some(u) = &u {
            if u.ncols() != d || u.nrows() == 0 {
                return Err(Error::Config(format!(
                    "positional matrix is {}x{}, expected Lx{d}",
                    u.nrows(),
                    u.ncols()
                )));
            }
            let cu = (&c * u.transpose()).amax();
            if cu > ASSUMPTION_TOL {
                return Err(Error::Config(format!(
                    "classifier sees positions: max |C Uᵀ| = {cu:e}"
                )));
            }
        }
        let right_inverse = e.transpose() * gram_inv;
        let se_basis = se_basis(&e);
        Ok(EmbeddingConfig {
            e,
            c,
            u,
            right_inverse,
            se_basis,
        })
    }

    /// `d = K`, `E = C = I` without positions; with `L` positions
    /// `d = K + L`, `E = C = [I_K | 0]`, `U = [0 | I_L]`.
    pub fn canonical(k: usize, positions: Option<usize>) -> Self {
        match positions {
            None => {
                let i = DMatrix::identity(k, k);
                Self::new(i.clone(), i, None).expect("identity embeddings are valid")
            }
            Some(l) => {
                let d = k + l;
                let e = DMatrix::from_fn(k, d, |r, c| if r == c { 1.0 } else { 0.0 });
                let u = DMatrix::from_fn(l, d, |r, c| if c == k + r { 1.0 } else { 0.0 });
                Self::new(e.clone(), e, Some(u)).expect("canonical positional embeddings are valid")
            }
        }
    }

    /// Tied classifier `C = (E Eᵀ)⁻¹ E` for arbitrary full-rank embeddings.
    pub fn tied(e: DMatrix<f64>) -> Result<Self> {
        let gram_inv = (&e * e.transpose())
            .try_inverse()
            .ok_or_else(|| Error::Config("token embeddings are linearly dependent".into()))?;
        let c = gram_inv * &e;
        Self::new(e, c, None)
    }

    pub fn vocab_size(&self) -> usize {
        self.e.nrows()
    }

    pub fn dim(&self) -> usize {
        self.e.ncols()
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.e
    }

    pub fn classifier(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn positions(&self) -> Option<&DMatrix<f64>> {
        self.u.as_ref()
    }

    /// Dimension of `S_E`, always `K (K - 1)`.
    pub fn se_dim(&self) -> usize {
        self.se_basis.len()
    }

    pub(crate) fn forward(&self, w: &DMatrix<f64>, prompt: &Prompt) -> Result<Forward> {
        let (k, d) = self.e.shape();
        if w.shape() != (d, d) {
            return Err(Error::Config(format!(
                "weights are {}x{}, expected {d}x{d}",
                w.nrows(),
                w.ncols()
            )));
        }
        let n = prompt.len();
        if let Some(u) = &self.u {
            if n > u.nrows() {
                return Err(Error::Precondition(format!(
                    "prompt of length {n} exceeds the {} available positions",
                    u.nrows()
                )));
            }
        }
        let mut rows = DMatrix::zeros(n, d);
        for (i, &t) in prompt.tokens().iter().enumerate() {
            let t = t.check(k)?.0;
            let mut row = rows.row_mut(i);
            row += self.e.row(t);
            if let Some(u) = &self.u {
                row += u.row(i);
            }
        }
        let query: DVector<f64> = rows.row(n - 1).transpose();
        let nkeys = prompt.keys().len();
        let keys = rows.rows(0, nkeys).into_owned();
        let wq = w * &query;
        let mut s: Vec<f64> = (keys.clone() * wq).iter().copied().collect();
        softmax_in_place(&mut s);
        Ok(Forward { keys, s })
    }

    /// `Xᵀ softmax(X W x_L)` with every position as a key.
    pub fn self_attention_output(&self, w: &AttentionWeights, prompt: &Prompt) -> Result<DVector<f64>> {
        let p = Prompt::new(prompt.tokens().to_vec(), AttnVariant::SelfAttn, self.vocab_size())?;
        Ok(self.forward(&w.w, &p)?.output())
    }

    /// `X̄ᵀ softmax(X̄ W x_L)` where `X̄` drops the query position.
    pub fn cross_attention_output(&self, w: &AttentionWeights, prompt: &Prompt) -> Result<DVector<f64>> {
        let p = Prompt::new(prompt.tokens().to_vec(), AttnVariant::CrossAttn, self.vocab_size())?;
        Ok(self.forward(&w.w, &p)?.output())
    }

    /// Attention output using the prompt's own variant.
    pub fn attention_output(&self, w: &AttentionWeights, prompt: &Prompt) -> Result<DVector<f64>> {
        Ok(self.forward(&w.w, prompt)?.output())
    }

    /// Classifier read-out `C f_W(X)`; tiny negative round-off is clamped to 0.
    pub fn next_distribution(&self, w: &AttentionWeights, prompt: &Prompt) -> Result<Vec<f64>> {
        let f = self.attention_output(w, prompt)?;
        Ok((&self.c * f).iter().map(|&x| x.max(0.0)).collect())
    }

    /// Logit block `E W Eᵀ`; column `i` holds the logits out of state `i`.
    pub fn token_logits(&self, w: &AttentionWeights) -> DMatrix<f64> {
        &self.e * &w.w * self.e.transpose()
    }

    /// `P^W`, column `i` = `softmax(E W e_i)`.
    pub fn transition_from_weights(&self, w: &AttentionWeights) -> TransitionMatrix {
        let mut logits = self.token_logits(w);
        for mut col in logits.column_iter_mut() {
            softmax_in_place(col.as_mut_slice());
        }
        TransitionMatrix::new(logits).expect("softmax columns are stochastic")
    }

    /// The unique `W ∈ S_E` with `P^W = p`.
    pub fn weights_from_transition(&self, p: &TransitionMatrix) -> Result<AttentionWeights> {
        let k = self.vocab_size();
        if p.vocab_size() != k {
            return Err(Error::Config(format!(
                "transition matrix is over {} states, vocabulary has {k}",
                p.vocab_size()
            )));
        }
        let m = p.matrix();
        for from in 0..k {
            for to in 0..k {
                if !(m[(to, from)] > 0.0) {
                    return Err(Error::NotStrictlyPositive { from, to });
                }
            }
        }
        let logits = m.map(f64::ln);
        let w = &self.right_inverse * logits * self.right_inverse.transpose();
        Ok(self.project_to_se(&AttentionWeights::new(w)))
    }

    /// Orthogonal (Frobenius) projection onto `S_E`.
    pub fn project_to_se(&self, w: &AttentionWeights) -> AttentionWeights {
        AttentionWeights {
            w: self.project_matrix(&w.w),
            in_subspace: true,
        }
    }

    pub(crate) fn project_matrix(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.dim();
        let src = w.as_slice();
        let mut out = vec![0.0; d * d];
        for b in &self.se_basis {
            let coef: f64 = b.iter().zip(src).map(|(x, y)| x * y).sum();
            for (o, x) in out.iter_mut().zip(b) {
                *o += coef * x;
            }
        }
        DMatrix::from_vec(d, d, out)
    }

    /// `(P^W, a, b, V)` with `a = exp(U W u_L)`, `b = exp(E W u_L)` and
    /// `V = exp(U W Eᵀ)`, for prompts of length `L` = number of positions.
    pub fn positional_model(&self, w: &AttentionWeights) -> Result<PositionalCcmcModel> {
        let u = self
            .u
            .as_ref()
            .ok_or_else(|| Error::Config("configuration has no positional embeddings".into()))?;
        let l = u.nrows();
        let u_last: DVector<f64> = u.row(l - 1).transpose();
        let wu = &w.w * &u_last;
        let a = (u * &wu).map(f64::exp);
        let b = (&self.e * &wu).map(f64::exp);
        let v = (u * &w.w * self.e.transpose()).map(f64::exp);
        PositionalCcmcModel::new(self.transition_from_weights(w), a, b, v)
    }
}

/// Per-prompt forward pass: embedded keys and softmax scores.
pub(crate) struct Forward {
    pub keys: DMatrix<f64>,
    pub s: Vec<f64>,
}

impl Forward {
    pub fn output(&self) -> DVector<f64> {
        self.keys.tr_mul(&DVector::from_column_slice(&self.s))
    }
}

/// Modified Gram-Schmidt (two passes) over `(e_i - e_K) e_kᵀ`.
fn se_basis(e: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let k = e.nrows();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k * k.saturating_sub(1));
    for col in 0..k {
        for i in 0..k.saturating_sub(1) {
            let diff: DVector<f64> = (e.row(i) - e.row(k - 1)).transpose();
            let ek: DVector<f64> = e.row(col).transpose();
            let mut v: Vec<f64> = (diff * ek.transpose()).as_slice().to_vec();
            for _ in 0..2 {
                for b in &basis {
                    let dot: f64 = b.iter().zip(&v).map(|(x, y)| x * y).sum();
                    for (vi, bi) in v.iter_mut().zip(b) {
                        *vi -= dot * bi;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            debug_assert!(norm > 1e-12, "S_E spanning set is independent for rank-K E");
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::CcmcModel;
    use crate::numeric::max_abs_diff;
    use crate::rng::trial_rng;

    fn prompt(t: &[usize], v: AttnVariant, k: usize) -> Prompt {
        Prompt::from_indices(t, v, k).unwrap()
    }

    fn random_prompt<R: Rng>(rng: &mut R, k: usize, variant: AttnVariant, max_len: usize) -> Prompt {
        let len = rng.random_range(variant.min_len()..=max_len);
        let t: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        prompt(&t, variant, k)
    }

    #[test]
    fn canonical_configs_satisfy_assumptions_exactly() {
        let cfg = EmbeddingConfig::canonical(3, None);
        assert_eq!(cfg.embeddings(), &DMatrix::<f64>::identity(3, 3));
        assert_eq!(cfg.classifier(), &DMatrix::<f64>::identity(3, 3));
        let cfg = EmbeddingConfig::canonical(2, Some(3));
        let u = cfg.positions().unwrap();
        assert_eq!(cfg.classifier() * u.transpose(), DMatrix::<f64>::zeros(2, 3));
        assert_eq!(
            cfg.classifier() * cfg.embeddings().transpose(),
            DMatrix::<f64>::identity(2, 2)
        );
        assert_eq!(cfg.se_dim(), 2);
    }

    #[test]
    fn rejects_assumption_violations() {
        let e = DMatrix::<f64>::identity(2, 2);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(EmbeddingConfig::new(e.clone(), c, None), Err(Error::Config(_))));
        let dep = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        assert!(EmbeddingConfig::new(dep.clone(), dep, None).is_err());
        let u = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(EmbeddingConfig::new(e.clone(), e, Some(u)).is_err());
    }

    #[test]
    fn zero_weights_average_embeddings() {
        let cfg = EmbeddingConfig::canonical(3, None);
        let w = AttentionWeights::zeros(3);
        let out = cfg
            .self_attention_output(&w, &prompt(&[0, 1, 0], AttnVariant::SelfAttn, 3))
            .unwrap();
        assert!(max_abs_diff(out.as_slice(), &[2.0 / 3.0, 1.0 / 3.0, 0.0]) < 1e-15);
        let out = cfg
            .cross_attention_output(&w, &prompt(&[1, 2, 0], AttnVariant::CrossAttn, 3))
            .unwrap();
        assert!(max_abs_diff(out.as_slice(), &[0.0, 0.5, 0.5]) < 1e-15);
        let p = cfg
            .next_distribution(&w, &prompt(&[1, 2, 0], AttnVariant::CrossAttn, 3))
            .unwrap();
        assert!(max_abs_diff(&p, &[0.0, 0.5, 0.5]) < 1e-15);
    }

    #[test]
    fn single_token_and_constant_keys() {
        let cfg = EmbeddingConfig::canonical(3, None);
        let mut rng = trial_rng(1, 0);
        let w = AttentionWeights::random(3, 1.0, &mut rng);
        let out = cfg
            .self_attention_output(&w, &prompt(&[2], AttnVariant::SelfAttn, 3))
            .unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0, 1.0]);
        let out = cfg
            .cross_attention_output(&w, &prompt(&[1, 1, 1, 0], AttnVariant::CrossAttn, 3))
            .unwrap();
        assert!(max_abs_diff(out.as_slice(), &[0.0, 1.0, 0.0]) < 1e-15);
        assert!(cfg
            .cross_attention_output(&w, &prompt(&[1], AttnVariant::SelfAttn, 3))
            .is_err());
    }

    #[test]
    fn attention_equals_ccmc_for_both_variants() {
        let mut rng = trial_rng(2, 0);
        for k in [2, 3, 5] {
            let cfg = EmbeddingConfig::canonical(k, None);
            for _ in 0..10 {
                let w = AttentionWeights::random(k, 1.0, &mut rng);
                let model = CcmcModel::new(cfg.transition_from_weights(&w));
                for variant in [AttnVariant::SelfAttn, AttnVariant::CrossAttn] {
                    for _ in 0..10 {
                        let x = random_prompt(&mut rng, k, variant, 8);
                        let a = cfg.next_distribution(&w, &x).unwrap();
                        let b = model.next_distribution(&x).unwrap();
                        assert!(max_abs_diff(&a, &b) < 1e-12);
                        // f_W(X) = Eᵀ pi^X
                        let f = cfg.attention_output(&w, &x).unwrap();
                        let et = cfg.embeddings().transpose() * DVector::from_vec(b.clone());
                        assert!((f - et).amax() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn general_embeddings_keep_the_equivalence() {
        let mut rng = trial_rng(3, 0);
        let (k, d) = (3, 5);
        let e = DMatrix::from_fn(k, d, |_, _| StandardNormal.sample(&mut rng));
        let cfg = EmbeddingConfig::tied(e).unwrap();
        let w = AttentionWeights::random(d, 0.7, &mut rng);
        let model = CcmcModel::new(cfg.transition_from_weights(&w));
        for _ in 0..20 {
            let x = random_prompt(&mut rng, k, AttnVariant::SelfAttn, 6);
            let a = cfg.next_distribution(&w, &x).unwrap();
            let b = model.next_distribution(&x).unwrap();
            assert!(max_abs_diff(&a, &b) < 1e-10);
        }
        // Round trip through the bijection with a non-orthogonal E.
        let p = cfg.transition_from_weights(&w);
        let w2 = cfg.weights_from_transition(&p).unwrap();
        let p2 = cfg.transition_from_weights(&w2);
        assert!((p.matrix() - p2.matrix()).amax() < 1e-10);
        let pw = cfg.project_to_se(&w);
        assert!((pw.matrix() - w2.matrix()).norm() < 1e-8);
    }

    #[test]
    fn transition_from_weights_examples() {
        let cfg = EmbeddingConfig::canonical(2, None);
        let p = cfg.transition_from_weights(&AttentionWeights::zeros(2));
        assert_eq!(p, TransitionMatrix::uniform(2));

        // softmax(0.5, -0.5) = (1/(1+e^-1), e^-1/(1+e^-1))
        let w = DMatrix::from_column_slice(2, 2, &[0.5, -0.5, 0.0, 0.0]);
        let p = cfg.transition_from_weights(&AttentionWeights::new(w));
        let hi = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p.prob(0, 0) - hi).abs() < 1e-15);
        assert!((p.prob(0, 0) - 0.73106).abs() < 1e-5);

        // alpha (e_1 - e_2) e_1ᵀ pushes column 1 towards [1, 0] monotonically.
        let mut prev = 0.5;
        for alpha in [1.0, 2.0, 5.0, 10.0, 40.0] {
            let w = DMatrix::from_column_slice(2, 2, &[alpha, -alpha, 0.0, 0.0]);
            let p = cfg.transition_from_weights(&AttentionWeights::new(w));
            assert!(p.prob(0, 0) > prev);
            prev = p.prob(0, 0);
        }
        assert!(prev >= 1.0 - 1e-15);
    }

    #[test]
    fn weights_from_transition_examples() {
        let cfg = EmbeddingConfig::canonical(2, None);
        let w = cfg.weights_from_transition(&TransitionMatrix::uniform(2)).unwrap();
        assert!(w.matrix().amax() < 1e-15);
        assert!(w.in_subspace());

        let hi = 1.0 / (1.0 + (-1.0f64).exp());
        let p = TransitionMatrix::from_columns(&[vec![hi, 1.0 - hi], vec![0.5, 0.5]]).unwrap();
        let w = cfg.weights_from_transition(&p).unwrap();
        assert!((w.matrix()[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((w.matrix()[(1, 0)] + 0.5).abs() < 1e-12);

        let z = TransitionMatrix::from_columns(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        assert!(matches!(
            cfg.weights_from_transition(&z),
            Err(Error::NotStrictlyPositive { from: 0, to: 1 })
        ));
    }

    #[test]
    fn projection_for_identity_is_column_centering() {
        let cfg = EmbeddingConfig::canonical(3, None);
        let ones = AttentionWeights::new(DMatrix::from_element(3, 3, 1.0));
        assert!(cfg.project_to_se(&ones).matrix().amax() < 1e-15);

        let mut rng = trial_rng(4, 0);
        let w = AttentionWeights::random(3, 1.0, &mut rng);
        let proj = cfg.project_to_se(&w);
        let mut centered = w.matrix().clone();
        for mut c in centered.column_iter_mut() {
            let mean = c.mean();
            c.add_scalar_mut(-mean);
        }
        assert!((proj.matrix() - centered).amax() < 1e-14);
        let again = cfg.project_to_se(&proj);
        assert!((again.matrix() - proj.matrix()).amax() < 1e-14);
    }

    #[test]
    fn projection_for_positional_config_keeps_token_block() {
        let cfg = EmbeddingConfig::canonical(2, Some(2));
        let w = DMatrix::from_element(4, 4, 1.0) + DMatrix::from_fn(4, 4, |r, c| (r * 4 + c) as f64);
        let proj = cfg.project_to_se(&AttentionWeights::new(w.clone()));
        for r in 0..4 {
            for c in 0..4 {
                if r >= 2 || c >= 2 {
                    assert!(proj.matrix()[(r, c)].abs() < 1e-14);
                }
            }
        }
        for c in 0..2 {
            let mean = (w[(0, c)] + w[(1, c)]) / 2.0;
            assert!((proj.matrix()[(0, c)] - (w[(0, c)] - mean)).abs() < 1e-13);
        }
    }

    #[test]
    fn positional_factors_trivial_cases() {
        // U = 0 via a config with zero positional rows.
        let e = DMatrix::from_fn(3, 5, |r, c| if r == c { 1.0 } else { 0.0 });
        let cfg = EmbeddingConfig::new(e.clone(), e, Some(DMatrix::zeros(4, 5))).unwrap();
        let mut rng = trial_rng(5, 0);
        let w = AttentionWeights::random(5, 1.0, &mut rng);
        let pos = cfg.positional_model(&w).unwrap();
        assert!(pos.a().iter().all(|&x| x == 1.0));
        assert!(pos.b().iter().all(|&x| x == 1.0));
        assert!(pos.v().iter().all(|&x| x == 1.0));

        let cfg = EmbeddingConfig::canonical(3, Some(4));
        let pos = cfg.positional_model(&AttentionWeights::zeros(7)).unwrap();
        assert!(pos.a().iter().chain(pos.b().iter()).chain(pos.v().iter()).all(|&x| x == 1.0));
        assert_eq!(pos.transition(), &TransitionMatrix::uniform(3));

        assert!(EmbeddingConfig::canonical(3, None).positional_model(&AttentionWeights::zeros(3)).is_err());
    }

    #[test]
    fn positional_model_matches_positional_attention() {
        let mut rng = trial_rng(6, 0);
        let (k, l) = (3, 4);
        let cfg = EmbeddingConfig::canonical(k, Some(l));
        for _ in 0..30 {
            let w = AttentionWeights::random(k + l, 1.0, &mut rng);
            let model = cfg.positional_model(&w).unwrap();
            for variant in [AttnVariant::SelfAttn, AttnVariant::CrossAttn] {
                let t: Vec<usize> = (0..l).map(|_| rng.random_range(0..k)).collect();
                let x = prompt(&t, variant, k);
                let a = cfg.next_distribution(&w, &x).unwrap();
                let b = model.next_distribution(&x).unwrap();
                assert!(max_abs_diff(&a, &b) < 1e-12);
            }
        }
        let too_long = prompt(&[0, 1, 2, 0, 1], AttnVariant::SelfAttn, 3);
        assert!(cfg.next_distribution(&AttentionWeights::zeros(7), &too_long).is_err());
    }
}
