//! Maximum-likelihood estimation of attention weights.
//!
//! Under a tied classifier the next-token probability of label `y` is the
//! total softmax mass on the key positions holding `y`, so the negative
//! log-likelihood is a difference of log-sum-exps and is convex in `W`.
//! Objectives here are finite weighted sums over prompts:
//!
//! ```text
//! L(W) = sum_X w(X) sum_y t_X(y) * (-log pi_W^X(y))
//! ```
//!
//! with `t_X` either the empirical label frequencies of a dataset or the
//! ground-truth CCMC law (the exact population objective). Gradients are
//! always returned projected onto `S_E`.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionWeights, EmbeddingConfig};
use crate::chain::CcmcModel;
use crate::data::{Dataset, Prompt, PromptDistribution, TransitionMatrix};
use crate::error::{Error, Result};

/// Label probabilities at or below this make the loss infinite.
pub const MIN_LABEL_PROB: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossReport {
    /// Mean negative log-likelihood in nats.
    pub value: f64,
    /// Frobenius norm of the `S_E`-projected gradient.
    pub grad_norm: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug)]
struct Entry {
    prompt: Prompt,
    query: usize,
    /// Number of keys holding each token.
    counts: Vec<f64>,
    weight: f64,
    target: Vec<f64>,
    /// First dataset index (or support index) behind each label, for error reports.
    origin: Vec<usize>,
}

/// A finite weighted log-likelihood objective.
#[derive(Clone, Debug)]
pub struct Objective {
    entries: Vec<Entry>,
    n_samples: usize,
    vocab: usize,
}

impl Objective {
    /// Mean NLL over `data`, aggregated by distinct prompt.
    pub fn empirical(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidDataset("empty dataset".into()));
        }
        let k = data.vocab_size();
        let n = data.len() as f64;
        let mut index: HashMap<&Prompt, usize> = HashMap::new();
        let mut entries: Vec<Entry> = Vec::new();
        for (i, s) in data.samples().iter().enumerate() {
            let e = *index.entry(&s.prompt).or_insert_with(|| {
                entries.push(Entry {
                    query: s.prompt.last().0,
                    counts: counts_of(&s.prompt, k),
                    prompt: s.prompt.clone(),
                    weight: 0.0,
                    target: vec![0.0; k],
                    origin: vec![usize::MAX; k],
                });
                entries.len() - 1
            });
            let entry = &mut entries[e];
            entry.weight += 1.0;
            entry.target[s.next.0] += 1.0;
            entry.origin[s.next.0] = entry.origin[s.next.0].min(i);
        }
        for e in &mut entries {
            let c = e.weight;
            e.target.iter_mut().for_each(|t| *t /= c);
            e.weight = c / n;
        }
        Ok(Objective {
            entries,
            n_samples: data.len(),
            vocab: k,
        })
    }

    /// Exact population NLL when labels follow the CCMC of `gt`.
    pub fn population(dist: &PromptDistribution, gt: &TransitionMatrix) -> Result<Self> {
        let k = dist.vocab_size();
        if gt.vocab_size() != k {
            return Err(Error::Config(format!(
                "ground truth has {} states, prompts use {k}",
                gt.vocab_size()
            )));
        }
        let model = CcmcModel::new(gt.clone());
        let entries = dist
            .support()
            .iter()
            .enumerate()
            .filter(|(_, (_, w))| *w > 0.0)
            .map(|(i, (p, w))| {
                Ok(Entry {
                    query: p.last().0,
                    counts: counts_of(p, k),
                    prompt: p.clone(),
                    weight: *w,
                    target: model.next_distribution(p)?,
                    origin: vec![i; k],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Objective {
            entries,
            n_samples: dist.support().len(),
            vocab: k,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    /// Distinct prompts with their weights and label targets.
    pub fn terms(&self) -> impl Iterator<Item = (&Prompt, f64, &[f64])> {
        self.entries
            .iter()
            .map(|e| (&e.prompt, e.weight, e.target.as_slice()))
    }

    fn check_cfg(&self, cfg: &EmbeddingConfig) -> Result<()> {
        if cfg.positions().is_some() {
            return Err(Error::Config(
                "likelihood objectives are defined for configurations without positional embeddings"
                    .into(),
            ));
        }
        if cfg.vocab_size() != self.vocab {
            return Err(Error::Config(format!(
                "objective is over {} tokens, configuration over {}",
                self.vocab,
                cfg.vocab_size()
            )));
        }
        Ok(())
    }

    /// Loss value only.
    pub fn loss(&self, cfg: &EmbeddingConfig, w: &DMatrix<f64>) -> Result<f64> {
        Ok(self.evaluate(cfg, w, false)?.0)
    }

    /// Loss and projected gradient.
    pub fn loss_and_gradient(&self, cfg: &EmbeddingConfig, w: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let (v, g) = self.evaluate(cfg, w, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    // Every key holding token j scores e_j W e_q, so a prompt reduces to its
    // key counts c: log pi(y) = log c_y + T[y, q] - log sum_j c_j exp(T[j, q])
    // with T = E W Eᵀ, and dL/dT[j, q] = pi(j) - t(j).
    fn evaluate(&self, cfg: &EmbeddingConfig, w: &DMatrix<f64>, want_grad: bool) -> Result<(f64, Option<DMatrix<f64>>)> {
        self.check_cfg(cfg)?;
        let d = cfg.dim();
        if w.shape() != (d, d) {
            return Err(Error::Config(format!(
                "weights are {}x{}, expected {d}x{d}",
                w.nrows(),
                w.ncols()
            )));
        }
        let k = self.vocab;
        let e = cfg.embeddings();
        let t = e * w * e.transpose();
        let mut g = DMatrix::zeros(if want_grad { k } else { 0 }, if want_grad { k } else { 0 });
        let mut total = 0.0;
        let mut logits = vec![f64::NEG_INFINITY; k];
        for en in &self.entries {
            let q = en.query;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..k {
                if en.counts[j] > 0.0 {
                    logits[j] = en.counts[j].ln() + t[(j, q)];
                    mx = mx.max(logits[j]);
                }
            }
            let z: f64 = (0..k)
                .filter(|&j| en.counts[j] > 0.0)
                .map(|j| (logits[j] - mx).exp())
                .sum();
            let lse = mx + z.ln();
            for y in 0..k {
                let ty = en.target[y];
                if ty > 0.0 {
                    if en.counts[y] == 0.0 {
                        return Err(Error::InfiniteLoss {
                            index: en.origin[y],
                            label: y,
                            prob: 0.0,
                        });
                    }
                    total -= en.weight * ty * (logits[y] - lse);
                }
            }
            if want_grad {
                for j in 0..k {
                    if en.counts[j] > 0.0 {
                        g[(j, q)] += en.weight * ((logits[j] - lse).exp() - en.target[j]);
                    }
                }
            }
        }
        let grad = want_grad.then(|| cfg.project_matrix(&(e.transpose() * g * e)));
        Ok((total, grad))
    }

    pub fn report(&self, cfg: &EmbeddingConfig, w: &AttentionWeights) -> Result<LossReport> {
        let (value, g) = self.loss_and_gradient(cfg, w.matrix())?;
        Ok(LossReport {
            value,
            grad_norm: g.norm(),
            n_samples: self.n_samples,
        })
    }

    /// Whether the infimum is attained, i.e. a finite minimizer exists.
    ///
    /// For each query, draw `j -> y` whenever `j` is a key of a prompt with
    /// observed label `y`. A direction increasing `y` over its co-keys lowers
    /// the loss forever unless every such edge closes into a cycle; so the
    /// minimum is attained iff every edge lies inside a strongly connected
    /// component.
    pub fn has_finite_minimizer(&self) -> bool {
        let k = self.vocab;
        let mut reach: Vec<Vec<bool>> = vec![vec![false; k * k]; k];
        for e in &self.entries {
            let r = &mut reach[e.prompt.last().0];
            for (y, &t) in e.target.iter().enumerate() {
                if t > 0.0 {
                    for j in e.prompt.keys() {
                        r[j.0 * k + y] = true;
                    }
                }
            }
        }
        for r in &mut reach {
            let edges: Vec<(usize, usize)> = (0..k * k)
                .filter(|&ix| r[ix])
                .map(|ix| (ix / k, ix % k))
                .collect();
            for i in 0..k {
                r[i * k + i] = true;
            }
            for m in 0..k {
                for i in 0..k {
                    if r[i * k + m] {
                        for j in 0..k {
                            if r[m * k + j] {
                                r[i * k + j] = true;
                            }
                        }
                    }
                }
            }
            if edges.iter().any(|&(j, y)| !r[y * k + j]) {
                return false;
            }
        }
        true
    }
}

fn counts_of(prompt: &Prompt, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; k];
    for t in prompt.keys() {
        c[t.0] += 1.0;
    }
    c
}

/// Mean NLL of `data`, each label scored through the classifier read-out.
pub fn nll_loss(cfg: &EmbeddingConfig, w: &AttentionWeights, data: &Dataset) -> Result<LossReport> {
    if data.is_empty() {
        return Err(Error::InvalidDataset("empty dataset".into()));
    }
    let mut total = 0.0;
    for (i, s) in data.samples().iter().enumerate() {
        let probs = cfg.next_distribution(w, &s.prompt)?;
        let p = probs[s.next.0];
        if p <= MIN_LABEL_PROB {
            return Err(Error::InfiniteLoss {
                index: i,
                label: s.next.0,
                prob: p,
            });
        }
        total -= p.ln();
    }
    let value = total / data.len() as f64;
    let grad = Objective::empirical(data)?.loss_and_gradient(cfg, w.matrix())?.1;
    Ok(LossReport {
        value,
        grad_norm: grad.norm(),
        n_samples: data.len(),
    })
}

/// Exact population NLL `E_X sum_y pi_GT^X(y) (-log pi_W^X(y))`, with `0 log 0 = 0`.
pub fn population_loss(
    cfg: &EmbeddingConfig,
    w: &AttentionWeights,
    dist: &PromptDistribution,
    gt: &TransitionMatrix,
) -> Result<LossReport> {
    let model = CcmcModel::new(gt.clone());
    let mut value = 0.0;
    for (i, (x, wx)) in dist.support().iter().enumerate() {
        if *wx == 0.0 {
            continue;
        }
        let target = model.next_distribution(x)?;
        let probs = cfg.next_distribution(w, x)?;
        for (y, (&t, &p)) in target.iter().zip(&probs).enumerate() {
            if t > 0.0 {
                if p <= MIN_LABEL_PROB {
                    return Err(Error::InfiniteLoss {
                        index: i,
                        label: y,
                        prob: p,
                    });
                }
                value -= wx * t * p.ln();
            }
        }
    }
    let grad = Objective::population(dist, gt)?.loss_and_gradient(cfg, w.matrix())?.1;
    Ok(LossReport {
        value,
        grad_norm: grad.norm(),
        n_samples: dist.support().len(),
    })
}

/// Projected gradient of `objective` at `w`.
pub fn loss_gradient(cfg: &EmbeddingConfig, w: &AttentionWeights, objective: &Objective) -> Result<DMatrix<f64>> {
    Ok(objective.loss_and_gradient(cfg, w.matrix())?.1)
}

/// `KL(p || q)` in nats with `0 log 0 = 0`; infinite divergence is an error.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    crate::data::check_probabilities(p, crate::data::SAMPLING_TOL)?;
    crate::data::check_probabilities(q, crate::data::SAMPLING_TOL)?;
    if p.len() != q.len() {
        return Err(Error::InvalidProbabilities("length mismatch".into()));
    }
    let mut kl = 0.0;
    for (j, (&pj, &qj)) in p.iter().zip(q).enumerate() {
        if pj > 0.0 {
            if qj <= 0.0 {
                return Err(Error::InfiniteLoss {
                    index: j,
                    label: j,
                    prob: qj,
                });
            }
            kl += pj * (pj / qj).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// `E_X[KL(pi_GT^X || pi_W^X)]` over the support of `dist`.
pub fn expected_kl(
    cfg: &EmbeddingConfig,
    w: &AttentionWeights,
    dist: &PromptDistribution,
    gt: &TransitionMatrix,
) -> Result<f64> {
    let model = CcmcModel::new(gt.clone());
    let mut total = 0.0;
    for (x, wx) in dist.active() {
        let p = model.next_distribution(x)?;
        let q = cfg.next_distribution(w, x)?;
        total += wx * kl_divergence(&p, &q)?;
    }
    Ok(total)
}

/// Maximum total-variation distance between matching columns.
pub fn column_tv(a: &TransitionMatrix, b: &TransitionMatrix) -> Vec<f64> {
    (0..a.vocab_size())
        .map(|i| crate::numeric::total_variation(a.column(i), b.column(i)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub record_every: usize,
    /// Step halvings tolerated before giving up.
    pub max_halvings: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            step_size: 0.1,
            max_iters: 200_000,
            grad_tol: 1e-9,
            record_every: 1000,
            max_halvings: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIters,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct DescentResult {
    pub weights: AttentionWeights,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
    pub iterations: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Step size in force at the end (after any halvings).
    pub step_size: f64,
}

impl DescentResult {
    /// CSV `iter,loss,grad_norm`.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,loss,grad_norm\n");
        for r in &self.trace {
            out.push_str(&format!("{},{},{}\n", r.iter, r.loss, r.grad_norm));
        }
        out
    }
}

/// Projected gradient descent from `W = 0` with a constant step.
///
/// A loss increase above `1e-12` halves the step and retries; more than
/// `max_halvings` halvings is a [`Error::StepSize`].
pub fn gradient_descent(
    cfg: &EmbeddingConfig,
    objective: &Objective,
    settings: &OptimizerSettings,
) -> Result<DescentResult> {
    if !(settings.step_size > 0.0 && settings.grad_tol > 0.0 && settings.record_every > 0) {
        return Err(Error::Config("optimizer settings must be positive".into()));
    }
    let d = cfg.dim();
    let mut w = DMatrix::zeros(d, d);
    let (mut loss, mut grad) = objective.loss_and_gradient(cfg, &w)?;
    let mut gnorm = grad.norm();
    let mut step = settings.step_size;
    let mut halvings = 0;
    let mut trace = vec![TraceRow {
        iter: 0,
        loss,
        grad_norm: gnorm,
    }];
    let mut iter = 0;
    let termination = loop {
        if gnorm <= settings.grad_tol {
            break Termination::Converged;
        }
        if iter >= settings.max_iters {
            break Termination::MaxIters;
        }
        let (next_w, next_loss, next_grad) = loop {
            let cand = &w - step * &grad;
            match objective.loss_and_gradient(cfg, &cand) {
                Ok((l, g)) if l <= loss + 1e-12 => break (cand, l, g),
                Ok(_) | Err(Error::InfiniteLoss { .. }) => {}
                Err(e) => return Err(e),
            }
            halvings += 1;
            if halvings > settings.max_halvings {
                return Err(Error::StepSize { halvings, step });
            }
            step *= 0.5;
        };
        w = next_w;
        loss = next_loss;
        grad = next_grad;
        gnorm = grad.norm();
        iter += 1;
        if iter % settings.record_every == 0 {
            trace.push(TraceRow {
                iter,
                loss,
                grad_norm: gnorm,
            });
        }
    };
    if trace.last().map(|r| r.iter) != Some(iter) {
        trace.push(TraceRow {
            iter,
            loss,
            grad_norm: gnorm,
        });
    }
    let weights = cfg.project_to_se(&AttentionWeights::new(w));
    Ok(DescentResult {
        weights,
        trace,
        termination,
        iterations: iter,
        loss,
        grad_norm: gnorm,
        step_size: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AttnVariant, Sample, TokenId};
    use crate::rng::trial_rng;
    use rand::Rng;

    fn prompt(t: &[usize], v: AttnVariant, k: usize) -> Prompt {
        Prompt::from_indices(t, v, k).unwrap()
    }

    fn cyclic_support(k: usize) -> PromptDistribution {
        let mut ps = Vec::new();
        for shift in 0..k {
            for q in 0..k {
                let mut t: Vec<usize> = (0..k).map(|i| (i + shift) % k).collect();
                t.push(q);
                ps.push(prompt(&t, AttnVariant::SelfAttn, k));
            }
        }
        PromptDistribution::uniform(ps, k).unwrap()
    }

    fn random_gt<R: Rng>(cfg: &EmbeddingConfig, rng: &mut R) -> (AttentionWeights, TransitionMatrix) {
        let w = cfg.project_to_se(&AttentionWeights::random(cfg.dim(), 1.0, rng));
        let p = cfg.transition_from_weights(&w);
        (w, p)
    }

    #[test]
    fn nll_examples() {
        let cfg = EmbeddingConfig::canonical(2, None);
        let data = Dataset::new(
            vec![Sample {
                prompt: prompt(&[0, 1], AttnVariant::SelfAttn, 2),
                next: TokenId(0),
            }],
            2,
        )
        .unwrap();
        let r = nll_loss(&cfg, &AttentionWeights::zeros(2), &data).unwrap();
        assert!((r.value - 2f64.ln()).abs() < 1e-15);

        let bad = Dataset::new_unchecked(
            vec![
                Sample {
                    prompt: prompt(&[0, 1], AttnVariant::SelfAttn, 2),
                    next: TokenId(0),
                },
                Sample {
                    prompt: prompt(&[0, 0], AttnVariant::SelfAttn, 2),
                    next: TokenId(1),
                },
            ],
            2,
        );
        assert!(matches!(
            nll_loss(&cfg, &AttentionWeights::zeros(2), &bad),
            Err(Error::InfiniteLoss { index: 1, label: 1, .. })
        ));
        assert!(matches!(
            Objective::empirical(&bad).unwrap().loss(&cfg, &DMatrix::zeros(2, 2)),
            Err(Error::InfiniteLoss { index: 1, .. })
        ));
    }

    #[test]
    fn aggregated_objective_matches_per_sample_loss() {
        let mut rng = trial_rng(40, 0);
        let cfg = EmbeddingConfig::canonical(3, None);
        let w = AttentionWeights::random(3, 1.0, &mut rng);
        let samples: Vec<Sample> = (0..200)
            .map(|_| {
                let t: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
                let next = TokenId(t[rng.random_range(0..4)]);
                Sample {
                    prompt: prompt(&t, AttnVariant::SelfAttn, 3),
                    next,
                }
            })
            .collect();
        let data = Dataset::new(samples, 3).unwrap();
        let a = nll_loss(&cfg, &w, &data).unwrap().value;
        let b = Objective::empirical(&data).unwrap().loss(&cfg, w.matrix()).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn population_examples() {
        let cfg = EmbeddingConfig::canonical(2, None);
        let dist = PromptDistribution::uniform(vec![prompt(&[0, 1], AttnVariant::SelfAttn, 2)], 2).unwrap();
        let gt = TransitionMatrix::uniform(2);
        let r = population_loss(&cfg, &AttentionWeights::zeros(2), &dist, &gt).unwrap();
        assert!((r.value - 2f64.ln()).abs() < 1e-15);

        let mut rng = trial_rng(41, 0);
        let cfg = EmbeddingConfig::canonical(3, None);
        let dist = cyclic_support(3);
        let (wgt, gt) = random_gt(&cfg, &mut rng);
        let at_gt = population_loss(&cfg, &wgt, &dist, &gt).unwrap();
        let model = CcmcModel::new(gt.clone());
        let ent: f64 = dist
            .support()
            .iter()
            .map(|(x, w)| w * entropy(&model.next_distribution(x).unwrap()))
            .sum();
        assert!((at_gt.value - ent).abs() < 1e-12);
        assert!(at_gt.grad_norm < 1e-10);
        // Literal and aggregated evaluations agree.
        let agg = Objective::population(&dist, &gt).unwrap().loss(&cfg, wgt.matrix()).unwrap();
        assert!((agg - at_gt.value).abs() < 1e-13);
    }

    #[test]
    fn population_support_mismatch_is_infinite() {
        // Cross-attention: gt puts mass on a key the model can't reach only if probabilities vanish.
        let cfg = EmbeddingConfig::canonical(2, None);
        let dist = PromptDistribution::uniform(vec![prompt(&[0, 1], AttnVariant::SelfAttn, 2)], 2).unwrap();
        let gt = TransitionMatrix::uniform(2);
        let w = AttentionWeights::new(DMatrix::from_column_slice(2, 2, &[0.0, 0.0, 800.0, -800.0]));
        assert!(matches!(
            population_loss(&cfg, &w, &dist, &gt),
            Err(Error::InfiniteLoss { .. })
        ));
    }

    #[test]
    fn excess_loss_is_expected_kl() {
        let mut rng = trial_rng(42, 0);
        for k in [2, 3, 4] {
            let cfg = EmbeddingConfig::canonical(k, None);
            let dist = cyclic_support(k);
            let (wgt, gt) = random_gt(&cfg, &mut rng);
            let base = population_loss(&cfg, &wgt, &dist, &gt).unwrap().value;
            for _ in 0..5 {
                let w = AttentionWeights::random(k, 1.0, &mut rng);
                let lw = population_loss(&cfg, &w, &dist, &gt).unwrap().value;
                let kl = expected_kl(&cfg, &w, &dist, &gt).unwrap();
                assert!((lw - base - kl).abs() < 1e-12, "{} vs {}", lw - base, kl);
            }
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        // 0.5 ln 2 + 0.5 ln(2/3)
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((v - 0.143841).abs() < 1e-6);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    /// Central finite differences of the objective along each matrix entry.
    fn fd_gradient(obj: &Objective, cfg: &EmbeddingConfig, w: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(w.nrows(), w.ncols());
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                let mut wp = w.clone();
                wp[(r, c)] += h;
                let mut wm = w.clone();
                wm[(r, c)] -= h;
                g[(r, c)] = (obj.loss(cfg, &wp).unwrap() - obj.loss(cfg, &wm).unwrap()) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = trial_rng(43, 0);
        let cfg = EmbeddingConfig::canonical(3, None);
        for variant in [AttnVariant::SelfAttn, AttnVariant::CrossAttn] {
            let samples: Vec<Sample> = (0..30)
                .map(|_| {
                    let t: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
                    let nkeys = if variant == AttnVariant::SelfAttn { 5 } else { 4 };
                    Sample {
                        next: TokenId(t[rng.random_range(0..nkeys)]),
                        prompt: prompt(&t, variant, 3),
                    }
                })
                .collect();
            let obj = Objective::empirical(&Dataset::new(samples, 3).unwrap()).unwrap();
            let w = AttentionWeights::random(3, 1.0, &mut rng);
            let g = loss_gradient(&cfg, &w, &obj).unwrap();
            let fd = fd_gradient(&obj, &cfg, w.matrix(), 1e-5);
            for (a, b) in g.iter().zip(fd.iter()) {
                assert!((a - b).abs() / a.abs().max(1e-4) < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn gradient_is_permutation_equivariant() {
        // Relabel tokens by a permutation: the gradient permutes rows and columns.
        let cfg = EmbeddingConfig::canonical(3, None);
        let perm = [1usize, 0, 2];
        let raw = [(vec![0, 1, 0], 0usize), (vec![1, 2, 1], 2usize)];
        let mk = |f: &dyn Fn(usize) -> usize| {
            Dataset::new(
                raw.iter()
                    .map(|(t, y)| Sample {
                        prompt: prompt(&t.iter().map(|&x| f(x)).collect::<Vec<_>>(), AttnVariant::SelfAttn, 3),
                        next: TokenId(f(*y)),
                    })
                    .collect(),
                3,
            )
            .unwrap()
        };
        let data = mk(&|x| x);
        let pdata = mk(&|x| perm[x]);
        let mut rng = trial_rng(44, 0);
        let w = AttentionWeights::random(3, 1.0, &mut rng);
        let pw = DMatrix::from_fn(3, 3, |r, c| {
            let ri = perm.iter().position(|&p| p == r).unwrap();
            let ci = perm.iter().position(|&p| p == c).unwrap();
            w.matrix()[(ri, ci)]
        });
        let g = loss_gradient(&cfg, &w, &Objective::empirical(&data).unwrap()).unwrap();
        let pg = loss_gradient(&cfg, &AttentionWeights::new(pw), &Objective::empirical(&pdata).unwrap()).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((pg[(perm[r], perm[c])] - g[(r, c)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn descent_at_minimum_stops_immediately() {
        let cfg = EmbeddingConfig::canonical(3, None);
        let dist = cyclic_support(3);
        let obj = Objective::population(&dist, &TransitionMatrix::uniform(3)).unwrap();
        let res = gradient_descent(&cfg, &obj, &OptimizerSettings::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert_eq!(res.termination, Termination::Converged);
        assert!(res.weights.matrix().amax() < 1e-15);
    }

    #[test]
    fn descent_recovers_ground_truth_on_connected_support() {
        let mut rng = trial_rng(45, 0);
        let cfg = EmbeddingConfig::canonical(4, None);
        let dist = cyclic_support(4);
        let (wgt, gt) = random_gt(&cfg, &mut rng);
        let obj = Objective::population(&dist, &gt).unwrap();
        let res = gradient_descent(&cfg, &obj, &OptimizerSettings { step_size: 1.0, ..Default::default() }).unwrap();
        assert_eq!(res.termination, Termination::Converged);
        let p = cfg.transition_from_weights(&res.weights);
        assert!(column_tv(&p, &gt).into_iter().fold(0.0, f64::max) < 1e-4);
        assert!((res.weights.matrix() - wgt.matrix()).norm() < 1e-6);
        for pair in res.trace.windows(2) {
            assert!(pair[1].loss <= pair[0].loss + 1e-12);
        }
        assert!(res.trace_csv().starts_with("iter,loss,grad_norm\n0,"));
    }

    #[test]
    fn oversized_step_is_reported() {
        let mut rng = trial_rng(46, 0);
        let cfg = EmbeddingConfig::canonical(3, None);
        let (_, gt) = random_gt(&cfg, &mut rng);
        let obj = Objective::population(&cfg_support(), &gt).unwrap();
        let s = OptimizerSettings { step_size: 1e6, max_halvings: 2, ..Default::default() };
        assert!(matches!(gradient_descent(&cfg, &obj, &s), Err(Error::StepSize { .. })));

        fn cfg_support() -> PromptDistribution {
            cyclic_support(3)
        }
    }

    #[test]
    fn finite_minimizer_detection() {
        let k = 3;
        let x = prompt(&[0, 1, 2], AttnVariant::SelfAttn, k);
        let labels = |ys: &[usize]| {
            Dataset::new(
                ys.iter().map(|&y| Sample { prompt: x.clone(), next: TokenId(y) }).collect(),
                k,
            )
            .unwrap()
        };
        assert!(Objective::empirical(&labels(&[0, 1, 2])).unwrap().has_finite_minimizer());
        assert!(!Objective::empirical(&labels(&[0, 1])).unwrap().has_finite_minimizer());
        // Population objectives with strictly positive ground truth always attain their minimum.
        let gt = TransitionMatrix::uniform(3);
        assert!(Objective::population(&cyclic_support(3), &gt).unwrap().has_finite_minimizer());
        // Labels chained across prompts: 0 in {0,1}, 1 in {1,2}, 2 in {0,2}; 1 unobserved in the first.
        let ps = [
            (prompt(&[0, 1], AttnVariant::SelfAttn, k), 0usize),
            (prompt(&[1, 2], AttnVariant::SelfAttn, k), 1),
            (prompt(&[2, 0], AttnVariant::SelfAttn, k), 2),
        ];
        // Queries differ per prompt here, so each query has a one-sided edge.
        let d = Dataset::new(ps.iter().map(|(p, y)| Sample { prompt: p.clone(), next: TokenId(*y) }).collect(), k).unwrap();
        assert!(!Objective::empirical(&d).unwrap().has_finite_minimizer());
    }

    #[test]
    fn positional_configs_are_rejected() {
        let cfg = EmbeddingConfig::canonical(2, Some(2));
        let dist = PromptDistribution::uniform(vec![prompt(&[0, 1], AttnVariant::SelfAttn, 2)], 2).unwrap();
        let obj = Objective::population(&dist, &TransitionMatrix::uniform(2)).unwrap();
        assert!(matches!(obj.loss(&cfg, &DMatrix::zeros(4, 4)), Err(Error::Config(_))));
    }
}
