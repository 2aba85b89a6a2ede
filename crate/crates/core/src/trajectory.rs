//! Single-trajectory autoregressive generation.
//!
//! Starting from a prompt `X_1`, each step samples `y_t` from the model given
//! `X_t` and appends it: `X_{t+1} = [X_t, y_t]`. Checkpoint `t` records the
//! state `X_t`, which holds `|X_1| + t - 1` tokens. Statistics are kept with
//! running counts, so a step costs `O(K)` regardless of the prefix length.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::attention::{AttentionWeights, EmbeddingConfig};
use crate::chain::CcmcModel;
use crate::data::{AttnVariant, Dataset, Prompt, Sample, TokenId, TransitionMatrix};
use crate::error::{Error, Result};
use crate::numeric::linear_fit;

/// Anything that produces CCMC-style next-token laws for a growing prompt.
#[derive(Clone, Copy, Debug)]
pub enum TrajectoryModel<'a> {
    Ccmc(&'a CcmcModel),
    /// Attention weights read out through a tied classifier (no positional rows).
    Attention(&'a EmbeddingConfig, &'a AttentionWeights),
}

impl<'a> From<&'a CcmcModel> for TrajectoryModel<'a> {
    fn from(m: &'a CcmcModel) -> Self {
        TrajectoryModel::Ccmc(m)
    }
}

impl TrajectoryModel<'_> {
    fn vocab_size(&self) -> usize {
        match self {
            TrajectoryModel::Ccmc(m) => m.vocab_size(),
            TrajectoryModel::Attention(cfg, _) => cfg.vocab_size(),
        }
    }

    /// Column-major `K x K` table: entry `(j, i)` is proportional to the
    /// weight a key holding `j` receives when the query is `i`.
    fn base_table(&self) -> Result<Vec<f64>> {
        match self {
            TrajectoryModel::Ccmc(m) => Ok(m.transition().matrix().as_slice().to_vec()),
            TrajectoryModel::Attention(cfg, w) => {
                if cfg.positions().is_some() {
                    return Err(Error::Config(
                        "trajectories grow without bound; positional configurations are not supported".into(),
                    ));
                }
                // Key score e_j W e_i is shared by every position holding j.
                let logits = cfg.token_logits(w);
                let mut out = logits.as_slice().to_vec();
                let k = logits.nrows();
                for col in out.chunks_mut(k) {
                    let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    col.iter_mut().for_each(|x| *x = (*x - mx).exp());
                }
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrajectoryOptions {
    /// Values of `t` at which to record the state `X_t`; entries past the end are skipped.
    pub checkpoints: Vec<usize>,
    /// Token whose self-transitions are counted per checkpoint.
    pub weak_token: TokenId,
    /// Permit an initial prompt that misses part of the vocabulary.
    pub allow_partial_vocab: bool,
}

impl TrajectoryOptions {
    pub fn new(checkpoints: Vec<usize>) -> Self {
        TrajectoryOptions {
            checkpoints,
            weak_token: TokenId(1),
            allow_partial_vocab: false,
        }
    }
}

/// `ceil(ratio^j)` for all `j` with value at most `max_t`, merged with `extra`.
pub fn geometric_checkpoints(max_t: usize, ratio: f64, extra: &[usize]) -> Vec<usize> {
    assert!(ratio > 1.0, "checkpoint ratio must exceed 1");
    let mut out = Vec::new();
    let mut x = 1.0f64;
    while x.ceil() <= max_t as f64 {
        out.push(x.ceil() as usize);
        x *= ratio;
    }
    out.extend(extra.iter().copied().filter(|&t| t >= 1 && t <= max_t));
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryStats {
    vocab: usize,
    initial_len: usize,
    weak_token: usize,
    checkpoints: Vec<usize>,
    /// `m(X_t)`: token frequencies over all of `X_t`, one row per checkpoint.
    freq_series: Vec<Vec<f64>>,
    /// `S_{k,t}` per checkpoint.
    visit_series: Vec<Vec<u64>>,
    /// Cumulative weak-to-weak transitions before reaching each checkpoint.
    weakweak_series: Vec<u64>,
    visit_counts: Vec<u64>,
    /// Row-major `[from * K + to]`.
    transition_counts: Vec<u64>,
    length: usize,
}

impl TrajectoryStats {
    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn initial_len(&self) -> usize {
        self.initial_len
    }

    pub fn weak_token(&self) -> TokenId {
        TokenId(self.weak_token)
    }

    pub fn checkpoints(&self) -> &[usize] {
        &self.checkpoints
    }

    pub fn freq_series(&self) -> &[Vec<f64>] {
        &self.freq_series
    }

    pub fn visit_series(&self) -> &[Vec<u64>] {
        &self.visit_series
    }

    pub fn visit_counts(&self) -> &[u64] {
        &self.visit_counts
    }

    pub fn transition_count(&self, from: usize, to: usize) -> u64 {
        self.transition_counts[from * self.vocab + to]
    }

    pub fn transition_counts(&self) -> &[u64] {
        &self.transition_counts
    }

    /// Number of generated tokens.
    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    /// CSV `t,freq_0,...,freq_{K-1},weakweak_count`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for k in 0..self.vocab {
            out.push_str(&format!(",freq_{k}"));
        }
        out.push_str(",weakweak_count\n");
        for ((t, f), ww) in self.checkpoints.iter().zip(&self.freq_series).zip(&self.weakweak_series) {
            out.push_str(&t.to_string());
            for x in f {
                out.push_str(&format!(",{x}"));
            }
            out.push_str(&format!(",{ww}\n"));
        }
        out
    }
}

/// The generated token sequence, including the initial prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    tokens: Vec<TokenId>,
    initial_len: usize,
    variant: AttnVariant,
    vocab: usize,
}

impl Trajectory {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn initial_len(&self) -> usize {
        self.initial_len
    }

    /// Number of generated tokens.
    pub fn len(&self) -> usize {
        self.tokens.len() - self.initial_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The state `X_t`, `1 <= t <= len() + 1`.
    pub fn prompt_at(&self, t: usize) -> Prompt {
        assert!(t >= 1 && t <= self.len() + 1, "t out of range");
        Prompt::new(self.tokens[..self.initial_len + t - 1].to_vec(), self.variant, self.vocab)
            .expect("trajectory tokens are valid")
    }

    /// The `(X_t, y_t)` pairs. Memory is quadratic in the length.
    pub fn to_dataset(&self) -> Dataset {
        let samples = (1..=self.len())
            .map(|t| Sample {
                prompt: self.prompt_at(t),
                next: self.tokens[self.initial_len + t - 1],
            })
            .collect();
        Dataset::new_unchecked(samples, self.vocab)
    }
}

/// Generate `n` tokens and keep them.
pub fn generate_trajectory<'a, R: Rng + ?Sized>(
    model: impl Into<TrajectoryModel<'a>>,
    x1: &Prompt,
    n: usize,
    opts: &TrajectoryOptions,
    rng: &mut R,
) -> Result<(Trajectory, TrajectoryStats)> {
    let mut tokens = x1.tokens().to_vec();
    tokens.reserve(n);
    let stats = run(model.into(), x1, n, opts, rng, |t| tokens.push(t))?;
    let traj = Trajectory {
        tokens,
        initial_len: x1.len(),
        variant: x1.variant(),
        vocab: stats.vocab,
    };
    Ok((traj, stats))
}

/// Generate `n` tokens keeping only the statistics.
pub fn simulate_trajectory<'a, R: Rng + ?Sized>(
    model: impl Into<TrajectoryModel<'a>>,
    x1: &Prompt,
    n: usize,
    opts: &TrajectoryOptions,
    rng: &mut R,
) -> Result<TrajectoryStats> {
    run(model.into(), x1, n, opts, rng, |_| {})
}

fn run<R: Rng + ?Sized>(
    model: TrajectoryModel<'_>,
    x1: &Prompt,
    n: usize,
    opts: &TrajectoryOptions,
    rng: &mut R,
    mut sink: impl FnMut(TokenId),
) -> Result<TrajectoryStats> {
    let k = model.vocab_size();
    let base = model.base_table()?;
    let weak = opts.weak_token.check(k)?.0;
    let mut visits = vec![0u64; k];
    for t in x1.tokens() {
        visits[t.check(k)?.0] += 1;
    }
    if !opts.allow_partial_vocab {
        if let Some(missing) = (0..k).find(|&j| visits[j] == 0) {
            return Err(Error::Coverage { missing });
        }
    }
    if x1.len() < x1.variant().min_len() {
        return Err(Error::PromptTooShort {
            variant: x1.variant().name(),
            min: x1.variant().min_len(),
            len: x1.len(),
        });
    }
    let mut checkpoints = opts.checkpoints.clone();
    checkpoints.retain(|&t| t >= 1 && t <= n + 1);
    checkpoints.sort_unstable();
    checkpoints.dedup();

    let cross = x1.variant() == AttnVariant::CrossAttn;
    let mut stats = TrajectoryStats {
        vocab: k,
        initial_len: x1.len(),
        weak_token: weak,
        freq_series: Vec::with_capacity(checkpoints.len()),
        visit_series: Vec::with_capacity(checkpoints.len()),
        weakweak_series: Vec::with_capacity(checkpoints.len()),
        checkpoints,
        visit_counts: Vec::new(),
        transition_counts: vec![0; k * k],
        length: n,
    };
    let mut state = x1.last().0;
    let mut len = x1.len() as u64;
    let mut next_cp = 0;
    let mut weights = vec![0.0; k];
    for t in 1..=n + 1 {
        if stats.checkpoints.get(next_cp) == Some(&t) {
            stats.freq_series.push(visits.iter().map(|&c| c as f64 / len as f64).collect());
            stats.visit_series.push(visits.clone());
            stats.weakweak_series.push(stats.transition_counts[weak * k + weak]);
            next_cp += 1;
        }
        if t == n + 1 {
            break;
        }
        let col = &base[state * k..(state + 1) * k];
        let mut total = 0.0;
        for j in 0..k {
            let keys = visits[j] - u64::from(cross && j == state);
            weights[j] = keys as f64 * col[j];
            total += weights[j];
        }
        if !(total > 0.0) {
            return Err(Error::DegenerateMask { state });
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut y = None;
        for (j, &wj) in weights.iter().enumerate() {
            if wj > 0.0 {
                y = Some(j);
                acc += wj;
                if u < acc {
                    break;
                }
            }
        }
        let y = y.expect("positive total has a positive entry");
        stats.transition_counts[state * k + y] += 1;
        visits[y] += 1;
        len += 1;
        state = y;
        sink(TokenId(y));
    }
    stats.visit_counts = visits;
    Ok(stats)
}

/// The K=2 chain with both columns `[1 - p, p]`; token 1 is the weak token.
pub fn weak_token_setup(p: f64) -> Result<CcmcModel> {
    if !(p > 0.0 && p <= 0.5) {
        return Err(Error::Config(format!("weak-token probability must lie in (0, 1/2], got {p}")));
    }
    let col = vec![1.0 - p, p];
    Ok(CcmcModel::new(TransitionMatrix::from_columns(&[col.clone(), col])?))
}

/// Decay rate `q = (1 - 2p) / (1 - p)` of the weak-token frequency.
pub fn collapse_rate(p: f64) -> f64 {
    (1.0 - 2.0 * p) / (1.0 - p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CollapseFit {
    pub fitted_exponent: f64,
    pub fit_window: (usize, usize),
    pub r_squared: f64,
    pub points: usize,
    /// `(1 - 2p) / (1 - p)`, present only for the K=2 weak-token instance.
    pub theoretical_q: Option<f64>,
}

/// Least-squares slope and `R²` of `log y` against `log t`.
pub fn fit_power_law(ts: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if ts.len() != ys.len() || ts.len() < 2 {
        return Err(Error::Fit("need at least two points".into()));
    }
    if let Some(i) = ys.iter().position(|&y| !(y > 0.0)) {
        return Err(Error::Fit(format!("non-positive value {} at t = {}", ys[i], ts[i])));
    }
    let lx: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (slope, _, r2) = linear_fit(&lx, &ly).ok_or_else(|| Error::Fit("degenerate abscissae".into()))?;
    Ok((slope, r2))
}

/// Ensemble mean of one token's frequency at each shared checkpoint.
pub fn ensemble_mean_frequency(ensemble: &[TrajectoryStats], token: TokenId) -> Result<Vec<(usize, f64)>> {
    let first = ensemble
        .first()
        .ok_or_else(|| Error::Precondition("empty ensemble".into()))?;
    token.check(first.vocab)?;
    if ensemble.iter().any(|s| s.checkpoints != first.checkpoints) {
        return Err(Error::Precondition("ensemble members use different checkpoints".into()));
    }
    let n = ensemble.len() as f64;
    Ok(first
        .checkpoints
        .iter()
        .enumerate()
        .map(|(c, &t)| (t, ensemble.iter().map(|s| s.freq_series[c][token.0]).sum::<f64>() / n))
        .collect())
}

/// Power-law fit of the ensemble-mean frequency of `token` over `[t0_fraction T, T]`.
///
/// `T` is the last checkpoint. Pass `weak_p` for the K=2 weak-token setup to
/// fill in the theoretical rate.
pub fn fit_collapse_exponent(
    ensemble: &[TrajectoryStats],
    token: TokenId,
    t0_fraction: f64,
    weak_p: Option<f64>,
) -> Result<CollapseFit> {
    if !(t0_fraction > 0.0 && t0_fraction < 1.0) {
        return Err(Error::Config(format!("t0_fraction must lie in (0, 1), got {t0_fraction}")));
    }
    let curve = ensemble_mean_frequency(ensemble, token)?;
    let big_t = curve.last().map(|c| c.0).unwrap_or(0);
    if big_t < 1000 {
        return Err(Error::Precondition(format!(
            "collapse fits need a horizon of at least 1000, got {big_t}"
        )));
    }
    let t0 = (t0_fraction * big_t as f64).ceil() as usize;
    let window: Vec<&(usize, f64)> = curve.iter().filter(|(t, _)| *t >= t0).collect();
    let ts: Vec<f64> = window.iter().map(|(t, _)| *t as f64).collect();
    let ys: Vec<f64> = window.iter().map(|(_, y)| *y).collect();
    let (slope, r2) = fit_power_law(&ts, &ys)?;
    let theoretical_q = match weak_p {
        Some(p) if ensemble[0].vocab == 2 => Some(collapse_rate(p)),
        _ => None,
    };
    Ok(CollapseFit {
        fitted_exponent: slope,
        fit_window: (window[0].0, big_t),
        r_squared: r2,
        points: ts.len(),
        theoretical_q,
    })
}

/// Cumulative weak-to-weak transition counts, paired with their checkpoints.
pub fn weak_transition_count(stats: &TrajectoryStats) -> Vec<(usize, u64)> {
    stats
        .checkpoints
        .iter()
        .copied()
        .zip(stats.weakweak_series.iter().copied())
        .collect()
}

/// For every token and every window `[b_j, b_{j+1}]`, whether `S_{k,t}` grew.
///
/// Window boundaries are `max(1, j * window)` and must all be checkpoints.
pub fn visit_growth_check(stats: &TrajectoryStats, window: usize) -> Result<Vec<Vec<bool>>> {
    if window == 0 {
        return Err(Error::Config("window must be positive".into()));
    }
    let horizon = stats.length + 1;
    if horizon < 2 * window {
        return Err(Error::Precondition(format!(
            "trajectory of length {} is shorter than two windows of {window}",
            stats.length
        )));
    }
    let bounds: Vec<usize> = (0..=horizon / window).map(|j| (j * window).max(1)).collect();
    let rows = bounds
        .iter()
        .map(|b| {
            stats
                .checkpoints
                .binary_search(b)
                .map(|i| &stats.visit_series[i])
                .map_err(|_| Error::Precondition(format!("no checkpoint at window boundary t = {b}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..stats.vocab)
        .map(|k| rows.windows(2).map(|w| w[1][k] > w[0][k]).collect())
        .collect())
}

/// Token frequencies recounted from scratch at each checkpoint.
pub fn recount(traj: &Trajectory, checkpoints: &[usize]) -> Vec<Vec<u64>> {
    checkpoints
        .iter()
        .filter(|&&t| t >= 1 && t <= traj.len() + 1)
        .map(|&t| {
            let mut c = vec![0u64; traj.vocab];
            for tok in &traj.tokens[..traj.initial_len + t - 1] {
                c[tok.0] += 1;
            }
            c
        })
        .collect()
}

/// Transition event counts, row `from`, column `to`.
pub fn transition_table(stats: &TrajectoryStats) -> DMatrix<u64> {
    DMatrix::from_row_slice(stats.vocab, stats.vocab, &stats.transition_counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::trial_rng;

    fn x1(k: usize) -> Prompt {
        Prompt::from_indices(&(0..k).collect::<Vec<_>>(), AttnVariant::SelfAttn, k).unwrap()
    }

    #[test]
    fn single_token_vocabulary_repeats() {
        let model = CcmcModel::new(TransitionMatrix::uniform(1));
        let opts = TrajectoryOptions::new(vec![1, 5, 10]);
        let opts = TrajectoryOptions { weak_token: TokenId(0), ..opts };
        let (traj, stats) = generate_trajectory(&model, &x1(1), 10, &opts, &mut trial_rng(1, 0)).unwrap();
        assert!(traj.tokens().iter().all(|t| t.0 == 0));
        assert!(stats.freq_series().iter().all(|f| f == &vec![1.0]));
        assert_eq!(stats.checkpoints(), &[1, 5, 10]);
        assert_eq!(visit_growth_check(&stats, 5).unwrap(), vec![vec![true, true]]);
    }

    #[test]
    fn coverage_is_enforced() {
        let model = weak_token_setup(0.3).unwrap();
        let x = Prompt::from_indices(&[0, 0], AttnVariant::SelfAttn, 2).unwrap();
        let opts = TrajectoryOptions::new(vec![]);
        assert!(matches!(
            simulate_trajectory(&model, &x, 5, &opts, &mut trial_rng(2, 0)),
            Err(Error::Coverage { missing: 1 })
        ));
        let partial = TrajectoryOptions { allow_partial_vocab: true, ..opts };
        let s = simulate_trajectory(&model, &x, 50, &partial, &mut trial_rng(2, 0)).unwrap();
        assert_eq!(s.visit_counts(), &[52, 0]);
    }

    #[test]
    fn weak_setup_examples() {
        let m = weak_token_setup(0.5).unwrap();
        assert_eq!(m.transition().column(0), &[0.5, 0.5]);
        let m = weak_token_setup(0.25).unwrap();
        assert_eq!(m.transition().column(1), &[0.75, 0.25]);
        assert!(m.transition().is_strictly_positive());
        assert!(weak_token_setup(0.0).is_err());
        assert!(weak_token_setup(0.6).is_err());
        assert!((collapse_rate(0.25) - 2.0 / 3.0).abs() < 1e-15);
        assert!((collapse_rate(0.3) - 4.0 / 7.0).abs() < 1e-15);
        // Same rate written as 1 - p / (1 - p).
        for p in [0.1, 0.25, 0.4] {
            assert!((collapse_rate(p) - (1.0 - p / (1.0 - p))).abs() < 1e-15);
        }
    }

    #[test]
    fn incremental_stats_match_recount() {
        let mut rng = trial_rng(3, 0);
        let cfg = EmbeddingConfig::canonical(4, None);
        let w = AttentionWeights::random(4, 1.0, &mut rng);
        let cps = geometric_checkpoints(2001, 1.2, &[2001]);
        for variant in [AttnVariant::SelfAttn, AttnVariant::CrossAttn] {
            let x = Prompt::from_indices(&[0, 1, 2, 3, 1], variant, 4).unwrap();
            let opts = TrajectoryOptions::new(cps.clone());
            let (traj, stats) =
                generate_trajectory(TrajectoryModel::Attention(&cfg, &w), &x, 2000, &opts, &mut rng).unwrap();
            assert_eq!(recount(&traj, &cps), stats.visit_series());
            for (t, (v, f)) in cps.iter().zip(stats.visit_series().iter().zip(stats.freq_series())) {
                assert_eq!(v.iter().sum::<u64>(), (x.len() + t - 1) as u64);
                assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert_eq!(stats.transition_counts().iter().sum::<u64>(), 2000);
            // Every generated token is a key of the state it was drawn from.
            for t in 1..=traj.len() {
                let p = traj.prompt_at(t);
                let y = traj.tokens()[x.len() + t - 1];
                assert!(p.keys().contains(&y));
            }
            let ww = weak_transition_count(&stats);
            let toks = traj.tokens();
            let direct = (x.len()..toks.len()).filter(|&i| toks[i - 1].0 == 1 && toks[i].0 == 1).count();
            assert_eq!(ww.last().unwrap().1 as usize, direct);
        }
    }

    #[test]
    fn attention_and_ccmc_trajectories_coincide() {
        // Same seed, same law: the sampled paths agree token for token.
        let mut rng = trial_rng(4, 0);
        let cfg = EmbeddingConfig::canonical(3, None);
        let w = AttentionWeights::random(3, 1.0, &mut rng);
        let model = CcmcModel::new(cfg.transition_from_weights(&w));
        let opts = TrajectoryOptions::new(vec![1, 301]);
        let (a, _) = generate_trajectory(TrajectoryModel::Attention(&cfg, &w), &x1(3), 300, &opts, &mut trial_rng(5, 0))
            .unwrap();
        let (b, _) = generate_trajectory(&model, &x1(3), 300, &opts, &mut trial_rng(5, 0)).unwrap();
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn dataset_view() {
        let model = weak_token_setup(0.4).unwrap();
        let (traj, _) =
            generate_trajectory(&model, &x1(2), 20, &TrajectoryOptions::new(vec![]), &mut trial_rng(6, 0)).unwrap();
        let d = traj.to_dataset();
        assert_eq!(d.len(), 20);
        for (i, s) in d.samples().iter().enumerate() {
            assert_eq!(s.prompt.len(), 2 + i);
            assert_eq!(s.prompt.extended(s.next).tokens(), traj.prompt_at(i + 2).tokens());
        }
    }

    #[test]
    fn exact_power_law_fit() {
        let ts: Vec<f64> = geometric_checkpoints(100_000, 1.2, &[]).iter().map(|&t| t as f64).collect();
        let ys: Vec<f64> = ts.iter().map(|t| t.powf(-0.5)).collect();
        let (s, r2) = fit_power_law(&ts, &ys).unwrap();
        assert!((s + 0.5).abs() < 1e-10);
        assert!((r2 - 1.0).abs() < 1e-10);
        assert!(fit_power_law(&[1.0, 2.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn collapse_fit_preconditions() {
        let model = weak_token_setup(0.25).unwrap();
        let opts = TrajectoryOptions::new(geometric_checkpoints(500, 1.2, &[]));
        let s = simulate_trajectory(&model, &x1(2), 499, &opts, &mut trial_rng(7, 0)).unwrap();
        assert!(matches!(
            fit_collapse_exponent(&[s], TokenId(1), 0.1, Some(0.25)),
            Err(Error::Precondition(_))
        ));
        assert!(fit_collapse_exponent(&[], TokenId(1), 0.1, None).is_err());
    }

    #[test]
    fn zero_probability_token_stops_growing() {
        // Token 2 is never reachable; its two prompt occurrences are all it gets.
        let p = TransitionMatrix::from_columns(&[vec![0.5, 0.5, 0.0], vec![0.5, 0.5, 0.0], vec![0.5, 0.5, 0.0]]).unwrap();
        let model = CcmcModel::new(p);
        let x = Prompt::from_indices(&[0, 1, 2, 2], AttnVariant::SelfAttn, 3).unwrap();
        let opts = TrajectoryOptions::new(geometric_checkpoints(4001, 1.2, &[1000, 2000, 3000, 4000]));
        let s = simulate_trajectory(&model, &x, 4000, &opts, &mut trial_rng(8, 0)).unwrap();
        let g = visit_growth_check(&s, 1000).unwrap();
        assert!(g[0].iter().all(|&b| b) && g[1].iter().all(|&b| b));
        assert!(g[2].iter().all(|&b| !b));
        assert_eq!(s.visit_counts()[2], 2);
        let missing = TrajectoryOptions::new(vec![1, 1000]);
        let s = simulate_trajectory(&model, &x, 4000, &missing, &mut trial_rng(8, 0)).unwrap();
        assert!(matches!(visit_growth_check(&s, 1000), Err(Error::Precondition(_))));
    }

    #[test]
    fn symmetric_point_is_exchangeable() {
        let model = weak_token_setup(0.5).unwrap();
        let opts = TrajectoryOptions::new(vec![10_001]);
        let mean: f64 = (0..200)
            .map(|s| {
                simulate_trajectory(&model, &x1(2), 10_000, &opts, &mut trial_rng(9, s))
                    .unwrap()
                    .freq_series()[0][1]
            })
            .sum::<f64>()
            / 200.0;
        assert!((0.35..=0.65).contains(&mean), "{mean}");
    }

    #[test]
    fn tiny_weak_probability_rarely_self_transitions() {
        let model = weak_token_setup(0.01).unwrap();
        let opts = TrajectoryOptions::new(vec![10_001]);
        let s = simulate_trajectory(&model, &x1(2), 10_000, &opts, &mut trial_rng(10, 0)).unwrap();
        assert!(weak_transition_count(&s)[0].1 <= 3);
    }

    #[test]
    fn csv_layout() {
        let model = weak_token_setup(0.3).unwrap();
        let opts = TrajectoryOptions::new(vec![1, 3]);
        let s = simulate_trajectory(&model, &x1(2), 2, &opts, &mut trial_rng(11, 0)).unwrap();
        let csv = s.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,freq_0,freq_1,weakweak_count");
        assert_eq!(lines[1], "1,0.5,0.5,0");
        assert_eq!(lines.len(), 3);
    }
}
