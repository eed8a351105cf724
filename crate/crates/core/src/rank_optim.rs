//! Differentiable ranking policies and their optimization.
//!
//! The policy is detached into a scoring function f(x) over item features and
//! a ranking head H that turns scores into permutations by sequential
//! temperature-scaled softmax sampling without replacement (per-position
//! temperatures; the zero-temperature limit is deterministic sort-by-score).
//! Expected list-level reward is optimized either exactly (enumeration,
//! n <= 7) or by a score-function estimator with a mean baseline. The module
//! also provides the Gaussian noisy-channel view of adjacent flips, gradient
//! mixing between a simple supervised loss and the complex-reward loss, and
//! uncertainty-based session/ranking selection for active data collection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_ingest::RankingSession;
use crate::metric_oracle::{all_permutations, Ranking};
use crate::numeric_core::{
    gaussian_cdf, gaussian_pdf, mc_dropout_stats, mlp_forward, mlp_gradient,
    sample_dropout_masks, MlpParams, NumericError, Rng, Vec64,
};
use crate::surrogate_lab::{context_features, SurrogateError, SurrogateModel};

#[derive(Debug, Error)]
pub enum RankOptimError {
    #[error("exact mode refuses sessions with more than {max} items, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("noisy channel positions must differ, got i = j = {0}")]
    SamePosition(usize),
    #[error("no observed flip for pivot position {pivot}")]
    NoObservedFlips { pivot: usize },
    #[error("standard deviations must be non-negative, got {0}")]
    NegativeStd(f64),
    #[error("uncertainty-aware presentation requires per-item score stds")]
    MissingStds,
    #[error("invalid mix schedule: {0}")]
    InvalidSchedule(String),
    #[error("temperatures must be strictly positive for gradient computation")]
    ZeroTemperature,
    #[error("head temperatures must be non-negative and exploration mix in [0, 1)")]
    InvalidHead,
    #[error("no sessions to select from")]
    NoSessions,
    #[error("invalid permutation {perm:?} for session of {n} items")]
    InvalidPermutation { perm: Vec<usize>, n: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

pub type Result<T> = std::result::Result<T, RankOptimError>;

/// Largest session size enumerated exactly (7! = 5040 permutations).
pub const EXACT_MODE_MAX: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    Exact,
    Sampled { k: usize },
}

// ---------------------------------------------------------------------------
// Scoring function
// ---------------------------------------------------------------------------

/// Item scoring function f(x | theta): feature vector -> scalar score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoringFunction {
    pub params: MlpParams,
}

impl ScoringFunction {
    pub fn new(
        feature_dim: usize,
        hidden: &[usize],
        dropout: f64,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![feature_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let rates = vec![dropout; hidden.len()];
        Ok(Self {
            params: MlpParams::random(&widths, &rates, scale, rng)?,
        })
    }

    pub fn score(&self, features: &[f64]) -> Result<f64> {
        Ok(mlp_forward(&self.params, features, None)?[0])
    }

    /// Scores for every item in a session, indexed by item id.
    pub fn scores(&self, session: &RankingSession) -> Result<Vec64> {
        session
            .items
            .iter()
            .map(|it| self.score(&it.features))
            .collect()
    }

    /// One stochastic model draw: a single dropout mask set applied to all
    /// items, so the draw is a consistent sampled network.
    pub fn scores_with_masks(&self, session: &RankingSession, masks: &[Vec64]) -> Result<Vec64> {
        session
            .items
            .iter()
            .map(|it| Ok(mlp_forward(&self.params, &it.features, Some(masks))?[0]))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Ranking head
// ---------------------------------------------------------------------------

/// Detached ranking head H({s} | rho): per-position temperatures plus a
/// global exploration mix. At position r the next item is drawn from
/// (1 - mix) * softmax(s / tau_r) + mix * uniform over the remaining items.
/// All temperatures zero and mix zero degenerates to sort-by-score with
/// stable tie-break by item id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingHead {
    /// tau_1..tau_L; positions beyond L reuse the last entry.
    pub temps: Vec<f64>,
    /// Uniform exploration mixture weight in [0, 1).
    pub exploration_mix: f64,
}

impl RankingHead {
    pub fn uniform(len: usize, tau: f64) -> Self {
        Self {
            temps: vec![tau; len.max(1)],
            exploration_mix: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temps.is_empty()
            || self.temps.iter().any(|&t| !(t >= 0.0) || !t.is_finite())
            || !(0.0..1.0).contains(&self.exploration_mix)
        {
            return Err(RankOptimError::InvalidHead);
        }
        Ok(())
    }

    pub fn temp_at(&self, position: usize) -> f64 {
        self.temps[position.min(self.temps.len() - 1)]
    }
}

fn validate_perm(perm: &[usize], n: usize) -> Result<()> {
    Ranking::new(perm.to_vec())
        .validate(n)
        .map_err(|_| RankOptimError::InvalidPermutation {
            perm: perm.to_vec(),
            n,
        })
}

/// log sum exp with max subtraction.
fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Plackett-Luce probability of a permutation given item scores.
pub fn plackett_luce_prob(scores: &[f64], perm: &[usize]) -> Result<f64> {
    validate_perm(perm, scores.len())?;
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut logp = 0.0;
    for &chosen in perm {
        let lse = logsumexp(remaining.iter().map(|&j| scores[j]));
        logp += scores[chosen] - lse;
        remaining.retain(|&j| j != chosen);
    }
    Ok(logp.exp())
}

/// Index of the max-score remaining item, ties broken by smallest item id.
fn argmax_item(remaining: &[usize], scores: &[f64]) -> usize {
    let mut best = remaining[0];
    for &j in &remaining[1..] {
        if scores[j] > scores[best] {
            best = j;
        }
    }
    best
}

/// Exact probability of `perm` under the head's sequential sampling process.
pub fn head_ranking_prob(head: &RankingHead, scores: &[f64], perm: &[usize]) -> Result<f64> {
    head.validate()?;
    validate_perm(perm, scores.len())?;
    let eps = head.exploration_mix;
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut prob = 1.0;
    for (r, &chosen) in perm.iter().enumerate() {
        let m = remaining.len() as f64;
        let tau = head.temp_at(r);
        let q = if tau == 0.0 {
            if chosen == argmax_item(&remaining, scores) {
                1.0
            } else {
                0.0
            }
        } else {
            let lse = logsumexp(remaining.iter().map(|&j| scores[j] / tau));
            (scores[chosen] / tau - lse).exp()
        };
        prob *= (1.0 - eps) * q + eps / m;
        remaining.retain(|&j| j != chosen);
    }
    Ok(prob)
}

/// Draw one ranking from the head's sampling process.
pub fn sample_ranking(head: &RankingHead, scores: &[f64], rng: &mut Rng) -> Result<Vec<usize>> {
    head.validate()?;
    let n = scores.len();
    let eps = head.exploration_mix;
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut perm = Vec::with_capacity(n);
    for r in 0..n {
        let tau = head.temp_at(r);
        let chosen = if eps > 0.0 && rng.bernoulli(eps) {
            remaining[rng.below(remaining.len())]
        } else if tau == 0.0 {
            argmax_item(&remaining, scores)
        } else {
            let lse = logsumexp(remaining.iter().map(|&j| scores[j] / tau));
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = *remaining.last().unwrap();
            for &j in &remaining {
                acc += (scores[j] / tau - lse).exp();
                if u < acc {
                    pick = j;
                    break;
                }
            }
            pick
        };
        perm.push(chosen);
        remaining.retain(|&j| j != chosen);
    }
    Ok(perm)
}

/// Log-probability of `perm` plus its gradients with respect to the item
/// scores and the per-position log-temperatures. Requires all tau > 0.
fn head_log_prob_grad(
    head: &RankingHead,
    scores: &[f64],
    perm: &[usize],
) -> Result<(f64, Vec64, Vec64)> {
    head.validate()?;
    if head.temps.iter().any(|&t| t == 0.0) {
        return Err(RankOptimError::ZeroTemperature);
    }
    validate_perm(perm, scores.len())?;
    let eps = head.exploration_mix;
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut logp = 0.0;
    let mut ds = vec![0.0; scores.len()];
    let mut dt = vec![0.0; head.temps.len()];
    for (r, &chosen) in perm.iter().enumerate() {
        let m = remaining.len() as f64;
        let tau = head.temp_at(r);
        let t_idx = r.min(head.temps.len() - 1);
        let lse = logsumexp(remaining.iter().map(|&j| scores[j] / tau));
        let q: Vec<f64> = remaining
            .iter()
            .map(|&j| (scores[j] / tau - lse).exp())
            .collect();
        let c_pos = remaining.iter().position(|&j| j == chosen).unwrap();
        let qc = q[c_pos];
        let p = (1.0 - eps) * qc + eps / m;
        logp += p.ln();
        let coeff = (1.0 - eps) * qc / p;
        for (k, &j) in remaining.iter().enumerate() {
            let indicator = if j == chosen { 1.0 } else { 0.0 };
            ds[j] += coeff * (indicator - q[k]) / tau;
        }
        // d/d(ln tau): dq_c/d ln tau = q_c (sum_k q_k s_k - s_c) / tau.
        let mean_score: f64 = remaining
            .iter()
            .zip(&q)
            .map(|(&j, &qk)| qk * scores[j])
            .sum();
        dt[t_idx] += coeff * (mean_score - scores[chosen]) / tau;
        remaining.retain(|&j| j != chosen);
    }
    Ok((logp, ds, dt))
}

// ---------------------------------------------------------------------------
// Expected reward and its gradient
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct RewardEstimate {
    pub value: f64,
    /// Standard error of the Monte Carlo estimate; None in exact mode.
    pub std_error: Option<f64>,
}

fn check_exact(n: usize) -> Result<()> {
    if n > EXACT_MODE_MAX {
        return Err(RankOptimError::TooLarge {
            n,
            max: EXACT_MODE_MAX,
        });
    }
    Ok(())
}

/// Expected reward of the policy: exact enumeration or Monte Carlo estimate.
pub fn expected_reward(
    scorer: &ScoringFunction,
    head: &RankingHead,
    reward_fn: &mut dyn FnMut(&[usize]) -> f64,
    session: &RankingSession,
    mode: SupportMode,
    rng: &mut Rng,
) -> Result<RewardEstimate> {
    let scores = scorer.scores(session)?;
    match mode {
        SupportMode::Exact => {
            check_exact(session.len())?;
            let mut value = 0.0;
            for perm in all_permutations(session.len()) {
                let p = head_ranking_prob(head, &scores, &perm)?;
                value += p * reward_fn(&perm);
            }
            Ok(RewardEstimate {
                value,
                std_error: None,
            })
        }
        SupportMode::Sampled { k } => {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..k {
                let perm = sample_ranking(head, &scores, rng)?;
                let r = reward_fn(&perm);
                sum += r;
                sumsq += r * r;
            }
            let kf = k as f64;
            let mean = sum / kf;
            let var = ((sumsq - kf * mean * mean) / (kf - 1.0)).max(0.0);
            Ok(RewardEstimate {
                value: mean,
                std_error: Some((var / kf).sqrt()),
            })
        }
    }
}

/// Gradients of the expected reward with respect to the scorer parameters and
/// the head's log-temperatures (rewards treated as constants in theta).
#[derive(Debug, Clone)]
pub struct PolicyGradient {
    pub scorer_grad: MlpParams,
    pub logtemp_grad: Vec64,
    pub value: f64,
}

pub fn expected_reward_gradient(
    scorer: &ScoringFunction,
    head: &RankingHead,
    reward_fn: &mut dyn FnMut(&[usize]) -> f64,
    session: &RankingSession,
    mode: SupportMode,
    rng: &mut Rng,
) -> Result<PolicyGradient> {
    let scores = scorer.scores(session)?;
    let mut ds_total = vec![0.0; session.len()];
    let mut dt_total = vec![0.0; head.temps.len()];
    let value;
    match mode {
        SupportMode::Exact => {
            check_exact(session.len())?;
            let mut v = 0.0;
            for perm in all_permutations(session.len()) {
                let (logp, ds, dt) = head_log_prob_grad(head, &scores, &perm)?;
                let p = logp.exp();
                let r = reward_fn(&perm);
                v += p * r;
                let w = p * r;
                for (acc, d) in ds_total.iter_mut().zip(&ds) {
                    *acc += w * d;
                }
                for (acc, d) in dt_total.iter_mut().zip(&dt) {
                    *acc += w * d;
                }
            }
            value = v;
        }
        SupportMode::Sampled { k } => {
            // Score-function estimator with a mean-reward baseline.
            let mut draws = Vec::with_capacity(k);
            let mut sum = 0.0;
            for _ in 0..k {
                let perm = sample_ranking(head, &scores, rng)?;
                let r = reward_fn(&perm);
                sum += r;
                draws.push((perm, r));
            }
            let baseline = sum / k as f64;
            for (perm, r) in &draws {
                let (_, ds, dt) = head_log_prob_grad(head, &scores, perm)?;
                let w = (r - baseline) / k as f64;
                for (acc, d) in ds_total.iter_mut().zip(&ds) {
                    *acc += w * d;
                }
                for (acc, d) in dt_total.iter_mut().zip(&dt) {
                    *acc += w * d;
                }
            }
            value = baseline;
        }
    }
    let mut scorer_grad = scorer.params.zeros_like();
    for (item, &up) in session.items.iter().zip(&ds_total) {
        if up != 0.0 {
            let (g, _) = mlp_gradient(&scorer.params, &item.features, &[up], None)?;
            scorer_grad.axpy(1.0, &g);
        }
    }
    Ok(PolicyGradient {
        scorer_grad,
        logtemp_grad: dt_total,
        value,
    })
}

// ---------------------------------------------------------------------------
// Noisy channel over flips
// ---------------------------------------------------------------------------

/// Gaussian noisy-channel model over position swaps, parameterized by the
/// scoring function and a fixed spread sigma.
#[derive(Debug, Clone)]
pub struct NoisyChannelModel {
    pub scorer: ScoringFunction,
    pub sigma: f64,
}

/// Probability of swapping positions i and j: the mass below zero of
/// N((s_i - s_j) * sign(i - j), sigma).
pub fn noisy_channel_prob(s_i: f64, s_j: f64, i: usize, j: usize, sigma: f64) -> Result<f64> {
    if i == j {
        return Err(RankOptimError::SamePosition(i));
    }
    let sign = if i > j { 1.0 } else { -1.0 };
    Ok(gaussian_cdf(0.0, (s_i - s_j) * sign, sigma)?)
}

fn swap_positions(perm: &[usize], i: usize, j: usize) -> Vec<usize> {
    let mut out = perm.to_vec();
    out.swap(i, j);
    out
}

fn find_observed(observations: &[(Vec<usize>, f64)], perm: &[usize]) -> Option<f64> {
    observations
        .iter()
        .find(|(p, _)| p.as_slice() == perm)
        .map(|&(_, s)| s)
}

/// Expected metric score of the next translation on the pivot position:
/// a channel-weighted mean of the observed scores of the swapped rankings.
/// Sums run only over swaps present in `observations` (j = pivot contributes
/// the unswapped ranking itself when observed, with channel weight 0.5).
pub fn expected_flip_score(
    model: &NoisyChannelModel,
    session: &RankingSession,
    current: &[usize],
    observations: &[(Vec<usize>, f64)],
    pivot: usize,
) -> Result<f64> {
    validate_perm(current, session.len())?;
    let scores_by_pos: Vec<f64> = current
        .iter()
        .map(|&id| model.scorer.score(&session.items[id].features))
        .collect::<Result<_>>()?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut any = false;
    for j in 0..current.len() {
        let cand = swap_positions(current, pivot, j);
        if let Some(m) = find_observed(observations, &cand) {
            let gamma = if j == pivot {
                0.5
            } else {
                noisy_channel_prob(scores_by_pos[pivot], scores_by_pos[j], pivot, j, model.sigma)?
            };
            num += gamma * m;
            den += gamma;
            any = true;
        }
    }
    if !any {
        return Err(RankOptimError::NoObservedFlips { pivot });
    }
    Ok(num / den)
}

/// One ascent step on the summed expected flip scores over all pivots,
/// differentiating through the channel weights and the Gaussian CDF into the
/// scoring function. Every pivot must have at least one observed swap.
/// Returns the objective value before the update.
pub fn noisy_channel_step(
    model: &mut NoisyChannelModel,
    session: &RankingSession,
    current: &[usize],
    observations: &[(Vec<usize>, f64)],
    lr: f64,
) -> Result<f64> {
    validate_perm(current, session.len())?;
    let n = current.len();
    let scores_by_pos: Vec<f64> = current
        .iter()
        .map(|&id| model.scorer.score(&session.items[id].features))
        .collect::<Result<_>>()?;
    let sigma = model.sigma;
    let mut objective = 0.0;
    let mut ds = vec![0.0; n]; // by position
    for pivot in 0..n {
        let mut entries: Vec<(usize, f64, f64)> = Vec::new(); // (j, gamma, m)
        for j in 0..n {
            let cand = swap_positions(current, pivot, j);
            if let Some(m) = find_observed(observations, &cand) {
                let gamma = if j == pivot {
                    0.5
                } else {
                    noisy_channel_prob(scores_by_pos[pivot], scores_by_pos[j], pivot, j, sigma)?
                };
                entries.push((j, gamma, m));
            }
        }
        if entries.is_empty() {
            return Err(RankOptimError::NoObservedFlips { pivot });
        }
        let z: f64 = entries.iter().map(|e| e.1).sum();
        let m_exp: f64 = entries.iter().map(|e| e.1 * e.2).sum::<f64>() / z;
        objective += m_exp;
        for &(j, _, m) in &entries {
            if j == pivot {
                continue; // constant weight, no score gradient
            }
            let sign = if pivot > j { 1.0 } else { -1.0 };
            let mu = (scores_by_pos[pivot] - scores_by_pos[j]) * sign;
            // dGamma/dmu = -pdf(0; mu, sigma)
            let dgamma_dmu = -gaussian_pdf(0.0, mu, sigma);
            let dm_dgamma = (m - m_exp) / z;
            let chain = dm_dgamma * dgamma_dmu;
            ds[pivot] += chain * sign;
            ds[j] -= chain * sign;
        }
    }
    if lr != 0.0 {
        let mut grad = model.scorer.params.zeros_like();
        for (pos, &up) in ds.iter().enumerate() {
            if up != 0.0 {
                let item = &session.items[current[pos]];
                let (g, _) = mlp_gradient(&model.scorer.params, &item.features, &[up], None)?;
                grad.axpy(1.0, &g);
            }
        }
        model.scorer.params.axpy(lr, &grad);
    }
    Ok(objective)
}

// ---------------------------------------------------------------------------
// Alternating detached training
// ---------------------------------------------------------------------------

/// Alternating optimization of the scoring function and the ranking head:
/// each block runs `steps_per_block` ascent steps on theta with rho frozen,
/// then the same on rho (log-temperatures) with theta frozen. The trace holds
/// the mean expected reward over sessions after each block.
#[allow(clippy::too_many_arguments)]
pub fn alternating_detached_train(
    scorer: &mut ScoringFunction,
    head: &mut RankingHead,
    reward_fn: &mut dyn FnMut(usize, &[usize]) -> f64,
    sessions: &[RankingSession],
    steps_per_block: usize,
    blocks: usize,
    lr: f64,
    mode: SupportMode,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    const TEMP_BOUNDS: (f64, f64) = (1e-3, 1e3);
    let mut trace = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        for _ in 0..steps_per_block {
            let mut grad = scorer.params.zeros_like();
            for (si, session) in sessions.iter().enumerate() {
                let mut rf = |perm: &[usize]| reward_fn(si, perm);
                let pg = expected_reward_gradient(scorer, head, &mut rf, session, mode, rng)?;
                grad.axpy(1.0 / sessions.len() as f64, &pg.scorer_grad);
            }
            scorer.params.axpy(lr, &grad);
        }
        for _ in 0..steps_per_block {
            let mut dt = vec![0.0; head.temps.len()];
            for (si, session) in sessions.iter().enumerate() {
                let mut rf = |perm: &[usize]| reward_fn(si, perm);
                let pg = expected_reward_gradient(scorer, head, &mut rf, session, mode, rng)?;
                for (acc, d) in dt.iter_mut().zip(&pg.logtemp_grad) {
                    *acc += d / sessions.len() as f64;
                }
            }
            for (tau, d) in head.temps.iter_mut().zip(&dt) {
                let t = (tau.ln() + lr * d).exp();
                *tau = t.clamp(TEMP_BOUNDS.0, TEMP_BOUNDS.1);
            }
        }
        let mut total = 0.0;
        for (si, session) in sessions.iter().enumerate() {
            let mut rf = |perm: &[usize]| reward_fn(si, perm);
            total += expected_reward(scorer, head, &mut rf, session, mode, rng)?.value;
        }
        trace.push(total / sessions.len() as f64);
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Multi-task gradient mixing
// ---------------------------------------------------------------------------

/// Weight schedule between the simple supervised loss and the complex reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSchedule {
    /// phi(t) = 1 - exp(-t / time_constant).
    Exponential { time_constant: f64 },
    /// phi(t) = min(1, t / horizon).
    Linear { horizon: f64 },
    /// phi(t) = value, clamped to [0, 1].
    Constant { value: f64 },
}

/// Mixing weight phi(t) in [0, 1], non-decreasing for the
/// exponential and linear kinds.
pub fn phi(t: f64, schedule: &MixSchedule) -> Result<f64> {
    match *schedule {
        MixSchedule::Exponential { time_constant } => {
            if !(time_constant > 0.0) {
                return Err(RankOptimError::InvalidSchedule(format!(
                    "exponential time constant must be > 0, got {time_constant}"
                )));
            }
            Ok(1.0 - (-t / time_constant).exp())
        }
        MixSchedule::Linear { horizon } => {
            if !(horizon > 0.0) {
                return Err(RankOptimError::InvalidSchedule(format!(
                    "linear horizon must be > 0, got {horizon}"
                )));
            }
            Ok((t / horizon).min(1.0))
        }
        MixSchedule::Constant { value } => {
            if !(0.0..=1.0).contains(&value) {
                return Err(RankOptimError::InvalidSchedule(format!(
                    "constant weight must lie in [0, 1], got {value}"
                )));
            }
            Ok(value)
        }
    }
}

/// Mixed-gradient update
/// theta' = theta + lr * (phi(t) * grad_complex + (1 - phi(t)) * grad_simple).
/// Both gradients are ascent directions of their objectives.
pub fn multitask_update(
    params: &mut MlpParams,
    grad_complex: &MlpParams,
    grad_simple: &MlpParams,
    t: f64,
    schedule: &MixSchedule,
    lr: f64,
) -> Result<()> {
    let w = phi(t, schedule)?;
    params.axpy(lr * w, grad_complex);
    params.axpy(lr * (1.0 - w), grad_simple);
    Ok(())
}

// ---------------------------------------------------------------------------
// Uncertainty of expected ranking reward
// ---------------------------------------------------------------------------

/// Variance of g * Pr for independent normals g ~ N(g_mean, delta^2) and
/// Pr ~ N(p_mean, epsilon^2): g^2 eps^2 + p^2 delta^2 + eps^2 delta^2.
pub fn ranking_reward_variance(
    g_mean: f64,
    delta: f64,
    p_mean: f64,
    epsilon: f64,
) -> Result<f64> {
    if delta < 0.0 {
        return Err(RankOptimError::NegativeStd(delta));
    }
    if epsilon < 0.0 {
        return Err(RankOptimError::NegativeStd(epsilon));
    }
    Ok(g_mean * g_mean * epsilon * epsilon
        + p_mean * p_mean * delta * delta
        + epsilon * epsilon * delta * delta)
}

#[derive(Debug, Clone)]
pub struct RankingUncertainty {
    pub perm: Vec<usize>,
    pub g_mean: f64,
    pub delta: f64,
    pub p_mean: f64,
    pub epsilon: f64,
    pub variance: f64,
}

#[derive(Debug, Clone)]
pub struct UncertaintyEstimate {
    pub per_ranking: Vec<RankingUncertainty>,
    /// Delta(I): sqrt of the summed per-ranking variance terms.
    pub delta_total: f64,
}

/// Largest session size enumerated exactly for uncertainty estimation.
pub const UNCERTAINTY_EXACT_MAX: usize = 6;

/// Per-ranking surrogate and policy-probability uncertainties via MC dropout,
/// combined into the session-level Delta(I).
pub fn session_uncertainty(
    scorer: &ScoringFunction,
    head: &RankingHead,
    surrogate: &SurrogateModel,
    session: &RankingSession,
    mode: SupportMode,
    n_dropout: usize,
    rng: &mut Rng,
) -> Result<UncertaintyEstimate> {
    if n_dropout < 2 {
        return Err(RankOptimError::Numeric(NumericError::TooFewSamples(
            n_dropout,
        )));
    }
    let support: Vec<Vec<usize>> = match mode {
        SupportMode::Exact => {
            if session.len() > UNCERTAINTY_EXACT_MAX {
                return Err(RankOptimError::TooLarge {
                    n: session.len(),
                    max: UNCERTAINTY_EXACT_MAX,
                });
            }
            all_permutations(session.len())
        }
        SupportMode::Sampled { k } => {
            let scores = scorer.scores(session)?;
            let mut seen = std::collections::HashSet::new();
            let mut out = Vec::new();
            for _ in 0..k {
                let perm = sample_ranking(head, &scores, rng)?;
                if seen.insert(perm.clone()) {
                    out.push(perm);
                }
            }
            out
        }
    };
    // One dropout mask set per draw, shared across all items and rankings:
    // each draw is a consistent sampled scoring network.
    let score_draws: Vec<Vec64> = (0..n_dropout)
        .map(|_| {
            let masks = sample_dropout_masks(&scorer.params, rng);
            scorer.scores_with_masks(session, &masks)
        })
        .collect::<Result<_>>()?;
    let mut per_ranking = Vec::with_capacity(support.len());
    let mut total_var = 0.0;
    for perm in support {
        let ctx = context_features(session, &perm);
        let (g_mean, g_var) = mc_dropout_stats(&surrogate.params, &ctx, n_dropout, rng)?;
        let delta = g_var[0].sqrt();
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (k, draw) in score_draws.iter().enumerate() {
            let p = head_ranking_prob(head, draw, &perm)?;
            let d = p - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (p - mean);
        }
        let epsilon = (m2 / (n_dropout - 1) as f64).sqrt();
        let variance = ranking_reward_variance(g_mean[0], delta, mean, epsilon)?;
        total_var += variance;
        per_ranking.push(RankingUncertainty {
            perm,
            g_mean: g_mean[0],
            delta,
            p_mean: mean,
            epsilon,
            variance,
        });
    }
    Ok(UncertaintyEstimate {
        per_ranking,
        delta_total: total_var.sqrt(),
    })
}

/// Rank sessions by Delta(I) descending (ties by session order) and pick the
/// highest-variance ranking within each chosen session (ties by lexicographic
/// permutation order). Cycles through sessions when budget_k exceeds the
/// session count, taking each session's next-highest-variance ranking.
#[allow(clippy::too_many_arguments)]
pub fn active_select(
    sessions: &[RankingSession],
    scorer: &ScoringFunction,
    head: &RankingHead,
    surrogate: &SurrogateModel,
    budget_k: usize,
    mode: SupportMode,
    n_dropout: usize,
    rng: &Rng,
) -> Result<Vec<(usize, Vec<usize>)>> {
    if sessions.is_empty() {
        return Err(RankOptimError::NoSessions);
    }
    let mut estimates = Vec::with_capacity(sessions.len());
    for (i, session) in sessions.iter().enumerate() {
        let mut sub = rng.subrng(i as u64);
        estimates.push(session_uncertainty(
            scorer, head, surrogate, session, mode, n_dropout, &mut sub,
        )?);
    }
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.sort_by(|&a, &b| {
        estimates[b]
            .delta_total
            .partial_cmp(&estimates[a].delta_total)
            .unwrap()
            .then(a.cmp(&b))
    });
    // Per session: ranking indices by variance descending, then perm lex order.
    let mut ranked: Vec<Vec<usize>> = estimates
        .iter()
        .map(|e| {
            let mut idx: Vec<usize> = (0..e.per_ranking.len()).collect();
            idx.sort_by(|&a, &b| {
                e.per_ranking[b]
                    .variance
                    .partial_cmp(&e.per_ranking[a].variance)
                    .unwrap()
                    .then(e.per_ranking[a].perm.cmp(&e.per_ranking[b].perm))
            });
            idx.reverse(); // pop from the back
            idx
        })
        .collect();
    let mut out = Vec::with_capacity(budget_k);
    'outer: loop {
        let mut progressed = false;
        for &si in &order {
            if out.len() == budget_k {
                break 'outer;
            }
            if let Some(ri) = ranked[si].pop() {
                out.push((si, estimates[si].per_ranking[ri].perm.clone()));
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Presentation policies
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentationKind {
    TopK,
    Random,
    UncertaintyAware,
}

/// Data-collection presentation policies: sort by score, uniform random, or
/// sort by score plus per-item score uncertainty. Ties break by item id.
pub fn presentation_policy(
    kind: PresentationKind,
    scores: &[f64],
    score_stds: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let n = scores.len();
    match kind {
        PresentationKind::TopK => Ok(sort_desc(scores)),
        PresentationKind::Random => {
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            Ok(perm)
        }
        PresentationKind::UncertaintyAware => {
            let stds = score_stds.ok_or(RankOptimError::MissingStds)?;
            let keys: Vec<f64> = scores.iter().zip(stds).map(|(s, d)| s + d).collect();
            Ok(sort_desc(&keys))
        }
    }
}

fn sort_desc(keys: &[f64]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..keys.len()).collect();
    perm.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).unwrap().then(a.cmp(&b)));
    perm
}

/// Versioned JSON checkpoint for a (scorer, head) policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub scorer: ScoringFunction,
    pub head: RankingHead,
}

pub fn policy_to_json(scorer: &ScoringFunction, head: &RankingHead) -> String {
    serde_json::to_string_pretty(&PolicyCheckpoint {
        version: 1,
        scorer: scorer.clone(),
        head: head.clone(),
    })
    .unwrap()
}

pub fn policy_from_json(
    text: &str,
) -> std::result::Result<(ScoringFunction, RankingHead), serde_json::Error> {
    let cp: PolicyCheckpoint = serde_json::from_str(text)?;
    Ok((cp.scorer, cp.head))
}
