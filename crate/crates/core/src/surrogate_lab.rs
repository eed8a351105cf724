//! Offline surrogate metric models learned from sparse noisy oracle
//! observations.
//!
//! Three learning routes live here:
//! - noise-aware pairwise training: a surrogate `g` and a noise-observation
//!   model `o` weight each other's pairwise logistic losses and are optimized
//!   in alternating blocks;
//! - plain squared-error regression of `g` on observed scores;
//! - offline actor-critic over adjacent-flip transitions, regularized by a
//!   pseudometric built on the flip-Jaccard distance between rankings.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_ingest::RankingSession;
use crate::metric_oracle::Ranking;
use crate::numeric_core::{
    mlp_forward, mlp_gradient, MlpParams, NumericError, Rng, Vec64,
};

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("fewer than one valid pair in the observation set")]
    NoPairs,
    #[error("observation set is empty")]
    EmptyObservations,
    #[error("epochs must be >= 1")]
    ZeroEpochs,
    #[error("flip action index {action} out of range for ranking of length {n}")]
    BadAction { action: usize, n: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

pub type Result<T> = std::result::Result<T, SurrogateError>;

// ---------------------------------------------------------------------------
// Observations
// ---------------------------------------------------------------------------

/// Observed (ranking, score) pairs for one session.
#[derive(Debug, Clone, Default)]
pub struct SessionObservations {
    pub session_index: usize,
    pub records: Vec<(Ranking, f64)>,
}

/// Everything learners ever see from the oracle: permutations and scalar
/// scores, grouped by session.
#[derive(Debug, Clone, Default)]
pub struct ObservationSet {
    pub sessions: Vec<SessionObservations>,
}

impl ObservationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, session_index: usize, ranking: Ranking, score: f64) {
        match self
            .sessions
            .iter_mut()
            .find(|s| s.session_index == session_index)
        {
            Some(s) => s.records.push((ranking, score)),
            None => self.sessions.push(SessionObservations {
                session_index,
                records: vec![(ranking, score)],
            }),
        }
    }

    pub fn total(&self) -> usize {
        self.sessions.iter().map(|s| s.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

// ---------------------------------------------------------------------------
// Local ranking context
// ---------------------------------------------------------------------------

/// Pooled local-context vector of a ranking. Per position the item's feature
/// vector is augmented with 1/rank; the fixed-length encoding is mean and max
/// pooling over all positions plus the first five positions concatenated
/// (zero-padded when n < 5). Width: 7 * (d + 1) for feature dimension d.
pub fn context_features(session: &RankingSession, perm: &[usize]) -> Vec64 {
    let d = session.feature_dim();
    let w = d + 1;
    let n = perm.len();
    let mut rows: Vec<Vec64> = Vec::with_capacity(n);
    for (r, &id) in perm.iter().enumerate() {
        let mut row = Vec::with_capacity(w);
        row.extend_from_slice(&session.items[id].features);
        row.push(1.0 / (r + 1) as f64);
        rows.push(row);
    }
    let mut out = Vec::with_capacity(7 * w);
    for j in 0..w {
        out.push(rows.iter().map(|r| r[j]).sum::<f64>() / n as f64);
    }
    for j in 0..w {
        out.push(rows.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max));
    }
    for r in 0..5 {
        if r < n {
            out.extend_from_slice(&rows[r]);
        } else {
            out.extend(std::iter::repeat(0.0).take(w));
        }
    }
    out
}

/// Context width for a given item feature dimension.
pub fn context_width(feature_dim: usize) -> usize {
    7 * (feature_dim + 1)
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Offline metric predictor g: pooled ranking context -> scalar score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub params: MlpParams,
    pub feature_dim: usize,
}

impl SurrogateModel {
    pub fn new(
        feature_dim: usize,
        hidden: &[usize],
        dropout: f64,
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![context_width(feature_dim)];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let rates = vec![dropout; hidden.len()];
        Ok(Self {
            params: MlpParams::random(&widths, &rates, scale, rng)?,
            feature_dim,
        })
    }

    pub fn predict(&self, session: &RankingSession, perm: &[usize]) -> Result<f64> {
        let x = context_features(session, perm);
        Ok(mlp_forward(&self.params, &x, None)?[0])
    }
}

/// Noise-observation model o over noise-factor features
/// [observed score, session size, deviation from the session's running mean].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseObservationModel {
    pub params: MlpParams,
}

impl NoiseObservationModel {
    pub fn new(hidden: &[usize], dropout: f64, scale: f64, rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![3];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let rates = vec![dropout; hidden.len()];
        Ok(Self {
            params: MlpParams::random(&widths, &rates, scale, rng)?,
        })
    }
}

/// Noise-factor features for every record of a session, in record order.
/// The running mean at record i averages scores[0..=i].
pub fn noise_features(obs: &SessionObservations, session_len: usize) -> Vec<Vec64> {
    let mut out = Vec::with_capacity(obs.records.len());
    let mut running_sum = 0.0;
    for (i, (_, score)) in obs.records.iter().enumerate() {
        running_sum += score;
        let running_mean = running_sum / (i + 1) as f64;
        out.push(vec![*score, session_len as f64, score - running_mean]);
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability that the first ranking is better, from two model scores:
/// e^a / (e^a + e^b), computed stably as sigmoid(a - b).
pub fn pair_pref_prob(score_plus: f64, score_minus: f64) -> f64 {
    sigmoid(score_plus - score_minus)
}

/// Ordered index pairs (plus, minus) within one session's records with
/// strictly greater observed score; ties are skipped.
fn session_pairs(records: &[(Ranking, f64)]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for a in 0..records.len() {
        for b in 0..records.len() {
            if records[a].1 > records[b].1 {
                pairs.push((a, b));
            }
        }
    }
    pairs
}

// ---------------------------------------------------------------------------
// Joint noise-observation training
// ---------------------------------------------------------------------------

struct PairBatch {
    /// Per session: (session index into `sessions`, record contexts, record
    /// noise features, pair list).
    per_session: Vec<(usize, Vec<Vec64>, Vec<Vec64>, Vec<(usize, usize)>)>,
    n_pairs: usize,
}

fn build_pair_batch(obs: &ObservationSet, sessions: &[RankingSession]) -> PairBatch {
    let mut per_session = Vec::new();
    let mut n_pairs = 0;
    for so in &obs.sessions {
        let pairs = session_pairs(&so.records);
        if pairs.is_empty() {
            continue;
        }
        let session = &sessions[so.session_index];
        let contexts: Vec<Vec64> = so
            .records
            .iter()
            .map(|(r, _)| context_features(session, &r.perm))
            .collect();
        let noise = noise_features(so, session.len());
        n_pairs += pairs.len();
        per_session.push((so.session_index, contexts, noise, pairs));
    }
    PairBatch {
        per_session,
        n_pairs,
    }
}

/// Pairwise logistic loss of `g`, each pair weighted by (1 - Pr(noise)) from
/// the frozen partner model `o`, averaged over pairs so step sizes stay
/// comparable across observation-set sizes. Returns (loss, gradients for g's
/// params).
pub fn weighted_surrogate_loss(
    g: &SurrogateModel,
    o: &NoiseObservationModel,
    obs: &ObservationSet,
    sessions: &[RankingSession],
) -> Result<(f64, MlpParams)> {
    let batch = build_pair_batch(obs, sessions);
    if batch.n_pairs == 0 {
        return Err(SurrogateError::NoPairs);
    }
    let mut loss = 0.0;
    let mut grads = g.params.zeros_like();
    for (_, contexts, noise, pairs) in &batch.per_session {
        let g_out: Vec<f64> = contexts
            .iter()
            .map(|x| Ok(mlp_forward(&g.params, x, None)?[0]))
            .collect::<Result<_>>()?;
        let o_out: Vec<f64> = noise
            .iter()
            .map(|x| Ok(mlp_forward(&o.params, x, None)?[0]))
            .collect::<Result<_>>()?;
        let mut upstream = vec![0.0; contexts.len()];
        for &(p, m) in pairs {
            // Pr(noise on this pair | o, m), treated as a constant weight.
            let noise_prob = pair_pref_prob(o_out[p], o_out[m]);
            let w = 1.0 - noise_prob;
            let pr = pair_pref_prob(g_out[p], g_out[m]);
            loss -= w * pr.ln();
            // d(-w ln sigma(gp - gm)) / dgp = -w (1 - sigma)
            let coeff = w * (1.0 - pr);
            upstream[p] -= coeff;
            upstream[m] += coeff;
        }
        for (x, &u) in contexts.iter().zip(&upstream) {
            if u != 0.0 {
                let (gl, _) = mlp_gradient(&g.params, x, &[u], None)?;
                grads.axpy(1.0, &gl);
            }
        }
    }
    let inv = 1.0 / batch.n_pairs as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// Mirror loss for the noise-observation model: pairs are weighted by
/// (1 - Pr(pair | g)) with `g` frozen, averaged over pairs. Returns (loss,
/// gradients for o).
pub fn noise_model_loss(
    o: &NoiseObservationModel,
    g: &SurrogateModel,
    obs: &ObservationSet,
    sessions: &[RankingSession],
) -> Result<(f64, MlpParams)> {
    let batch = build_pair_batch(obs, sessions);
    if batch.n_pairs == 0 {
        return Err(SurrogateError::NoPairs);
    }
    let mut loss = 0.0;
    let mut grads = o.params.zeros_like();
    for (_, contexts, noise, pairs) in &batch.per_session {
        let g_out: Vec<f64> = contexts
            .iter()
            .map(|x| Ok(mlp_forward(&g.params, x, None)?[0]))
            .collect::<Result<_>>()?;
        let o_out: Vec<f64> = noise
            .iter()
            .map(|x| Ok(mlp_forward(&o.params, x, None)?[0]))
            .collect::<Result<_>>()?;
        let mut upstream = vec![0.0; noise.len()];
        for &(p, m) in pairs {
            let w = 1.0 - pair_pref_prob(g_out[p], g_out[m]);
            let pr = pair_pref_prob(o_out[p], o_out[m]);
            loss -= w * pr.ln();
            let coeff = w * (1.0 - pr);
            upstream[p] -= coeff;
            upstream[m] += coeff;
        }
        for (x, &u) in noise.iter().zip(&upstream) {
            if u != 0.0 {
                let (gl, _) = mlp_gradient(&o.params, x, &[u], None)?;
                grads.axpy(1.0, &gl);
            }
        }
    }
    let inv = 1.0 / batch.n_pairs as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// Squared-error regression loss of `g` on observed scores, with gradients.
pub fn regression_loss(
    g: &SurrogateModel,
    obs: &ObservationSet,
    sessions: &[RankingSession],
) -> Result<(f64, MlpParams)> {
    if obs.is_empty() {
        return Err(SurrogateError::EmptyObservations);
    }
    let mut loss = 0.0;
    let mut grads = g.params.zeros_like();
    for so in &obs.sessions {
        let session = &sessions[so.session_index];
        for (ranking, score) in &so.records {
            let x = context_features(session, &ranking.perm);
            let pred = mlp_forward(&g.params, &x, None)?[0];
            let diff = pred - score;
            loss += 0.5 * diff * diff;
            let (gl, _) = mlp_gradient(&g.params, &x, &[diff], None)?;
            grads.axpy(1.0, &gl);
        }
    }
    Ok((loss, grads))
}

/// Alternating block-coordinate training: per epoch, one full-batch descent
/// step on g with o frozen, then one on o with g frozen. The loss trace has
/// exactly `epochs` entries. `rng` is reserved for pair subsampling when the
/// pair count exceeds `max_pairs` (keeps epochs bounded on large logs).
pub fn joint_train(
    g: &mut SurrogateModel,
    o: &mut NoiseObservationModel,
    obs: &ObservationSet,
    sessions: &[RankingSession],
    epochs: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<Vec<(f64, f64)>> {
    if epochs == 0 {
        return Err(SurrogateError::ZeroEpochs);
    }
    const MAX_PAIRS: usize = 50_000;
    let obs = subsample_pairs(obs, MAX_PAIRS, rng);
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (loss_g, grad_g) = weighted_surrogate_loss(g, o, &obs, sessions)?;
        g.params.axpy(-lr, &grad_g);
        let (loss_o, grad_o) = noise_model_loss(o, g, &obs, sessions)?;
        o.params.axpy(-lr, &grad_o);
        trace.push((loss_g, loss_o));
    }
    Ok(trace)
}

/// Keep at most `max_pairs` implied comparison pairs by dropping whole
/// records from oversized sessions, chosen with `rng`.
fn subsample_pairs(obs: &ObservationSet, max_pairs: usize, rng: &mut Rng) -> ObservationSet {
    let total_pairs: usize = obs
        .sessions
        .iter()
        .map(|s| s.records.len() * s.records.len())
        .sum();
    if total_pairs <= max_pairs {
        return obs.clone();
    }
    let scale = (max_pairs as f64 / total_pairs as f64).sqrt();
    let mut reduced = ObservationSet::new();
    for so in &obs.sessions {
        let keep = ((so.records.len() as f64 * scale).ceil() as usize)
            .max(2)
            .min(so.records.len());
        let mut idx: Vec<usize> = (0..so.records.len()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(keep);
        idx.sort_unstable();
        reduced.sessions.push(SessionObservations {
            session_index: so.session_index,
            records: idx.into_iter().map(|i| so.records[i].clone()).collect(),
        });
    }
    reduced
}

// ---------------------------------------------------------------------------
// Flip transitions and pseudometric
// ---------------------------------------------------------------------------

/// Swap adjacent positions (i, i+1) of a permutation.
pub fn flip(perm: &[usize], action: usize) -> Result<Vec<usize>> {
    if action + 1 >= perm.len() {
        return Err(SurrogateError::BadAction {
            action,
            n: perm.len(),
        });
    }
    let mut out = perm.to_vec();
    out.swap(action, action + 1);
    Ok(out)
}

/// One offline RL transition: flipping (i, i+1) on `state` yields
/// `next_state`, whose observed metric score is the reward.
#[derive(Debug, Clone)]
pub struct FlipTransition {
    pub session_index: usize,
    pub state: Vec<usize>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<usize>,
}

/// Assemble transitions from an observation set: every observed ranking whose
/// adjacent flip was also observed contributes one transition (the flipped
/// ranking's score is the reward).
pub fn transitions_from_observations(obs: &ObservationSet) -> Vec<FlipTransition> {
    let mut out = Vec::new();
    for so in &obs.sessions {
        let lookup: HashMap<&[usize], f64> = so
            .records
            .iter()
            .map(|(r, s)| (r.perm.as_slice(), *s))
            .collect();
        for (ranking, _) in &so.records {
            let n = ranking.len();
            for action in 0..n.saturating_sub(1) {
                let next = flip(&ranking.perm, action).unwrap();
                if let Some(&reward) = lookup.get(next.as_slice()) {
                    out.push(FlipTransition {
                        session_index: so.session_index,
                        state: ranking.perm.clone(),
                        action,
                        reward,
                        next_state: next,
                    });
                }
            }
        }
    }
    out
}

fn ordered_pairs(perm: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(perm.len() * (perm.len() - 1) / 2);
    for i in 0..perm.len() {
        for j in (i + 1)..perm.len() {
            out.push((perm[i], perm[j]));
        }
    }
    out
}

/// Jaccard distance between the ordered-item-pair sets of two rankings of the
/// same item universe: 1 - |P1 ∩ P2| / |P1 ∪ P2|.
pub fn jaccard_on_rankings(perm1: &[usize], perm2: &[usize]) -> f64 {
    let p1 = ordered_pairs(perm1);
    let p2: std::collections::HashSet<(usize, usize)> = ordered_pairs(perm2).into_iter().collect();
    let inter = p1.iter().filter(|p| p2.contains(p)).count();
    let union = p1.len() + p2.len() - inter;
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Distance between two (state, action) pairs: the Jaccard distance between
/// the rankings resulting from applying each action to its state.
pub fn flip_jaccard_distance(
    state1: &[usize],
    action1: usize,
    state2: &[usize],
    action2: usize,
) -> Result<f64> {
    let r1 = flip(state1, action1)?;
    let r2 = flip(state2, action2)?;
    Ok(jaccard_on_rankings(&r1, &r2))
}

/// Pseudometric F evaluated against the nearest observed transition under the
/// flip-Jaccard distance. The reward-gap term uses the observed reward when
/// (state, action) itself appears in the data and 0 otherwise; the second
/// term is alpha_r times the exact average next-state distance over all n-1
/// uniformly random follow-up actions. Cross-session distance is 1.
pub fn pseudometric_f(
    session_index: usize,
    state: &[usize],
    action: usize,
    observations: &[FlipTransition],
    alpha_r: f64,
) -> Result<f64> {
    if observations.is_empty() {
        return Err(SurrogateError::EmptyObservations);
    }
    let resulting = flip(state, action)?;
    let mut best: Option<(f64, &FlipTransition)> = None;
    for t in observations {
        let d = if t.session_index == session_index {
            jaccard_on_rankings(&resulting, &t.next_state)
        } else {
            1.0
        };
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, t));
        }
    }
    let (_, nearest) = best.unwrap();
    let own_reward = observations.iter().find(|t| {
        t.session_index == session_index && t.state == state && t.action == action
    });
    let reward_gap = match own_reward {
        Some(t) => (t.reward - nearest.reward).abs(),
        None => 0.0,
    };
    let n = state.len();
    let mut expected = 0.0;
    for a_next in 0..n - 1 {
        let s1 = flip(&resulting, a_next)?;
        let s2 = flip(&nearest.next_state, a_next);
        let d = match s2 {
            Ok(s2) if nearest.session_index == session_index => jaccard_on_rankings(&s1, &s2),
            _ => 1.0,
        };
        expected += d;
    }
    expected /= (n - 1) as f64;
    Ok(reward_gap + alpha_r * expected)
}

// ---------------------------------------------------------------------------
// Offline actor-critic
// ---------------------------------------------------------------------------

/// Softmax policy over the n-1 adjacent flips of a ranking. Each action is
/// scored by an MLP on the context of the flipped ranking.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipPolicy {
    pub params: MlpParams,
}

impl FlipPolicy {
    pub fn new(
        feature_dim: usize,
        hidden: &[usize],
        scale: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![context_width(feature_dim)];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let rates = vec![0.0; hidden.len()];
        Ok(Self {
            params: MlpParams::random(&widths, &rates, scale, rng)?,
        })
    }

    pub fn action_logits(&self, session: &RankingSession, state: &[usize]) -> Result<Vec<f64>> {
        (0..state.len() - 1)
            .map(|a| {
                let next = flip(state, a)?;
                let x = context_features(session, &next);
                Ok(mlp_forward(&self.params, &x, None)?[0])
            })
            .collect()
    }

    pub fn action_probs(&self, session: &RankingSession, state: &[usize]) -> Result<Vec<f64>> {
        let logits = self.action_logits(session, state)?;
        Ok(softmax(&logits))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct AcAlphas {
    pub alpha_r: f64,
    pub alpha_c: f64,
    pub alpha_a: f64,
}

/// One offline actor-critic update on a single transition. The critic is the
/// surrogate evaluated on the flipped ranking's context, Q(s, a) =
/// g(context(flip(s, a))); the actor is a softmax over adjacent flips.
/// Expectations over the actor's action distribution are exact sums.
pub fn offline_ac_step(
    critic: &mut SurrogateModel,
    actor: &mut FlipPolicy,
    sessions: &[RankingSession],
    transition: &FlipTransition,
    observations: &[FlipTransition],
    alphas: AcAlphas,
    lr: f64,
) -> Result<()> {
    let session = &sessions[transition.session_index];
    let s = &transition.state;
    let s_next = &transition.next_state;

    // Target: r + alpha_r * E_a Q(s', a) + alpha_c * E_a F(d_T(s', a)),
    // all treated as constants for the critic step.
    let mut target = transition.reward;
    if alphas.alpha_r != 0.0 || alphas.alpha_c != 0.0 {
        let probs = actor.action_probs(session, s_next)?;
        for (a, &p) in probs.iter().enumerate() {
            if alphas.alpha_r != 0.0 {
                let next = flip(s_next, a)?;
                target += alphas.alpha_r * p * critic.predict(session, &next)?;
            }
            if alphas.alpha_c != 0.0 {
                let f = pseudometric_f(
                    transition.session_index,
                    s_next,
                    a,
                    observations,
                    alphas.alpha_r,
                )?;
                target += alphas.alpha_c * p * f;
            }
        }
    }
    let x = context_features(session, s_next);
    let q = mlp_forward(&critic.params, &x, None)?[0];
    let (grad, _) = mlp_gradient(&critic.params, &x, &[2.0 * (q - target)], None)?;
    critic.params.axpy(-lr, &grad);

    // Actor ascends E_a [Q(s, a) + alpha_a * F(d_T(s, a))].
    let n_actions = s.len() - 1;
    let probs = actor.action_probs(session, s)?;
    let mut q_vals = Vec::with_capacity(n_actions);
    for a in 0..n_actions {
        let next = flip(s, a)?;
        let mut v = critic.predict(session, &next)?;
        if alphas.alpha_a != 0.0 {
            v += alphas.alpha_a
                * pseudometric_f(transition.session_index, s, a, observations, alphas.alpha_r)?;
        }
        q_vals.push(v);
    }
    let j: f64 = probs.iter().zip(&q_vals).map(|(p, q)| p * q).sum();
    let mut actor_grad = actor.params.zeros_like();
    for a in 0..n_actions {
        // dJ/dlogit_a for a softmax policy with constant action values.
        let dlogit = probs[a] * (q_vals[a] - j);
        if dlogit != 0.0 {
            let next = flip(s, a)?;
            let xa = context_features(session, &next);
            let (g, _) = mlp_gradient(&actor.params, &xa, &[dlogit], None)?;
            actor_grad.axpy(1.0, &g);
        }
    }
    actor.params.axpy(lr, &actor_grad);
    Ok(())
}

/// Cycle through transitions for `iters` steps.
pub fn offline_ac_train(
    critic: &mut SurrogateModel,
    actor: &mut FlipPolicy,
    sessions: &[RankingSession],
    transitions: &[FlipTransition],
    alphas: AcAlphas,
    lr: f64,
    iters: usize,
) -> Result<()> {
    if transitions.is_empty() {
        return Err(SurrogateError::EmptyObservations);
    }
    for i in 0..iters {
        let t = &transitions[i % transitions.len()];
        offline_ac_step(critic, actor, sessions, t, transitions, alphas, lr)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Serialization and traces
// ---------------------------------------------------------------------------

/// Versioned JSON checkpoint for a trained surrogate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateCheckpoint {
    pub version: u32,
    pub model: SurrogateModel,
}

pub fn surrogate_to_json(model: &SurrogateModel) -> String {
    serde_json::to_string_pretty(&SurrogateCheckpoint {
        version: 1,
        model: model.clone(),
    })
    .unwrap()
}

pub fn surrogate_from_json(text: &str) -> std::result::Result<SurrogateModel, serde_json::Error> {
    let cp: SurrogateCheckpoint = serde_json::from_str(text)?;
    Ok(cp.model)
}

/// Loss traces as CSV: epoch, loss_g, loss_o.
pub fn trace_to_csv(trace: &[(f64, f64)]) -> String {
    let mut out = String::from("epoch,loss_g,loss_o\n");
    for (i, (lg, lo)) in trace.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", i, lg, lo));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_ingest::Item;
    use crate::metric_oracle::all_permutations;
    use crate::numeric_core::finite_diff_gradient;

    fn toy_session(n: usize, d: usize, seed: u64) -> RankingSession {
        let mut rng = Rng::new(seed);
        let items = (0..n)
            .map(|i| {
                let f = (0..d).map(|_| rng.normal()).collect();
                Item::new(i, f, (i % 3) as u32)
            })
            .collect();
        RankingSession::new(format!("s{seed}"), items)
    }

    #[test]
    fn context_features_shape_and_order_sensitivity() {
        let s = toy_session(6, 3, 1);
        let a = context_features(&s, &[0, 1, 2, 3, 4, 5]);
        assert_eq!(a.len(), context_width(3));
        // Differ below position 5 only: mean pooling still distinguishes.
        let b = context_features(&s, &[0, 1, 2, 3, 5, 4]);
        assert_ne!(a, b);
        // Any permutation difference changes the vector.
        let c = context_features(&s, &[1, 0, 2, 3, 4, 5]);
        assert_ne!(a, c);
    }

    #[test]
    fn pair_pref_prob_properties() {
        assert_eq!(pair_pref_prob(1.3, 1.3), 0.5);
        assert!(pair_pref_prob(20.0, 0.0) > 0.9999);
        for (a, b) in [(0.1, -0.4), (3.0, 2.0), (-7.0, 1.0)] {
            let s = pair_pref_prob(a, b) + pair_pref_prob(b, a);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    fn toy_observations(sessions: &[RankingSession], per_session: usize, seed: u64) -> ObservationSet {
        let mut rng = Rng::new(seed);
        let mut obs = ObservationSet::new();
        for (si, s) in sessions.iter().enumerate() {
            let mut perms = all_permutations(s.len());
            rng.shuffle(&mut perms);
            for perm in perms.into_iter().take(per_session) {
                let score: f64 = perm
                    .iter()
                    .enumerate()
                    .map(|(r, &id)| s.items[id].features[0] / (r + 1) as f64)
                    .sum();
                obs.add(si, Ranking::new(perm), score);
            }
        }
        obs
    }

    #[test]
    fn constant_noise_model_halves_unweighted_loss() {
        let sessions = vec![toy_session(3, 2, 2)];
        let obs = toy_observations(&sessions, 4, 3);
        let mut rng = Rng::new(4);
        let g = SurrogateModel::new(2, &[4], 0.0, 0.5, &mut rng).unwrap();
        // Zero network => constant logits => all weights 0.5.
        let o = NoiseObservationModel::new(&[], 0.0, 0.0, &mut rng).unwrap();
        let (weighted, _) = weighted_surrogate_loss(&g, &o, &obs, &sessions).unwrap();
        // Unweighted mean pairwise logistic loss, computed directly.
        let mut unweighted = 0.0;
        let mut n_pairs = 0;
        for so in &obs.sessions {
            for (a, b) in session_pairs(&so.records) {
                let ga = g.predict(&sessions[so.session_index], &so.records[a].0.perm).unwrap();
                let gb = g.predict(&sessions[so.session_index], &so.records[b].0.perm).unwrap();
                unweighted -= pair_pref_prob(ga, gb).ln();
                n_pairs += 1;
            }
        }
        unweighted /= n_pairs as f64;
        assert!((weighted - 0.5 * unweighted).abs() < 1e-10);
    }

    #[test]
    fn certain_noise_pair_contributes_zero() {
        // Direct check of the weighting formula at Pr(noise) = 1.
        let w = 1.0 - 1.0;
        assert_eq!(w * (0.3f64).ln(), 0.0);
    }

    #[test]
    fn surrogate_loss_gradient_matches_finite_differences() {
        let sessions = vec![toy_session(3, 2, 5), toy_session(4, 2, 6)];
        let obs = toy_observations(&sessions, 4, 7);
        let mut rng = Rng::new(8);
        let g = SurrogateModel::new(2, &[3], 0.0, 0.4, &mut rng).unwrap();
        let o = NoiseObservationModel::new(&[3], 0.0, 0.4, &mut rng).unwrap();
        let (_, analytic) = weighted_surrogate_loss(&g, &o, &obs, &sessions).unwrap();
        let fd = finite_diff_gradient(
            |p| {
                let probe = SurrogateModel {
                    params: p.clone(),
                    feature_dim: 2,
                };
                weighted_surrogate_loss(&probe, &o, &obs, &sessions).unwrap().0
            },
            &g.params,
            1e-5,
        )
        .unwrap();
        for i in 0..g.params.param_count() {
            let (a, b) = (analytic.get_param(i), fd.get_param(i));
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: {a} vs {b}");
        }
    }

    #[test]
    fn noise_loss_gradient_matches_finite_differences() {
        let sessions = vec![toy_session(3, 2, 5)];
        let obs = toy_observations(&sessions, 4, 9);
        let mut rng = Rng::new(10);
        let g = SurrogateModel::new(2, &[3], 0.0, 0.4, &mut rng).unwrap();
        let o = NoiseObservationModel::new(&[3], 0.0, 0.4, &mut rng).unwrap();
        let (_, analytic) = noise_model_loss(&o, &g, &obs, &sessions).unwrap();
        let fd = finite_diff_gradient(
            |p| {
                let probe = NoiseObservationModel { params: p.clone() };
                noise_model_loss(&probe, &g, &obs, &sessions).unwrap().0
            },
            &o.params,
            1e-5,
        )
        .unwrap();
        for i in 0..o.params.param_count() {
            let (a, b) = (analytic.get_param(i), fd.get_param(i));
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: {a} vs {b}");
        }
    }

    #[test]
    fn perfect_g_collapses_noise_loss_weights() {
        // With Pr(pair | g) -> 1 on every pair, the noise loss tends to 0.
        let sessions = vec![toy_session(3, 2, 5)];
        let mut obs = ObservationSet::new();
        obs.add(0, Ranking::new(vec![0, 1, 2]), 3.0);
        obs.add(0, Ranking::new(vec![2, 1, 0]), 1.0);
        let mut rng = Rng::new(11);
        // A g that separates the two contexts by a huge margin.
        let mut g = SurrogateModel::new(2, &[], 0.0, 0.0, &mut rng).unwrap();
        // Linear output over context; blow up one weight so logit gap is huge.
        let x1 = context_features(&sessions[0], &[0, 1, 2]);
        let x2 = context_features(&sessions[0], &[2, 1, 0]);
        let j = x1
            .iter()
            .zip(&x2)
            .enumerate()
            .max_by(|a, b| {
                let da = (a.1 .0 - a.1 .1).abs();
                let db = (b.1 .0 - b.1 .1).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
            .0;
        let sign = if x1[j] > x2[j] { 1.0 } else { -1.0 };
        g.params.layers[0].weights.set(0, j, sign * 1e6);
        let o = NoiseObservationModel::new(&[], 0.0, 0.3, &mut rng).unwrap();
        let (loss, _) = noise_model_loss(&o, &g, &obs, &sessions).unwrap();
        assert!(loss.abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn joint_train_traces_and_preconditions() {
        let sessions = vec![toy_session(3, 2, 12)];
        let obs = toy_observations(&sessions, 4, 13);
        let mut rng = Rng::new(14);
        let mut g = SurrogateModel::new(2, &[4], 0.0, 0.3, &mut rng).unwrap();
        let mut o = NoiseObservationModel::new(&[3], 0.0, 0.3, &mut rng).unwrap();
        let trace = joint_train(&mut g, &mut o, &obs, &sessions, 7, 0.01, &mut rng).unwrap();
        assert_eq!(trace.len(), 7);
        assert!(matches!(
            joint_train(&mut g, &mut o, &obs, &sessions, 0, 0.01, &mut rng),
            Err(SurrogateError::ZeroEpochs)
        ));
        // Single observation per session: no pairs.
        let mut single = ObservationSet::new();
        single.add(0, Ranking::new(vec![0, 1, 2]), 1.0);
        assert!(matches!(
            joint_train(&mut g, &mut o, &single, &sessions, 1, 0.01, &mut rng),
            Err(SurrogateError::NoPairs)
        ));
    }

    #[test]
    fn flip_jaccard_hand_cases() {
        // Identical resulting rankings.
        assert_eq!(
            flip_jaccard_distance(&[0, 1, 2], 0, &[0, 1, 2], 0).unwrap(),
            0.0
        );
        // n=2 opposite orders: pair sets disjoint.
        assert_eq!(jaccard_on_rankings(&[0, 1], &[1, 0]), 1.0);
        // n=3, one adjacent transposition apart: shared pairs 2 of 4.
        assert_eq!(jaccard_on_rankings(&[0, 1, 2], &[0, 2, 1]), 0.5);
        assert!(flip(&[0, 1], 1).is_err());
    }

    #[test]
    fn pseudometric_hand_enumeration() {
        // n=3 session, two observed transitions; check against hand sums.
        let obs = vec![
            FlipTransition {
                session_index: 0,
                state: vec![0, 1, 2],
                action: 0,
                reward: 0.7,
                next_state: vec![1, 0, 2],
            },
            FlipTransition {
                session_index: 0,
                state: vec![0, 1, 2],
                action: 1,
                reward: 0.2,
                next_state: vec![0, 2, 1],
            },
        ];
        // Query the first observed transition itself: zero reward gap,
        // second term averages d over a' in {0, 1} applied to identical
        // next states => expected distance 0, so F = alpha_r * 0.
        let f = pseudometric_f(0, &[0, 1, 2], 0, &obs, 0.9).unwrap();
        assert_eq!(f, 0.0);
        // alpha_r = 0 and observed: F = reward gap = 0.
        assert_eq!(pseudometric_f(0, &[0, 1, 2], 0, &obs, 0.0).unwrap(), 0.0);
        // Unobserved (state, action): state [1,0,2], action 1 -> [1,2,0].
        // Distances to observed next states: vs [1,0,2]: pairs {10,12,02}
        // vs {10,12,02}... compute by hand:
        // resulting [1,2,0]: pairs {(1,2),(1,0),(2,0)}
        // obs1 next [1,0,2]: pairs {(1,0),(1,2),(0,2)} -> inter 2, union 4, d=0.5
        // obs2 next [0,2,1]: pairs {(0,2),(0,1),(2,1)} -> inter 0... (0,2) vs (2,0) differ; inter 0, d=1.
        // nearest = obs1 (d=0.5). reward gap 0 (unobserved).
        // E_{a'}: a'=0: flip([1,2,0],0)=[2,1,0]; flip([1,0,2],0)=[0,1,2];
        //   pairs {(2,1),(2,0),(1,0)} vs {(0,1),(0,2),(1,2)}: inter 0 -> d=1.
        // a'=1: flip([1,2,0],1)=[1,0,2]; flip([1,0,2],1)=[1,2,0];
        //   d([1,0,2],[1,2,0]): pairs {(1,0),(1,2),(0,2)} vs {(1,2),(1,0),(2,0)}: inter 2, union 4 -> 0.5.
        // expected = 0.75; F = alpha_r * 0.75.
        let f = pseudometric_f(0, &[1, 0, 2], 1, &obs, 0.4).unwrap();
        assert!((f - 0.4 * 0.75).abs() < 1e-12);
        assert!(pseudometric_f(0, &[0, 1, 2], 0, &[], 0.4).is_err());
    }

    #[test]
    fn flip_jaccard_metric_axioms_random_triples() {
        let mut rng = Rng::new(21);
        for _ in 0..300 {
            let n = 3 + rng.below(4);
            let mut base: Vec<usize> = (0..n).collect();
            let mut mk = |rng: &mut Rng| {
                rng.shuffle(&mut base);
                let s = base.clone();
                let a = rng.below(n - 1);
                (s, a)
            };
            let (s1, a1) = mk(&mut rng);
            let (s2, a2) = mk(&mut rng);
            let (s3, a3) = mk(&mut rng);
            let d12 = flip_jaccard_distance(&s1, a1, &s2, a2).unwrap();
            let d21 = flip_jaccard_distance(&s2, a2, &s1, a1).unwrap();
            let d13 = flip_jaccard_distance(&s1, a1, &s3, a3).unwrap();
            let d23 = flip_jaccard_distance(&s2, a2, &s3, a3).unwrap();
            let d11 = flip_jaccard_distance(&s1, a1, &s1, a1).unwrap();
            assert_eq!(d11, 0.0);
            assert_eq!(d12, d21);
            assert!(d12 <= d13 + d23 + 1e-12);
            assert!((0.0..=1.0).contains(&d12));
        }
    }

    #[test]
    fn ac_collapse_is_plain_regression() {
        // alpha_r = alpha_c = 0: the critic target is exactly the reward.
        let sessions = vec![toy_session(3, 2, 30)];
        let mut rng = Rng::new(31);
        let mut critic = SurrogateModel::new(2, &[4], 0.0, 0.3, &mut rng).unwrap();
        let mut actor = FlipPolicy::new(2, &[], 0.3, &mut rng).unwrap();
        let t = FlipTransition {
            session_index: 0,
            state: vec![0, 1, 2],
            action: 0,
            reward: 0.6,
            next_state: vec![1, 0, 2],
        };
        let alphas = AcAlphas {
            alpha_r: 0.0,
            alpha_c: 0.0,
            alpha_a: 0.0,
        };
        let before = critic.predict(&sessions[0], &t.next_state).unwrap();
        for _ in 0..500 {
            offline_ac_step(
                &mut critic,
                &mut actor,
                &sessions,
                &t,
                std::slice::from_ref(&t),
                alphas,
                0.05,
            )
            .unwrap();
        }
        let after = critic.predict(&sessions[0], &t.next_state).unwrap();
        assert!((after - 0.6).abs() < 1e-3, "before {before}, after {after}");
        // Actor probabilities remain a distribution.
        let probs = actor.action_probs(&sessions[0], &t.state).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = Rng::new(40);
        let g = SurrogateModel::new(3, &[5], 0.1, 0.3, &mut rng).unwrap();
        let json = surrogate_to_json(&g);
        let back = surrogate_from_json(&json).unwrap();
        assert_eq!(g.params, back.params);
        assert_eq!(back.feature_dim, 3);
        assert!(json.contains("\"version\": 1"));
    }

    #[test]
    fn trace_csv_format() {
        let csv = trace_to_csv(&[(1.5, 2.5), (1.0, 2.0)]);
        assert_eq!(csv, "epoch,loss_g,loss_o\n0,1.5,2.5\n1,1,2\n");
    }
}
