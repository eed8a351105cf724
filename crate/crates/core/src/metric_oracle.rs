//! Black-box, noise-injecting, budget-metered list-level metric oracle.
//!
//! Internally the oracle computes NDCG@k, ERR, or a synthetic engagement
//! metric from hidden relevance labels, but learners only ever see scalar
//! scores per queried ranking. `peek_true_metric` is the evaluation-only
//! backdoor: it bypasses noise and budget and must never be called from
//! learner code.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_ingest::RankingSession;
use crate::numeric_core::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("permutation {perm:?} is not a permutation of 0..{n}")]
    InvalidPermutation { perm: Vec<usize>, n: usize },
    #[error("oracle budget exhausted after {consumed} queries")]
    BudgetExhausted { consumed: usize },
    #[error("ndcg cutoff must be >= 1")]
    InvalidCutoff,
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// A permutation of a session's item ids: `perm[rank] = item_id`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ranking {
    pub perm: Vec<usize>,
}

impl Ranking {
    pub fn new(perm: Vec<usize>) -> Self {
        Self { perm }
    }

    /// Identity ranking 0..n-1.
    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        if self.perm.len() != n {
            return Err(OracleError::InvalidPermutation {
                perm: self.perm.clone(),
                n,
            });
        }
        for &id in &self.perm {
            if id >= n || seen[id] {
                return Err(OracleError::InvalidPermutation {
                    perm: self.perm.clone(),
                    n,
                });
            }
            seen[id] = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngagementParams {
    /// Position decay in (0, 1).
    pub gamma: f64,
    /// Redundancy penalty weight, >= 0.
    pub lambda_red: f64,
    /// Diversity bonus weight, >= 0.
    pub lambda_div: f64,
    /// Cosine-similarity threshold for single-linkage clustering of the top 5.
    pub cluster_threshold: f64,
}

impl Default for EngagementParams {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            lambda_red: 0.0,
            lambda_div: 0.0,
            cluster_threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    NdcgAtK { k: usize },
    Err,
    Engagement(EngagementParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub noise: NoiseModel,
    pub max_grade: u32,
}

/// Gain used by DCG-style sums: 2^label - 1.
pub fn dcg_gain(label: u32) -> f64 {
    (1u64 << label) as f64 - 1.0
}

fn labels_in_rank_order(session: &RankingSession, ranking: &Ranking) -> Result<Vec<u32>> {
    ranking.validate(session.len())?;
    Ok(ranking
        .perm
        .iter()
        .map(|&id| session.items[id].relevance_label())
        .collect())
}

/// NDCG@k; returns 1.0 when the ideal DCG is 0 (all labels zero).
pub fn ndcg(session: &RankingSession, ranking: &Ranking, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(OracleError::InvalidCutoff);
    }
    let labels = labels_in_rank_order(session, ranking)?;
    let dcg_at = |ls: &[u32]| -> f64 {
        ls.iter()
            .take(k)
            .enumerate()
            .map(|(r, &l)| dcg_gain(l) / ((r + 2) as f64).log2())
            .sum()
    };
    let dcg = dcg_at(&labels);
    let mut ideal = labels.clone();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg_at(&ideal);
    if idcg == 0.0 {
        Ok(1.0)
    } else {
        Ok(dcg / idcg)
    }
}

/// Expected reciprocal rank with stop probability R = (2^label - 1) / 2^max_grade.
pub fn err(session: &RankingSession, ranking: &Ranking, max_grade: u32) -> Result<f64> {
    let labels = labels_in_rank_order(session, ranking)?;
    let denom = (1u64 << max_grade) as f64;
    let mut continue_prob = 1.0;
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let stop = dcg_gain(l) / denom;
        total += continue_prob * stop / (r + 1) as f64;
        continue_prob *= 1.0 - stop;
    }
    Ok(total)
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Deterministic, noiseless engagement score:
/// discounted gain sum, minus a redundancy penalty (max cosine similarity to
/// any item ranked above), plus a diversity bonus (number of single-linkage
/// clusters among the top 5). The redundancy term makes the reward of an
/// adjacent swap context-dependent, so sorting by label is not always optimal.
pub fn engagement_score(
    session: &RankingSession,
    ranking: &Ranking,
    params: &EngagementParams,
) -> Result<f64> {
    ranking.validate(session.len())?;
    let n = session.len();
    let mut score = 0.0;
    for (r, &id) in ranking.perm.iter().enumerate() {
        let decay = params.gamma.powi(r as i32);
        score += decay * dcg_gain(session.items[id].relevance_label());
        if params.lambda_red > 0.0 && r > 0 {
            let mut max_sim = f64::NEG_INFINITY;
            for &above in &ranking.perm[..r] {
                let sim = cosine_similarity(
                    &session.items[id].features,
                    &session.items[above].features,
                );
                max_sim = max_sim.max(sim);
            }
            score -= params.lambda_red * decay * max_sim;
        }
    }
    if params.lambda_div > 0.0 {
        let top = &ranking.perm[..n.min(5)];
        // Single-linkage components: items linked when similarity >= threshold.
        let mut component: Vec<usize> = (0..top.len()).collect();
        fn root(c: &mut Vec<usize>, mut i: usize) -> usize {
            while c[i] != i {
                c[i] = c[c[i]];
                i = c[i];
            }
            i
        }
        for a in 0..top.len() {
            for b in (a + 1)..top.len() {
                let sim = cosine_similarity(
                    &session.items[top[a]].features,
                    &session.items[top[b]].features,
                );
                if sim >= params.cluster_threshold {
                    let (ra, rb) = (root(&mut component, a), root(&mut component, b));
                    component[ra] = rb;
                }
            }
        }
        let clusters = (0..top.len())
            .filter(|&i| root(&mut component, i) == i)
            .count();
        score += params.lambda_div * clusters as f64;
    }
    Ok(score)
}

impl MetricSpec {
    /// Noiseless metric value. Evaluation-only: learner code must go through
    /// [`OracleHandle::query`].
    pub fn peek_true_metric(&self, session: &RankingSession, ranking: &Ranking) -> Result<f64> {
        match &self.kind {
            MetricKind::NdcgAtK { k } => ndcg(session, ranking, *k),
            MetricKind::Err => err(session, ranking, self.max_grade),
            MetricKind::Engagement(p) => engagement_score(session, ranking, p),
        }
    }
}

/// One consumed oracle query, exportable as JSON Lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub session_id: String,
    pub permutation: Vec<usize>,
    pub score: f64,
    pub budget_after: usize,
}

/// Budgeted black-box scorer: exposes only (ranking -> noisy scalar score).
#[derive(Debug, Clone)]
pub struct OracleHandle {
    spec: MetricSpec,
    initial_budget: usize,
    budget: usize,
    log: Vec<QueryRecord>,
    rng: Rng,
}

impl OracleHandle {
    pub fn new(spec: MetricSpec, budget: usize, rng: Rng) -> Self {
        Self {
            spec,
            initial_budget: budget,
            budget,
            log: Vec::new(),
            rng,
        }
    }

    pub fn budget_remaining(&self) -> usize {
        self.budget
    }

    pub fn queries_consumed(&self) -> usize {
        self.log.len()
    }

    pub fn log(&self) -> &[QueryRecord] {
        &self.log
    }

    pub fn spec(&self) -> &MetricSpec {
        &self.spec
    }

    /// Consume one budget unit and return the noisy metric score.
    pub fn query(&mut self, session: &RankingSession, ranking: &Ranking) -> Result<f64> {
        if self.budget == 0 {
            return Err(OracleError::BudgetExhausted {
                consumed: self.log.len(),
            });
        }
        let exact = self.spec.peek_true_metric(session, ranking)?;
        let score = match self.spec.noise {
            NoiseModel::None => exact,
            NoiseModel::Gaussian { sigma } => exact + sigma * self.rng.normal(),
        };
        self.budget -= 1;
        self.log.push(QueryRecord {
            session_id: session.query_id.clone(),
            permutation: ranking.perm.clone(),
            score,
            budget_after: self.budget,
        });
        Ok(score)
    }

    /// One JSON object per consumed query.
    pub fn export_log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .map(|s| s + "\n")
            .collect()
    }

    pub fn initial_budget(&self) -> usize {
        self.initial_budget
    }
}

/// All permutations of 0..n in lexicographic order. Intended for n <= 7.
pub fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    use itertools::Itertools;
    (0..n).permutations(n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_ingest::Item;

    fn session(labels: &[u32], features: Vec<Vec<f64>>) -> RankingSession {
        let items = labels
            .iter()
            .zip(features)
            .enumerate()
            .map(|(i, (&l, f))| Item::new(i, f, l))
            .collect();
        RankingSession::new("q".into(), items)
    }

    fn plain_session(labels: &[u32]) -> RankingSession {
        let feats = labels.iter().map(|&l| vec![l as f64, 1.0]).collect();
        session(labels, feats)
    }

    #[test]
    fn dcg_gain_values() {
        assert_eq!(dcg_gain(0), 0.0);
        assert_eq!(dcg_gain(1), 1.0);
        assert_eq!(dcg_gain(4), 15.0);
    }

    #[test]
    fn ndcg_ideal_and_reversed() {
        let s = plain_session(&[1, 0]);
        assert_eq!(ndcg(&s, &Ranking::new(vec![0, 1]), 2).unwrap(), 1.0);
        let rev = ndcg(&s, &Ranking::new(vec![1, 0]), 2).unwrap();
        assert!((rev - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((rev - 0.6309).abs() < 1e-4);
        // All-zero labels: convention 1.0.
        let z = plain_session(&[0, 0, 0]);
        assert_eq!(ndcg(&z, &Ranking::new(vec![2, 0, 1]), 3).unwrap(), 1.0);
        assert!(ndcg(&s, &Ranking::new(vec![0, 1]), 0).is_err());
    }

    #[test]
    fn err_formula_cases() {
        let s = plain_session(&[1]);
        assert_eq!(err(&s, &Ranking::identity(1), 1).unwrap(), 0.5);
        let z = plain_session(&[0, 0]);
        assert_eq!(err(&z, &Ranking::identity(2), 1).unwrap(), 0.0);
        let two = plain_session(&[1, 1]);
        assert!((err(&two, &Ranking::identity(2), 1).unwrap() - 0.625).abs() < 1e-12);
    }

    #[test]
    fn err_nonincreasing_under_downward_swap() {
        // Swapping a relevant item below an equally-or-more relevant one
        // never increases ERR; enumerated on n <= 5.
        for n in 2..=5usize {
            let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
            let s = plain_session(&labels);
            for perm in all_permutations(n) {
                let base = err(&s, &Ranking::new(perm.clone()), 2).unwrap();
                for i in 0..n - 1 {
                    let (a, b) = (perm[i], perm[i + 1]);
                    if labels[a] >= labels[b] {
                        let mut swapped = perm.clone();
                        swapped.swap(i, i + 1);
                        let after = err(&s, &Ranking::new(swapped), 2).unwrap();
                        assert!(after <= base + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn engagement_collapses_to_discounted_gain() {
        let s = plain_session(&[2, 1, 0]);
        let p = EngagementParams {
            gamma: 0.7,
            lambda_red: 0.0,
            lambda_div: 0.0,
            cluster_threshold: 0.9,
        };
        let got = engagement_score(&s, &Ranking::identity(3), &p).unwrap();
        let want = 3.0 + 0.7 * 1.0 + 0.49 * 0.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn engagement_penalizes_redundancy() {
        let dup = session(&[1, 1], vec![vec![1.0, 0.0], vec![1.0, 0.0]]);
        let orth = session(&[1, 1], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = EngagementParams {
            gamma: 0.8,
            lambda_red: 2.0,
            lambda_div: 0.0,
            cluster_threshold: 0.9,
        };
        let s_dup = engagement_score(&dup, &Ranking::identity(2), &p).unwrap();
        let s_orth = engagement_score(&orth, &Ranking::identity(2), &p).unwrap();
        assert!(s_dup < s_orth);
    }

    #[test]
    fn engagement_argmax_can_differ_from_label_sort() {
        // Two near-identical high-label items plus a distinct low-label item:
        // with a large redundancy weight, interleaving beats label order.
        let s = session(
            &[2, 2, 1, 0],
            vec![
                vec![1.0, 0.0, 0.0],
                vec![1.0, 0.01, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        );
        let p = EngagementParams {
            gamma: 0.8,
            lambda_red: 5.0,
            lambda_div: 0.0,
            cluster_threshold: 0.9,
        };
        let mut best = (f64::NEG_INFINITY, vec![]);
        for perm in all_permutations(4) {
            let v = engagement_score(&s, &Ranking::new(perm.clone()), &p).unwrap();
            if v > best.0 {
                best = (v, perm);
            }
        }
        let label_sorted = vec![0, 1, 2, 3];
        assert_ne!(best.1, label_sorted, "argmax should violate label order");
        let sorted_score = engagement_score(&s, &Ranking::new(label_sorted), &p).unwrap();
        assert!(best.0 > sorted_score);
    }

    #[test]
    fn engagement_zero_vector_similarity_convention() {
        let s = session(&[1, 1], vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
        let p = EngagementParams {
            gamma: 0.8,
            lambda_red: 1.0,
            lambda_div: 0.0,
            cluster_threshold: 0.9,
        };
        // max similarity to a zero vector is 0: penalty term vanishes.
        let got = engagement_score(&s, &Ranking::identity(2), &p).unwrap();
        assert!((got - (1.0 + 0.8 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn budget_accounting_and_exhaustion() {
        let s = plain_session(&[1, 0]);
        let spec = MetricSpec {
            kind: MetricKind::NdcgAtK { k: 2 },
            noise: NoiseModel::None,
            max_grade: 1,
        };
        let mut oracle = OracleHandle::new(spec, 3, Rng::new(1));
        let r = Ranking::identity(2);
        for _ in 0..3 {
            let v = oracle.query(&s, &r).unwrap();
            assert_eq!(v, 1.0); // noise = none: exact metric
        }
        assert_eq!(
            oracle.query(&s, &r).unwrap_err(),
            OracleError::BudgetExhausted { consumed: 3 }
        );
        assert_eq!(oracle.log().len(), 3);
        assert_eq!(
            oracle.queries_consumed() + oracle.budget_remaining(),
            oracle.initial_budget()
        );
        let jsonl = oracle.export_log_jsonl();
        assert_eq!(jsonl.lines().count(), 3);
        let first: QueryRecord = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(first.budget_after, 2);
    }

    #[test]
    fn noisy_queries_are_zero_mean_around_truth() {
        let s = plain_session(&[1, 0]);
        let spec = MetricSpec {
            kind: MetricKind::NdcgAtK { k: 2 },
            noise: NoiseModel::Gaussian { sigma: 0.1 },
            max_grade: 1,
        };
        let truth = spec
            .peek_true_metric(&s, &Ranking::new(vec![1, 0]))
            .unwrap();
        let mut oracle = OracleHandle::new(spec, 10_000, Rng::new(7));
        let r = Ranking::new(vec![1, 0]);
        let mut sum = 0.0;
        for _ in 0..10_000 {
            sum += oracle.query(&s, &r).unwrap();
        }
        let mean = sum / 10_000.0;
        assert!((mean - truth).abs() < 3.0 * 0.1 / 100.0);
    }

    #[test]
    fn peek_does_not_touch_budget_or_log() {
        let s = plain_session(&[1, 0]);
        let spec = MetricSpec {
            kind: MetricKind::Err,
            noise: NoiseModel::None,
            max_grade: 1,
        };
        let oracle = OracleHandle::new(spec.clone(), 5, Rng::new(1));
        let _ = spec.peek_true_metric(&s, &Ranking::identity(2)).unwrap();
        assert_eq!(oracle.budget_remaining(), 5);
        assert!(oracle.log().is_empty());
    }

    #[test]
    fn invalid_permutations_rejected() {
        let s = plain_session(&[1, 0, 2]);
        assert!(ndcg(&s, &Ranking::new(vec![0, 1]), 2).is_err());
        assert!(ndcg(&s, &Ranking::new(vec![0, 0, 1]), 2).is_err());
        assert!(ndcg(&s, &Ranking::new(vec![0, 1, 3]), 2).is_err());
    }

    #[test]
    fn ndcg_optimal_iff_label_sorted() {
        let labels = [3u32, 1, 2, 0];
        let s = plain_session(&labels);
        for perm in all_permutations(4) {
            let v = ndcg(&s, &Ranking::new(perm.clone()), 4).unwrap();
            let sorted = perm
                .windows(2)
                .all(|w| labels[w[0]] >= labels[w[1]]);
            if sorted {
                assert!((v - 1.0).abs() < 1e-12);
            } else {
                assert!(v < 1.0 - 1e-12, "perm {perm:?} gave {v}");
            }
        }
    }
}
