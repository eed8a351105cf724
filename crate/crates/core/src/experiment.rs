//! Configuration-driven offline simulation harness.
//!
//! Binds the other modules into one pipeline: ingest a LETOR dataset, stand
//! up a budgeted noisy metric oracle, collect (ranking, score) observations
//! under a chosen presentation policy, train the noise-aware surrogate, and
//! optimize a stochastic ranking policy against the surrogate with mixed
//! simple/complex gradients. Runs are fully deterministic given the config
//! seed and emit a learning-curve CSV, a JSON summary, and the oracle query
//! log. `compare` replays several configs that may differ only in explicitly
//! declared fields and joins their curves by oracle budget used.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_ingest::{load_dataset, minmax_normalize, Dataset, Item, RankingSession};
use crate::metric_oracle::{MetricSpec, OracleError, OracleHandle, Ranking};
use crate::numeric_core::{mc_dropout_stats, mlp_forward, mlp_gradient, MlpParams, Rng};
use crate::rank_optim::{
    expected_reward_gradient, multitask_update, policy_to_json, presentation_policy,
    MixSchedule, PresentationKind, RankingHead, ScoringFunction, SupportMode,
};
use crate::surrogate_lab::{
    joint_train, surrogate_to_json, NoiseObservationModel, ObservationSet, SurrogateModel,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    /// Invalid configuration; maps to CLI exit code 2.
    #[error("config: {0}")]
    Config(String),
    /// A pipeline stage failed; the message names the failing module.
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> ExperimentError {
    move |e| ExperimentError::Stage {
        stage,
        message: e.to_string(),
    }
}

pub const CONFIG_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionConfig {
    pub policy: PresentationKind,
    /// Alternations of [collect, retrain surrogate, retrain policy].
    pub rounds: usize,
    /// Dropout draws for per-item score uncertainty (uncertainty_aware only).
    #[serde(default = "default_n_dropout")]
    pub n_dropout: usize,
}

fn default_n_dropout() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    pub mode: SupportMode,
    /// Mixed-gradient steps per collection round.
    pub steps_per_round: usize,
    pub lr: f64,
    /// Ranking-head temperature (shared across positions).
    pub tau: f64,
    pub mix: MixSchedule,
    /// Sessions averaged per gradient step.
    #[serde(default = "default_session_batch")]
    pub session_batch: usize,
}

fn default_init_scale() -> f64 {
    0.3
}

fn default_session_batch() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    pub dataset: PathBuf,
    pub splits: SplitFractions,
    pub metric: MetricSpec,
    /// Total black-box oracle queries permitted.
    pub budget: usize,
    pub collection: CollectionConfig,
    pub surrogate: SurrogateConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
    /// Seed for the train/valid/test partition. Defaults to `seed`; pinning
    /// it lets replicated runs share one split so they differ only in
    /// training randomness.
    #[serde(default)]
    pub split_seed: Option<u64>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ExperimentError::Config(msg));
        if self.version != CONFIG_VERSION {
            return fail(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if !valid_name(&self.name) {
            return fail(format!(
                "name {:?} must be non-empty [A-Za-z0-9_-]",
                self.name
            ));
        }
        let s = &self.splits;
        let sum = s.train + s.valid + s.test;
        if !(s.train > 0.0 && s.valid >= 0.0 && s.test > 0.0) || (sum - 1.0).abs() > 1e-9 {
            return fail(format!(
                "split fractions must be positive (valid may be 0) and sum to 1, got {s:?}"
            ));
        }
        if self.collection.rounds == 0 {
            return fail("collection.rounds must be >= 1".into());
        }
        if self.collection.policy == PresentationKind::UncertaintyAware
            && self.collection.n_dropout < 2
        {
            return fail("collection.n_dropout must be >= 2 for uncertainty_aware".into());
        }
        if self.surrogate.epochs == 0 || !(self.surrogate.lr > 0.0) {
            return fail("surrogate.epochs must be >= 1 and surrogate.lr > 0".into());
        }
        if !(0.0..1.0).contains(&self.surrogate.dropout) || !(0.0..1.0).contains(&self.policy.dropout)
        {
            return fail("dropout rates must lie in [0, 1)".into());
        }
        if self.policy.steps_per_round == 0 || self.policy.session_batch == 0 {
            return fail("policy.steps_per_round and policy.session_batch must be >= 1".into());
        }
        if !(self.policy.lr > 0.0) || !(self.policy.tau > 0.0) {
            return fail("policy.lr and policy.tau must be > 0".into());
        }
        if let SupportMode::Sampled { k } = self.policy.mode {
            if k < 2 {
                return fail("policy.mode.sampled.k must be >= 2".into());
            }
        }
        crate::rank_optim::phi(0.0, &self.policy.mix)
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Cumulative policy-gradient steps; strictly increasing across records.
    pub step: usize,
    /// Oracle queries consumed so far; non-decreasing.
    pub budget_used: usize,
    /// Mean surrogate expected reward over the last training batch.
    pub objective: f64,
    /// Held-out true-metric mean of the modal ranking.
    pub heldout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    /// Mean true metric of the modal rankings on the test sessions.
    pub final_true_metric: f64,
    pub total_queries: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub records: Vec<RunRecord>,
    pub summary: RunSummary,
}

pub fn curve_to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("step,budget_used,objective,heldout\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.budget_used, r.objective, r.heldout
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Pipeline pieces
// ---------------------------------------------------------------------------

/// Seeded-shuffle session split. Rounds train/valid sizes and guarantees at
/// least one train and one test session.
pub fn split_indices(
    n: usize,
    fracs: &SplitFractions,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let n_train = ((n as f64 * fracs.train).round() as usize).clamp(1, n.saturating_sub(1));
    let n_valid = ((n as f64 * fracs.valid).round() as usize).min(n - n_train - 1);
    let valid = idx.split_off(n_train + n_valid);
    let test = valid; // remainder
    let mut train = idx;
    let valid = train.split_off(n_train);
    (train, valid, test)
}

/// Modal ranking of the policy: sort by score descending, ties by item id.
pub fn modal_ranking(scorer: &ScoringFunction, session: &RankingSession) -> Result<Vec<usize>> {
    let scores = scorer.scores(session).map_err(stage_err("rank_optim"))?;
    let mut rng = Rng::new(0); // unused by top_k
    presentation_policy(PresentationKind::TopK, &scores, None, &mut rng)
        .map_err(stage_err("rank_optim"))
}

/// Mean true metric of the modal rankings over a session set. The scorer
/// reads the (normalized) model sessions; the metric is evaluated on the
/// parallel raw sessions.
pub fn mean_true_metric(
    spec: &MetricSpec,
    model_sessions: &[RankingSession],
    raw_sessions: &[RankingSession],
    scorer: &ScoringFunction,
) -> Result<f64> {
    if model_sessions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (s, s_raw) in model_sessions.iter().zip(raw_sessions) {
        let perm = modal_ranking(scorer, s)?;
        total += spec
            .peek_true_metric(s_raw, &Ranking::new(perm))
            .map_err(stage_err("metric_oracle"))?;
    }
    Ok(total / model_sessions.len() as f64)
}

/// Pairwise logistic loss on relevance-label preference pairs and its ascent
/// direction (the negated loss gradient), both averaged over pairs. This is
/// the simple supervised objective mixed into policy training.
pub fn pairwise_label_gradient(
    params: &MlpParams,
    session: &RankingSession,
) -> Result<(f64, MlpParams)> {
    let pairs = session.preference_pairs();
    let mut grad = params.zeros_like();
    if pairs.is_empty() {
        return Ok((0.0, grad));
    }
    let map = stage_err("rank_optim");
    let scores: Vec<f64> = session
        .items
        .iter()
        .map(|it| Ok(mlp_forward(params, &it.features, None).map_err(&map)?[0]))
        .collect::<Result<_>>()?;
    let mut upstream = vec![0.0; session.len()];
    let mut loss = 0.0;
    let w = 1.0 / pairs.len() as f64;
    for &(hi, lo) in &pairs {
        let margin = scores[hi] - scores[lo];
        // -ln sigmoid(margin); ascent pushes the margin up.
        loss += w * (1.0 + (-margin).exp()).ln();
        let pull = w / (1.0 + margin.exp());
        upstream[hi] += pull;
        upstream[lo] -= pull;
    }
    for (item, &up) in session.items.iter().zip(&upstream) {
        if up != 0.0 {
            let (g, _) = mlp_gradient(params, &item.features, &[up], None).map_err(&map)?;
            grad.axpy(1.0, &g);
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

/// Execute the full offline-simulation pipeline and write report artifacts
/// (curve.csv, summary.json, querylog.jsonl, policy.json, surrogate.json)
/// into `out_dir`. Deterministic given the config seed: re-running with the
/// same config yields byte-identical artifacts. Budget exhaustion during
/// collection is a normal terminating condition; later rounds keep training
/// on the observations gathered so far.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    // Models consume min-max-normalized features; the oracle and all true-
    // metric evaluations act on the raw items (the black-box metric is a
    // property of the items themselves, not of our preprocessing).
    let raw = load_dataset(&config.dataset, None).map_err(stage_err("data_ingest"))?;
    let data = minmax_normalize(&raw, None).map_err(stage_err("data_ingest"))?;

    let root = Rng::new(config.seed);
    let split_root = Rng::new(config.split_seed.unwrap_or(config.seed));
    let (train_i, valid_i, test_i) =
        split_indices(data.sessions.len(), &config.splits, &mut split_root.subrng(0));
    let pick = |src: &Dataset, ix: &[usize]| -> Vec<RankingSession> {
        ix.iter().map(|&i| src.sessions[i].clone()).collect()
    };
    let train = pick(&data, &train_i);
    let train_raw = pick(&raw, &train_i);
    let valid = pick(&data, &valid_i);
    let valid_raw = pick(&raw, &valid_i);
    let test = pick(&data, &test_i);
    let test_raw = pick(&raw, &test_i);
    // Curve records evaluate on the validation split when present.
    let (heldout, heldout_raw): (&[RankingSession], &[RankingSession]) = if valid.is_empty() {
        (&test, &test_raw)
    } else {
        (&valid, &valid_raw)
    };

    let mut oracle = OracleHandle::new(config.metric.clone(), config.budget, root.subrng(1));
    let mut init_rng = root.subrng(2);
    let d = data.feature_dim;
    let mut scorer = ScoringFunction::new(
        d,
        &config.policy.hidden,
        config.policy.dropout,
        config.policy.init_scale,
        &mut init_rng,
    )
    .map_err(stage_err("rank_optim"))?;
    let max_len = data.sessions.iter().map(|s| s.len()).max().unwrap_or(1);
    let head = RankingHead::uniform(max_len, config.policy.tau);
    let mut surrogate = SurrogateModel::new(
        d,
        &config.surrogate.hidden,
        config.surrogate.dropout,
        config.surrogate.init_scale,
        &mut init_rng,
    )
    .map_err(stage_err("surrogate_lab"))?;
    let mut noise_model = NoiseObservationModel::new(
        &config.surrogate.hidden,
        config.surrogate.dropout,
        config.surrogate.init_scale,
        &mut init_rng,
    )
    .map_err(stage_err("surrogate_lab"))?;

    let mut collect_rng = root.subrng(3);
    let mut sur_rng = root.subrng(4);
    let mut pol_rng = root.subrng(5);

    let mut obs = ObservationSet::new();
    let mut records: Vec<RunRecord> = Vec::new();
    let mut global_step = 0usize;
    let mut cursor = 0usize;

    for round in 0..config.collection.rounds {
        // Collection: spread the remaining budget over the remaining rounds.
        let remaining_rounds = config.collection.rounds - round;
        let quota = oracle.budget_remaining().div_ceil(remaining_rounds);
        for _ in 0..quota {
            let si = cursor % train.len();
            cursor += 1;
            let session = &train[si];
            let scores = scorer.scores(session).map_err(stage_err("rank_optim"))?;
            // Uncertainty-aware presentation sorts by score plus a draw of
            // the MC-dropout score uncertainty, so shown rankings hover
            // around the current policy's best guess and vary most where
            // the scorer is least sure.
            let stds = if config.collection.policy == PresentationKind::UncertaintyAware {
                let mut out = Vec::with_capacity(session.len());
                for item in &session.items {
                    let (_, var) = mc_dropout_stats(
                        &scorer.params,
                        &item.features,
                        config.collection.n_dropout,
                        &mut collect_rng,
                    )
                    .map_err(stage_err("rank_optim"))?;
                    out.push(var[0].sqrt());
                }
                Some(out)
            } else {
                None
            };
            let perm = presentation_policy(
                config.collection.policy,
                &scores,
                stds.as_deref(),
                &mut collect_rng,
            )
            .map_err(stage_err("rank_optim"))?;
            match oracle.query(&train_raw[si], &Ranking::new(perm.clone())) {
                Ok(score) => obs.add(si, Ranking::new(perm), score),
                Err(OracleError::BudgetExhausted { .. }) => break,
                Err(e) => return Err(stage_err("metric_oracle")(e)),
            }
        }

        joint_train(
            &mut surrogate,
            &mut noise_model,
            &obs,
            &train,
            config.surrogate.epochs,
            config.surrogate.lr,
            &mut sur_rng,
        )
        .map_err(stage_err("surrogate_lab"))?;

        // Policy training: mixed simple/complex gradient ascent.
        let mut last_objective = 0.0;
        for _ in 0..config.policy.steps_per_round {
            let b = config.policy.session_batch.min(train.len());
            let mut grad_complex = scorer.params.zeros_like();
            let mut grad_simple = scorer.params.zeros_like();
            let mut objective = 0.0;
            for j in 0..b {
                let si = (global_step * b + j) % train.len();
                let session = &train[si];
                let sur = &surrogate;
                let mut reward = |perm: &[usize]| {
                    sur.predict(session, perm)
                        .expect("surrogate input width is fixed at construction")
                };
                let pg = expected_reward_gradient(
                    &scorer,
                    &head,
                    &mut reward,
                    session,
                    config.policy.mode,
                    &mut pol_rng,
                )
                .map_err(stage_err("rank_optim"))?;
                grad_complex.axpy(1.0 / b as f64, &pg.scorer_grad);
                objective += pg.value / b as f64;
                let (_, simple) = pairwise_label_gradient(&scorer.params, session)?;
                grad_simple.axpy(1.0 / b as f64, &simple);
            }
            // The surrogate's pairwise-logit outputs have no calibrated
            // scale, so the raw complex gradient can dwarf (or vanish
            // against) the supervised one. Normalizing both to unit length
            // makes the mixing weight meaningful and bounds the step size.
            for g in [&mut grad_complex, &mut grad_simple] {
                let norm = g.l2_norm();
                if norm > 0.0 {
                    g.scale(1.0 / norm);
                }
            }
            multitask_update(
                &mut scorer.params,
                &grad_complex,
                &grad_simple,
                global_step as f64,
                &config.policy.mix,
                config.policy.lr,
            )
            .map_err(stage_err("rank_optim"))?;
            global_step += 1;
            last_objective = objective;
        }

        records.push(RunRecord {
            step: global_step,
            budget_used: oracle.queries_consumed(),
            objective: last_objective,
            heldout: mean_true_metric(&config.metric, heldout, heldout_raw, &scorer)?,
        });
    }

    let summary = RunSummary {
        name: config.name.clone(),
        seed: config.seed,
        final_true_metric: mean_true_metric(&config.metric, &test, &test_raw, &scorer)?,
        total_queries: oracle.queries_consumed(),
        n_train: train.len(),
        n_valid: valid.len(),
        n_test: test.len(),
    };
    debug_assert_eq!(summary.total_queries, oracle.log().len());

    fs::write(out_dir.join("curve.csv"), curve_to_csv(&records))?;
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    fs::write(out_dir.join("querylog.jsonl"), oracle.export_log_jsonl())?;
    fs::write(out_dir.join("policy.json"), policy_to_json(&scorer, &head))?;
    fs::write(out_dir.join("surrogate.json"), surrogate_to_json(&surrogate))?;

    Ok(RunReport { records, summary })
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub version: u32,
    pub name: String,
    pub runs: Vec<ExperimentConfig>,
    /// Top-level ExperimentConfig fields the runs are allowed to differ in.
    /// Any undeclared difference is refused (confound guard); "name" is
    /// always allowed as a label.
    pub declared: Vec<String>,
    /// Seeds replayed for every member run (overriding each config's own
    /// seed); empty means one run per config with its configured seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalMedian {
    pub name: String,
    pub median_final_true_metric: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    /// Sorted union of budget-used grid points across all runs.
    pub budgets: Vec<usize>,
    /// Per member config: (name, median held-out curve aligned to budgets).
    pub columns: Vec<(String, Vec<f64>)>,
    pub final_medians: Vec<FinalMedian>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget_used");
        for (name, _) in &self.columns {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, b) in self.budgets.iter().enumerate() {
            out.push_str(&b.to_string());
            for (_, col) in &self.columns {
                out.push_str(&format!(",{}", col[i]));
            }
            out.push('\n');
        }
        out
    }
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Held-out value at a budget grid point: the last record at or below the
/// budget, or the first record when none is.
fn value_at_budget(records: &[RunRecord], budget: usize) -> f64 {
    let mut value = records[0].heldout;
    for r in records {
        if r.budget_used <= budget {
            value = r.heldout;
        } else {
            break;
        }
    }
    value
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ExperimentError::Config(msg));
        if self.version != CONFIG_VERSION {
            return fail(format!("unsupported config version {}", self.version));
        }
        if !valid_name(&self.name) {
            return fail(format!("name {:?} must be non-empty [A-Za-z0-9_-]", self.name));
        }
        if self.runs.len() < 2 {
            return fail("compare needs at least 2 member configs".into());
        }
        for r in &self.runs {
            r.validate()?;
        }
        let mut names: Vec<&str> = self.runs.iter().map(|r| r.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.runs.len() {
            return fail("member config names must be unique".into());
        }
        // Confound guard: members may differ only in declared fields.
        let values: Vec<serde_json::Value> = self
            .runs
            .iter()
            .map(|r| serde_json::to_value(r).expect("config serializes"))
            .collect();
        let base = values[0].as_object().expect("config is a JSON object");
        for v in &values[1..] {
            let other = v.as_object().expect("config is a JSON object");
            for (key, val) in base {
                if key == "name" || self.declared.iter().any(|d| d == key) {
                    continue;
                }
                if other.get(key) != Some(val) {
                    return fail(format!(
                        "member configs differ in undeclared field {key:?}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Run every member config (optionally across a shared seed list), write the
/// per-run artifacts under `out_dir/<member>/seed_<seed>/`, and emit the
/// budget-aligned median comparison as comparison.csv plus
/// comparison_summary.json.
pub fn compare(config: &CompareConfig, out_dir: &Path) -> Result<ComparisonTable> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut all_reports: Vec<Vec<RunReport>> = Vec::with_capacity(config.runs.len());
    for member in &config.runs {
        let seeds = if config.seeds.is_empty() {
            vec![member.seed]
        } else {
            config.seeds.clone()
        };
        let mut reports = Vec::with_capacity(seeds.len());
        for seed in seeds {
            let mut effective = member.clone();
            effective.seed = seed;
            let dir = out_dir.join(&member.name).join(format!("seed_{seed}"));
            reports.push(run(&effective, &dir)?);
        }
        all_reports.push(reports);
    }

    let mut budgets: Vec<usize> = all_reports
        .iter()
        .flatten()
        .flat_map(|r| r.records.iter().map(|rec| rec.budget_used))
        .collect();
    budgets.sort_unstable();
    budgets.dedup();

    let mut columns = Vec::with_capacity(config.runs.len());
    let mut final_medians = Vec::with_capacity(config.runs.len());
    for (member, reports) in config.runs.iter().zip(&all_reports) {
        let col: Vec<f64> = budgets
            .iter()
            .map(|&b| {
                let mut vals: Vec<f64> =
                    reports.iter().map(|r| value_at_budget(&r.records, b)).collect();
                median(&mut vals)
            })
            .collect();
        columns.push((member.name.clone(), col));
        let mut finals: Vec<f64> = reports
            .iter()
            .map(|r| r.summary.final_true_metric)
            .collect();
        final_medians.push(FinalMedian {
            name: member.name.clone(),
            median_final_true_metric: median(&mut finals),
        });
    }

    let table = ComparisonTable {
        budgets,
        columns,
        final_medians,
    };
    fs::write(out_dir.join("comparison.csv"), table.to_csv())?;
    fs::write(
        out_dir.join("comparison_summary.json"),
        serde_json::to_string_pretty(&table.final_medians).expect("medians serialize"),
    )?;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Synthetic data generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSynthConfig {
    pub version: u32,
    pub name: String,
    pub n_sessions: usize,
    pub n_items: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Stddev of Gaussian noise added to the planted score before grading.
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_max_grade")]
    pub max_grade: u32,
    /// File name written inside the output directory.
    pub out_file: String,
}

fn default_max_grade() -> u32 {
    4
}

impl GenSynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ExperimentError::Config(msg));
        if self.version != CONFIG_VERSION {
            return fail(format!("unsupported config version {}", self.version));
        }
        if self.n_sessions == 0 || self.n_items < 2 || self.feature_dim == 0 {
            return fail("need n_sessions >= 1, n_items >= 2, feature_dim >= 1".into());
        }
        if self.label_noise < 0.0 || self.max_grade == 0 || self.out_file.is_empty() {
            return fail("label_noise >= 0, max_grade >= 1, out_file non-empty".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Deterministic synthetic LETOR text: features drawn from seeded standard
/// Gaussians, labels from a planted linear-scoring rule (plus optional label
/// noise) quantized by within-session score rank into grades 0..max_grade.
/// The generative recipe is documented in the file's header comments.
pub fn synthesize_dataset(
    n_sessions: usize,
    n_items: usize,
    feature_dim: usize,
    max_grade: u32,
    label_noise: f64,
    seed: u64,
) -> String {
    let mut rng = Rng::new(seed);
    let weights: Vec<f64> = (0..feature_dim).map(|_| rng.normal()).collect();
    let mut sessions = Vec::with_capacity(n_sessions);
    for q in 0..n_sessions {
        let mut feats: Vec<Vec<f64>> = Vec::with_capacity(n_items);
        let mut scores: Vec<f64> = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            let x: Vec<f64> = (0..feature_dim).map(|_| rng.normal()).collect();
            let score: f64 = weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>()
                + label_noise * rng.normal();
            feats.push(x);
            scores.push(score);
        }
        // Grade by within-session score rank quantiles.
        let mut order: Vec<usize> = (0..n_items).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
        let mut labels = vec![0u32; n_items];
        for (rank, &i) in order.iter().enumerate() {
            labels[i] = ((rank * (max_grade as usize + 1)) / n_items).min(max_grade as usize) as u32;
        }
        let items: Vec<Item> = feats
            .into_iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (f, l))| Item::new(i, f, l))
            .collect();
        sessions.push(RankingSession::new(format!("{}", q + 1), items));
    }
    let dataset = Dataset {
        sessions,
        feature_dim,
        max_grade,
        norm_stats: None,
    };
    let mut out = String::new();
    out.push_str("# synthetic ranking dataset\n");
    out.push_str(&format!(
        "# sessions={n_sessions} items_per_session={n_items} feature_dim={feature_dim} max_grade={max_grade} label_noise={label_noise} seed={seed}\n"
    ));
    out.push_str("# features ~ N(0,1) iid; planted weights w ~ N(0,1) shared across sessions\n");
    out.push_str("# score = w.x + label_noise * N(0,1); label = within-session score rank quantized to 0..max_grade\n");
    out.push_str(&crate::data_ingest::to_letor_string(&dataset));
    out
}

/// Generate the dataset described by `config` and write it under `out_dir`.
pub fn gen_synthetic(config: &GenSynthConfig, out_dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let text = synthesize_dataset(
        config.n_sessions,
        config.n_items,
        config.feature_dim,
        config.max_grade,
        config.label_noise,
        config.seed,
    );
    let path = out_dir.join(&config.out_file);
    fs::write(&path, text)?;
    Ok(path)
}
