//! LETOR/SVMlight-style learning-to-rank file parsing.
//!
//! Grammar per item line: `<label> qid:<qid> (<idx>:<val>)* (#<comment>)?`
//! with 1-based sparse feature indices; absent indices default to 0. Lines
//! that are empty or start with `#` are skipped (file header comments).
//!
//! Relevance labels are hidden from learner code: they are only readable
//! inside this crate (the metric oracle and serialization). Learner-facing
//! supervision comes from [`RankingSession::preference_pairs`], the
//! human-annotation partial orders used by auxiliary simple-metric losses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::numeric_core::Vec64;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty dataset: no item lines found")]
    Empty,
    #[error("feature dimension mismatch: declared {declared}, observed index {observed}")]
    FeatureDim { declared: usize, observed: usize },
    #[error("normalization stats have {got} entries, dataset has {expected} features")]
    StatsDim { expected: usize, got: usize },
    #[error("session {qid} mixes feature lengths")]
    InconsistentSession { qid: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One ranked candidate: features are public, the relevance label is not.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub item_id: usize,
    pub features: Vec64,
    relevance_label: u32,
}

impl Item {
    pub fn new(item_id: usize, features: Vec64, relevance_label: u32) -> Self {
        Self {
            item_id,
            features,
            relevance_label,
        }
    }

    /// Label access is crate-internal: only the metric oracle and the data
    /// serializer may read it.
    pub(crate) fn relevance_label(&self) -> u32 {
        self.relevance_label
    }
}

/// One query with its candidate item set.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingSession {
    pub query_id: String,
    pub items: Vec<Item>,
}

impl RankingSession {
    pub fn new(query_id: String, items: Vec<Item>) -> Self {
        debug_assert!(!items.is_empty());
        debug_assert!(items.iter().enumerate().all(|(i, it)| it.item_id == i));
        Self { query_id, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.items[0].features.len()
    }

    /// Human-annotation partial orders (better, worse) derived from graded
    /// labels; the sanctioned supervision signal for simple pairwise losses.
    pub fn preference_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for a in &self.items {
            for b in &self.items {
                if a.relevance_label > b.relevance_label {
                    pairs.push((a.item_id, b.item_id));
                }
            }
        }
        pairs
    }
}

/// Per-feature (min, max) statistics computed from a training split.
pub type NormStats = Vec<(f64, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sessions: Vec<RankingSession>,
    pub feature_dim: usize,
    pub max_grade: u32,
    pub norm_stats: Option<NormStats>,
}

/// Parsed single line: (label, qid, sparse 1-based index -> value).
pub fn parse_letor_line(line: &str, line_no: usize) -> Result<(u32, String, BTreeMap<usize, f64>)> {
    let content = match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    };
    let mut tokens = content.split_whitespace();
    let label_tok = tokens.next().ok_or_else(|| DataError::Parse {
        line: line_no,
        msg: "missing label token".into(),
    })?;
    let label: u32 = label_tok.parse().map_err(|_| DataError::Parse {
        line: line_no,
        msg: format!("non-numeric label token {label_tok:?}"),
    })?;
    let qid_tok = tokens.next().ok_or_else(|| DataError::Parse {
        line: line_no,
        msg: "missing qid token".into(),
    })?;
    let qid = qid_tok
        .strip_prefix("qid:")
        .ok_or_else(|| DataError::Parse {
            line: line_no,
            msg: format!("expected qid:<id>, got {qid_tok:?}"),
        })?
        .to_string();
    if qid.is_empty() {
        return Err(DataError::Parse {
            line: line_no,
            msg: "empty qid".into(),
        });
    }
    let mut features = BTreeMap::new();
    for tok in tokens {
        let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| DataError::Parse {
            line: line_no,
            msg: format!("expected <idx>:<val>, got {tok:?}"),
        })?;
        let idx: usize = idx_s.parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("non-numeric feature index in {tok:?}"),
        })?;
        if idx == 0 {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("feature indices are 1-based, got {tok:?}"),
            });
        }
        let val: f64 = val_s.parse().map_err(|_| DataError::Parse {
            line: line_no,
            msg: format!("non-numeric feature value in {tok:?}"),
        })?;
        if features.insert(idx, val).is_some() {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("duplicate feature index in {tok:?}"),
            });
        }
    }
    Ok((label, qid, features))
}

/// Parse a whole LETOR text. Sessions preserve first-appearance order of
/// query ids and the line order of items; `feature_dim` is inferred as the
/// maximum feature index seen when not supplied.
pub fn parse_dataset(text: &str, feature_dim: Option<usize>) -> Result<Dataset> {
    let mut order: Vec<String> = Vec::new();
    let mut by_qid: BTreeMap<String, Vec<(u32, BTreeMap<usize, f64>)>> = BTreeMap::new();
    let mut max_idx = 0usize;
    let mut max_grade = 0u32;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (label, qid, feats) = parse_letor_line(line, i + 1)?;
        if let Some(&idx) = feats.keys().next_back() {
            max_idx = max_idx.max(idx);
        }
        max_grade = max_grade.max(label);
        if !by_qid.contains_key(&qid) {
            order.push(qid.clone());
        }
        by_qid.entry(qid).or_default().push((label, feats));
    }
    if order.is_empty() {
        return Err(DataError::Empty);
    }
    let dim = match feature_dim {
        Some(d) => {
            if max_idx > d {
                return Err(DataError::FeatureDim {
                    declared: d,
                    observed: max_idx,
                });
            }
            d
        }
        None => max_idx,
    };
    let sessions = order
        .into_iter()
        .map(|qid| {
            let rows = by_qid.remove(&qid).unwrap();
            let items = rows
                .into_iter()
                .enumerate()
                .map(|(item_id, (label, sparse))| {
                    let mut dense = vec![0.0; dim];
                    for (idx, val) in sparse {
                        dense[idx - 1] = val;
                    }
                    Item::new(item_id, dense, label)
                })
                .collect();
            RankingSession::new(qid, items)
        })
        .collect();
    Ok(Dataset {
        sessions,
        feature_dim: dim,
        max_grade,
        norm_stats: None,
    })
}

pub fn load_dataset(path: &Path, feature_dim: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, feature_dim)
}

/// Serialize back to LETOR text (sparse: zero features omitted).
pub fn to_letor_string(dataset: &Dataset) -> String {
    let mut out = String::new();
    for session in &dataset.sessions {
        for item in &session.items {
            write!(out, "{} qid:{}", item.relevance_label, session.query_id).unwrap();
            for (i, &v) in item.features.iter().enumerate() {
                if v != 0.0 {
                    write!(out, " {}:{}", i + 1, v).unwrap();
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Min-max feature normalization: v -> (v - min) / (max - min); constant
/// features map to 0. When `stats` is omitted they are computed from this
/// dataset and stored. Out-of-range values are not clipped.
pub fn minmax_normalize(dataset: &Dataset, stats: Option<&NormStats>) -> Result<Dataset> {
    let dim = dataset.feature_dim;
    if let Some(s) = stats {
        if s.len() != dim {
            return Err(DataError::StatsDim {
                expected: dim,
                got: s.len(),
            });
        }
    }
    let own_stats: NormStats = match stats {
        Some(s) => s.clone(),
        None => {
            let mut mins = vec![f64::INFINITY; dim];
            let mut maxs = vec![f64::NEG_INFINITY; dim];
            for session in &dataset.sessions {
                for item in &session.items {
                    for (j, &v) in item.features.iter().enumerate() {
                        mins[j] = mins[j].min(v);
                        maxs[j] = maxs[j].max(v);
                    }
                }
            }
            mins.into_iter().zip(maxs).collect()
        }
    };
    let sessions = dataset
        .sessions
        .iter()
        .map(|session| {
            let items = session
                .items
                .iter()
                .map(|item| {
                    let features = item
                        .features
                        .iter()
                        .zip(&own_stats)
                        .map(|(&v, &(lo, hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                        .collect();
                    Item::new(item.item_id, features, item.relevance_label)
                })
                .collect();
            RankingSession::new(session.query_id.clone(), items)
        })
        .collect();
    Ok(Dataset {
        sessions,
        feature_dim: dim,
        max_grade: dataset.max_grade,
        norm_stats: Some(own_stats),
    })
}
