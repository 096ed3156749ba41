use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::pipeline::CodingQuery;
use crate::terminology::{normalize_code, Terminology};

/// One coded medication mention from a source study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawCodedRecord {
    pub term: String,
    #[serde(default)]
    pub route: Option<String>,
    pub gold_code: String,
    #[serde(default)]
    pub study_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub query: CodingQuery,
    pub gold_code: String,
    pub occurrence_count: u64,
}

/// Reads raw records from CSV with columns `term,route,gold_code,study_id`
/// (route and study id may be empty).
pub fn read_raw_records(path: impl AsRef<std::path::Path>) -> Result<Vec<RawCodedRecord>, EvalError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| {
            let mut r: RawCodedRecord = row.map_err(|e| {
                EvalError::InvalidRecord(format!("{} row {}: {e}", path.display(), i + 1))
            })?;
            r.route = r.route.filter(|s| !s.is_empty());
            Ok(r)
        })
        .collect()
}

fn key_of(record: &RawCodedRecord) -> (String, String) {
    let term = record.term.trim().to_lowercase();
    let route = record
        .route
        .as_deref()
        .map(|r| r.trim().to_lowercase())
        .unwrap_or_default();
    (term, route)
}

/// Groups raw records by normalized `(term, route)` and assigns each group
/// its most frequent gold code (ties: smallest code), truncated to
/// `target_level`. Items come out in key order with ids `{system}-{n:05}`.
pub fn build_eval_dataset(
    raw: &[RawCodedRecord],
    terminology: &Terminology,
    target_level: &str,
) -> Result<Vec<EvalItem>, EvalError> {
    if raw.is_empty() {
        return Err(EvalError::EmptyInput("raw records".into()));
    }
    if terminology.spec().level_index(target_level).is_none() {
        return Err(EvalError::UnknownLevel(target_level.to_string()));
    }
    let mut groups: BTreeMap<(String, String), BTreeMap<String, u64>> = BTreeMap::new();
    for record in raw {
        let key = key_of(record);
        if key.0.is_empty() {
            return Err(EvalError::InvalidRecord(format!(
                "empty term in study `{}`",
                record.study_id
            )));
        }
        *groups
            .entry(key)
            .or_default()
            .entry(normalize_code(&record.gold_code))
            .or_default() += 1;
    }

    let system = terminology.system_id();
    groups
        .into_iter()
        .enumerate()
        .map(|(i, ((term, route), counts))| {
            let total = counts.values().sum();
            // BTreeMap iterates codes ascending, so the first maximum wins ties.
            let (modal, _) = counts
                .iter()
                .fold(None::<(&String, u64)>, |best, (code, &n)| match best {
                    Some((_, bn)) if bn >= n => best,
                    _ => Some((code, n)),
                })
                .expect("group is nonempty");
            let gold = terminology
                .resolve_at_level(modal, target_level)
                .map_err(|e| EvalError::InvalidRecord(format!("gold code `{modal}`: {e}")))?;
            Ok(EvalItem {
                query: CodingQuery {
                    query_id: format!("{system}-{i:05}"),
                    term,
                    route: (!route.is_empty()).then_some(route),
                    dosage: None,
                    target_system: system.to_string(),
                    target_level: target_level.to_string(),
                },
                gold_code: gold,
                occurrence_count: total,
            })
        })
        .collect()
}

/// Partition of items into the frequent head and the tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParetoSplit {
    pub common: Vec<String>,
    pub uncommon: Vec<String>,
}

/// Sorts items by occurrence count (descending, ties by term then id) and
/// returns the shortest prefix covering at least `fraction` of all
/// occurrences as `common`.
pub fn pareto_split(items: &[EvalItem], fraction: f64) -> ParetoSplit {
    let mut order: Vec<&EvalItem> = items.iter().collect();
    order.sort_by(|a, b| {
        b.occurrence_count
            .cmp(&a.occurrence_count)
            .then_with(|| a.query.term.cmp(&b.query.term))
            .then_with(|| a.query.query_id.cmp(&b.query.query_id))
    });
    let total: u64 = items.iter().map(|i| i.occurrence_count).sum();
    let threshold = fraction * total as f64 - 1e-9;
    let mut cumulative = 0u64;
    let mut cut = order.len();
    for (i, item) in order.iter().enumerate() {
        cumulative += item.occurrence_count;
        if cumulative as f64 >= threshold {
            cut = i + 1;
            break;
        }
    }
    let ids = |s: &[&EvalItem]| s.iter().map(|i| i.query.query_id.clone()).collect();
    ParetoSplit {
        common: ids(&order[..cut]),
        uncommon: ids(&order[cut..]),
    }
}
