use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::metrics::{align_decisions, is_correct};
use super::dataset::EvalItem;
use super::EvalError;
use crate::pipeline::DecisionRecord;
use crate::retrieval::Source;
use crate::terminology::Terminology;

/// Provenance statistics over ALIGN decision traces. Percentages are in
/// `[0, 100]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Decisions correct at their target level whose winning code could be
    /// attributed to a source.
    pub n_attributed: usize,
    pub correct_source_pct: BTreeMap<Source, f64>,
    pub proposed: BTreeMap<Source, usize>,
    pub pruned: BTreeMap<Source, usize>,
    pub filtered_pct: BTreeMap<Source, f64>,
    /// Mean share of a retrieval channel's codes that the LLM also proposed,
    /// over queries where that channel proposed anything.
    pub overlap_pct: BTreeMap<Source, f64>,
}

/// Source credited for a winning code: LLM, then DENSE, then BM25.
pub fn attribute(sources: &BTreeSet<Source>) -> Option<Source> {
    [Source::Llm, Source::Dense, Source::Bm25]
        .into_iter()
        .find(|s| sources.contains(s))
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn ablation_report(
    decisions: &[DecisionRecord],
    items: &[EvalItem],
    terminology: &Terminology,
) -> Result<AblationReport, EvalError> {
    let pairs = align_decisions(decisions, items)?;

    let mut credited: BTreeMap<Source, usize> = BTreeMap::new();
    let mut n_attributed = 0;
    let mut proposed: BTreeMap<Source, usize> = Source::ALL.iter().map(|s| (*s, 0)).collect();
    let mut pruned = proposed.clone();
    let mut overlap_sum: BTreeMap<Source, f64> = BTreeMap::new();
    let mut overlap_n: BTreeMap<Source, usize> = BTreeMap::new();

    for (item, d) in pairs {
        let level = item.query.target_level.as_str();
        if is_correct(terminology, d, &item.gold_code, level) {
            let winner = d
                .effective_code()
                .and_then(|c| d.candidates.iter().find(|cand| cand.code == c))
                .and_then(|cand| attribute(&cand.sources));
            if let Some(source) = winner {
                *credited.entry(source).or_default() += 1;
                n_attributed += 1;
            }
        }

        let survivors: BTreeSet<&str> = d.survivors().iter().map(|c| c.code.as_str()).collect();
        for cand in &d.candidates {
            for s in &cand.sources {
                *proposed.entry(*s).or_default() += 1;
                if !survivors.contains(cand.code.as_str()) {
                    *pruned.entry(*s).or_default() += 1;
                }
            }
        }

        let codes_of = |s: Source| -> BTreeSet<&str> {
            d.candidates
                .iter()
                .filter(|c| c.sources.contains(&s))
                .map(|c| c.code.as_str())
                .collect()
        };
        let llm = codes_of(Source::Llm);
        for s in [Source::Bm25, Source::Dense] {
            let codes = codes_of(s);
            if codes.is_empty() {
                continue;
            }
            let shared = codes.intersection(&llm).count();
            *overlap_sum.entry(s).or_default() += pct(shared, codes.len());
            *overlap_n.entry(s).or_default() += 1;
        }
    }

    Ok(AblationReport {
        n_attributed,
        correct_source_pct: Source::ALL
            .iter()
            .map(|s| (*s, pct(credited.get(s).copied().unwrap_or(0), n_attributed)))
            .collect(),
        filtered_pct: Source::ALL
            .iter()
            .map(|s| (*s, pct(pruned[s], proposed[s])))
            .collect(),
        overlap_pct: [Source::Bm25, Source::Dense]
            .iter()
            .map(|s| {
                let n = overlap_n.get(s).copied().unwrap_or(0);
                let mean = if n == 0 { 0.0 } else { overlap_sum[s] / n as f64 };
                (*s, mean)
            })
            .collect(),
        proposed,
        pruned,
    })
}
