use super::dataset::EvalItem;
use super::metrics::align_decisions;
use super::EvalError;
use crate::pipeline::{ConformalMember, DecisionRecord};
use crate::terminology::Terminology;
use crate::uncertainty::{conformal_set, ConfidenceDistribution, ConformalCalibrator};

fn distribution_of(d: &DecisionRecord) -> Option<ConfidenceDistribution> {
    if d.error.is_some() || d.sheet.is_none() || d.distribution.is_empty() {
        return None;
    }
    Some(ConfidenceDistribution {
        probs: d.distribution.clone(),
        temperature: 1.0,
    })
}

/// Calibration pairs from labelled decisions. The gold label is the option
/// whose code matches gold at the record's target level; when no option
/// does, it is the None option. Records without an answer sheet (failed
/// queries) are skipped; the second value counts them.
pub fn calibration_examples(
    decisions: &[DecisionRecord],
    items: &[EvalItem],
    terminology: &Terminology,
) -> Result<(Vec<(ConfidenceDistribution, String)>, usize), EvalError> {
    let mut examples = Vec::new();
    let mut skipped = 0;
    for (item, d) in align_decisions(decisions, items)? {
        let (Some(dist), Some(sheet)) = (distribution_of(d), d.sheet.as_ref()) else {
            skipped += 1;
            continue;
        };
        let level = item.query.target_level.as_str();
        let gold = terminology.resolve_at_level(&item.gold_code, level).ok();
        let label = sheet
            .options
            .iter()
            .find(|o| {
                gold.is_some() && terminology.resolve_at_level(&o.code, level).ok() == gold
            })
            .map(|o| o.label.clone())
            .unwrap_or_else(|| sheet.none_label.clone());
        examples.push((dist, label));
    }
    Ok((examples, skipped))
}

/// Sets `conformal_set` from `cal`, most probable member first. Returns
/// false, leaving the record untouched, when it has no distribution.
pub fn attach_conformal_set(record: &mut DecisionRecord, cal: &ConformalCalibrator) -> bool {
    let (Some(dist), Some(sheet)) = (distribution_of(record), record.sheet.as_ref()) else {
        return false;
    };
    let mut members: Vec<ConformalMember> = conformal_set(&dist, cal)
        .into_iter()
        .map(|label| ConformalMember {
            code: sheet.code_of(&label).map(str::to_string),
            probability: dist.probs[&label],
            label,
        })
        .collect();
    members.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.label.cmp(&b.label))
    });
    record.conformal_set = Some(members);
    true
}
