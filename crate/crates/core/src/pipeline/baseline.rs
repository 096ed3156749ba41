use std::collections::{BTreeMap, BTreeSet};

use super::parse::{parse_codes, parse_option_answer};
use super::{
    bindings, option_label, Candidate, CodingQuery, DecisionRecord, Ledger, McqOption, McqSheet,
    Method, Pipeline, PipelineError, PredictionEntry,
};
use crate::llm::TemplateId;
use crate::retrieval::Source;

const COT_CODE_INSTRUCTION: &str =
    "\nThink step by step and give your reasoning first. End with a final line of the form `Code: <code>`.\n";
const COT_OPTION_INSTRUCTION: &str =
    "\nThink step by step and give your reasoning first. End with a final line of the form `Answer: <letter>`.\n";

impl Pipeline {
    /// Single-prompt comparison methods. Their records carry a one-hot
    /// distribution and no entailment verdicts.
    pub fn run_baseline(&self, method: Method, query: &CodingQuery, seed: u64) -> DecisionRecord {
        let mut record = DecisionRecord::new(query.clone(), method, seed);
        let mut ledger = Ledger::default();
        let outcome = self.check_query(query).map(|_| ()).and_then(|()| match method {
            Method::Llm | Method::LlmCot => self.baseline_llm(&mut record, &mut ledger),
            Method::Rag | Method::RagCot => self.baseline_rag(&mut record, &mut ledger),
            Method::Align => unreachable!("ALIGN is not a baseline"),
        });
        if let Err(e) = outcome {
            log::warn!("{}: {e}", query.query_id);
            record.error = Some(e.to_string());
            record.deferred = true;
        }
        record.usage = ledger.into_entries();
        record
    }

    fn baseline_llm(&self, rec: &mut DecisionRecord, ledger: &mut Ledger) -> Result<(), PipelineError> {
        let query = rec.query.clone();
        let system = self.system(&query.target_system)?;
        let instruction = if rec.method == Method::LlmCot {
            COT_CODE_INSTRUCTION
        } else {
            ""
        };
        let b = bindings([
            ("system", query.target_system.clone()),
            ("medication name", query.term.trim().to_string()),
            ("dosage and administration route", query.medication_info()),
            ("reasoning instruction", instruction.to_string()),
        ]);
        let level = query.target_level.as_str();
        let resolve = |text: &str| {
            let (codes, _) = parse_codes(text, |c| system.terminology.is_plausible_code(c));
            codes
                .iter()
                .find_map(|c| system.terminology.resolve_at_level(c, level).ok())
        };
        let code = self
            .ask(TemplateId::BaselineLlm, &b, rec.seed, ledger, resolve)?
            .map_err(PipelineError::UnparseableAnswer)?;
        rec.candidates = vec![Candidate {
            code: code.clone(),
            sources: BTreeSet::from([Source::Llm]),
            retrieval_score: None,
        }];
        let sheet = McqSheet {
            options: vec![McqOption {
                label: option_label(0),
                code,
            }],
            none_label: option_label(1),
            reasoning_context: String::new(),
        };
        self.finish_one_hot(rec, sheet, &option_label(0));
        Ok(())
    }

    fn baseline_rag(&self, rec: &mut DecisionRecord, ledger: &mut Ledger) -> Result<(), PipelineError> {
        let query = rec.query.clone();
        let system = self.system(&query.target_system)?;
        let (_, dense) = self.retrieve(system, &query)?;
        let gathered = self.gather_candidates(&query, &[], &[], &dense)?;
        rec.candidates = gathered.candidates;
        rec.discarded_codes = gathered.discarded;
        let options: Vec<McqOption> = rec
            .candidates
            .iter()
            .take(25)
            .enumerate()
            .map(|(i, c)| McqOption {
                label: option_label(i),
                code: c.code.clone(),
            })
            .collect();
        let none_label = option_label(options.len());
        let listing: Vec<String> = options
            .iter()
            .map(|o| {
                let name = system
                    .terminology
                    .get(&o.code)
                    .map(|e| e.name.as_str())
                    .unwrap_or("");
                format!("{}. {}: {}", o.label, o.code, name)
            })
            .collect();
        let instruction = if rec.method == Method::RagCot {
            COT_OPTION_INSTRUCTION
        } else {
            ""
        };
        let b = bindings([
            ("system", query.target_system.clone()),
            ("medication name", query.term.trim().to_string()),
            ("dosage and administration route", query.medication_info()),
            ("options", listing.join("\n")),
            ("reasoning instruction", instruction.to_string()),
        ]);
        let pairs: Vec<(String, String)> = options
            .iter()
            .map(|o| (o.label.clone(), o.code.clone()))
            .collect();
        // The None label is never offered, so only coded answers parse.
        let pick = |text: &str| {
            parse_option_answer(text, &pairs, "")
                .filter(|l| pairs.iter().any(|(pl, _)| pl == l))
        };
        let label = self
            .ask(TemplateId::BaselineRag, &b, rec.seed, ledger, pick)?
            .map_err(PipelineError::UnparseableAnswer)?;
        let sheet = McqSheet {
            options,
            none_label,
            reasoning_context: String::new(),
        };
        self.finish_one_hot(rec, sheet, &label);
        Ok(())
    }

    fn finish_one_hot(&self, rec: &mut DecisionRecord, sheet: McqSheet, hot: &str) {
        let labels = sheet.labels();
        rec.distribution = labels
            .iter()
            .map(|l| (l.clone(), if l == hot { 1.0 } else { 0.0 }))
            .collect::<BTreeMap<_, _>>();
        rec.chosen = sheet.code_of(hot).map(str::to_string);
        rec.prediction_set = rec
            .chosen
            .iter()
            .map(|c| PredictionEntry {
                code: c.clone(),
                probability: 1.0,
            })
            .collect();
        if self.config.baseline_max_entropy {
            rec.entropy_nats = Some((labels.len() as f64).ln());
            rec.normalized_entropy = Some(1.0);
        }
        rec.deferred = rec.chosen.is_none();
        rec.sheet = Some(sheet);
    }
}
