use std::collections::{BTreeMap, BTreeSet};

use super::parse::{
    parse_alternative_names, parse_codes, parse_option_answer, parse_verdict, strip_field_label,
    token_label, Verdict,
};
use super::{
    bindings, option_label, Candidate, CodingQuery, DecisionRecord, EntailmentVerdict, Ledger,
    McqOption, McqSheet, Method, Pipeline, PipelineError, PredictionEntry, SystemIndex,
};
use crate::llm::{render_prompt, CompletionResponse, LlmError, TemplateId};
use crate::retrieval::{RankedCandidate, Source};
use crate::uncertainty::{
    predictive_entropy, predictive_entropy_excluding, softmax_t, ConfidenceDistribution,
};

/// Result of the confidence-scoring stage.
#[derive(Debug, Clone, PartialEq)]
pub struct McqOutcome {
    pub sheet: McqSheet,
    pub distribution: BTreeMap<String, f64>,
    pub raw_logprobs: BTreeMap<String, f64>,
    pub chosen: Option<String>,
    pub prediction_set: Vec<PredictionEntry>,
    pub unlabeled_overflow: Vec<String>,
    pub no_logprobs: bool,
    pub no_logit_bias: bool,
}

/// Candidate codes merged across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Gathered {
    pub candidates: Vec<Candidate>,
    pub discarded: usize,
}

impl Pipeline {
    pub fn contextualize(
        &self,
        query: &CodingQuery,
        seed: u64,
        ledger: &mut Ledger,
    ) -> Result<String, PipelineError> {
        let system = &query.target_system;
        let b = bindings([
            ("system", system.clone()),
            ("medication name", query.term.trim().to_string()),
        ]);
        let accept = |text: &str| {
            let body = strip_field_label(text, "Context");
            (!body.is_empty()).then(|| body.to_string())
        };
        self.ask(TemplateId::Contextualizer, &b, seed, ledger, accept)?
            .map_err(|_| PipelineError::EmptyContext)
    }

    pub fn alternative_names(
        &self,
        query: &CodingQuery,
        context: &str,
        seed: u64,
        ledger: &mut Ledger,
    ) -> Result<Vec<String>, PipelineError> {
        let b = bindings([
            ("system", query.target_system.clone()),
            ("medication name", query.term.trim().to_string()),
            ("Medication context", context.to_string()),
        ]);
        let prompt = render_prompt(TemplateId::Synonyms, &b)?;
        let resp = self.call(&self.request(prompt, seed), ledger)?;
        Ok(parse_alternative_names(&resp.text, &query.term))
    }

    /// Codes proposed by the model from the term, context and synonyms.
    /// Returns the codes and how many reply entries were not code-shaped.
    pub fn llm_candidates(
        &self,
        query: &CodingQuery,
        context: &str,
        alt_names: &[String],
        seed: u64,
        ledger: &mut Ledger,
    ) -> Result<(Vec<String>, usize), PipelineError> {
        let system = self.system(&query.target_system)?;
        let mut enriched = context.to_string();
        if !alt_names.is_empty() {
            enriched.push_str("\nAlternative names: ");
            enriched.push_str(&alt_names.join(", "));
        }
        let b = bindings([
            ("system", query.target_system.clone()),
            ("medication name", query.term.trim().to_string()),
            ("Medication context", enriched),
            ("dosage and administration route", query.medication_info()),
        ]);
        let plausible = |c: &str| system.terminology.is_plausible_code(c);
        let outcome = self.ask(TemplateId::LlmCandidates, &b, seed, ledger, |text| {
            let parsed = parse_codes(text, plausible);
            (!parsed.0.is_empty()).then_some(parsed)
        })?;
        Ok(match outcome {
            Ok(parsed) => parsed,
            Err(last) => (Vec::new(), parse_codes(&last, plausible).1),
        })
    }

    /// Retrieval-informed code proposals from the hits of both indices.
    fn retrieval_prompt_codes(
        &self,
        query: &CodingQuery,
        context: &str,
        hits: &[RankedCandidate],
        seed: u64,
        ledger: &mut Ledger,
    ) -> Result<(Vec<String>, usize), PipelineError> {
        let system = self.system(&query.target_system)?;
        let listing: Vec<String> = hits
            .iter()
            .map(|h| match system.terminology.get(&h.code) {
                Some(e) => format!("{}: {}", e.code, e.name),
                None => h.code.clone(),
            })
            .collect();
        let b = bindings([
            ("system", query.target_system.clone()),
            ("medication name", query.term.trim().to_string()),
            ("Medication context", context.to_string()),
            ("candidates retrieved via Dense retrieval or BM25", listing.join("\n")),
        ]);
        let prompt = render_prompt(TemplateId::RetrievalCandidates, &b)?;
        let resp = self.call(&self.request(prompt, seed), ledger)?;
        Ok(parse_codes(&resp.text, |c| {
            system.terminology.is_plausible_code(c)
        }))
    }

    /// BM25 and dense hits at or below the target level.
    pub fn retrieve(
        &self,
        system: &SystemIndex,
        query: &CodingQuery,
    ) -> Result<(Vec<RankedCandidate>, Vec<RankedCandidate>), PipelineError> {
        let text = query.retrieval_text();
        let level = query.target_level.as_str();
        let keep = |c: &str| system.terminology.is_at_or_below(c, level);
        let bm25 = system.bm25.top_k_where(&text, &self.config.bm25, keep);
        let vector = crate::retrieval::embed(system.embedder.as_ref(), &[text])?
            .pop()
            .unwrap_or_default();
        let dense = system.dense.top_k_where(&vector, self.config.dense_k, keep)?;
        Ok((bm25, dense))
    }

    /// Merges LLM codes with BM25 and dense hits, all resolved to the target
    /// level. Codes that do not resolve are discarded and counted.
    pub fn gather_candidates(
        &self,
        query: &CodingQuery,
        llm_codes: &[String],
        bm25: &[RankedCandidate],
        dense: &[RankedCandidate],
    ) -> Result<Gathered, PipelineError> {
        let system = self.system(&query.target_system)?;
        let level = query.target_level.as_str();
        let mut order: Vec<String> = Vec::new();
        let mut merged: BTreeMap<String, (BTreeSet<Source>, Option<f64>, Option<f64>)> =
            BTreeMap::new();
        let mut discarded = 0;

        let proposals = llm_codes
            .iter()
            .map(|c| (c.as_str(), Source::Llm, None))
            .chain(bm25.iter().map(|h| (h.code.as_str(), Source::Bm25, Some(h.score))))
            .chain(dense.iter().map(|h| (h.code.as_str(), Source::Dense, Some(h.score))));
        for (code, source, score) in proposals {
            let resolved = match system.terminology.resolve_at_level(code, level) {
                Ok(c) => c,
                Err(e) => {
                    log::debug!("{}: discarding `{code}` from {source:?}: {e}", query.query_id);
                    discarded += 1;
                    continue;
                }
            };
            let slot = merged.entry(resolved.clone()).or_insert_with(|| {
                order.push(resolved.clone());
                (BTreeSet::new(), None, None)
            });
            slot.0.insert(source);
            let best = |cur: Option<f64>, s: f64| Some(cur.map_or(s, |c| c.max(s)));
            match (source, score) {
                (Source::Bm25, Some(s)) => slot.1 = best(slot.1, s),
                (Source::Dense, Some(s)) => slot.2 = best(slot.2, s),
                _ => {}
            }
        }
        if discarded > 0 {
            log::info!("{}: discarded {discarded} unresolvable codes", query.query_id);
        }
        if order.is_empty() {
            return Err(PipelineError::AllChannelsEmpty);
        }
        let candidates = order
            .into_iter()
            .map(|code| {
                let (sources, bm25_score, dense_score) = merged.remove(&code).expect("merged");
                Candidate {
                    code,
                    sources,
                    retrieval_score: dense_score.or(bm25_score),
                }
            })
            .collect();
        Ok(Gathered {
            candidates,
            discarded,
        })
    }

    /// One entailment check per candidate. When every candidate is pruned,
    /// all of them survive and the returned flag is set.
    pub fn entailment_filter(
        &self,
        query: &CodingQuery,
        context: &str,
        candidates: &[Candidate],
        seed: u64,
        ledger: &mut Ledger,
    ) -> Result<(Vec<Candidate>, Vec<EntailmentVerdict>, bool), PipelineError> {
        let system = self.system(&query.target_system)?;
        let mut verdicts = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let entry = system
                .terminology
                .get(&cand.code)
                .ok_or_else(|| crate::terminology::TerminologyError::UnknownCode(cand.code.clone()))?;
            let premise = if entry.description.trim().is_empty() {
                format!("{}: {}", entry.code, entry.name)
            } else {
                format!("{}: {}. {}", entry.code, entry.name, entry.description)
            };
            let mut hypothesis = query.term.trim().to_string();
            if let Some(route) = query.route.as_deref().filter(|r| !r.trim().is_empty()) {
                hypothesis.push_str(&format!(" ({})", route.trim()));
            }
            let b = bindings([
                ("system", query.target_system.clone()),
                ("query medication", hypothesis),
                ("context on query", context.to_string()),
                ("premise or context on code", premise),
            ]);
            let Verdict {
                supported,
                explanation,
            } = self
                .ask(TemplateId::Entailment, &b, seed, ledger, parse_verdict)?
                .map_err(|reply| PipelineError::UnparseableVerdict {
                    code: cand.code.clone(),
                    reply,
                })?;
            verdicts.push(EntailmentVerdict {
                code: cand.code.clone(),
                supported,
                explanation,
            });
        }
        let survivors: Vec<Candidate> = candidates
            .iter()
            .zip(&verdicts)
            .filter(|(_, v)| v.supported)
            .map(|(c, _)| c.clone())
            .collect();
        if survivors.is_empty() {
            log::info!("{}: every candidate pruned, keeping all", query.query_id);
            return Ok((candidates.to_vec(), verdicts, true));
        }
        Ok((survivors, verdicts, false))
    }

    /// Builds the option sheet, asks for step-by-step reasoning, then reads
    /// label log-probabilities off the biased answer token.
    pub fn mcq_select(
        &self,
        query: &CodingQuery,
        context: &str,
        survivors: &[Candidate],
        seed: u64,
        ledger: &mut Ledger,
    ) -> Result<McqOutcome, PipelineError> {
        let system = self.system(&query.target_system)?;
        let mut ordered: Vec<&Candidate> = survivors.iter().collect();
        ordered.sort_by(|a, b| {
            b.sources
                .len()
                .cmp(&a.sources.len())
                .then_with(|| a.code.cmp(&b.code))
        });
        let cap = self.config.candidate_cap.min(25);
        let unlabeled_overflow: Vec<String> =
            ordered.iter().skip(cap).map(|c| c.code.clone()).collect();
        let options: Vec<McqOption> = ordered
            .iter()
            .take(cap)
            .enumerate()
            .map(|(i, c)| McqOption {
                label: option_label(i),
                code: c.code.clone(),
            })
            .collect();
        if options.is_empty() {
            return Err(PipelineError::AllChannelsEmpty);
        }
        let none_label = option_label(options.len());
        let name_of = |code: &str| {
            system
                .terminology
                .get(code)
                .map(|e| e.name.clone())
                .unwrap_or_default()
        };

        let listing: Vec<String> = options
            .iter()
            .map(|o| format!("{} ({})", o.code, name_of(&o.code)))
            .collect();
        let b = bindings([
            ("system", query.target_system.clone()),
            ("query", query.term.trim().to_string()),
            ("drug_info", context.to_string()),
            ("candidates after self-evaluation", listing.join(", ")),
        ]);
        let reasoning = self
            .ask(TemplateId::McqReasoning, &b, seed, ledger, |text| {
                let body = strip_field_label(text, "Output");
                (!body.is_empty()).then(|| body.to_string())
            })?
            .map_err(|_| PipelineError::EmptyReply("reasoning"))?;

        let mut option_lines: Vec<String> = options
            .iter()
            .map(|o| format!("{}. {}: {}", o.label, o.code, name_of(&o.code)))
            .collect();
        option_lines.push(format!("{none_label}. None of the above"));
        let b = bindings([
            ("system", query.target_system.clone()),
            ("medication_name", query.term.trim().to_string()),
            ("medication_info", query.medication_info()),
            ("options", option_lines.join("\n")),
            ("llm_reasoning_context", reasoning.clone()),
        ]);
        let prompt = render_prompt(TemplateId::McqAnswer, &b)?;
        let sheet = McqSheet {
            options,
            none_label,
            reasoning_context: reasoning,
        };
        let labels = sheet.labels();
        let top = labels.len().min(20) as u8;
        let bias: BTreeMap<String, f64> = labels
            .iter()
            .map(|l| (l.clone(), self.config.logit_bias))
            .collect();

        let mut no_logit_bias = false;
        let mut last_text = String::new();
        let mut harvested: Option<(BTreeMap<String, f64>, bool)> = None;
        for attempt in 0..=self.config.retry_limit {
            let s = super::attempt_seed(seed, attempt);
            let base = self.request(prompt.clone(), s).with_max_tokens(1).with_logprobs(top);
            let req = if no_logit_bias {
                base
            } else {
                base.with_logit_bias(bias.clone())
            };
            let resp = match self.call(&req, ledger) {
                Err(PipelineError::Llm(LlmError::UnsupportedFeature(msg))) if !no_logit_bias => {
                    log::warn!("{}: logit bias unsupported ({msg}), retrying without", query.query_id);
                    no_logit_bias = true;
                    self.call(&self.request(prompt.clone(), s).with_max_tokens(1).with_logprobs(top), ledger)?
                }
                other => other?,
            };
            if let Some(found) = self.harvest(&resp, &labels) {
                harvested = Some((found, false));
                break;
            }
            let pairs: Vec<(String, String)> = sheet
                .options
                .iter()
                .map(|o| (o.label.clone(), o.code.clone()))
                .collect();
            if let Some(label) = parse_option_answer(&resp.text, &pairs, &sheet.none_label) {
                let one_hot = ConfidenceDistribution::one_hot(labels.iter().cloned(), &label);
                harvested = Some((one_hot.probs, true));
                break;
            }
            last_text = resp.text;
        }
        let (values, no_logprobs) =
            harvested.ok_or(PipelineError::UnparseableAnswer(last_text))?;

        let (distribution, raw_logprobs) = if no_logprobs {
            (values, BTreeMap::new())
        } else {
            let dist = softmax_t(&values, self.config.softmax_temperature)?;
            (dist.probs, values)
        };
        let dist = ConfidenceDistribution {
            probs: distribution.clone(),
            temperature: self.config.softmax_temperature,
        };
        let chosen = dist
            .argmax()
            .filter(|l| *l != sheet.none_label)
            .and_then(|l| sheet.code_of(l))
            .map(str::to_string);
        let mut prediction_set: Vec<PredictionEntry> = sheet
            .options
            .iter()
            .map(|o| PredictionEntry {
                code: o.code.clone(),
                probability: distribution[&o.label],
            })
            .collect();
        prediction_set.sort_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then_with(|| a.code.cmp(&b.code))
        });
        Ok(McqOutcome {
            sheet,
            distribution,
            raw_logprobs,
            chosen,
            prediction_set,
            unlabeled_overflow,
            no_logprobs,
            no_logit_bias,
        })
    }

    /// Label log-probabilities from the first answer token, or `None` when the
    /// provider returned no usable log-probabilities.
    fn harvest(&self, resp: &CompletionResponse, labels: &[String]) -> Option<BTreeMap<String, f64>> {
        let first = resp.token_logprobs.as_ref()?.first()?;
        let mut found: BTreeMap<String, f64> = BTreeMap::new();
        let seen = std::iter::once((first.token.as_str(), first.logprob))
            .chain(first.alternatives.iter().map(|a| (a.token.as_str(), a.logprob)));
        for (token, lp) in seen {
            let label = token_label(token);
            if labels.iter().any(|l| l == label) && lp.is_finite() {
                let slot = found.entry(label.to_string()).or_insert(lp);
                *slot = slot.max(lp);
            }
        }
        if found.is_empty() {
            return None;
        }
        Some(
            labels
                .iter()
                .map(|l| {
                    let v = found
                        .get(l)
                        .copied()
                        .unwrap_or(self.config.missing_label_logprob);
                    (l.clone(), v)
                })
                .collect(),
        )
    }

    /// The full three-stage pipeline for one query.
    pub fn run_align(&self, query: &CodingQuery, seed: u64) -> DecisionRecord {
        let mut record = DecisionRecord::new(query.clone(), Method::Align, seed);
        let mut ledger = Ledger::default();
        if let Err(e) = self.align_into(&mut record, &mut ledger) {
            log::warn!("{}: {e}", query.query_id);
            record.error = Some(e.to_string());
            record.deferred = true;
        }
        record.usage = ledger.into_entries();
        record
    }

    fn align_into(&self, rec: &mut DecisionRecord, ledger: &mut Ledger) -> Result<(), PipelineError> {
        let query = rec.query.clone();
        let seed = rec.seed;
        let system = self.check_query(&query)?;

        rec.context = self.contextualize(&query, seed, ledger)?;
        rec.alt_names = self.alternative_names(&query, &rec.context, seed, ledger)?;
        let (mut llm_codes, dropped) =
            self.llm_candidates(&query, &rec.context, &rec.alt_names, seed, ledger)?;
        rec.dropped_llm_codes = dropped;
        let (bm25, dense) = self.retrieve(system, &query)?;
        if self.config.use_retrieval_prompt {
            let hits: Vec<RankedCandidate> = bm25.iter().chain(&dense).cloned().collect();
            let (codes, dropped) =
                self.retrieval_prompt_codes(&query, &rec.context, &hits, seed, ledger)?;
            rec.dropped_llm_codes += dropped;
            for c in codes {
                if !llm_codes.contains(&c) {
                    llm_codes.push(c);
                }
            }
        }
        let gathered = self.gather_candidates(&query, &llm_codes, &bm25, &dense)?;
        rec.candidates = gathered.candidates;
        rec.discarded_codes = gathered.discarded;

        let (survivors, verdicts, fallback) =
            self.entailment_filter(&query, &rec.context, &rec.candidates, seed, ledger)?;
        rec.verdicts = verdicts;
        rec.filter_fallback = fallback;

        let outcome = self.mcq_select(&query, &rec.context, &survivors, seed, ledger)?;
        let dist = ConfidenceDistribution {
            probs: outcome.distribution.clone(),
            temperature: self.config.softmax_temperature,
        };
        let entropy = if self.config.entropy_exclude_none {
            predictive_entropy_excluding(&dist, &outcome.sheet.none_label)
        } else {
            predictive_entropy(&dist)
        };
        rec.entropy_nats = Some(entropy.nats);
        rec.normalized_entropy = Some(entropy.normalized);
        rec.deferred = outcome.chosen.is_none()
            || self
                .config
                .defer_threshold
                .is_some_and(|t| entropy.normalized > t);
        rec.chosen = outcome.chosen;
        rec.prediction_set = outcome.prediction_set;
        rec.distribution = outcome.distribution;
        rec.raw_logprobs = outcome.raw_logprobs;
        rec.unlabeled_overflow = outcome.unlabeled_overflow;
        rec.no_logprobs = outcome.no_logprobs;
        rec.no_logit_bias = outcome.no_logit_bias;
        rec.sheet = Some(outcome.sheet);
        Ok(())
    }
}
