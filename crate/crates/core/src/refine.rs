//! Re-integration of candidate observations into one refined report,
//! constrained by trusted disease evidence.
//!
//! The rules backend is deterministic and hermetic: it pools sentences from
//! all observations, removes sentences whose extracted status contradicts
//! the trusted status of some disease (positive against negative only),
//! deduplicates, and orders by the disease each sentence first mentions. The
//! LLM backend sends a structured prompt to a chat model and validates the
//! response.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::labeler::{
    sentence_disease_indices, DiseaseStatus, DiseaseVocabulary, LabelerBackend,
};
use crate::llm::ChatClient;
use crate::spl::{PredictorModel, PreferenceLabel, PreferenceTriplet};
use crate::text::{normalize_sentence, split_sentences};
use crate::{Error, Result};

/// One trusted finding: the status the refined report must not contradict,
/// with the description that supports it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustedEntry {
    pub trusted_status: DiseaseStatus,
    pub supporting_description: String,
}

/// Per-disease trusted evidence derived from the filtered preference
/// triplets of one study. At most one entry per disease.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrustedEvidence {
    pub entries: BTreeMap<usize, TrustedEntry>,
}

impl TrustedEvidence {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Derive trusted evidence from the retained triplets of one study: per
/// disease, among retained agree-labeled triplets, keep the candidate
/// description with the highest predictor confidence (ties broken by lowest
/// observation index, then shorter text). The trusted status is the
/// labeler's reading of the chosen description restricted to that disease.
pub fn derive_trusted_evidence(
    filtered: &[PreferenceTriplet],
    vocab: &DiseaseVocabulary,
    labeler: &dyn LabelerBackend,
    model: &PredictorModel,
) -> Result<TrustedEvidence> {
    let mut best: BTreeMap<usize, (f64, usize, String)> = BTreeMap::new();
    for triplet in filtered {
        if triplet.label != PreferenceLabel::Agree {
            continue;
        }
        if triplet.k >= vocab.len() {
            return Err(Error::Arity(format!(
                "triplet disease index {} out of range for K = {}",
                triplet.k,
                vocab.len()
            )));
        }
        let confidence = model.agree_confidence(&triplet.candidate, &triplet.reference);
        let contender = (confidence, triplet.n, triplet.candidate.clone());
        match best.get(&triplet.k) {
            Some((c, n, text))
                if *c > confidence
                    || (*c == confidence && *n < triplet.n)
                    || (*c == confidence && *n == triplet.n && text.len() <= triplet.candidate.len()) => {}
            _ => {
                best.insert(triplet.k, contender);
            }
        }
    }
    let mut evidence = TrustedEvidence::default();
    for (k, (_, _, description)) in best {
        let status = labeler.extract(&description, vocab)?.get(k);
        evidence.entries.insert(
            k,
            TrustedEntry { trusted_status: status, supporting_description: description },
        );
    }
    Ok(evidence)
}

/// Structured prompt for LLM re-integration: system text, instruction,
/// serialized trusted evidence, serialized observations. Assembly is
/// deterministic in its inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinementPrompt {
    pub system_text: String,
    pub instruction_text: String,
    pub evidence_block: String,
    pub observations_block: String,
}

impl RefinementPrompt {
    /// The full user message: instruction, evidence, observations.
    pub fn user_message(&self) -> String {
        format!(
            "{}\n\n## Trusted disease evidence\n{}\n\n## Candidate observations\n{}",
            self.instruction_text, self.evidence_block, self.observations_block
        )
    }
}

fn status_word(status: DiseaseStatus) -> &'static str {
    match status {
        DiseaseStatus::Blank => "not mentioned",
        DiseaseStatus::Positive => "present",
        DiseaseStatus::Negative => "absent",
        DiseaseStatus::Uncertain => "uncertain",
    }
}

/// Assemble the re-integration prompt for one study.
pub fn build_prompt(
    evidence: &TrustedEvidence,
    observations: &[String],
    vocab: &DiseaseVocabulary,
) -> RefinementPrompt {
    let system_text = "You are an expert radiologist consolidating several draft \
                       observations of the same chest X-ray into one final report."
        .to_string();
    let instruction_text = "Rewrite the candidate observations into a single coherent \
                            report. Remove any sentence that contradicts the trusted \
                            disease evidence. Retain descriptions supported by the \
                            evidence or consistent across observations. Do not introduce \
                            findings that appear in no observation."
        .to_string();
    let evidence_block = if evidence.is_empty() {
        "No trusted constraints are available for this study.".to_string()
    } else {
        evidence
            .entries
            .iter()
            .map(|(k, entry)| {
                format!(
                    "- {}: {}. Supporting description: {}",
                    vocab.label(*k),
                    status_word(entry.trusted_status),
                    if entry.supporting_description.is_empty() {
                        "(none)"
                    } else {
                        &entry.supporting_description
                    }
                )
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let observations_block = observations
        .iter()
        .enumerate()
        .map(|(n, obs)| format!("Observation {}: {}", n + 1, obs))
        .collect::<Vec<_>>()
        .join("\n");
    RefinementPrompt { system_text, instruction_text, evidence_block, observations_block }
}

/// A report re-integration backend.
pub trait RefineBackend: Send + Sync {
    fn refine(
        &self,
        evidence: &TrustedEvidence,
        observations: &[String],
        vocab: &DiseaseVocabulary,
    ) -> Result<String>;
}

/// Deterministic rules refiner; see the module docs for the procedure.
#[derive(Debug, Clone, Default)]
pub struct RulesRefiner {
    labeler: crate::labeler::RuleLabeler,
}

/// True when the sentence's status for some trusted disease is the polar
/// opposite of the trusted status. Blank and uncertain never trigger.
fn contradicts(
    sentence_status: &crate::labeler::DiseaseStatusVector,
    evidence: &TrustedEvidence,
) -> bool {
    evidence.entries.iter().any(|(&k, entry)| {
        matches!(
            (sentence_status.get(k), entry.trusted_status),
            (DiseaseStatus::Positive, DiseaseStatus::Negative)
                | (DiseaseStatus::Negative, DiseaseStatus::Positive)
        )
    })
}

impl RefineBackend for RulesRefiner {
    fn refine(
        &self,
        evidence: &TrustedEvidence,
        observations: &[String],
        vocab: &DiseaseVocabulary,
    ) -> Result<String> {
        let mut kept: Vec<(usize, usize, String)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        let mut position = 0usize;
        for observation in observations {
            for sentence in split_sentences(observation) {
                position += 1;
                let normalized = normalize_sentence(&sentence);
                if !seen.insert(normalized) {
                    continue;
                }
                let status = self.labeler.extract(&sentence, vocab)?;
                if contradicts(&status, evidence) {
                    continue;
                }
                let first_disease = sentence_disease_indices(&sentence, vocab)
                    .first()
                    .copied()
                    .unwrap_or(vocab.len());
                kept.push((first_disease, position, sentence));
            }
        }
        kept.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Ok(kept.into_iter().map(|(_, _, s)| s).collect::<Vec<_>>().join(" "))
    }
}

/// LLM refiner: one chat completion per study with the structured prompt.
pub struct LlmRefiner {
    pub client: ChatClient,
}

impl RefineBackend for LlmRefiner {
    fn refine(
        &self,
        evidence: &TrustedEvidence,
        observations: &[String],
        vocab: &DiseaseVocabulary,
    ) -> Result<String> {
        let prompt = build_prompt(evidence, observations, vocab);
        let response = self.client.complete(&prompt.system_text, &prompt.user_message())?;
        Ok(response.trim().to_string())
    }
}

/// Refine a study's observations into one report via the configured backend.
pub fn refine(
    evidence: &TrustedEvidence,
    observations: &[String],
    vocab: &DiseaseVocabulary,
    backend: &dyn RefineBackend,
) -> Result<String> {
    backend.refine(evidence, observations, vocab)
}
