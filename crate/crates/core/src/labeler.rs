//! Disease-status extraction and per-disease report segmentation.
//!
//! The default backend is a deterministic rule labeler: a per-disease keyword
//! lexicon combined with negation cues ("no", "without", "resolved", ...)
//! and uncertainty cues ("possible", "may", "cannot exclude", ...). It is
//! exact on the synthetic sentence-template bank, which is what makes the
//! template-generated corpora oracle-grade. A remote HTTP backend is
//! available behind the same trait for wiring a neural extractor.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::http::{post_json, HttpConfig};
use crate::text::{contains_keyword, split_sentences, tokenize};
use crate::{Error, Result};

/// Status of one disease within one report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DiseaseStatus {
    Blank,
    Positive,
    Negative,
    Uncertain,
}

impl DiseaseStatus {
    /// Wire encoding: 0 = blank, 1 = positive, 2 = negative, 3 = uncertain.
    pub fn code(self) -> u8 {
        match self {
            DiseaseStatus::Blank => 0,
            DiseaseStatus::Positive => 1,
            DiseaseStatus::Negative => 2,
            DiseaseStatus::Uncertain => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DiseaseStatus::Blank),
            1 => Ok(DiseaseStatus::Positive),
            2 => Ok(DiseaseStatus::Negative),
            3 => Ok(DiseaseStatus::Uncertain),
            other => Err(Error::Validation(format!(
                "disease status code must be in 0..=3, got {other}"
            ))),
        }
    }
}

impl Serialize for DiseaseStatus {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.code())
    }
}

impl<'de> Deserialize<'de> for DiseaseStatus {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let code = u8::deserialize(deserializer)?;
        DiseaseStatus::from_code(code).map_err(serde::de::Error::custom)
    }
}

/// Length-K vector of per-disease statuses; the currency of partitioning,
/// judging, and clinical-efficacy metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiseaseStatusVector(pub Vec<DiseaseStatus>);

impl DiseaseStatusVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> DiseaseStatus {
        self.0[k]
    }

    pub fn all_blank(k: usize) -> Self {
        DiseaseStatusVector(vec![DiseaseStatus::Blank; k])
    }

    pub fn from_codes(codes: &[u8]) -> Result<Self> {
        codes
            .iter()
            .map(|&c| DiseaseStatus::from_code(c))
            .collect::<Result<Vec<_>>>()
            .map(DiseaseStatusVector)
    }

    pub fn codes(&self) -> Vec<u8> {
        self.0.iter().map(|s| s.code()).collect()
    }
}

/// Per-disease textual descriptions extracted from one report. Entry `k` is
/// the concatenation of the whole sentences assigned to disease `k`, or the
/// empty string when no sentence mentions it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiseaseDescriptionSet {
    pub descriptions: Vec<String>,
}

/// Ordered disease vocabulary. Indices are stable for the lifetime of the
/// value, which is what the status vectors, partitions, and map channels key
/// on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiseaseVocabulary {
    labels: Vec<String>,
    keywords: Vec<String>,
}

/// Lexicon row for one of the standard chest X-ray labels: the detection
/// keyword used by the rule labeler and the noun phrase used by the
/// synthetic sentence templates. The phrase always contains the keyword.
pub struct LabelLexeme {
    pub label: &'static str,
    pub keyword: &'static str,
    pub phrase: &'static str,
}

/// The standard 14-label chest X-ray vocabulary with its rule lexicon.
/// Keywords are pairwise non-overlapping under word-boundary matching, and
/// no keyword or phrase contains a negation or uncertainty cue.
pub const DEFAULT_LEXEMES: &[LabelLexeme] = &[
    LabelLexeme { label: "Enlarged Cardiomediastinum", keyword: "cardiomediastinum", phrase: "an enlarged cardiomediastinum" },
    LabelLexeme { label: "Cardiomegaly", keyword: "cardiomegaly", phrase: "cardiomegaly" },
    LabelLexeme { label: "Lung Opacity", keyword: "lung opacity", phrase: "a hazy lung opacity" },
    LabelLexeme { label: "Lung Lesion", keyword: "lung lesion", phrase: "a discrete lung lesion" },
    LabelLexeme { label: "Edema", keyword: "edema", phrase: "interstitial edema" },
    LabelLexeme { label: "Consolidation", keyword: "consolidation", phrase: "focal consolidation" },
    LabelLexeme { label: "Pneumonia", keyword: "pneumonia", phrase: "pneumonia" },
    LabelLexeme { label: "Atelectasis", keyword: "atelectasis", phrase: "basilar atelectasis" },
    LabelLexeme { label: "Pneumothorax", keyword: "pneumothorax", phrase: "a pneumothorax" },
    LabelLexeme { label: "Pleural Effusion", keyword: "pleural effusion", phrase: "a pleural effusion" },
    LabelLexeme { label: "Pleural Other", keyword: "pleural thickening", phrase: "pleural thickening" },
    LabelLexeme { label: "Fracture", keyword: "fracture", phrase: "a rib fracture" },
    LabelLexeme { label: "Support Devices", keyword: "support device", phrase: "a support device" },
    LabelLexeme { label: "No Finding", keyword: "normal cardiopulmonary silhouette", phrase: "a normal cardiopulmonary silhouette" },
];

/// Tokens that flip a mentioned disease to negative status.
const NEGATION_CUES: &[&str] = &["no", "not", "without", "absent", "resolved", "negative", "free", "clear"];

/// Tokens that mark a mention as uncertain. Checked before negation so that
/// "cannot exclude" does not read as a negation.
const UNCERTAINTY_CUES: &[&str] = &[
    "possible",
    "possibly",
    "may",
    "might",
    "cannot",
    "questionable",
    "suspected",
    "suspicious",
    "concern",
    "concerning",
    "equivocal",
];

impl DiseaseVocabulary {
    /// Build a vocabulary from ordered labels. Labels must be unique and
    /// non-empty. Detection keywords come from the default lexicon where the
    /// label is known, and fall back to the lowercased label otherwise.
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("vocabulary must not be empty".into()));
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(Error::Validation("vocabulary labels must be non-empty".into()));
            }
            if !seen.insert(label.clone()) {
                return Err(Error::Validation(format!("duplicate vocabulary label: {label}")));
            }
        }
        let keywords = labels
            .iter()
            .map(|label| {
                DEFAULT_LEXEMES
                    .iter()
                    .find(|lex| lex.label == label)
                    .map(|lex| lex.keyword.to_string())
                    .unwrap_or_else(|| label.to_lowercase())
            })
            .collect();
        Ok(DiseaseVocabulary { labels, keywords })
    }

    /// The standard 14-label chest X-ray vocabulary.
    pub fn default_chest_xray() -> Self {
        DiseaseVocabulary::new(DEFAULT_LEXEMES.iter().map(|l| l.label.to_string()).collect())
            .expect("default lexicon is valid")
    }

    /// Load a vocabulary file: one label per line, UTF-8, blank lines ignored.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let labels: Vec<String> = raw
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        DiseaseVocabulary::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, k: usize) -> &str {
        &self.labels[k]
    }

    pub fn keyword(&self, k: usize) -> &str {
        &self.keywords[k]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Synthetic-template noun phrase for disease `k`; the lowercased label
    /// for labels outside the default lexicon.
    pub fn phrase(&self, k: usize) -> String {
        DEFAULT_LEXEMES
            .iter()
            .find(|lex| lex.label == self.labels[k])
            .map(|lex| lex.phrase.to_string())
            .unwrap_or_else(|| self.labels[k].to_lowercase())
    }

    fn no_finding_index(&self) -> Option<usize> {
        self.index_of("No Finding")
    }
}

/// A disease-status extractor over free-text reports.
pub trait LabelerBackend: Send + Sync {
    fn extract(&self, report: &str, vocab: &DiseaseVocabulary) -> Result<DiseaseStatusVector>;
}

/// Deterministic keyword/cue labeler. Pure and thread-safe.
#[derive(Debug, Clone, Default)]
pub struct RuleLabeler;

/// Polarity of a single sentence, before it is attached to any disease.
fn sentence_polarity(sentence: &str) -> DiseaseStatus {
    let tokens = tokenize(sentence);
    if tokens.iter().any(|t| UNCERTAINTY_CUES.contains(&t.as_str())) {
        return DiseaseStatus::Uncertain;
    }
    if tokens.iter().any(|t| NEGATION_CUES.contains(&t.as_str())) {
        return DiseaseStatus::Negative;
    }
    DiseaseStatus::Positive
}

/// Merge two statuses for the same disease mentioned in several sentences.
/// Positive dominates, then uncertain, then negative.
fn merge_status(a: DiseaseStatus, b: DiseaseStatus) -> DiseaseStatus {
    use DiseaseStatus::*;
    match (a, b) {
        (Positive, _) | (_, Positive) => Positive,
        (Uncertain, _) | (_, Uncertain) => Uncertain,
        (Negative, _) | (_, Negative) => Negative,
        (Blank, Blank) => Blank,
    }
}

impl LabelerBackend for RuleLabeler {
    fn extract(&self, report: &str, vocab: &DiseaseVocabulary) -> Result<DiseaseStatusVector> {
        let mut statuses = vec![DiseaseStatus::Blank; vocab.len()];
        for sentence in split_sentences(report) {
            let polarity = sentence_polarity(&sentence);
            for k in 0..vocab.len() {
                if contains_keyword(&sentence, vocab.keyword(k)) {
                    statuses[k] = merge_status(statuses[k], polarity);
                }
            }
        }
        Ok(DiseaseStatusVector(statuses))
    }
}

/// Extract a per-disease status vector from a report.
pub fn extract_status(
    report: &str,
    vocab: &DiseaseVocabulary,
    backend: &dyn LabelerBackend,
) -> Result<DiseaseStatusVector> {
    let statuses = backend.extract(report, vocab)?;
    if statuses.len() != vocab.len() {
        return Err(Error::Protocol(format!(
            "labeler returned {} statuses for {} labels",
            statuses.len(),
            vocab.len()
        )));
    }
    Ok(statuses)
}

/// Assign every sentence of `report` to zero or more diseases by keyword
/// match. A sentence mentioning several diseases appears in each of their
/// descriptions; a sentence matching none is assigned to "No Finding" when
/// that label exists. Descriptions are whole-sentence concatenations.
pub fn segment_descriptions(report: &str, vocab: &DiseaseVocabulary) -> DiseaseDescriptionSet {
    let mut parts: Vec<Vec<String>> = vec![Vec::new(); vocab.len()];
    for sentence in split_sentences(report) {
        let mut matched = false;
        for k in 0..vocab.len() {
            if contains_keyword(&sentence, vocab.keyword(k)) {
                parts[k].push(sentence.clone());
                matched = true;
            }
        }
        if !matched {
            if let Some(nf) = vocab.no_finding_index() {
                parts[nf].push(sentence.clone());
            }
        }
    }
    DiseaseDescriptionSet {
        descriptions: parts.into_iter().map(|p| p.join(" ")).collect(),
    }
}

/// Disease indices (smallest first) whose keyword matches the sentence;
/// `None` when nothing matches. Used by the rules refiner for ordering.
pub(crate) fn sentence_disease_indices(sentence: &str, vocab: &DiseaseVocabulary) -> Vec<usize> {
    (0..vocab.len())
        .filter(|&k| contains_keyword(sentence, vocab.keyword(k)))
        .collect()
}

/// Remote labeler speaking `POST {"report", "labels"} -> {"statuses"}`.
pub struct RemoteLabeler {
    pub endpoint: String,
    pub http: HttpConfig,
}

#[derive(Serialize)]
struct RemoteLabelRequest<'a> {
    report: &'a str,
    labels: &'a [String],
}

#[derive(Deserialize)]
struct RemoteLabelResponse {
    statuses: Vec<u8>,
}

impl LabelerBackend for RemoteLabeler {
    fn extract(&self, report: &str, vocab: &DiseaseVocabulary) -> Result<DiseaseStatusVector> {
        let request = RemoteLabelRequest { report, labels: vocab.labels() };
        let response: RemoteLabelResponse = post_json(&self.endpoint, &request, &self.http)?;
        if response.statuses.len() != vocab.len() {
            return Err(Error::Protocol(format!(
                "remote labeler returned {} statuses for {} labels",
                response.statuses.len(),
                vocab.len()
            )));
        }
        DiseaseStatusVector::from_codes(&response.statuses)
            .map_err(|e| Error::Protocol(e.to_string()))
    }
}
