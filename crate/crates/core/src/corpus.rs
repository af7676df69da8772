//! On-disk data model for studies and deterministic synthetic corpora.
//!
//! Corpora are JSONL, one study per line:
//! `{"study_id": str, "image_ref": str|null, "ground_truth_report": str,
//!   "candidate_observations": [str], "ground_truth_status": [int]|null}`.
//!
//! Synthetic corpora are built from the per-disease sentence template bank
//! so that the rule labeler recovers the generating status vector exactly on
//! clean text.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::labeler::{DiseaseStatus, DiseaseStatusVector, DiseaseVocabulary};
use crate::templates;
use crate::{Error, Result};

/// One study: the image handle, the reference report, and optionally the
/// sampled candidate observations and the generating status vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub study_id: String,
    pub image_ref: Option<String>,
    pub ground_truth_report: String,
    #[serde(default)]
    pub candidate_observations: Vec<String>,
    #[serde(default)]
    pub ground_truth_status: Option<DiseaseStatusVector>,
}

/// Configuration of the seeded synthetic corpus generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub seed: u64,
    pub num_studies: usize,
    pub k: usize,
    /// Probability that each disease is positive in the ground truth.
    pub positive_rate: f64,
    /// Probability that a candidate observation flips or drops each disease.
    pub noise_rate: f64,
    pub templates_per_disease: usize,
    /// Candidate observations generated per study.
    pub num_candidates: usize,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            seed: 0,
            num_studies: 50,
            k: 14,
            positive_rate: 0.3,
            noise_rate: 0.2,
            templates_per_disease: 3,
            num_candidates: 4,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self, vocab: &DiseaseVocabulary) -> Result<()> {
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(Error::Config(format!(
                "positive_rate must be in [0,1], got {}",
                self.positive_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate must be in [0,1], got {}",
                self.noise_rate
            )));
        }
        if self.templates_per_disease == 0 || self.templates_per_disease > templates::MAX_TEMPLATES {
            return Err(Error::Config(format!(
                "templates_per_disease must be in 1..={}, got {}",
                templates::MAX_TEMPLATES,
                self.templates_per_disease
            )));
        }
        if self.k != vocab.len() {
            return Err(Error::Config(format!(
                "config k = {} does not match vocabulary size {}",
                self.k,
                vocab.len()
            )));
        }
        Ok(())
    }
}

/// Sentence-to-disease provenance of one generated ground-truth report:
/// entry `i` lists the disease indices sentence `i` was generated for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportProvenance {
    pub sentence_diseases: Vec<Vec<usize>>,
}

/// A generated corpus together with per-study provenance.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub records: Vec<StudyRecord>,
    pub provenance: Vec<ReportProvenance>,
}

/// Load a JSONL corpus, validating against the vocabulary. Records are
/// returned in file order; malformed lines and duplicate study ids are
/// rejected with the offending line number.
pub fn load_corpus(path: &Path, vocab: &DiseaseVocabulary) -> Result<Vec<StudyRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen_ids = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: StudyRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.study_id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "study_id must be non-empty".into(),
            });
        }
        if !seen_ids.insert(record.study_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate study_id {:?} at line {line_no}",
                record.study_id
            )));
        }
        if let Some(status) = &record.ground_truth_status {
            if status.len() != vocab.len() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!(
                        "ground_truth_status has {} entries, vocabulary has {}",
                        status.len(),
                        vocab.len()
                    ),
                });
            }
        }
        records.push(record);
    }
    Ok(records)
}

/// Write a corpus as JSONL. The output is byte-deterministic for a given
/// record list.
pub fn write_corpus<W: Write>(out: &mut W, records: &[StudyRecord]) -> Result<()> {
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Validation(format!("unserializable record: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Write a corpus to a file via a temporary sibling, so a failed run leaves
/// no partial corpus behind.
pub fn write_corpus_file(path: &Path, records: &[StudyRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        write_corpus(&mut file, records)?;
        file.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn sample_status(rng: &mut ChaCha8Rng, positive_rate: f64) -> DiseaseStatus {
    let u: f64 = rng.gen();
    let v: f64 = rng.gen();
    if u < positive_rate {
        DiseaseStatus::Positive
    } else if v < 0.25 {
        DiseaseStatus::Negative
    } else if v < 0.35 {
        DiseaseStatus::Uncertain
    } else {
        DiseaseStatus::Blank
    }
}

/// Candidate-observation noise: flip or drop the disease mention.
fn perturb_status(rng: &mut ChaCha8Rng, status: DiseaseStatus) -> DiseaseStatus {
    let m: f64 = rng.gen();
    match status {
        DiseaseStatus::Positive => {
            if m < 0.5 {
                DiseaseStatus::Blank
            } else {
                DiseaseStatus::Negative
            }
        }
        DiseaseStatus::Negative => {
            if m < 0.5 {
                DiseaseStatus::Blank
            } else {
                DiseaseStatus::Positive
            }
        }
        DiseaseStatus::Uncertain => {
            if m < 0.5 {
                DiseaseStatus::Blank
            } else {
                DiseaseStatus::Positive
            }
        }
        DiseaseStatus::Blank => DiseaseStatus::Positive,
    }
}

fn compose_report(
    rng: &mut ChaCha8Rng,
    statuses: &DiseaseStatusVector,
    vocab: &DiseaseVocabulary,
    templates_per_disease: usize,
) -> (String, ReportProvenance) {
    let mut sentences = Vec::new();
    let mut provenance = Vec::new();
    for k in 0..vocab.len() {
        let status = statuses.get(k);
        // Draw unconditionally to keep the stream aligned per disease.
        let template_idx = rng.gen_range(0..templates_per_disease);
        if let Some(sentence) = templates::sentence(status, &vocab.phrase(k), template_idx) {
            sentences.push(sentence);
            provenance.push(vec![k]);
        }
    }
    (sentences.join(" "), ReportProvenance { sentence_diseases: provenance })
}

/// Generate a deterministic synthetic corpus with per-study provenance.
pub fn generate_synthetic_corpus_detailed(
    cfg: &SyntheticCorpusConfig,
    vocab: &DiseaseVocabulary,
) -> Result<SyntheticCorpus> {
    cfg.validate(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::with_capacity(cfg.num_studies);
    let mut provenance = Vec::with_capacity(cfg.num_studies);

    for i in 0..cfg.num_studies {
        let study_id = format!("synth-{i:04}");
        let statuses = DiseaseStatusVector(
            (0..cfg.k).map(|_| sample_status(&mut rng, cfg.positive_rate)).collect(),
        );
        let (report, prov) = compose_report(&mut rng, &statuses, vocab, cfg.templates_per_disease);

        let mut candidates = Vec::with_capacity(cfg.num_candidates);
        for _ in 0..cfg.num_candidates {
            let noisy = DiseaseStatusVector(
                statuses
                    .0
                    .iter()
                    .map(|&s| {
                        let w: f64 = rng.gen();
                        if w < cfg.noise_rate {
                            perturb_status(&mut rng, s)
                        } else {
                            // Burn one draw to keep both branches stream-equal.
                            let _: f64 = rng.gen();
                            s
                        }
                    })
                    .collect(),
            );
            let (text, _) = compose_report(&mut rng, &noisy, vocab, cfg.templates_per_disease);
            candidates.push(text);
        }

        records.push(StudyRecord {
            image_ref: Some(format!("synthetic://{study_id}")),
            study_id,
            ground_truth_report: report,
            candidate_observations: candidates,
            ground_truth_status: Some(statuses),
        });
        provenance.push(prov);
    }

    Ok(SyntheticCorpus { records, provenance })
}

/// Generate a deterministic synthetic corpus.
pub fn generate_synthetic_corpus(
    cfg: &SyntheticCorpusConfig,
    vocab: &DiseaseVocabulary,
) -> Result<Vec<StudyRecord>> {
    Ok(generate_synthetic_corpus_detailed(cfg, vocab)?.records)
}
