//! Lexical and clinical-efficacy evaluation: BLEU-1/4, ROUGE-L, and
//! disease-level precision/recall/F1. Tokenization is lowercase split on
//! non-alphanumerics so every value is bit-reproducible.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::labeler::{extract_status, DiseaseStatus, DiseaseVocabulary, LabelerBackend};
use crate::text::tokenize;
use crate::{Error, Result};

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU with uniform n-gram weights up to `max_n` and the standard brevity
/// penalty, no smoothing: any zero n-gram precision gives zero.
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> Result<f64> {
    if !(1..=4).contains(&max_n) {
        return Err(Error::Config(format!("bleu max_n must be in 1..=4, got {max_n}")));
    }
    let cand_tokens = tokenize(candidate);
    if cand_tokens.is_empty() || references.is_empty() {
        return Ok(0.0);
    }
    let ref_token_lists: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();

    let mut log_precision_sum = 0.0;
    for n in 1..=max_n {
        let cand_ngrams = ngram_counts(&cand_tokens, n);
        let total: usize = cand_ngrams.values().sum();
        if total == 0 {
            return Ok(0.0);
        }
        let ref_ngram_lists: Vec<HashMap<&[String], usize>> =
            ref_token_lists.iter().map(|r| ngram_counts(r, n)).collect();
        let mut clipped = 0usize;
        for (ngram, &count) in &cand_ngrams {
            let max_ref = ref_ngram_lists
                .iter()
                .map(|m| m.get(ngram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(max_ref);
        }
        if clipped == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (clipped as f64 / total as f64).ln();
    }
    let geo_mean = (log_precision_sum / max_n as f64).exp();

    // Brevity penalty against the closest reference length (shorter wins
    // ties).
    let cand_len = cand_tokens.len();
    let closest_ref_len = ref_token_lists
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as i64 - cand_len as i64).abs(), len))
        .unwrap_or(0);
    let bp = if cand_len >= closest_ref_len {
        1.0
    } else {
        (1.0 - closest_ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * geo_mean)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            curr[j] = if a[i - 1] == b[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(curr[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// ROUGE-L: F-measure of the longest common token subsequence. Zero for
/// empty inputs.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let cand_tokens = tokenize(candidate);
    let ref_tokens = tokenize(reference);
    if cand_tokens.is_empty() || ref_tokens.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand_tokens, &ref_tokens) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / cand_tokens.len() as f64;
    let recall = lcs / ref_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Positive-class counts for one disease over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DiseaseCounts {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
}

/// Corpus-level clinical-efficacy report: per-disease positive-class counts
/// plus micro- and macro-averaged precision/recall/F1. Micro is the
/// headline number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeReport {
    pub per_disease: Vec<DiseaseCounts>,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Whether the uncertain status counts as positive for CE purposes. Off by
/// default: only status 1 is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertainHandling {
    NotPositive,
    AsPositive,
}

fn is_positive(status: DiseaseStatus, handling: UncertainHandling) -> bool {
    match handling {
        UncertainHandling::NotPositive => status == DiseaseStatus::Positive,
        UncertainHandling::AsPositive => {
            status == DiseaseStatus::Positive || status == DiseaseStatus::Uncertain
        }
    }
}

/// Disease-level precision/recall/F1 over paired report lists.
pub fn ce_metrics(
    pred_reports: &[String],
    gt_reports: &[String],
    vocab: &DiseaseVocabulary,
    labeler: &dyn LabelerBackend,
    uncertain: UncertainHandling,
) -> Result<CeReport> {
    if pred_reports.len() != gt_reports.len() {
        return Err(Error::Arity(format!(
            "prediction list has {} reports, reference list has {}",
            pred_reports.len(),
            gt_reports.len()
        )));
    }
    let mut per_disease = vec![DiseaseCounts::default(); vocab.len()];
    for (pred, gt) in pred_reports.iter().zip(gt_reports) {
        let pred_status = extract_status(pred, vocab, labeler)?;
        let gt_status = extract_status(gt, vocab, labeler)?;
        for k in 0..vocab.len() {
            let p = is_positive(pred_status.get(k), uncertain);
            let g = is_positive(gt_status.get(k), uncertain);
            match (p, g) {
                (true, true) => per_disease[k].tp += 1,
                (true, false) => per_disease[k].fp += 1,
                (false, true) => per_disease[k].fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(ce_report_from_counts(per_disease))
}

/// Aggregate per-disease counts into the CE report.
pub fn ce_report_from_counts(per_disease: Vec<DiseaseCounts>) -> CeReport {
    let tp: usize = per_disease.iter().map(|c| c.tp).sum();
    let fp: usize = per_disease.iter().map(|c| c.fp).sum();
    let fn_: usize = per_disease.iter().map(|c| c.fn_).sum();
    let micro_precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let micro_recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let micro_f1 = f1(micro_precision, micro_recall);

    let k = per_disease.len().max(1) as f64;
    let mut macro_precision = 0.0;
    let mut macro_recall = 0.0;
    let mut macro_f1 = 0.0;
    for c in &per_disease {
        let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
        let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
        macro_precision += p / k;
        macro_recall += r / k;
        macro_f1 += f1(p, r) / k;
    }
    CeReport {
        per_disease,
        micro_precision,
        micro_recall,
        micro_f1,
        macro_precision,
        macro_recall,
        macro_f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeler::RuleLabeler;

    #[test]
    fn bleu_identity_is_one() {
        let text = "the heart size is normal";
        assert_eq!(bleu(text, &[text], 1).unwrap(), 1.0);
        assert_eq!(bleu(text, &[text], 4).unwrap(), 1.0);
    }

    #[test]
    fn bleu_disjoint_is_zero() {
        assert_eq!(bleu("alpha beta", &["gamma delta"], 1).unwrap(), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty_hand_case() {
        let score = bleu("the cat sat", &["the cat sat down"], 1).unwrap();
        let expected = (1.0f64 - 4.0 / 3.0).exp();
        assert!((score - expected).abs() < 1e-9, "score {score}");
        assert!((score - 0.7165).abs() < 1e-4);
    }

    #[test]
    fn bleu_monotone_nonincreasing_in_order() {
        let candidate = "the cat sat on the mat today";
        let reference = "the cat sat on a mat";
        let mut prev = f64::INFINITY;
        for n in 1..=4 {
            let score = bleu(candidate, &[reference], n).unwrap();
            assert!(score <= prev + 1e-12, "order {n}: {score} > {prev}");
            prev = score;
        }
    }

    #[test]
    fn bleu_rejects_bad_order_and_zeroes_empty() {
        assert!(bleu("a", &["a"], 0).is_err());
        assert!(bleu("a", &["a"], 5).is_err());
        assert_eq!(bleu("", &["a"], 1).unwrap(), 0.0);
        assert_eq!(bleu("a", &[], 1).unwrap(), 0.0);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        assert_eq!(rouge_l("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l("a b", "c d"), 0.0);
        assert_eq!(rouge_l("", "a"), 0.0);
    }

    #[test]
    fn rouge_hand_case() {
        let score = rouge_l("a b c", "a x c");
        assert!((score - 2.0 / 3.0).abs() < 1e-9, "score {score}");
    }

    #[test]
    fn ce_identity_is_perfect() {
        let vocab = DiseaseVocabulary::default_chest_xray();
        let reports = vec![
            "There is cardiomegaly.".to_string(),
            "There is a pleural effusion. No pneumothorax.".to_string(),
        ];
        let report = ce_metrics(
            &reports,
            &reports,
            &vocab,
            &RuleLabeler,
            UncertainHandling::NotPositive,
        )
        .unwrap();
        assert_eq!(report.micro_precision, 1.0);
        assert_eq!(report.micro_recall, 1.0);
        assert_eq!(report.micro_f1, 1.0);
    }

    #[test]
    fn ce_all_blank_predictions_have_zero_recall() {
        let vocab = DiseaseVocabulary::default_chest_xray();
        let preds = vec!["".to_string()];
        let gts = vec!["There is cardiomegaly.".to_string()];
        let report =
            ce_metrics(&preds, &gts, &vocab, &RuleLabeler, UncertainHandling::NotPositive).unwrap();
        assert_eq!(report.micro_recall, 0.0);
        assert_eq!(report.micro_f1, 0.0);
    }

    #[test]
    fn ce_two_study_hand_count() {
        // pred {A+, B+} / {A+}; gt {A+} / {A+, B+} -> tp=2 fp=1 fn=1.
        let vocab = DiseaseVocabulary::new(vec!["Alpha".into(), "Beta".into()]).unwrap();
        let preds = vec![
            "There is alpha. There is beta.".to_string(),
            "There is alpha.".to_string(),
        ];
        let gts = vec![
            "There is alpha.".to_string(),
            "There is alpha. There is beta.".to_string(),
        ];
        let report =
            ce_metrics(&preds, &gts, &vocab, &RuleLabeler, UncertainHandling::NotPositive).unwrap();
        assert!((report.micro_precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.micro_recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((report.micro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ce_invariant_under_reordering() {
        let vocab = DiseaseVocabulary::default_chest_xray();
        let preds = vec![
            "There is cardiomegaly.".to_string(),
            "There is pneumonia.".to_string(),
        ];
        let gts = vec![
            "There is cardiomegaly. There is interstitial edema.".to_string(),
            "No pneumonia.".to_string(),
        ];
        let a = ce_metrics(&preds, &gts, &vocab, &RuleLabeler, UncertainHandling::NotPositive)
            .unwrap();
        let preds_rev: Vec<String> = preds.iter().rev().cloned().collect();
        let gts_rev: Vec<String> = gts.iter().rev().cloned().collect();
        let b = ce_metrics(&preds_rev, &gts_rev, &vocab, &RuleLabeler, UncertainHandling::NotPositive)
            .unwrap();
        assert_eq!(a.micro_f1, b.micro_f1);
        assert_eq!(a.macro_f1, b.macro_f1);
    }

    #[test]
    fn ce_length_mismatch_errors() {
        let vocab = DiseaseVocabulary::default_chest_xray();
        let err = ce_metrics(
            &["a".to_string()],
            &[],
            &vocab,
            &RuleLabeler,
            UncertainHandling::NotPositive,
        );
        assert!(matches!(err, Err(Error::Arity(_))));
    }

    #[test]
    fn uncertain_as_positive_switch() {
        let vocab = DiseaseVocabulary::default_chest_xray();
        let preds = vec!["Possible pneumonia.".to_string()];
        let gts = vec!["There is pneumonia.".to_string()];
        let off =
            ce_metrics(&preds, &gts, &vocab, &RuleLabeler, UncertainHandling::NotPositive).unwrap();
        assert_eq!(off.micro_f1, 0.0);
        let on =
            ce_metrics(&preds, &gts, &vocab, &RuleLabeler, UncertainHandling::AsPositive).unwrap();
        assert_eq!(on.micro_f1, 1.0);
    }
}
