//! Self-correcting preference learning: disease-level preference dataset
//! construction, pair judging, a lightweight preference predictor, and
//! dual-threshold KL filtering of a trustworthy subset.

mod predictor;

pub use predictor::{
    ce_loss_and_grad, train_predictor, FeatureVector, PredictorHyperparams, PredictorModel,
};

use serde::{Deserialize, Serialize};

use crate::corpus::StudyRecord;
use crate::labeler::{segment_descriptions, DiseaseStatus, DiseaseVocabulary, LabelerBackend, RuleLabeler};
use crate::llm::ChatClient;
use crate::{Error, Result};

/// Two-way preference label over (candidate, reference):
/// `Agree` = (1,0) candidate consistent with the reference,
/// `Contradict` = (0,1) candidate contradicts the reference,
/// `Uncertain` = (0.5,0.5) indistinguishable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PreferenceLabel {
    Agree,
    Contradict,
    Uncertain,
}

impl PreferenceLabel {
    pub fn distribution(self) -> [f64; 2] {
        match self {
            PreferenceLabel::Agree => [1.0, 0.0],
            PreferenceLabel::Contradict => [0.0, 1.0],
            PreferenceLabel::Uncertain => [0.5, 0.5],
        }
    }

    pub fn from_distribution(d: [f64; 2]) -> Result<Self> {
        if d == [1.0, 0.0] {
            Ok(PreferenceLabel::Agree)
        } else if d == [0.0, 1.0] {
            Ok(PreferenceLabel::Contradict)
        } else if d == [0.5, 0.5] {
            Ok(PreferenceLabel::Uncertain)
        } else {
            Err(Error::Validation(format!(
                "preference label must be (1,0), (0,1), or (0.5,0.5), got ({},{})",
                d[0], d[1]
            )))
        }
    }

    /// Swap agree and contradict; uncertain is its own inverse. Used to
    /// build label-noise fixtures.
    pub fn flipped(self) -> Self {
        match self {
            PreferenceLabel::Agree => PreferenceLabel::Contradict,
            PreferenceLabel::Contradict => PreferenceLabel::Agree,
            PreferenceLabel::Uncertain => PreferenceLabel::Uncertain,
        }
    }
}

impl Serialize for PreferenceLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.distribution().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PreferenceLabel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let d = <[f64; 2]>::deserialize(deserializer)?;
        PreferenceLabel::from_distribution(d).map_err(serde::de::Error::custom)
    }
}

/// One unit of preference supervision: a candidate disease description, the
/// reference description for the same disease, and the judged label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub study_id: String,
    /// Observation index within the study.
    pub n: usize,
    /// Disease index within the vocabulary.
    pub k: usize,
    pub candidate: String,
    pub reference: String,
    pub label: PreferenceLabel,
}

/// Judges a (candidate, reference) description pair for one disease.
pub trait JudgeBackend: Send + Sync {
    fn judge(
        &self,
        candidate: &str,
        reference: &str,
        disease_index: usize,
        vocab: &DiseaseVocabulary,
    ) -> Result<PreferenceLabel>;
}

/// Deterministic judge: labels both texts and compares the statuses for the
/// disease under judgment. Equal non-blank statuses agree; a positive
/// against a negative contradicts; anything involving blank or uncertain is
/// indistinguishable.
#[derive(Debug, Default)]
pub struct RuleJudge {
    labeler: RuleLabeler,
}

impl JudgeBackend for RuleJudge {
    fn judge(
        &self,
        candidate: &str,
        reference: &str,
        disease_index: usize,
        vocab: &DiseaseVocabulary,
    ) -> Result<PreferenceLabel> {
        let cand_status = self.labeler.extract(candidate, vocab)?.get(disease_index);
        let ref_status = self.labeler.extract(reference, vocab)?.get(disease_index);
        Ok(judge_statuses(cand_status, ref_status))
    }
}

/// The comparison rule shared by the rule judge.
pub fn judge_statuses(candidate: DiseaseStatus, reference: DiseaseStatus) -> PreferenceLabel {
    use DiseaseStatus::*;
    if candidate == reference && candidate != Blank {
        return PreferenceLabel::Agree;
    }
    match (candidate, reference) {
        (Positive, Negative) | (Negative, Positive) => PreferenceLabel::Contradict,
        _ => PreferenceLabel::Uncertain,
    }
}

/// LLM-backed judge: asks a chat model to compare the candidate against the
/// reference description and answer with one token.
pub struct LlmJudge {
    pub client: ChatClient,
}

impl JudgeBackend for LlmJudge {
    fn judge(
        &self,
        candidate: &str,
        reference: &str,
        disease_index: usize,
        vocab: &DiseaseVocabulary,
    ) -> Result<PreferenceLabel> {
        let system = "You compare a candidate radiology finding description against a \
                      reference description and answer with exactly one word.";
        let user = format!(
            "Disease: {label}\n\
             Reference description (ground truth): {reference:?}\n\
             Candidate description: {candidate:?}\n\
             Answer AGREE if the candidate is consistent with the reference for this disease, \
             CONTRADICT if it asserts the opposite finding, or UNCERTAIN if it cannot be \
             reliably judged.",
            label = vocab.label(disease_index),
        );
        let answer = self.client.complete(system, &user)?;
        let normalized = answer.trim().to_uppercase();
        if normalized.starts_with("AGREE") {
            Ok(PreferenceLabel::Agree)
        } else if normalized.starts_with("CONTRADICT") {
            Ok(PreferenceLabel::Contradict)
        } else if normalized.starts_with("UNCERTAIN") {
            Ok(PreferenceLabel::Uncertain)
        } else {
            Err(Error::Protocol(format!(
                "judge for disease {disease_index} returned unparseable verdict {answer:?}"
            )))
        }
    }
}

/// What to do when the judge fails on a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeFailurePolicy {
    /// Skip the triplet with a logged warning.
    Skip,
    /// Abort dataset construction.
    Fail,
}

/// Judge one (candidate, reference) pair for one disease.
pub fn judge_pair(
    candidate: &str,
    reference: &str,
    disease_index: usize,
    vocab: &DiseaseVocabulary,
    judge: &dyn JudgeBackend,
) -> Result<PreferenceLabel> {
    judge.judge(candidate, reference, disease_index, vocab)
}

/// Build the disease-level preference dataset: for every study, segment each
/// candidate observation and the reference report into per-disease
/// descriptions, pair them, and judge each pair. Studies without candidate
/// observations are skipped. Dataset size is the sum over judged studies of
/// `N * K`.
pub fn build_preference_dataset(
    records: &[StudyRecord],
    judge: &dyn JudgeBackend,
    vocab: &DiseaseVocabulary,
    on_failure: JudgeFailurePolicy,
) -> Result<Vec<PreferenceTriplet>> {
    let mut dataset = Vec::new();
    for record in records {
        if record.candidate_observations.is_empty() {
            continue;
        }
        let reference_set = segment_descriptions(&record.ground_truth_report, vocab);
        for (n, observation) in record.candidate_observations.iter().enumerate() {
            let candidate_set = segment_descriptions(observation, vocab);
            for k in 0..vocab.len() {
                let candidate = &candidate_set.descriptions[k];
                let reference = &reference_set.descriptions[k];
                match judge.judge(candidate, reference, k, vocab) {
                    Ok(label) => dataset.push(PreferenceTriplet {
                        study_id: record.study_id.clone(),
                        n,
                        k,
                        candidate: candidate.clone(),
                        reference: reference.clone(),
                        label,
                    }),
                    Err(e) => match on_failure {
                        JudgeFailurePolicy::Skip => {
                            log::warn!(
                                "judge failed for study {} observation {n} disease {k}: {e}",
                                record.study_id
                            );
                        }
                        JudgeFailurePolicy::Fail => {
                            return Err(e.at_stage("judge"));
                        }
                    },
                }
            }
        }
    }
    Ok(dataset)
}

/// KL divergence of the predicted pair distribution from a target label:
/// `sum_i target_i * ln(target_i / predicted_i)` with `0 * ln(0/q) = 0`.
/// Predicted components must be strictly positive and sum to one.
pub fn kl_divergence(target: &PreferenceLabel, predicted: [f64; 2]) -> Result<f64> {
    let sum = predicted[0] + predicted[1];
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Numerical(format!(
            "predicted distribution sums to {sum}, expected 1"
        )));
    }
    let target = target.distribution();
    let mut kl = 0.0;
    for i in 0..2 {
        if target[i] > 0.0 {
            if predicted[i] <= 0.0 {
                return Err(Error::Numerical(
                    "predicted distribution has a zero component on the target support".into(),
                ));
            }
            kl += target[i] * (target[i] / predicted[i]).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Filtering mode for the trustworthy subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Keep `tau_lower < KL < tau_upper`, the typeset selection band.
    Band,
    /// Keep `KL < tau_lower`, the low-divergence reading.
    BelowLower,
}

/// How the upper threshold is produced for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TauUpperPolicy {
    /// `mean(batch) + c * std(batch)`, floored at `tau_lower + delta`.
    Adaptive { c: f64, delta: f64 },
    /// A fixed threshold (`inf` disables the upper bound).
    Fixed { value: f64 },
}

impl Default for TauUpperPolicy {
    fn default() -> Self {
        TauUpperPolicy::Adaptive { c: 1.0, delta: 1e-3 }
    }
}

/// Dual-threshold filter schedule. The lower threshold starts at
/// `3 ln 10` and decays linearly per epoch at `decay_rate`, reaching zero at
/// `1 / decay_rate` epochs; the upper threshold is produced per batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSchedule {
    pub tau_lower_initial: f64,
    pub decay_rate: f64,
    pub tau_upper_policy: TauUpperPolicy,
    pub mode: FilterMode,
    /// Training-step counter, measured in epochs.
    pub step: u32,
}

impl Default for FilterSchedule {
    fn default() -> Self {
        FilterSchedule {
            tau_lower_initial: 3.0 * 10.0f64.ln(),
            decay_rate: 1.0 / 30.0,
            tau_upper_policy: TauUpperPolicy::default(),
            mode: FilterMode::Band,
            step: 0,
        }
    }
}

/// Lower threshold at a given epoch: linear decay clamped at zero. A
/// `tau_lower_initial` of negative infinity disables the lower bound
/// entirely.
pub fn tau_lower(epoch: u32, sched: &FilterSchedule) -> f64 {
    if sched.tau_lower_initial == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    (sched.tau_lower_initial * (1.0 - sched.decay_rate * epoch as f64)).max(0.0)
}

/// Upper threshold for a batch of KL values. The adaptive rule uses the
/// batch mean plus `c` population standard deviations, floored at
/// `tau_lower + delta`.
pub fn tau_upper(batch_kls: &[f64], sched: &FilterSchedule) -> Result<f64> {
    match sched.tau_upper_policy {
        TauUpperPolicy::Fixed { value } => Ok(value),
        TauUpperPolicy::Adaptive { c, delta } => {
            if batch_kls.is_empty() {
                return Err(Error::Schedule("tau_upper requires a non-empty batch".into()));
            }
            let n = batch_kls.len() as f64;
            let mean = batch_kls.iter().sum::<f64>() / n;
            let var = batch_kls.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let adaptive = mean + c * var.sqrt();
            let floor = tau_lower(sched.step, sched) + delta;
            Ok(adaptive.max(floor))
        }
    }
}

/// Outcome of filtering: the retained triplets plus the thresholds used.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub retained: Vec<PreferenceTriplet>,
    pub tau_lower: f64,
    pub tau_upper: f64,
    pub kls: Vec<f64>,
}

/// Select the trustworthy subset of a dataset under the schedule's mode.
/// Both bounds are strict.
pub fn filter_trustworthy(
    dataset: &[PreferenceTriplet],
    model: &PredictorModel,
    sched: &FilterSchedule,
) -> Result<FilterOutcome> {
    let lower = tau_lower(sched.step, sched);
    if dataset.is_empty() {
        return Ok(FilterOutcome {
            retained: Vec::new(),
            tau_lower: lower,
            tau_upper: f64::INFINITY,
            kls: Vec::new(),
        });
    }
    let kls: Vec<f64> = dataset
        .iter()
        .map(|t| kl_divergence(&t.label, model.predict(&t.candidate, &t.reference)))
        .collect::<Result<Vec<_>>>()?;
    let upper = tau_upper(&kls, sched)?;
    if sched.mode == FilterMode::Band && upper <= lower {
        return Err(Error::Schedule(format!(
            "tau_upper ({upper}) must exceed tau_lower ({lower})"
        )));
    }
    let retained = dataset
        .iter()
        .zip(&kls)
        .filter(|(_, &kl)| match sched.mode {
            FilterMode::Band => lower < kl && kl < upper,
            FilterMode::BelowLower => kl < lower,
        })
        .map(|(t, _)| t.clone())
        .collect();
    Ok(FilterOutcome { retained, tau_lower: lower, tau_upper: upper, kls })
}

/// Write a preference dataset as JSONL:
/// `{"study_id":s,"n":i,"k":i,"candidate":s,"reference":s,"label":[f,f]}`.
pub fn write_preference_dataset<W: std::io::Write>(
    out: &mut W,
    dataset: &[PreferenceTriplet],
) -> Result<()> {
    for triplet in dataset {
        let line = serde_json::to_string(triplet)
            .map_err(|e| Error::Validation(format!("unserializable triplet: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Load a preference dataset written by [`write_preference_dataset`].
pub fn load_preference_dataset(path: &std::path::Path) -> Result<Vec<PreferenceTriplet>> {
    let raw = std::fs::read_to_string(path)?;
    let mut dataset = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let triplet: PreferenceTriplet = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        dataset.push(triplet);
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticCorpusConfig};

    fn vocab() -> DiseaseVocabulary {
        DiseaseVocabulary::default_chest_xray()
    }

    #[test]
    fn dataset_size_is_n_times_k() {
        let v = vocab();
        let cfg = SyntheticCorpusConfig { num_studies: 1, ..Default::default() };
        let records = generate_synthetic_corpus(&cfg, &v).unwrap();
        let dataset =
            build_preference_dataset(&records, &RuleJudge::default(), &v, JudgeFailurePolicy::Fail)
                .unwrap();
        assert_eq!(dataset.len(), 4 * 14);
    }

    #[test]
    fn identical_descriptions_agree() {
        let v = vocab();
        let k = v.index_of("Cardiomegaly").unwrap();
        let label = judge_pair(
            "There is cardiomegaly.",
            "There is cardiomegaly.",
            k,
            &v,
            &RuleJudge::default(),
        )
        .unwrap();
        assert_eq!(label, PreferenceLabel::Agree);
    }

    #[test]
    fn opposite_polarity_contradicts() {
        let v = vocab();
        let k = v.index_of("Pneumothorax").unwrap();
        let label = judge_pair(
            "No pneumothorax.",
            "There is a pneumothorax.",
            k,
            &v,
            &RuleJudge::default(),
        )
        .unwrap();
        assert_eq!(label, PreferenceLabel::Contradict);
    }

    #[test]
    fn blank_or_uncertain_is_indistinguishable() {
        let v = vocab();
        let k = v.index_of("Edema").unwrap();
        let label =
            judge_pair("", "Possible interstitial edema.", k, &v, &RuleJudge::default()).unwrap();
        assert_eq!(label, PreferenceLabel::Uncertain);
        let label = judge_pair("", "", k, &v, &RuleJudge::default()).unwrap();
        assert_eq!(label, PreferenceLabel::Uncertain);
    }

    #[test]
    fn kl_analytic_cases() {
        let ln2 = 2.0f64.ln();
        let kl = kl_divergence(&PreferenceLabel::Agree, [0.5, 0.5]).unwrap();
        assert!((kl - ln2).abs() < 1e-9);

        let kl = kl_divergence(&PreferenceLabel::Uncertain, [0.5, 0.5]).unwrap();
        assert!(kl.abs() < 1e-12);

        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let kl = kl_divergence(&PreferenceLabel::Uncertain, [0.9, 0.1]).unwrap();
        assert!((kl - expected).abs() < 1e-9);
    }

    #[test]
    fn kl_rejects_bad_distributions() {
        assert!(kl_divergence(&PreferenceLabel::Agree, [0.7, 0.7]).is_err());
        assert!(kl_divergence(&PreferenceLabel::Agree, [0.0, 1.0]).is_err());
    }

    #[test]
    fn tau_lower_schedule_values() {
        let sched = FilterSchedule::default();
        assert!((tau_lower(0, &sched) - 3.0 * 10.0f64.ln()).abs() < 1e-12);
        assert_eq!(tau_lower(30, &sched), 0.0);
        assert_eq!(tau_lower(45, &sched), 0.0);
        let mid = 3.0 * 10.0f64.ln() * 0.5;
        assert!((tau_lower(15, &sched) - mid).abs() < 1e-9);
    }

    #[test]
    fn tau_upper_mean_plus_std() {
        let sched = FilterSchedule { step: 30, ..Default::default() };
        // Population std of {0,1} is 0.5.
        let v = tau_upper(&[0.0, 1.0], &sched).unwrap();
        assert!((v - 1.0).abs() < 1e-12);

        // Zero variance floors at tau_lower + delta when that is larger.
        let sched0 = FilterSchedule::default();
        let v = tau_upper(&[0.1, 0.1], &sched0).unwrap();
        assert!((v - (tau_lower(0, &sched0) + 1e-3)).abs() < 1e-12);

        // Single element: the value itself, floored.
        let v = tau_upper(&[9.0], &sched).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
    }

    #[test]
    fn band_keeps_nothing_when_all_kl_zero() {
        let dataset = vec![PreferenceTriplet {
            study_id: "s".into(),
            n: 0,
            k: 0,
            candidate: "".into(),
            reference: "".into(),
            label: PreferenceLabel::Uncertain,
        }];
        // Untrained model predicts (0.5, 0.5), so KL against uncertain is 0.
        let model = PredictorModel::untrained();
        let sched = FilterSchedule::default();
        let outcome = filter_trustworthy(&dataset, &model, &sched).unwrap();
        assert!(outcome.retained.is_empty());
    }

    #[test]
    fn degenerate_bounds_keep_everything() {
        let dataset: Vec<PreferenceTriplet> = (0..4)
            .map(|i| PreferenceTriplet {
                study_id: format!("s{i}"),
                n: 0,
                k: 0,
                candidate: "a".into(),
                reference: "b".into(),
                label: if i % 2 == 0 { PreferenceLabel::Agree } else { PreferenceLabel::Uncertain },
            })
            .collect();
        let model = PredictorModel::untrained();
        let sched = FilterSchedule {
            tau_lower_initial: f64::NEG_INFINITY,
            tau_upper_policy: TauUpperPolicy::Fixed { value: f64::INFINITY },
            mode: FilterMode::Band,
            ..Default::default()
        };
        let outcome = filter_trustworthy(&dataset, &model, &sched).unwrap();
        assert_eq!(outcome.retained.len(), dataset.len());
    }

    #[test]
    fn band_and_below_lower_are_disjoint() {
        let v = vocab();
        let cfg = SyntheticCorpusConfig { num_studies: 3, ..Default::default() };
        let records = generate_synthetic_corpus(&cfg, &v).unwrap();
        let dataset =
            build_preference_dataset(&records, &RuleJudge::default(), &v, JudgeFailurePolicy::Fail)
                .unwrap();
        let model = PredictorModel::untrained();
        let sched_band = FilterSchedule {
            step: 20,
            mode: FilterMode::Band,
            tau_upper_policy: TauUpperPolicy::Fixed { value: 10.0 },
            ..Default::default()
        };
        let sched_below = FilterSchedule { mode: FilterMode::BelowLower, ..sched_band.clone() };
        let band = filter_trustworthy(&dataset, &model, &sched_band).unwrap();
        let below = filter_trustworthy(&dataset, &model, &sched_below).unwrap();
        for t in &band.retained {
            assert!(!below.retained.contains(t));
        }
        assert_eq!(band.tau_lower, below.tau_lower);
    }

    #[test]
    fn raising_tau_upper_is_monotone() {
        let v = vocab();
        let cfg = SyntheticCorpusConfig { num_studies: 3, ..Default::default() };
        let records = generate_synthetic_corpus(&cfg, &v).unwrap();
        let dataset =
            build_preference_dataset(&records, &RuleJudge::default(), &v, JudgeFailurePolicy::Fail)
                .unwrap();
        let model = PredictorModel::untrained();
        let mut previous: Option<Vec<PreferenceTriplet>> = None;
        for upper in [0.2, 0.5, 0.8, 2.0] {
            let sched = FilterSchedule {
                step: 30,
                mode: FilterMode::Band,
                tau_upper_policy: TauUpperPolicy::Fixed { value: upper },
                ..Default::default()
            };
            let outcome = filter_trustworthy(&dataset, &model, &sched).unwrap();
            if let Some(prev) = &previous {
                for t in prev {
                    assert!(outcome.retained.contains(t), "raising tau_upper dropped a triplet");
                }
            }
            previous = Some(outcome.retained);
        }
    }

    #[test]
    fn band_requires_upper_above_lower() {
        let dataset = vec![PreferenceTriplet {
            study_id: "s".into(),
            n: 0,
            k: 0,
            candidate: "".into(),
            reference: "".into(),
            label: PreferenceLabel::Agree,
        }];
        let model = PredictorModel::untrained();
        let sched = FilterSchedule {
            mode: FilterMode::Band,
            tau_upper_policy: TauUpperPolicy::Fixed { value: 0.5 },
            ..Default::default()
        };
        assert!(matches!(
            filter_trustworthy(&dataset, &model, &sched),
            Err(Error::Schedule(_))
        ));
    }

    #[test]
    fn dataset_file_round_trip() {
        let v = vocab();
        let cfg = SyntheticCorpusConfig { num_studies: 2, ..Default::default() };
        let records = generate_synthetic_corpus(&cfg, &v).unwrap();
        let dataset =
            build_preference_dataset(&records, &RuleJudge::default(), &v, JudgeFailurePolicy::Fail)
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefs.jsonl");
        let mut buf = Vec::new();
        write_preference_dataset(&mut buf, &dataset).unwrap();
        std::fs::write(&path, &buf).unwrap();
        let reloaded = load_preference_dataset(&path).unwrap();
        assert_eq!(dataset, reloaded);
    }

    #[test]
    fn label_round_trip_and_rejection() {
        for label in [PreferenceLabel::Agree, PreferenceLabel::Contradict, PreferenceLabel::Uncertain] {
            assert_eq!(PreferenceLabel::from_distribution(label.distribution()).unwrap(), label);
        }
        assert!(PreferenceLabel::from_distribution([0.6, 0.4]).is_err());
    }
}
