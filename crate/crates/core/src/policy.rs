//! Toy stochastic report policy and REINFORCE training loop.
//!
//! The policy is a per-disease template sampler, not a token-level decoder:
//! for each study (the desk-scale stand-in for the image) it holds a block
//! of logits per disease over (intent, template) cells, where the intent is
//! assert-positive, assert-negative, or omit. Report log-probabilities
//! factorize over diseases, which keeps the score-function gradient exact
//! and cheap.
//!
//! One training step closes the full cycle: sample N observations, judge
//! them against the reference descriptions, filter a trustworthy subset,
//! derive evidence, refine, score the refined report with the group-wise
//! alignment losses, and update the policy with a baselined advantage. The
//! scalar reward is the negated total alignment loss.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::Backends;
use crate::binio;
use crate::corpus::StudyRecord;
use crate::gear::{gear_reward, GearConfig, GearLossBreakdown};
use crate::labeler::{DiseaseStatus, DiseaseStatusVector, DiseaseVocabulary};
use crate::metrics::{ce_metrics, CeReport, UncertainHandling};
use crate::refine::{derive_trusted_evidence, refine};
use crate::spl::{
    build_preference_dataset, filter_trustworthy, train_predictor, ce_loss_and_grad,
    FilterMode, FilterSchedule, JudgeFailurePolicy, PredictorHyperparams, PredictorModel,
    PreferenceTriplet, TauUpperPolicy,
};
use crate::templates;
use crate::{Error, Result};

/// What a sampled per-disease action asserts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionIntent {
    AssertPositive,
    AssertNegative,
    Omit,
}

const INTENTS: [ActionIntent; 3] =
    [ActionIntent::AssertPositive, ActionIntent::AssertNegative, ActionIntent::Omit];

/// Initial shape of a fresh context block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyInit {
    /// All logits zero.
    Uniform,
    /// Assert-positive cells biased up, the fixture for the suppression
    /// experiments.
    HallucinationProne { positive_bias: f64 },
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-study, per-disease softmax policy over (intent, template) cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    k: usize,
    templates_per_disease: usize,
    pub temperature: f64,
    pub seed: u64,
    draw_count: u64,
    init: PolicyInit,
    contexts: BTreeMap<String, Vec<f64>>,
}

/// One sampled observation: the rendered report text, the per-disease action
/// cells, and the log-probability of the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledObservation {
    pub text: String,
    pub actions: Vec<usize>,
    pub log_prob: f64,
}

impl ToyPolicy {
    pub fn new(
        k: usize,
        templates_per_disease: usize,
        temperature: f64,
        seed: u64,
        init: PolicyInit,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("policy needs at least one disease".into()));
        }
        if templates_per_disease == 0 || templates_per_disease > templates::MAX_TEMPLATES {
            return Err(Error::Config(format!(
                "templates_per_disease must be in 1..={}, got {templates_per_disease}",
                templates::MAX_TEMPLATES
            )));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        Ok(ToyPolicy {
            k,
            templates_per_disease,
            temperature,
            seed,
            draw_count: 0,
            init,
            contexts: BTreeMap::new(),
        })
    }

    pub fn num_diseases(&self) -> usize {
        self.k
    }

    /// Cells per disease: 3 intents times the template count.
    pub fn actions_per_disease(&self) -> usize {
        INTENTS.len() * self.templates_per_disease
    }

    /// Total parameters per context block.
    pub fn context_len(&self) -> usize {
        self.k * self.actions_per_disease()
    }

    pub fn intent_of(&self, cell: usize) -> ActionIntent {
        INTENTS[cell / self.templates_per_disease]
    }

    pub fn template_of(&self, cell: usize) -> usize {
        cell % self.templates_per_disease
    }

    pub fn cell_of(&self, intent: ActionIntent, template: usize) -> usize {
        let intent_idx = INTENTS.iter().position(|&i| i == intent).expect("known intent");
        intent_idx * self.templates_per_disease + template
    }

    fn fresh_block(&self) -> Vec<f64> {
        let mut block = vec![0.0; self.context_len()];
        if let PolicyInit::HallucinationProne { positive_bias } = self.init {
            let a = self.actions_per_disease();
            for k in 0..self.k {
                for t in 0..self.templates_per_disease {
                    block[k * a + self.cell_of(ActionIntent::AssertPositive, t)] = positive_bias;
                }
            }
        }
        block
    }

    /// Materialize the context block for a study.
    pub fn ensure_context(&mut self, study_id: &str) {
        if !self.contexts.contains_key(study_id) {
            let block = self.fresh_block();
            self.contexts.insert(study_id.to_string(), block);
        }
    }

    pub fn context_logits(&self, study_id: &str) -> Option<&[f64]> {
        self.contexts.get(study_id).map(|b| b.as_slice())
    }

    pub fn context_logits_mut(&mut self, study_id: &str) -> &mut [f64] {
        self.ensure_context(study_id);
        self.contexts.get_mut(study_id).expect("just ensured").as_mut_slice()
    }

    /// Add `delta` to the study's context block.
    pub fn apply_context_update(&mut self, study_id: &str, delta: &[f64]) -> Result<()> {
        let block = self.context_logits_mut(study_id);
        if delta.len() != block.len() {
            return Err(Error::Arity(format!(
                "update has {} entries, context block has {}",
                delta.len(),
                block.len()
            )));
        }
        for (w, d) in block.iter_mut().zip(delta) {
            *w += d;
        }
        Ok(())
    }

    /// Softmax of one disease's cells at the policy temperature.
    pub fn disease_probs(&self, block: &[f64], disease: usize) -> Vec<f64> {
        let a = self.actions_per_disease();
        let logits = &block[disease * a..(disease + 1) * a];
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / self.temperature).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Log-probability of a full action vector under the study's context.
    pub fn log_prob(&mut self, study_id: &str, actions: &[usize]) -> Result<f64> {
        if actions.len() != self.k {
            return Err(Error::Arity(format!(
                "action vector has {} entries for {} diseases",
                actions.len(),
                self.k
            )));
        }
        self.ensure_context(study_id);
        let block = self.contexts.get(study_id).expect("ensured");
        let mut total = 0.0;
        for (disease, &cell) in actions.iter().enumerate() {
            let probs = self.disease_probs(block, disease);
            total += probs[cell].ln();
        }
        Ok(total)
    }

    /// Gradient of [`Self::log_prob`] with respect to the context block:
    /// per disease, `(indicator - probs) / temperature`.
    pub fn grad_log_prob(&mut self, study_id: &str, actions: &[usize]) -> Result<Vec<f64>> {
        if actions.len() != self.k {
            return Err(Error::Arity(format!(
                "action vector has {} entries for {} diseases",
                actions.len(),
                self.k
            )));
        }
        self.ensure_context(study_id);
        let block = self.contexts.get(study_id).expect("ensured");
        let a = self.actions_per_disease();
        let mut grad = vec![0.0; block.len()];
        for (disease, &cell) in actions.iter().enumerate() {
            let probs = self.disease_probs(block, disease);
            for (i, p) in probs.iter().enumerate() {
                let indicator = if i == cell { 1.0 } else { 0.0 };
                grad[disease * a + i] = (indicator - p) / self.temperature;
            }
        }
        Ok(grad)
    }

    /// Supervised task loss: the negative log-likelihood of the target
    /// intents (positive for positive, negative for negative, omit for blank
    /// or uncertain), summed over diseases, with intent probabilities
    /// marginalized over templates. Returns the loss and its gradient over
    /// the context block.
    pub fn task_loss_and_grad(
        &mut self,
        study_id: &str,
        target: &DiseaseStatusVector,
    ) -> Result<(f64, Vec<f64>)> {
        if target.len() != self.k {
            return Err(Error::Arity(format!(
                "target status vector has {} entries for {} diseases",
                target.len(),
                self.k
            )));
        }
        self.ensure_context(study_id);
        let block = self.contexts.get(study_id).expect("ensured");
        let a = self.actions_per_disease();
        let mut grad = vec![0.0; block.len()];
        let mut loss = 0.0;
        for disease in 0..self.k {
            let intent = intent_target(target.get(disease));
            let probs = self.disease_probs(block, disease);
            let mass: f64 = (0..a).filter(|&c| self.intent_of(c) == intent).map(|c| probs[c]).sum();
            loss -= mass.ln();
            for (cell, p) in probs.iter().enumerate() {
                let in_target = self.intent_of(cell) == intent;
                let d = if in_target { p - p / mass } else { *p };
                grad[disease * a + cell] = d / self.temperature;
            }
        }
        Ok((loss, grad))
    }

    fn next_rng(&mut self) -> ChaCha8Rng {
        let stream = splitmix64(self.seed ^ splitmix64(self.draw_count));
        self.draw_count += 1;
        ChaCha8Rng::seed_from_u64(stream)
    }

    /// Sample one action vector plus its log-probability.
    fn sample_once(&mut self, study_id: &str, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
        self.ensure_context(study_id);
        let block = self.contexts.get(study_id).expect("ensured").clone();
        let mut actions = Vec::with_capacity(self.k);
        let mut log_prob = 0.0;
        for disease in 0..self.k {
            let probs = self.disease_probs(&block, disease);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            log_prob += probs[chosen].ln();
            actions.push(chosen);
        }
        (actions, log_prob)
    }

    /// Render the report for an action vector: per-disease template
    /// sentences in disease order, omissions skipped.
    pub fn render(&self, actions: &[usize], vocab: &DiseaseVocabulary) -> String {
        let mut sentences = Vec::new();
        for (disease, &cell) in actions.iter().enumerate() {
            let status = match self.intent_of(cell) {
                ActionIntent::AssertPositive => DiseaseStatus::Positive,
                ActionIntent::AssertNegative => DiseaseStatus::Negative,
                ActionIntent::Omit => continue,
            };
            if let Some(s) = templates::sentence(status, &vocab.phrase(disease), self.template_of(cell)) {
                sentences.push(s);
            }
        }
        sentences.join(" ")
    }
}

/// Target intent for the supervised task loss.
pub fn intent_target(status: DiseaseStatus) -> ActionIntent {
    match status {
        DiseaseStatus::Positive => ActionIntent::AssertPositive,
        DiseaseStatus::Negative => ActionIntent::AssertNegative,
        DiseaseStatus::Blank | DiseaseStatus::Uncertain => ActionIntent::Omit,
    }
}

/// Sample `n` candidate observations for a study. Log-probabilities sum the
/// per-disease factors exactly. Draws advance the policy's deterministic
/// stream.
pub fn sample_observations(
    policy: &mut ToyPolicy,
    study: &StudyRecord,
    n: usize,
    vocab: &DiseaseVocabulary,
) -> Result<Vec<SampledObservation>> {
    if n == 0 {
        return Err(Error::Config("must sample at least one observation".into()));
    }
    if vocab.len() != policy.k {
        return Err(Error::Arity(format!(
            "policy built for {} diseases, vocabulary has {}",
            policy.k,
            vocab.len()
        )));
    }
    let mut rng = policy.next_rng();
    let mut observations = Vec::with_capacity(n);
    for _ in 0..n {
        let (actions, log_prob) = policy.sample_once(&study.study_id, &mut rng);
        let text = policy.render(&actions, vocab);
        observations.push(SampledObservation { text, actions, log_prob });
    }
    Ok(observations)
}

/// Exponential running mean of rewards, the variance-reduction baseline.
/// The first update seeds the mean with the observed reward so early
/// advantages are not inflated by an arbitrary zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Baseline {
    pub mean: f64,
    pub count: u64,
    pub decay: f64,
}

impl Baseline {
    pub fn new() -> Self {
        Baseline { mean: 0.0, count: 0, decay: 0.9 }
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.mean
        }
    }

    pub fn update(&mut self, reward: f64) {
        if self.count == 0 {
            self.mean = reward;
        } else {
            self.mean = self.decay * self.mean + (1.0 - self.decay) * reward;
        }
        self.count += 1;
    }
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline::new()
    }
}

/// Training configuration for the policy loop.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    /// Candidate observations sampled per study per step.
    pub n_candidates: usize,
    /// Weight of the alignment-reward term in the composite objective.
    pub gamma: f64,
    pub seed: u64,
    pub temperature: f64,
    pub templates_per_disease: usize,
    pub policy_init: PolicyInit,
    pub gear: GearConfig,
    pub filter: FilterSchedule,
    pub predictor: PredictorHyperparams,
    /// Retrain the predictor from the triplet buffer every this many epochs;
    /// zero disables retraining.
    pub predictor_refresh_epochs: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            learning_rate: 1.0,
            n_candidates: 4,
            gamma: 0.5,
            seed: 0,
            temperature: 1.0,
            templates_per_disease: 3,
            policy_init: PolicyInit::Uniform,
            gear: GearConfig::default(),
            filter: FilterSchedule::default(),
            predictor: PredictorHyperparams::default(),
            predictor_refresh_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return Err(Error::Config("n_candidates must be at least 1".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.gear.validate()?;
        Ok(())
    }
}

/// Mutable training state threaded through the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub policy: ToyPolicy,
    pub predictor: PredictorModel,
    pub schedule: FilterSchedule,
    pub step: u64,
    pub gamma: f64,
    pub baseline: Baseline,
    /// Raw judged triplets accumulated since the last predictor refresh.
    pub buffer: Vec<PreferenceTriplet>,
    pub epoch: u32,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(vocab: &DiseaseVocabulary, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(TrainState {
            policy: ToyPolicy::new(
                vocab.len(),
                cfg.templates_per_disease,
                cfg.temperature,
                cfg.seed,
                cfg.policy_init,
            )?,
            predictor: PredictorModel::untrained(),
            schedule: cfg.filter.clone(),
            step: 0,
            gamma: cfg.gamma,
            baseline: Baseline::new(),
            buffer: Vec::new(),
            epoch: 0,
            history: Vec::new(),
        })
    }
}

/// Diagnostics from one step (or one evaluation of one study).
#[derive(Debug, Clone)]
pub struct StepStats {
    pub study_id: String,
    pub breakdown: GearLossBreakdown,
    /// Scalar reward handed to the policy gradient: the negated total loss.
    pub reward: f64,
    pub advantage: f64,
    pub refined_report: String,
    pub retained_triplets: usize,
    pub predictor_loss: f64,
}

/// The target status vector for the supervised term: the stored ground
/// truth when present, the labeler's reading of the reference report
/// otherwise.
fn target_statuses(
    study: &StudyRecord,
    vocab: &DiseaseVocabulary,
    backends: &Backends,
) -> Result<DiseaseStatusVector> {
    match &study.ground_truth_status {
        Some(status) if status.len() == vocab.len() => Ok(status.clone()),
        _ => crate::labeler::extract_status(&study.ground_truth_report, vocab, backends.labeler.as_ref()),
    }
}

/// Run the sample -> judge -> filter -> refine -> score pipeline for one
/// study without touching any parameters. Returns the stats plus the
/// sampled observations and judged triplets.
fn evaluate_study(
    state: &mut TrainState,
    study: &StudyRecord,
    vocab: &DiseaseVocabulary,
    backends: &Backends,
    cfg: &TrainConfig,
) -> Result<(StepStats, Vec<SampledObservation>, Vec<PreferenceTriplet>)> {
    let observations = sample_observations(&mut state.policy, study, cfg.n_candidates, vocab)?;
    let texts: Vec<String> = observations.iter().map(|o| o.text.clone()).collect();

    let judged_record = StudyRecord {
        study_id: study.study_id.clone(),
        image_ref: study.image_ref.clone(),
        ground_truth_report: study.ground_truth_report.clone(),
        candidate_observations: texts.clone(),
        ground_truth_status: study.ground_truth_status.clone(),
    };
    let triplets = build_preference_dataset(
        std::slice::from_ref(&judged_record),
        backends.judge.as_ref(),
        vocab,
        JudgeFailurePolicy::Skip,
    )?;

    let filtered = filter_trustworthy(&triplets, &state.predictor, &state.schedule)?;
    let evidence =
        derive_trusted_evidence(&filtered.retained, vocab, backends.labeler.as_ref(), &state.predictor)?;
    let refined = refine(&evidence, &texts, vocab, backends.refiner.as_ref())
        .map_err(|e| e.at_stage("refine"))?;

    let outcome = gear_reward(
        &refined,
        &study.ground_truth_report,
        study.image_ref.as_deref(),
        vocab,
        backends,
        &cfg.gear,
    )?;
    let reward = -outcome.breakdown.l_r;
    let predictor_loss = if triplets.is_empty() {
        0.0
    } else {
        ce_loss_and_grad(&state.predictor, &triplets, 0.0)?.0
    };
    let stats = StepStats {
        study_id: study.study_id.clone(),
        advantage: reward - state.baseline.value(),
        breakdown: outcome.breakdown,
        reward,
        refined_report: refined,
        retained_triplets: filtered.retained.len(),
        predictor_loss,
    };
    Ok((stats, observations, triplets))
}

/// One REINFORCE step on one study: evaluate the pipeline, then ascend
/// `gamma * advantage * sum_n grad log pi(O_n)` while descending the
/// supervised task gradient, update the baseline, and buffer the judged
/// triplets for the next predictor refresh.
pub fn reinforce_step(
    state: &mut TrainState,
    study: &StudyRecord,
    vocab: &DiseaseVocabulary,
    backends: &Backends,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let (stats, observations, triplets) = evaluate_study(state, study, vocab, backends, cfg)?;

    let mut update = vec![0.0; state.policy.context_len()];
    if cfg.gamma > 0.0 {
        for observation in &observations {
            let grad = state.policy.grad_log_prob(&study.study_id, &observation.actions)?;
            for (u, g) in update.iter_mut().zip(&grad) {
                *u += cfg.gamma * stats.advantage * g;
            }
        }
    }
    let target = target_statuses(study, vocab, backends)?;
    let (_, task_grad) = state.policy.task_loss_and_grad(&study.study_id, &target)?;
    for (u, g) in update.iter_mut().zip(&task_grad) {
        *u -= g;
    }
    for u in update.iter_mut() {
        *u *= cfg.learning_rate;
    }
    if update.iter().any(|u| !u.is_finite()) {
        return Err(Error::Training {
            step: state.step,
            message: format!("non-finite gradient for study {}", study.study_id),
        });
    }
    state.policy.apply_context_update(&study.study_id, &update)?;

    state.baseline.update(stats.reward);
    state.buffer.extend(triplets);
    state.step += 1;
    Ok(stats)
}

/// Per-epoch metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub mean_l_r: f64,
    pub mean_l_tp: f64,
    pub mean_l_fn: f64,
    pub mean_l_fp: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "epoch,mean_l_r,mean_l_tp,mean_l_fn,mean_l_fp,ce_precision,ce_recall,ce_f1";

/// Serialize a metrics history as CSV, header included.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for row in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.epoch,
            row.mean_l_r,
            row.mean_l_tp,
            row.mean_l_fn,
            row.mean_l_fp,
            row.ce_precision,
            row.ce_recall,
            row.ce_f1
        ));
    }
    out
}

/// Evaluation pass over the corpus: run the pipeline for every study in
/// corpus order without parameter updates, and aggregate the losses and the
/// clinical-efficacy metrics of the refined reports.
pub fn evaluation_pass(
    state: &mut TrainState,
    corpus: &[StudyRecord],
    vocab: &DiseaseVocabulary,
    backends: &Backends,
    cfg: &TrainConfig,
    epoch: u32,
) -> Result<EpochMetrics> {
    let mut sums = [0.0f64; 4];
    let mut refined_reports = Vec::with_capacity(corpus.len());
    let mut gt_reports = Vec::with_capacity(corpus.len());
    for study in corpus {
        let (stats, _, _) = evaluate_study(state, study, vocab, backends, cfg)?;
        sums[0] += stats.breakdown.l_r;
        sums[1] += stats.breakdown.l_tp;
        sums[2] += stats.breakdown.l_fn;
        sums[3] += stats.breakdown.l_fp;
        refined_reports.push(stats.refined_report);
        gt_reports.push(study.ground_truth_report.clone());
    }
    let n = corpus.len().max(1) as f64;
    let ce: CeReport = ce_metrics(
        &refined_reports,
        &gt_reports,
        vocab,
        backends.labeler.as_ref(),
        UncertainHandling::NotPositive,
    )?;
    Ok(EpochMetrics {
        epoch,
        mean_l_r: sums[0] / n,
        mean_l_tp: sums[1] / n,
        mean_l_fn: sums[2] / n,
        mean_l_fp: sums[3] / n,
        ce_precision: ce.micro_precision,
        ce_recall: ce.micro_recall,
        ce_f1: ce.micro_f1,
    })
}

fn shuffled_indices(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    const SHUFFLE_TAG: u64 = 0x73687566666c6500;
    let mut rng =
        ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(SHUFFLE_TAG ^ epoch as u64)));
    let mut indices: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    indices
}

/// Train over the corpus for `cfg.epochs` epochs. Epoch 0 of the history is
/// an evaluation pass with the initial parameters; each subsequent row is
/// the evaluation after that training epoch. Zero epochs return the state
/// untouched with an empty history. Fully deterministic for a fixed seed
/// with deterministic backends.
pub fn train(
    corpus: &[StudyRecord],
    vocab: &DiseaseVocabulary,
    backends: &Backends,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    let mut state = TrainState::new(vocab, cfg)?;
    resume_train(&mut state, corpus, vocab, backends, cfg)?;
    Ok(state)
}

/// Continue training an existing state up to `cfg.epochs` total epochs.
/// A state checkpointed at epoch `e` and resumed produces bit-identical
/// results to an uninterrupted run.
pub fn resume_train(
    state: &mut TrainState,
    corpus: &[StudyRecord],
    vocab: &DiseaseVocabulary,
    backends: &Backends,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if corpus.is_empty() && cfg.epochs > 0 {
        return Err(Error::Validation("cannot train on an empty corpus".into()));
    }
    if cfg.epochs == 0 {
        return Ok(());
    }
    if state.epoch == 0 && state.history.is_empty() {
        let row = evaluation_pass(state, corpus, vocab, backends, cfg, 0)?;
        state.history.push(row);
    }
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        state.schedule.step = state.epoch;
        for &idx in &shuffled_indices(corpus.len(), cfg.seed, epoch) {
            reinforce_step(state, &corpus[idx], vocab, backends, cfg)?;
        }
        if cfg.predictor_refresh_epochs > 0
            && epoch % cfg.predictor_refresh_epochs == 0
            && !state.buffer.is_empty()
        {
            let (model, _) =
                train_predictor(&state.buffer, PredictorModel::untrained(), &cfg.predictor)?;
            state.predictor = model;
            state.buffer.clear();
        }
        state.epoch = epoch;
        let row = evaluation_pass(state, corpus, vocab, backends, cfg, epoch)?;
        state.history.push(row);
    }
    Ok(())
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RGCK";
const CHECKPOINT_VERSION: u32 = 1;

fn write_schedule<W: Write>(w: &mut W, sched: &FilterSchedule) -> Result<()> {
    binio::write_f64(w, sched.tau_lower_initial)?;
    binio::write_f64(w, sched.decay_rate)?;
    match sched.tau_upper_policy {
        TauUpperPolicy::Adaptive { c, delta } => {
            binio::write_u32(w, 0)?;
            binio::write_f64(w, c)?;
            binio::write_f64(w, delta)?;
        }
        TauUpperPolicy::Fixed { value } => {
            binio::write_u32(w, 1)?;
            binio::write_f64(w, value)?;
            binio::write_f64(w, 0.0)?;
        }
    }
    binio::write_u32(w, match sched.mode {
        FilterMode::Band => 0,
        FilterMode::BelowLower => 1,
    })?;
    binio::write_u32(w, sched.step)?;
    Ok(())
}

fn read_schedule<R: Read>(r: &mut R) -> Result<FilterSchedule> {
    let tau_lower_initial = binio::read_f64(r)?;
    let decay_rate = binio::read_f64(r)?;
    let kind = binio::read_u32(r)?;
    let a = binio::read_f64(r)?;
    let b = binio::read_f64(r)?;
    let tau_upper_policy = match kind {
        0 => TauUpperPolicy::Adaptive { c: a, delta: b },
        1 => TauUpperPolicy::Fixed { value: a },
        other => return Err(Error::Validation(format!("unknown tau_upper policy {other}"))),
    };
    let mode = match binio::read_u32(r)? {
        0 => FilterMode::Band,
        1 => FilterMode::BelowLower,
        other => return Err(Error::Validation(format!("unknown filter mode {other}"))),
    };
    let step = binio::read_u32(r)?;
    Ok(FilterSchedule { tau_lower_initial, decay_rate, tau_upper_policy, mode, step })
}

/// Save a training checkpoint: versioned binary with the config hash, the
/// full policy (all context blocks), the predictor, the schedule, the
/// baseline, the triplet buffer, and the metrics history.
pub fn save_checkpoint(state: &TrainState, config_hash: u64, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    binio::write_u32(&mut w, CHECKPOINT_VERSION)?;
    binio::write_u64(&mut w, config_hash)?;
    binio::write_u32(&mut w, state.epoch)?;
    binio::write_u64(&mut w, state.step)?;
    binio::write_f64(&mut w, state.gamma)?;
    binio::write_f64(&mut w, state.baseline.mean)?;
    binio::write_u64(&mut w, state.baseline.count)?;
    binio::write_f64(&mut w, state.baseline.decay)?;
    write_schedule(&mut w, &state.schedule)?;

    let policy = &state.policy;
    binio::write_u32(&mut w, policy.k as u32)?;
    binio::write_u32(&mut w, policy.templates_per_disease as u32)?;
    binio::write_f64(&mut w, policy.temperature)?;
    binio::write_u64(&mut w, policy.seed)?;
    binio::write_u64(&mut w, policy.draw_count)?;
    match policy.init {
        PolicyInit::Uniform => {
            binio::write_u32(&mut w, 0)?;
            binio::write_f64(&mut w, 0.0)?;
        }
        PolicyInit::HallucinationProne { positive_bias } => {
            binio::write_u32(&mut w, 1)?;
            binio::write_f64(&mut w, positive_bias)?;
        }
    }
    binio::write_u32(&mut w, policy.contexts.len() as u32)?;
    for (study_id, block) in &policy.contexts {
        binio::write_string(&mut w, study_id)?;
        for &v in block {
            binio::write_f64(&mut w, v)?;
        }
    }

    state.predictor.write_full_precision(&mut w)?;

    binio::write_u32(&mut w, state.buffer.len() as u32)?;
    for triplet in &state.buffer {
        binio::write_string(&mut w, &triplet.study_id)?;
        binio::write_u32(&mut w, triplet.n as u32)?;
        binio::write_u32(&mut w, triplet.k as u32)?;
        binio::write_string(&mut w, &triplet.candidate)?;
        binio::write_string(&mut w, &triplet.reference)?;
        let d = triplet.label.distribution();
        binio::write_f64(&mut w, d[0])?;
        binio::write_f64(&mut w, d[1])?;
    }

    binio::write_u32(&mut w, state.history.len() as u32)?;
    for row in &state.history {
        binio::write_u32(&mut w, row.epoch)?;
        for v in [
            row.mean_l_r,
            row.mean_l_tp,
            row.mean_l_fn,
            row.mean_l_fp,
            row.ce_precision,
            row.ce_recall,
            row.ce_f1,
        ] {
            binio::write_f64(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint; returns the state and the config hash it was saved
/// under.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, u64)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    binio::expect_magic(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
    let version = binio::read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Validation(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_hash = binio::read_u64(&mut r)?;
    let epoch = binio::read_u32(&mut r)?;
    let step = binio::read_u64(&mut r)?;
    let gamma = binio::read_f64(&mut r)?;
    let baseline = Baseline {
        mean: binio::read_f64(&mut r)?,
        count: binio::read_u64(&mut r)?,
        decay: binio::read_f64(&mut r)?,
    };
    let schedule = read_schedule(&mut r)?;

    let k = binio::read_u32(&mut r)? as usize;
    let templates_per_disease = binio::read_u32(&mut r)? as usize;
    let temperature = binio::read_f64(&mut r)?;
    let seed = binio::read_u64(&mut r)?;
    let draw_count = binio::read_u64(&mut r)?;
    let init_kind = binio::read_u32(&mut r)?;
    let init_bias = binio::read_f64(&mut r)?;
    let init = match init_kind {
        0 => PolicyInit::Uniform,
        1 => PolicyInit::HallucinationProne { positive_bias: init_bias },
        other => return Err(Error::Validation(format!("unknown policy init {other}"))),
    };
    let mut policy = ToyPolicy::new(k, templates_per_disease, temperature, seed, init)?;
    policy.draw_count = draw_count;
    let num_contexts = binio::read_u32(&mut r)? as usize;
    for _ in 0..num_contexts {
        let study_id = binio::read_string(&mut r)?;
        let mut block = vec![0.0; policy.context_len()];
        for v in block.iter_mut() {
            *v = binio::read_f64(&mut r)?;
        }
        policy.contexts.insert(study_id, block);
    }

    let predictor = PredictorModel::read_full_precision(&mut r)?;

    let num_triplets = binio::read_u32(&mut r)? as usize;
    let mut buffer = Vec::with_capacity(num_triplets);
    for _ in 0..num_triplets {
        let study_id = binio::read_string(&mut r)?;
        let n = binio::read_u32(&mut r)? as usize;
        let k = binio::read_u32(&mut r)? as usize;
        let candidate = binio::read_string(&mut r)?;
        let reference = binio::read_string(&mut r)?;
        let d = [binio::read_f64(&mut r)?, binio::read_f64(&mut r)?];
        buffer.push(PreferenceTriplet {
            study_id,
            n,
            k,
            candidate,
            reference,
            label: crate::spl::PreferenceLabel::from_distribution(d)?,
        });
    }

    let num_rows = binio::read_u32(&mut r)? as usize;
    let mut history = Vec::with_capacity(num_rows);
    for _ in 0..num_rows {
        let epoch = binio::read_u32(&mut r)?;
        let mut vals = [0.0f64; 7];
        for v in vals.iter_mut() {
            *v = binio::read_f64(&mut r)?;
        }
        history.push(EpochMetrics {
            epoch,
            mean_l_r: vals[0],
            mean_l_tp: vals[1],
            mean_l_fn: vals[2],
            mean_l_fp: vals[3],
            ce_precision: vals[4],
            ce_recall: vals[5],
            ce_f1: vals[6],
        });
    }

    Ok((
        TrainState { policy, predictor, schedule, step, gamma, baseline, buffer, epoch, history },
        config_hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticCorpusConfig};
    use crate::labeler::extract_status;

    fn small_vocab() -> DiseaseVocabulary {
        DiseaseVocabulary::new(vec!["Alpha".into(), "Beta".into(), "Gamma".into()]).unwrap()
    }

    fn study(id: &str, report: &str) -> StudyRecord {
        StudyRecord {
            study_id: id.into(),
            image_ref: Some(format!("synthetic://{id}")),
            ground_truth_report: report.into(),
            candidate_observations: Vec::new(),
            ground_truth_status: None,
        }
    }

    fn policy(k: usize, temperature: f64, seed: u64) -> ToyPolicy {
        ToyPolicy::new(k, 3, temperature, seed, PolicyInit::Uniform).unwrap()
    }

    #[test]
    fn greedy_limit_gives_identical_samples() {
        let vocab = small_vocab();
        let mut p = policy(vocab.len(), 1e-4, 0);
        let s = study("s0", "There is alpha.");
        // Unique argmax per disease.
        let a = p.actions_per_disease();
        let block = p.context_logits_mut("s0");
        for k in 0..3 {
            block[k * a + (k % a)] = 5.0;
        }
        let obs = sample_observations(&mut p, &s, 8, &vocab).unwrap();
        for o in &obs {
            assert_eq!(o.actions, obs[0].actions);
            assert_eq!(o.text, obs[0].text);
        }
    }

    #[test]
    fn fixed_seed_identical_across_runs() {
        let vocab = small_vocab();
        let s = study("s0", "There is alpha.");
        let mut p1 = policy(vocab.len(), 1.0, 42);
        let mut p2 = policy(vocab.len(), 1.0, 42);
        let a = sample_observations(&mut p1, &s, 4, &vocab).unwrap();
        let b = sample_observations(&mut p2, &s, 4, &vocab).unwrap();
        assert_eq!(a, b);
        // Subsequent draws differ from the first batch but stay aligned
        // across runs.
        let a2 = sample_observations(&mut p1, &s, 4, &vocab).unwrap();
        let b2 = sample_observations(&mut p2, &s, 4, &vocab).unwrap();
        assert_eq!(a2, b2);
        assert_ne!(a, a2);
    }

    /// Uniform logits: empirical cell frequencies within 3 sigma of the
    /// multinomial expectation.
    #[test]
    fn uniform_logits_sample_uniformly() {
        let vocab = DiseaseVocabulary::new(vec!["Alpha".into()]).unwrap();
        let mut p = policy(1, 1.0, 7);
        let s = study("s0", "There is alpha.");
        let cells = p.actions_per_disease();
        let draws = 18_000usize;
        let mut counts = vec![0usize; cells];
        let obs = sample_observations(&mut p, &s, draws, &vocab).unwrap();
        for o in &obs {
            counts[o.actions[0]] += 1;
        }
        let expected = draws as f64 / cells as f64;
        let sigma = (draws as f64 * (1.0 / cells as f64) * (1.0 - 1.0 / cells as f64)).sqrt();
        for (cell, &count) in counts.iter().enumerate() {
            assert!(
                (count as f64 - expected).abs() <= 3.0 * sigma,
                "cell {cell}: {count} vs {expected} (3 sigma {:.1})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn log_prob_factorizes_over_diseases() {
        let vocab = small_vocab();
        let mut p = policy(vocab.len(), 0.7, 3);
        let s = study("s0", "x.");
        let obs = sample_observations(&mut p, &s, 1, &vocab).unwrap();
        let actions = &obs[0].actions;
        let block = p.context_logits("s0").unwrap().to_vec();
        let mut manual = 0.0;
        for (disease, &cell) in actions.iter().enumerate() {
            manual += p.disease_probs(&block, disease)[cell].ln();
        }
        let direct = p.log_prob("s0", actions).unwrap();
        assert!((manual - direct).abs() < 1e-12);
        assert!((obs[0].log_prob - direct).abs() < 1e-12);
    }

    /// Central finite differences on a 2-disease policy.
    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let vocab = DiseaseVocabulary::new(vec!["Alpha".into(), "Beta".into()]).unwrap();
        let mut p = ToyPolicy::new(2, 2, 0.8, 5, PolicyInit::Uniform).unwrap();
        p.ensure_context("s0");
        {
            let block = p.context_logits_mut("s0");
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            for v in block.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let s = study("s0", "x.");
        let obs = sample_observations(&mut p, &s, 1, &vocab).unwrap();
        let actions = obs[0].actions.clone();
        let grad = p.grad_log_prob("s0", &actions).unwrap();
        let h = 1e-6;
        for i in 0..grad.len() {
            let base = p.context_logits("s0").unwrap()[i];
            p.context_logits_mut("s0")[i] = base + h;
            let up = p.log_prob("s0", &actions).unwrap();
            p.context_logits_mut("s0")[i] = base - h;
            let down = p.log_prob("s0", &actions).unwrap();
            p.context_logits_mut("s0")[i] = base;
            let numeric = (up - down) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
            assert!(
                (grad[i] - numeric).abs() / denom < 1e-4,
                "logit {i}: analytic {} vs numeric {numeric}",
                grad[i]
            );
        }
    }

    #[test]
    fn task_gradient_matches_finite_differences() {
        let vocab = DiseaseVocabulary::new(vec!["Alpha".into(), "Beta".into()]).unwrap();
        let mut p = ToyPolicy::new(2, 2, 1.3, 5, PolicyInit::Uniform).unwrap();
        p.ensure_context("s0");
        {
            let block = p.context_logits_mut("s0");
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            for v in block.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let target = DiseaseStatusVector(vec![DiseaseStatus::Positive, DiseaseStatus::Blank]);
        let (_, grad) = p.task_loss_and_grad("s0", &target).unwrap();
        let h = 1e-6;
        for i in 0..grad.len() {
            let base = p.context_logits("s0").unwrap()[i];
            p.context_logits_mut("s0")[i] = base + h;
            let (up, _) = p.task_loss_and_grad("s0", &target).unwrap();
            p.context_logits_mut("s0")[i] = base - h;
            let (down, _) = p.task_loss_and_grad("s0", &target).unwrap();
            p.context_logits_mut("s0")[i] = base;
            let numeric = (up - down) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
            assert!(
                (grad[i] - numeric).abs() / denom < 1e-4,
                "logit {i}: analytic {} vs numeric {numeric}",
                grad[i]
            );
        }
    }

    /// A policy already matching the ground truth with a warm-started
    /// baseline moves by less than 1e-6.
    #[test]
    fn matched_policy_is_a_fixed_point() {
        let vocab = DiseaseVocabulary::default_chest_xray();
        let backends = Backends::deterministic(Default::default()).unwrap();
        let cfg = TrainConfig::default();
        let corpus = generate_synthetic_corpus(
            &SyntheticCorpusConfig { num_studies: 1, seed: 9, ..Default::default() },
            &vocab,
        )
        .unwrap();
        let s = &corpus[0];
        let mut state = TrainState::new(&vocab, &cfg).unwrap();
        // Match the ground truth with near-deterministic logits.
        state.policy.ensure_context(&s.study_id);
        let gt = s.ground_truth_status.clone().unwrap();
        let a = state.policy.actions_per_disease();
        let cells: Vec<usize> =
            (0..vocab.len()).map(|k| state.policy.cell_of(intent_target(gt.get(k)), 0)).collect();
        {
            let block = state.policy.context_logits_mut(&s.study_id);
            for (k, &cell) in cells.iter().enumerate() {
                block[k * a + cell] = 50.0;
            }
        }
        // Matched policy earns exactly zero loss, so warm-start at zero.
        state.baseline.update(0.0);
        let before = state.policy.context_logits(&s.study_id).unwrap().to_vec();
        let stats = reinforce_step(&mut state, s, &vocab, &backends, &cfg).unwrap();
        assert!(stats.advantage.abs() < 1e-12, "advantage {}", stats.advantage);
        let after = state.policy.context_logits(&s.study_id).unwrap();
        let change: f64 =
            before.iter().zip(after).map(|(b, a)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(change < 1e-6, "parameter change {change}");
    }

    /// Single-disease bandit: reward 1 when the sampled intent is correct.
    /// The probability of the correct action improves for a majority of
    /// seeds.
    #[test]
    fn bandit_improves_over_100_steps() {
        let vocab = DiseaseVocabulary::new(vec!["Alpha".into()]).unwrap();
        let s = study("s0", "There is alpha.");
        let mut improved = 0;
        for seed in 0..20u64 {
            let mut p = policy(1, 1.0, seed);
            let mut baseline = Baseline::new();
            let correct_mass = |p: &mut ToyPolicy| {
                p.ensure_context("s0");
                let block = p.context_logits("s0").unwrap().to_vec();
                let probs = p.disease_probs(&block, 0);
                (0..probs.len())
                    .filter(|&c| p.intent_of(c) == ActionIntent::AssertPositive)
                    .map(|c| probs[c])
                    .sum::<f64>()
            };
            let before = correct_mass(&mut p);
            for _ in 0..100 {
                let obs = sample_observations(&mut p, &s, 1, &vocab).unwrap();
                let reward = if p.intent_of(obs[0].actions[0]) == ActionIntent::AssertPositive {
                    1.0
                } else {
                    0.0
                };
                let advantage = reward - baseline.value();
                let grad = p.grad_log_prob("s0", &obs[0].actions).unwrap();
                let update: Vec<f64> = grad.iter().map(|g| 0.2 * advantage * g).collect();
                p.apply_context_update("s0", &update).unwrap();
                baseline.update(reward);
            }
            if correct_mass(&mut p) > before {
                improved += 1;
            }
        }
        assert!(improved >= 11, "only {improved}/20 seeds improved");
    }

    /// E[grad log pi] = 0, so a constant baseline leaves the expected
    /// gradient unchanged within Monte-Carlo error.
    #[test]
    fn baseline_subtraction_is_unbiased() {
        let vocab = DiseaseVocabulary::new(vec!["Alpha".into()]).unwrap();
        let s = study("s0", "x.");
        let mut p = policy(1, 1.0, 31);
        {
            let block = p.context_logits_mut("s0");
            block[0] = 0.4;
            block[4] = -0.3;
        }
        let m = 4000usize;
        let dim = p.context_len();
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        let obs = sample_observations(&mut p, &s, m, &vocab).unwrap();
        for o in &obs {
            let g = p.grad_log_prob("s0", &o.actions).unwrap();
            for i in 0..dim {
                sum[i] += g[i];
                sum_sq[i] += g[i] * g[i];
            }
        }
        for i in 0..dim {
            let mean = sum[i] / m as f64;
            let var = sum_sq[i] / m as f64 - mean * mean;
            let se = (var / m as f64).sqrt().max(1e-12);
            assert!(
                mean.abs() <= 3.0 * se,
                "coordinate {i}: mean grad {mean} exceeds 3 SE {se}"
            );
        }
    }

    #[test]
    fn reward_is_negated_gear_total_bit_for_bit() {
        let vocab = DiseaseVocabulary::default_chest_xray();
        let backends = Backends::deterministic(Default::default()).unwrap();
        let cfg = TrainConfig::default();
        let corpus = generate_synthetic_corpus(
            &SyntheticCorpusConfig { num_studies: 2, seed: 3, ..Default::default() },
            &vocab,
        )
        .unwrap();
        let mut state = TrainState::new(&vocab, &cfg).unwrap();
        for s in &corpus {
            let stats = reinforce_step(&mut state, s, &vocab, &backends, &cfg).unwrap();
            let total = stats.breakdown.l_tp + stats.breakdown.l_fn + stats.breakdown.l_fp;
            assert_eq!(stats.breakdown.l_r.to_bits(), total.to_bits());
            assert_eq!(stats.reward.to_bits(), (-stats.breakdown.l_r).to_bits());
        }
    }

    #[test]
    fn rendered_samples_label_back_to_their_actions() {
        let vocab = small_vocab();
        let mut p = policy(vocab.len(), 1.0, 4);
        let s = study("s0", "x.");
        for o in sample_observations(&mut p, &s, 10, &vocab).unwrap() {
            let status = extract_status(&o.text, &vocab, &crate::labeler::RuleLabeler).unwrap();
            for (k, &cell) in o.actions.iter().enumerate() {
                let expected = match p.intent_of(cell) {
                    ActionIntent::AssertPositive => DiseaseStatus::Positive,
                    ActionIntent::AssertNegative => DiseaseStatus::Negative,
                    ActionIntent::Omit => DiseaseStatus::Blank,
                };
                assert_eq!(status.get(k), expected, "obs {:?} disease {k}", o.text);
            }
        }
    }

    fn tiny_train_setup() -> (DiseaseVocabulary, Backends, Vec<StudyRecord>, TrainConfig) {
        let vocab = DiseaseVocabulary::default_chest_xray();
        let backends = Backends::deterministic(Default::default()).unwrap();
        let corpus = generate_synthetic_corpus(
            &SyntheticCorpusConfig { num_studies: 4, seed: 21, ..Default::default() },
            &vocab,
        )
        .unwrap();
        let cfg = TrainConfig { epochs: 2, seed: 21, ..Default::default() };
        (vocab, backends, corpus, cfg)
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let (vocab, backends, corpus, mut cfg) = tiny_train_setup();
        cfg.epochs = 0;
        let state = train(&corpus, &vocab, &backends, &cfg).unwrap();
        let fresh = TrainState::new(&vocab, &cfg).unwrap();
        assert_eq!(state, fresh);
        assert!(state.history.is_empty());
    }

    #[test]
    fn train_is_deterministic() {
        let (vocab, backends, corpus, cfg) = tiny_train_setup();
        let a = train(&corpus, &vocab, &backends, &cfg).unwrap();
        let b = train(&corpus, &vocab, &backends, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
    }

    #[test]
    fn checkpoint_round_trip_and_resume_bit_identical() {
        let (vocab, backends, corpus, cfg) = tiny_train_setup();
        let dir = tempfile::tempdir().unwrap();

        // Straight run to 2 epochs.
        let straight = train(&corpus, &vocab, &backends, &cfg).unwrap();

        // Interrupted run: 1 epoch, checkpoint, reload, resume to 2.
        let cfg1 = TrainConfig { epochs: 1, ..cfg.clone() };
        let mut partial = train(&corpus, &vocab, &backends, &cfg1).unwrap();
        let ckpt = dir.path().join("ckpt.bin");
        save_checkpoint(&partial, 0xabcd, &ckpt).unwrap();
        let (mut resumed, hash) = load_checkpoint(&ckpt).unwrap();
        assert_eq!(hash, 0xabcd);
        assert_eq!(resumed, partial);
        resume_train(&mut resumed, &corpus, &vocab, &backends, &cfg).unwrap();
        resume_train(&mut partial, &corpus, &vocab, &backends, &cfg).unwrap();
        assert_eq!(resumed, partial);
        assert_eq!(resumed, straight);
        assert_eq!(metrics_csv(&resumed.history), metrics_csv(&straight.history));

        // Checkpoint bytes of equal states are identical.
        let c1 = dir.path().join("a.bin");
        let c2 = dir.path().join("b.bin");
        save_checkpoint(&straight, 1, &c1).unwrap();
        save_checkpoint(&resumed, 1, &c2).unwrap();
        assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
    }

    #[test]
    fn metrics_csv_format() {
        let history = vec![EpochMetrics {
            epoch: 0,
            mean_l_r: 0.5,
            mean_l_tp: 0.1,
            mean_l_fn: 0.2,
            mean_l_fp: 0.2,
            ce_precision: 0.75,
            ce_recall: 0.5,
            ce_f1: 0.6,
        }];
        let csv = metrics_csv(&history);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRICS_CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "0,0.5,0.1,0.2,0.2,0.75,0.5,0.6");
    }

    #[test]
    fn invalid_configs_rejected() {
        let vocab = small_vocab();
        assert!(ToyPolicy::new(0, 3, 1.0, 0, PolicyInit::Uniform).is_err());
        assert!(ToyPolicy::new(3, 0, 1.0, 0, PolicyInit::Uniform).is_err());
        assert!(ToyPolicy::new(3, 3, 0.0, 0, PolicyInit::Uniform).is_err());
        let cfg = TrainConfig { gamma: -0.1, ..Default::default() };
        assert!(TrainState::new(&vocab, &cfg).is_err());
        let cfg = TrainConfig { n_candidates: 0, ..Default::default() };
        assert!(TrainState::new(&vocab, &cfg).is_err());
    }
}
