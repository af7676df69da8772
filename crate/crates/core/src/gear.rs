//! Group-wise alignment rewards over response maps.
//!
//! Predicted and reference status vectors partition the diseases into
//! true-positive, false-negative, and false-positive groups (negative and
//! uncertain statuses never enter any group). Each group gets its own loss
//! over the response maps: a Dice-style overlap loss for true positives, a
//! mean-squared recovery loss for false negatives, and an activation-energy
//! suppression loss for false positives. Their sum is the scalar reward
//! signal fed to the policy loop (as a penalty; the policy maximizes its
//! negation).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::grounding::{ground, ResponseMapSet};
use crate::labeler::{extract_status, DiseaseStatus, DiseaseStatusVector, DiseaseVocabulary};
use crate::{Error, Result};

/// TP/FN/FP disease index sets. Pairwise disjoint by construction.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GroupPartition {
    pub tp: BTreeSet<usize>,
    pub fn_: BTreeSet<usize>,
    pub fp: BTreeSet<usize>,
}

/// Which overlap loss a group uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Dice,
    Mse,
}

/// Sign convention for the false-negative loss. `Positive` treats it as a
/// penalty to minimize; `Literal` negates it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FnSign {
    Positive,
    Literal,
}

/// Loss configuration, including the ablation variants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GearConfig {
    pub epsilon: f64,
    pub tp_variant: LossVariant,
    pub fn_variant: LossVariant,
    pub fn_sign: FnSign,
}

impl Default for GearConfig {
    fn default() -> Self {
        GearConfig {
            epsilon: 1e-6,
            tp_variant: LossVariant::Dice,
            fn_variant: LossVariant::Mse,
            fn_sign: FnSign::Positive,
        }
    }
}

impl GearConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// The three group losses and their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GearLossBreakdown {
    pub l_tp: f64,
    pub l_fn: f64,
    pub l_fp: f64,
    pub l_r: f64,
    pub epsilon: f64,
}

/// A reward evaluation: the loss breakdown plus the partition it was
/// computed over.
#[derive(Debug, Clone, PartialEq)]
pub struct GearOutcome {
    pub breakdown: GearLossBreakdown,
    pub partition: GroupPartition,
}

/// Flat JSON form of a reward evaluation:
/// `{"l_tp":f,"l_fn":f,"l_fp":f,"l_r":f,"tp":[i],"fn":[i],"fp":[i]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GearRewardJson {
    pub l_tp: f64,
    pub l_fn: f64,
    pub l_fp: f64,
    pub l_r: f64,
    pub tp: Vec<usize>,
    #[serde(rename = "fn")]
    pub fn_: Vec<usize>,
    pub fp: Vec<usize>,
}

impl From<&GearOutcome> for GearRewardJson {
    fn from(outcome: &GearOutcome) -> Self {
        GearRewardJson {
            l_tp: outcome.breakdown.l_tp,
            l_fn: outcome.breakdown.l_fn,
            l_fp: outcome.breakdown.l_fp,
            l_r: outcome.breakdown.l_r,
            tp: outcome.partition.tp.iter().copied().collect(),
            fn_: outcome.partition.fn_.iter().copied().collect(),
            fp: outcome.partition.fp.iter().copied().collect(),
        }
    }
}

/// Partition diseases by predicted vs. reference status:
/// tp = both positive, fn = reference positive but prediction blank,
/// fp = prediction positive but reference blank. Negative and uncertain
/// statuses are excluded from every group.
pub fn partition(pred: &DiseaseStatusVector, gt: &DiseaseStatusVector) -> Result<GroupPartition> {
    if pred.len() != gt.len() {
        return Err(Error::Arity(format!(
            "status vectors differ in length: pred {} vs gt {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut part = GroupPartition::default();
    for k in 0..pred.len() {
        match (gt.get(k), pred.get(k)) {
            (DiseaseStatus::Positive, DiseaseStatus::Positive) => {
                part.tp.insert(k);
            }
            (DiseaseStatus::Positive, DiseaseStatus::Blank) => {
                part.fn_.insert(k);
            }
            (DiseaseStatus::Blank, DiseaseStatus::Positive) => {
                part.fp.insert(k);
            }
            _ => {}
        }
    }
    Ok(part)
}

fn check_shapes(pred: &ResponseMapSet, gt: &ResponseMapSet) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Arity(format!(
            "map shapes differ: {}x{}x{} vs {}x{}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            gt.height(),
            gt.width(),
            gt.channels()
        )));
    }
    Ok(())
}

fn check_group_bounds(group: &BTreeSet<usize>, channels: usize) -> Result<()> {
    if let Some(&max) = group.iter().next_back() {
        if max >= channels {
            return Err(Error::Arity(format!(
                "group index {max} out of range for {channels} channels"
            )));
        }
    }
    Ok(())
}

fn dice_loss_channel(pred: &[f64], gt: &[f64], epsilon: f64) -> f64 {
    let mut inter = 0.0;
    let mut pred_sq = 0.0;
    let mut gt_sq = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        inter += p * g;
        pred_sq += p * p;
        gt_sq += g * g;
    }
    (2.0 * inter + epsilon) / (pred_sq + gt_sq + epsilon)
}

fn mse_channel(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n
}

/// True-positive overlap loss. Dice variant:
/// `1 - mean_k (2*sum(pred*gt) + eps) / (sum(pred^2) + sum(gt^2) + eps)`.
/// Zero when the group is empty.
pub fn loss_tp(
    pred_maps: &ResponseMapSet,
    gt_maps: &ResponseMapSet,
    part: &GroupPartition,
    cfg: &GearConfig,
) -> Result<f64> {
    check_shapes(pred_maps, gt_maps)?;
    check_group_bounds(&part.tp, pred_maps.channels())?;
    cfg.validate()?;
    if part.tp.is_empty() {
        return Ok(0.0);
    }
    let value = match cfg.tp_variant {
        LossVariant::Dice => {
            let mean_dice: f64 = part
                .tp
                .iter()
                .map(|&k| dice_loss_channel(pred_maps.channel(k), gt_maps.channel(k), cfg.epsilon))
                .sum::<f64>()
                / part.tp.len() as f64;
            1.0 - mean_dice
        }
        LossVariant::Mse => {
            part.tp
                .iter()
                .map(|&k| mse_channel(pred_maps.channel(k), gt_maps.channel(k)))
                .sum::<f64>()
                / part.tp.len() as f64
        }
    };
    Ok(value)
}

/// False-negative recovery loss. MSE variant: mean over the group of the
/// per-pixel mean squared difference. Zero when the group is empty.
pub fn loss_fn(
    pred_maps: &ResponseMapSet,
    gt_maps: &ResponseMapSet,
    part: &GroupPartition,
    cfg: &GearConfig,
) -> Result<f64> {
    check_shapes(pred_maps, gt_maps)?;
    check_group_bounds(&part.fn_, pred_maps.channels())?;
    cfg.validate()?;
    if part.fn_.is_empty() {
        return Ok(0.0);
    }
    let value = match cfg.fn_variant {
        LossVariant::Mse => {
            part.fn_
                .iter()
                .map(|&k| mse_channel(pred_maps.channel(k), gt_maps.channel(k)))
                .sum::<f64>()
                / part.fn_.len() as f64
        }
        LossVariant::Dice => {
            let mean_dice: f64 = part
                .fn_
                .iter()
                .map(|&k| dice_loss_channel(pred_maps.channel(k), gt_maps.channel(k), cfg.epsilon))
                .sum::<f64>()
                / part.fn_.len() as f64;
            1.0 - mean_dice
        }
    };
    Ok(match cfg.fn_sign {
        FnSign::Positive => value,
        FnSign::Literal => -value,
    })
}

/// False-positive suppression loss: mean over the group of the per-pixel
/// mean squared activation of the predicted map. Zero when the group is
/// empty.
pub fn loss_fp(pred_maps: &ResponseMapSet, part: &GroupPartition, cfg: &GearConfig) -> Result<f64> {
    check_group_bounds(&part.fp, pred_maps.channels())?;
    cfg.validate()?;
    if part.fp.is_empty() {
        return Ok(0.0);
    }
    let n = pred_maps.pixels_per_channel() as f64;
    let value = part
        .fp
        .iter()
        .map(|&k| pred_maps.channel(k).iter().map(|p| p * p).sum::<f64>() / n)
        .sum::<f64>()
        / part.fp.len() as f64;
    Ok(value)
}

/// Combine the three group losses over validated maps and partition.
pub fn combine_losses(
    pred_maps: &ResponseMapSet,
    gt_maps: &ResponseMapSet,
    part: &GroupPartition,
    cfg: &GearConfig,
) -> Result<GearLossBreakdown> {
    let l_tp = loss_tp(pred_maps, gt_maps, part, cfg)?;
    let l_fn = loss_fn(pred_maps, gt_maps, part, cfg)?;
    let l_fp = loss_fp(pred_maps, part, cfg)?;
    Ok(GearLossBreakdown {
        l_tp,
        l_fn,
        l_fp,
        l_r: l_tp + l_fn + l_fp,
        epsilon: cfg.epsilon,
    })
}

/// Full reward pipeline for one (predicted report, reference report) pair:
/// extract statuses, partition, ground both reports, compute the three
/// losses and their sum. Backend failures carry stage attribution.
pub fn gear_reward(
    pred_report: &str,
    gt_report: &str,
    image_ref: Option<&str>,
    vocab: &DiseaseVocabulary,
    backends: &Backends,
    cfg: &GearConfig,
) -> Result<GearOutcome> {
    let pred_status = extract_status(pred_report, vocab, backends.labeler.as_ref())
        .map_err(|e| e.at_stage("label-pred"))?;
    let gt_status = extract_status(gt_report, vocab, backends.labeler.as_ref())
        .map_err(|e| e.at_stage("label-gt"))?;
    let part = partition(&pred_status, &gt_status)?;
    let pred_maps = ground(image_ref, pred_report, vocab, backends.grounder.as_ref())
        .map_err(|e| e.at_stage("ground-pred"))?;
    let gt_maps = ground(image_ref, gt_report, vocab, backends.grounder.as_ref())
        .map_err(|e| e.at_stage("ground-gt"))?;
    let breakdown = combine_losses(&pred_maps, &gt_maps, &part, cfg)?;
    Ok(GearOutcome { breakdown, partition: part })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::Backends;
    use crate::labeler::DiseaseStatus::*;

    fn status(v: &[DiseaseStatus]) -> DiseaseStatusVector {
        DiseaseStatusVector(v.to_vec())
    }

    fn maps_2x2(channels: Vec<[f64; 4]>) -> ResponseMapSet {
        let data: Vec<f64> = channels.into_iter().flatten().collect();
        let k = data.len() / 4;
        ResponseMapSet::new(2, 2, k, data).unwrap()
    }

    fn part_tp(k: usize) -> GroupPartition {
        let mut p = GroupPartition::default();
        p.tp.insert(k);
        p
    }

    #[test]
    fn partition_matches_hand_case() {
        let gt = status(&[Positive, Blank, Positive, Blank]);
        let pred = status(&[Positive, Positive, Blank, Blank]);
        let p = partition(&pred, &gt).unwrap();
        assert_eq!(p.tp, BTreeSet::from([0]));
        assert_eq!(p.fn_, BTreeSet::from([2]));
        assert_eq!(p.fp, BTreeSet::from([1]));
    }

    #[test]
    fn partition_all_positive() {
        let gt = status(&[Positive; 5]);
        let p = partition(&gt.clone(), &gt).unwrap();
        assert_eq!(p.tp.len(), 5);
        assert!(p.fn_.is_empty());
        assert!(p.fp.is_empty());
    }

    #[test]
    fn partition_excludes_negative_and_uncertain() {
        let gt = status(&[Negative, Uncertain, Positive, Blank]);
        let pred = status(&[Positive, Positive, Negative, Uncertain]);
        let p = partition(&pred, &gt).unwrap();
        // gt negative/uncertain rows never enter; pred negative/uncertain
        // rows never enter.
        assert!(p.tp.is_empty());
        assert!(p.fn_.is_empty());
        assert!(p.fp.is_empty());
    }

    #[test]
    fn partition_length_mismatch_errors() {
        let a = status(&[Positive]);
        let b = status(&[Positive, Blank]);
        assert!(matches!(partition(&a, &b), Err(Error::Arity(_))));
    }

    #[test]
    fn tp_identity_is_zero() {
        let m = maps_2x2(vec![[0.3, 0.7, 0.1, 0.9]]);
        let cfg = GearConfig::default();
        let l = loss_tp(&m, &m, &part_tp(0), &cfg).unwrap();
        assert!(l.abs() < 1e-9, "loss {l}");
    }

    #[test]
    fn tp_hand_case_one_third() {
        // pred [[1,0],[0,0]], gt [[1,1],[0,0]]: dice = 2/3, loss = 1/3.
        let pred = maps_2x2(vec![[1.0, 0.0, 0.0, 0.0]]);
        let gt = maps_2x2(vec![[1.0, 1.0, 0.0, 0.0]]);
        let cfg = GearConfig { epsilon: 1e-12, ..Default::default() };
        let l = loss_tp(&pred, &gt, &part_tp(0), &cfg).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-9, "loss {l}");
    }

    #[test]
    fn tp_disjoint_blobs_near_one() {
        let pred = maps_2x2(vec![[1.0, 0.0, 0.0, 0.0]]);
        let gt = maps_2x2(vec![[0.0, 0.0, 0.0, 1.0]]);
        let cfg = GearConfig::default();
        let l = loss_tp(&pred, &gt, &part_tp(0), &cfg).unwrap();
        let expected = 1.0 - cfg.epsilon / (2.0 + cfg.epsilon);
        assert!((l - expected).abs() < 1e-5, "loss {l}");
    }

    #[test]
    fn empty_groups_are_zero() {
        let m = maps_2x2(vec![[0.5, 0.5, 0.5, 0.5]]);
        let cfg = GearConfig::default();
        let empty = GroupPartition::default();
        assert_eq!(loss_tp(&m, &m, &empty, &cfg).unwrap(), 0.0);
        assert_eq!(loss_fn(&m, &m, &empty, &cfg).unwrap(), 0.0);
        assert_eq!(loss_fp(&m, &empty, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn fn_hand_case_half() {
        let pred = maps_2x2(vec![[0.0, 0.0, 0.0, 0.0]]);
        let gt = maps_2x2(vec![[1.0, 0.0, 0.0, 1.0]]);
        let mut part = GroupPartition::default();
        part.fn_.insert(0);
        let l = loss_fn(&pred, &gt, &part, &GearConfig::default()).unwrap();
        assert!((l - 0.5).abs() < 1e-9, "loss {l}");
    }

    #[test]
    fn fn_literal_sign_negates() {
        let pred = maps_2x2(vec![[0.0, 0.0, 0.0, 0.0]]);
        let gt = maps_2x2(vec![[1.0, 0.0, 0.0, 1.0]]);
        let mut part = GroupPartition::default();
        part.fn_.insert(0);
        let cfg = GearConfig { fn_sign: FnSign::Literal, ..Default::default() };
        let l = loss_fn(&pred, &gt, &part, &cfg).unwrap();
        assert!((l + 0.5).abs() < 1e-9, "loss {l}");
    }

    #[test]
    fn fp_hand_cases() {
        let cfg = GearConfig::default();
        let mut part = GroupPartition::default();
        part.fp.insert(0);
        let zero = maps_2x2(vec![[0.0; 4]]);
        assert_eq!(loss_fp(&zero, &part, &cfg).unwrap(), 0.0);
        let half = maps_2x2(vec![[0.5; 4]]);
        assert!((loss_fp(&half, &part, &cfg).unwrap() - 0.25).abs() < 1e-9);
        let one = maps_2x2(vec![[1.0; 4]]);
        assert!((loss_fp(&one, &part, &cfg).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = maps_2x2(vec![[0.0; 4]]);
        let b = ResponseMapSet::zeros(3, 3, 1);
        let cfg = GearConfig::default();
        assert!(loss_tp(&a, &b, &GroupPartition::default(), &cfg).is_err());
        assert!(loss_fn(&a, &b, &GroupPartition::default(), &cfg).is_err());
    }

    #[test]
    fn group_index_out_of_range_errors() {
        let a = maps_2x2(vec![[0.0; 4]]);
        let cfg = GearConfig::default();
        let mut part = GroupPartition::default();
        part.fp.insert(3);
        assert!(loss_fp(&a, &part, &cfg).is_err());
    }

    #[test]
    fn reward_pipeline_self_comparison_is_zero() {
        let vocab = DiseaseVocabulary::default_chest_xray();
        let backends = Backends::deterministic(Default::default()).unwrap();
        let report = "There is cardiomegaly. There is a pleural effusion.";
        let outcome =
            gear_reward(report, report, Some("img"), &vocab, &backends, &GearConfig::default())
                .unwrap();
        assert!(outcome.partition.fn_.is_empty());
        assert!(outcome.partition.fp.is_empty());
        assert_eq!(outcome.partition.tp.len(), 2);
        assert!(outcome.breakdown.l_tp.abs() < 1e-9);
        assert!(outcome.breakdown.l_r.abs() < 1e-9);
    }

    #[test]
    fn reward_pipeline_omission_and_hallucination() {
        let vocab = DiseaseVocabulary::default_chest_xray();
        let backends = Backends::deterministic(Default::default()).unwrap();
        let gt = "There is cardiomegaly. There is a pleural effusion.";
        let cfg = GearConfig::default();

        let omit = "There is cardiomegaly.";
        let outcome = gear_reward(omit, gt, Some("img"), &vocab, &backends, &cfg).unwrap();
        assert_eq!(outcome.partition.fn_.len(), 1);
        assert!(outcome.breakdown.l_fn > 0.0);

        let halluc = "There is cardiomegaly. There is a pleural effusion. There is pneumonia.";
        let outcome = gear_reward(halluc, gt, Some("img"), &vocab, &backends, &cfg).unwrap();
        assert_eq!(outcome.partition.fp.len(), 1);
        assert!(outcome.breakdown.l_fp > 0.0);
    }

    #[test]
    fn breakdown_serializes_flat_json() {
        let outcome = GearOutcome {
            breakdown: GearLossBreakdown { l_tp: 0.1, l_fn: 0.2, l_fp: 0.3, l_r: 0.6, epsilon: 1e-6 },
            partition: GroupPartition {
                tp: BTreeSet::from([0]),
                fn_: BTreeSet::from([1]),
                fp: BTreeSet::from([2]),
            },
        };
        let json = serde_json::to_value(GearRewardJson::from(&outcome)).unwrap();
        assert_eq!(json["tp"], serde_json::json!([0]));
        assert_eq!(json["fn"], serde_json::json!([1]));
        assert_eq!(json["fp"], serde_json::json!([2]));
        assert_eq!(json["l_r"], serde_json::json!(0.6));
    }
}
