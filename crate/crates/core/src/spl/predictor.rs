//! Lightweight preference predictor: a bag-of-features logistic scorer over
//! (candidate, reference, shared-token) text features with a two-way softmax
//! head, trained with cross-entropy by full-batch gradient descent. The
//! encoder behind the feature map is swappable; the descriptor string is
//! stored with the weights.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::spl::PreferenceTriplet;
use crate::text::tokenize;
use crate::{Error, Result};

const MODEL_MAGIC: &[u8; 4] = b"RGPM";
const MODEL_VERSION: u32 = 1;
const FEATURIZER: &str = "bag-of-tokens-v1";

/// Floor applied to predicted probabilities so downstream KL terms stay
/// finite even for extreme logits.
const PROB_FLOOR: f64 = 1e-12;

/// Sparse feature vector: sorted (feature index, count) pairs. Index `D`
/// (one past the named features) is the bias and is always present.
pub type FeatureVector = Vec<(usize, f64)>;

/// Two-way preference scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    feature_names: Vec<String>,
    index: HashMap<String, usize>,
    /// Row-major 2 x (D + 1) weights; the last column is the bias.
    weights: Vec<f64>,
    featurizer: String,
}

/// Training hyperparameters for the predictor.
#[derive(Debug, Clone)]
pub struct PredictorHyperparams {
    pub epochs: u32,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    /// Standard deviation of the random weight init; zero keeps zeros.
    pub init_scale: f64,
}

impl Default for PredictorHyperparams {
    fn default() -> Self {
        PredictorHyperparams {
            epochs: 300,
            learning_rate: 0.5,
            l2: 0.0,
            seed: 0,
            init_scale: 0.0,
        }
    }
}

fn pair_features(candidate: &str, reference: &str) -> BTreeMap<String, f64> {
    let cand_tokens = tokenize(candidate);
    let ref_tokens = tokenize(reference);
    let mut features: BTreeMap<String, f64> = BTreeMap::new();
    for t in &cand_tokens {
        *features.entry(format!("c:{t}")).or_insert(0.0) += 1.0;
    }
    for t in &ref_tokens {
        *features.entry(format!("r:{t}")).or_insert(0.0) += 1.0;
    }
    // Elementwise interaction: tokens present on both sides.
    let ref_set: std::collections::BTreeSet<&String> = ref_tokens.iter().collect();
    let mut seen = std::collections::BTreeSet::new();
    for t in &cand_tokens {
        if ref_set.contains(t) && seen.insert(t.clone()) {
            *features.entry(format!("b:{t}")).or_insert(0.0) += 1.0;
        }
    }
    features
}

fn softmax2(z0: f64, z1: f64) -> [f64; 2] {
    let m = z0.max(z1);
    let e0 = (z0 - m).exp();
    let e1 = (z1 - m).exp();
    let sum = e0 + e1;
    let p0 = (e0 / sum).max(PROB_FLOOR);
    let p1 = (e1 / sum).max(PROB_FLOOR);
    let norm = p0 + p1;
    [p0 / norm, p1 / norm]
}

impl PredictorModel {
    /// A model with no named features. It predicts (0.5, 0.5) everywhere,
    /// which is the correct prior before any training.
    pub fn untrained() -> Self {
        PredictorModel {
            feature_names: Vec::new(),
            index: HashMap::new(),
            weights: vec![0.0; 2],
            featurizer: FEATURIZER.to_string(),
        }
    }

    /// Build the feature vocabulary from a dataset, in first-seen order.
    pub fn with_vocabulary_from(dataset: &[PreferenceTriplet]) -> Self {
        let mut feature_names = Vec::new();
        let mut index = HashMap::new();
        for triplet in dataset {
            for name in pair_features(&triplet.candidate, &triplet.reference).keys() {
                if !index.contains_key(name) {
                    index.insert(name.clone(), feature_names.len());
                    feature_names.push(name.clone());
                }
            }
        }
        let dim = feature_names.len();
        PredictorModel {
            feature_names,
            index,
            weights: vec![0.0; 2 * (dim + 1)],
            featurizer: FEATURIZER.to_string(),
        }
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn featurizer(&self) -> &str {
        &self.featurizer
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Randomize weights from a seeded uniform(-scale, scale); used by
    /// gradient-check fixtures.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut self.weights {
            *w = rng.gen_range(-scale..scale);
        }
    }

    /// Featurize a pair against this model's vocabulary. Unknown tokens are
    /// dropped; the bias feature is always appended.
    pub fn featurize(&self, candidate: &str, reference: &str) -> FeatureVector {
        let mut out: FeatureVector = pair_features(candidate, reference)
            .into_iter()
            .filter_map(|(name, count)| self.index.get(&name).map(|&i| (i, count)))
            .collect();
        out.sort_unstable_by_key(|&(i, _)| i);
        out.push((self.num_features(), 1.0));
        out
    }

    fn logits(&self, features: &FeatureVector) -> [f64; 2] {
        let stride = self.num_features() + 1;
        let mut z = [0.0f64; 2];
        for &(i, v) in features {
            z[0] += self.weights[i] * v;
            z[1] += self.weights[stride + i] * v;
        }
        z
    }

    /// Predicted two-way distribution; components strictly positive, sum 1.
    pub fn predict(&self, candidate: &str, reference: &str) -> [f64; 2] {
        let features = self.featurize(candidate, reference);
        let [z0, z1] = self.logits(&features);
        softmax2(z0, z1)
    }

    /// Confidence that the candidate agrees with the reference (the first
    /// component of the predicted distribution).
    pub fn agree_confidence(&self, candidate: &str, reference: &str) -> f64 {
        self.predict(candidate, reference)[0]
    }

    /// Save as a versioned binary: magic, version, featurizer descriptor,
    /// feature-vocabulary table, float32 weights.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(MODEL_MAGIC)?;
        binio::write_u32(&mut file, MODEL_VERSION)?;
        binio::write_string(&mut file, &self.featurizer)?;
        binio::write_u32(&mut file, self.feature_names.len() as u32)?;
        for name in &self.feature_names {
            binio::write_string(&mut file, name)?;
        }
        binio::write_u32(&mut file, self.weights.len() as u32)?;
        for &w in &self.weights {
            binio::write_f32(&mut file, w as f32)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        Self::read_from(&mut file)
    }

    pub(crate) fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, MODEL_MAGIC, "predictor model")?;
        let version = binio::read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Validation(format!(
                "predictor model version {version} unsupported (expected {MODEL_VERSION})"
            )));
        }
        let featurizer = binio::read_string(r)?;
        let n = binio::read_u32(r)? as usize;
        let mut feature_names = Vec::with_capacity(n);
        let mut index = HashMap::with_capacity(n);
        for i in 0..n {
            let name = binio::read_string(r)?;
            index.insert(name.clone(), i);
            feature_names.push(name);
        }
        let wn = binio::read_u32(r)? as usize;
        if wn != 2 * (n + 1) {
            return Err(Error::Validation(format!(
                "predictor model has {wn} weights for {n} features"
            )));
        }
        let mut weights = Vec::with_capacity(wn);
        for _ in 0..wn {
            weights.push(binio::read_f32(r)? as f64);
        }
        Ok(PredictorModel { feature_names, index, weights, featurizer })
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        binio::write_u32(w, MODEL_VERSION)?;
        binio::write_string(w, &self.featurizer)?;
        binio::write_u32(w, self.feature_names.len() as u32)?;
        for name in &self.feature_names {
            binio::write_string(w, name)?;
        }
        binio::write_u32(w, self.weights.len() as u32)?;
        for &weight in &self.weights {
            binio::write_f32(w, weight as f32)?;
        }
        Ok(())
    }

    /// Full-precision codec for training checkpoints, where weights must
    /// survive a save/load round trip bit-for-bit.
    pub(crate) fn write_full_precision<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_string(w, &self.featurizer)?;
        binio::write_u32(w, self.feature_names.len() as u32)?;
        for name in &self.feature_names {
            binio::write_string(w, name)?;
        }
        binio::write_u32(w, self.weights.len() as u32)?;
        for &weight in &self.weights {
            binio::write_f64(w, weight)?;
        }
        Ok(())
    }

    pub(crate) fn read_full_precision<R: Read>(r: &mut R) -> Result<Self> {
        let featurizer = binio::read_string(r)?;
        let n = binio::read_u32(r)? as usize;
        let mut feature_names = Vec::with_capacity(n);
        let mut index = HashMap::with_capacity(n);
        for i in 0..n {
            let name = binio::read_string(r)?;
            index.insert(name.clone(), i);
            feature_names.push(name);
        }
        let wn = binio::read_u32(r)? as usize;
        if wn != 2 * (n + 1) {
            return Err(Error::Validation(format!(
                "checkpointed predictor has {wn} weights for {n} features"
            )));
        }
        let mut weights = Vec::with_capacity(wn);
        for _ in 0..wn {
            weights.push(binio::read_f64(r)?);
        }
        Ok(PredictorModel { feature_names, index, weights, featurizer })
    }
}

fn loss_and_grad_cached(
    model: &PredictorModel,
    cached: &[(FeatureVector, [f64; 2])],
    l2: f64,
) -> (f64, Vec<f64>) {
    let stride = model.num_features() + 1;
    let mut grad = vec![0.0f64; model.weights.len()];
    let mut loss = 0.0f64;
    let n = cached.len() as f64;
    for (features, t) in cached {
        let [z0, z1] = model.logits(features);
        let p = softmax2(z0, z1);
        loss -= t[0] * p[0].ln() + t[1] * p[1].ln();
        let d = [(p[0] - t[0]) / n, (p[1] - t[1]) / n];
        for &(i, v) in features {
            grad[i] += d[0] * v;
            grad[stride + i] += d[1] * v;
        }
    }
    loss /= n;
    if l2 > 0.0 {
        for (g, &w) in grad.iter_mut().zip(&model.weights) {
            *g += l2 * w;
        }
        loss += 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
    }
    (loss, grad)
}

fn featurize_dataset(
    model: &PredictorModel,
    dataset: &[PreferenceTriplet],
) -> Vec<(FeatureVector, [f64; 2])> {
    dataset
        .iter()
        .map(|t| (model.featurize(&t.candidate, &t.reference), t.label.distribution()))
        .collect()
}

/// Mean cross-entropy of the model on the dataset and its gradient with
/// respect to the weights (including the L2 term). The gradient of the
/// softmax cross-entropy per sample is `(p - t) x` per output row.
pub fn ce_loss_and_grad(
    model: &PredictorModel,
    dataset: &[PreferenceTriplet],
    l2: f64,
) -> Result<(f64, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Validation("cross-entropy over an empty dataset".into()));
    }
    let cached = featurize_dataset(model, dataset);
    Ok(loss_and_grad_cached(model, &cached, l2))
}

/// Train the predictor by full-batch gradient descent, building the feature
/// vocabulary from the dataset when the model has none. Returns the trained
/// model and the final loss. Deterministic for a fixed seed.
pub fn train_predictor(
    dataset: &[PreferenceTriplet],
    model: PredictorModel,
    hyper: &PredictorHyperparams,
) -> Result<(PredictorModel, f64)> {
    if dataset.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    let mut model = if model.num_features() == 0 {
        PredictorModel::with_vocabulary_from(dataset)
    } else {
        model
    };
    if hyper.init_scale > 0.0 {
        model.randomize(hyper.seed, hyper.init_scale);
    }
    // The feature map does not depend on the weights, so featurize once.
    let cached = featurize_dataset(&model, dataset);
    for step in 0..hyper.epochs {
        let (loss, grad) = loss_and_grad_cached(&model, &cached, hyper.l2);
        if !loss.is_finite() {
            return Err(Error::Training {
                step: step as u64,
                message: format!("non-finite loss {loss}"),
            });
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            *w -= hyper.learning_rate * g;
        }
    }
    // Report the loss at the returned parameters.
    let (final_loss, _) = loss_and_grad_cached(&model, &cached, hyper.l2);
    Ok((model, final_loss))
}
