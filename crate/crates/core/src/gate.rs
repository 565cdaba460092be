//! The hybrid meta-classifier: five normalized features per image, binary
//! labels from BLEU-4 comparison of the two captioners, logistic regression
//! trained by full-batch gradient descent, and the final per-image decision.
//!
//! Label and tie conventions match throughout: label 0 (and a predicted
//! probability of exactly 0.5) means the neural caption wins.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bleu::sentence_bleu;
use crate::corpus::MAX_CAPTION_TOKENS;
use crate::error::{Error, Result};
use crate::knn::ConsensusResult;
use crate::nic::DecodedCaption;

pub const FEATURE_COUNT: usize = 5;

/// The five gate features, each normalized into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateFeatures {
    /// exp of the length-normalized log probability of the neural caption
    /// (its per-token geometric-mean probability).
    pub nic_confidence: f64,
    /// Average BLEU-4 similarity of the consensus caption to its subset.
    pub consensus_similarity: f64,
    /// Neighbor cosine sum divided by 5k.
    pub neighbor_similarity: f64,
    /// Neural caption length over the longest-caption constant.
    pub nic_length: f64,
    /// Consensus caption length over the longest-caption constant.
    pub knn_length: f64,
}

impl GateFeatures {
    pub fn as_array(&self) -> [f64; FEATURE_COUNT] {
        [
            self.nic_confidence,
            self.consensus_similarity,
            self.neighbor_similarity,
            self.nic_length,
            self.knn_length,
        ]
    }

    pub fn in_unit_range(&self) -> bool {
        self.as_array().iter().all(|&f| (0.0..=1.0).contains(&f))
    }
}

fn unit_clamp(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Assembles the normalized feature vector from the two models' outputs for
/// one image. `neighbor_count` is the number of summands in the cosine sum.
pub fn extract_features(
    nic: &DecodedCaption,
    consensus: &ConsensusResult,
    cosine_sum: f64,
    neighbor_count: usize,
) -> GateFeatures {
    let nic_confidence = if nic.token_log_probs.is_empty() {
        0.0
    } else {
        unit_clamp(nic.normalized_log_prob.exp())
    };
    let neighbor_similarity = if neighbor_count == 0 {
        0.0
    } else {
        unit_clamp(cosine_sum / (5.0 * neighbor_count as f64))
    };
    GateFeatures {
        nic_confidence,
        consensus_similarity: unit_clamp(consensus.avg_similarity),
        neighbor_similarity,
        nic_length: unit_clamp(nic.tokens.len() as f64 / MAX_CAPTION_TOKENS as f64),
        knn_length: unit_clamp(consensus.caption.tokens.len() as f64 / MAX_CAPTION_TOKENS as f64),
    }
}

/// One labeled training sample for the gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSample {
    pub image_id: String,
    pub features: GateFeatures,
    /// 0: neural caption wins, 1: consensus caption wins.
    pub label: u8,
}

/// Both models' outputs for one image, plus its reference captions.
#[derive(Debug, Clone)]
pub struct CandidatePair {
    pub image_id: String,
    pub nic: DecodedCaption,
    pub consensus: ConsensusResult,
    pub cosine_sum: f64,
    pub neighbor_count: usize,
    pub references: Vec<Vec<String>>,
}

impl CandidatePair {
    pub fn features(&self) -> GateFeatures {
        extract_features(&self.nic, &self.consensus, self.cosine_sum, self.neighbor_count)
    }
}

/// Labels each image by comparing the smoothed sentence BLEU-4 of the two
/// candidate captions against the references: 0 when the neural caption ties
/// or wins, 1 otherwise. Images without references are skipped with a
/// warning.
pub fn make_labels(pairs: &[CandidatePair]) -> Vec<GateSample> {
    let mut samples = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.references.is_empty() {
            log::warn!("image {} has no references, skipped for gate labels", pair.image_id);
            continue;
        }
        let nic_bleu = sentence_bleu(&pair.nic.tokens, &pair.references, 4)
            .expect("references checked non-empty")
            .value;
        let knn_bleu = sentence_bleu(&pair.consensus.caption.tokens, &pair.references, 4)
            .expect("references checked non-empty")
            .value;
        let label = if nic_bleu >= knn_bleu { 0 } else { 1 };
        let features = pair.features();
        debug_assert!(features.in_unit_range());
        samples.push(GateSample {
            image_id: pair.image_id.clone(),
            features,
            label,
        });
    }
    samples
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateHyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for GateHyperparams {
    fn default() -> Self {
        GateHyperparams {
            learning_rate: 0.1,
            epochs: 1000,
            l2: 1e-4,
            seed: 42,
        }
    }
}

/// Trained logistic-regression weights with training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateModel {
    pub weights: [f64; FEATURE_COUNT],
    pub bias: f64,
    pub hyperparams: GateHyperparams,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Set when training fell back to the constant predictor.
    pub degenerate: bool,
}

/// Training output: the model and the per-step loss trace (index 0 is the
/// loss before the first update).
#[derive(Debug, Clone)]
pub struct GateTraining {
    pub model: GateModel,
    pub loss_per_epoch: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn linear_score(weights: &[f64; FEATURE_COUNT], bias: f64, features: &GateFeatures) -> f64 {
    weights
        .iter()
        .zip(features.as_array())
        .map(|(w, f)| w * f)
        .sum::<f64>()
        + bias
}

/// Mean cross-entropy over the samples plus an L2 penalty on the weights
/// (bias excluded).
pub fn cross_entropy_loss(
    samples: &[GateSample],
    weights: &[f64; FEATURE_COUNT],
    bias: f64,
    l2: f64,
) -> f64 {
    let n = samples.len() as f64;
    let mut loss = 0.0;
    for sample in samples {
        let z = linear_score(weights, bias, &sample.features);
        // -[y ln p + (1-y) ln(1-p)] = (1-y) z + ln(1 + exp(-z)), stably
        let y = sample.label as f64;
        let softplus_neg_z = if z > 0.0 {
            (-z).exp().ln_1p()
        } else {
            -z + z.exp().ln_1p()
        };
        loss += (1.0 - y) * z + softplus_neg_z;
    }
    loss / n + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Analytic gradient of `cross_entropy_loss` with respect to the weights and
/// bias.
pub fn gate_gradients(
    samples: &[GateSample],
    weights: &[f64; FEATURE_COUNT],
    bias: f64,
    l2: f64,
) -> ([f64; FEATURE_COUNT], f64) {
    let n = samples.len() as f64;
    let mut grad_w = [0.0; FEATURE_COUNT];
    let mut grad_b = 0.0;
    for sample in samples {
        let z = linear_score(weights, bias, &sample.features);
        let residual = sigmoid(z) - sample.label as f64;
        for (g, f) in grad_w.iter_mut().zip(sample.features.as_array()) {
            *g += residual * f;
        }
        grad_b += residual;
    }
    for (g, w) in grad_w.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    (grad_w, grad_b / n)
}

fn accuracy(samples: &[GateSample], weights: &[f64; FEATURE_COUNT], bias: f64) -> f64 {
    let correct = samples
        .iter()
        .filter(|s| {
            let predicted = u8::from(linear_score(weights, bias, &s.features) > 0.0);
            predicted == s.label
        })
        .count();
    correct as f64 / samples.len() as f64
}

/// Full-batch gradient descent on the regularized cross-entropy from a zero
/// initialization (the objective is convex; the seed is recorded for
/// provenance only).
///
/// When only one class is present the training data cannot rank captions, so
/// a constant predictor (zero weights, clamped log-odds bias) is returned
/// with the degenerate flag set.
pub fn train_gate(samples: &[GateSample], hp: &GateHyperparams) -> Result<GateTraining> {
    if samples.is_empty() {
        return Err(Error::NoGateTrainingData);
    }
    let positives = samples.iter().filter(|s| s.label == 1).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 || samples.len() < 2 {
        log::warn!(
            "gate training is degenerate ({} positive / {} negative labels); using a constant predictor",
            positives,
            negatives
        );
        let p = (positives as f64 / samples.len() as f64).clamp(1e-4, 1.0 - 1e-4);
        let bias = (p / (1.0 - p)).ln();
        let weights = [0.0; FEATURE_COUNT];
        let loss = cross_entropy_loss(samples, &weights, bias, hp.l2);
        let model = GateModel {
            weights,
            bias,
            hyperparams: hp.clone(),
            final_loss: loss,
            train_accuracy: accuracy(samples, &weights, bias),
            degenerate: true,
        };
        return Ok(GateTraining {
            model,
            loss_per_epoch: vec![loss],
        });
    }

    let mut weights = [0.0; FEATURE_COUNT];
    let mut bias = 0.0;
    let mut loss_per_epoch = Vec::with_capacity(hp.epochs + 1);
    loss_per_epoch.push(cross_entropy_loss(samples, &weights, bias, hp.l2));
    for _ in 0..hp.epochs {
        let (grad_w, grad_b) = gate_gradients(samples, &weights, bias, hp.l2);
        for (w, g) in weights.iter_mut().zip(grad_w) {
            *w -= hp.learning_rate * g;
        }
        bias -= hp.learning_rate * grad_b;
        loss_per_epoch.push(cross_entropy_loss(samples, &weights, bias, hp.l2));
    }
    let final_loss = *loss_per_epoch.last().unwrap();
    let model = GateModel {
        weights,
        bias,
        hyperparams: hp.clone(),
        final_loss,
        train_accuracy: accuracy(samples, &weights, bias),
        degenerate: false,
    };
    Ok(GateTraining {
        model,
        loss_per_epoch,
    })
}

impl GateModel {
    /// Probability that the consensus caption is the better one.
    pub fn probability(&self, features: &GateFeatures) -> f64 {
        sigmoid(linear_score(&self.weights, self.bias, features))
    }

    /// Predicted class: 1 only when the probability strictly exceeds 0.5
    /// (the exact tie goes to the neural caption, matching the label rule).
    pub fn predict(&self, features: &GateFeatures) -> u8 {
        u8::from(linear_score(&self.weights, self.bias, features) > 0.0)
    }
}

/// The per-image outcome of the hybrid model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HybridDecision {
    pub image_id: String,
    /// 0 picked the neural caption, 1 the consensus caption.
    pub predicted: u8,
    pub probability: f64,
    pub nic_caption: Vec<String>,
    pub knn_caption: Vec<String>,
    pub final_caption: Vec<String>,
    pub features: GateFeatures,
}

/// Applies the gate to one image's candidates.
pub fn decide(
    model: &GateModel,
    features: &GateFeatures,
    image_id: &str,
    nic_caption: &[String],
    knn_caption: &[String],
) -> HybridDecision {
    let predicted = model.predict(features);
    let final_caption = if predicted == 0 { nic_caption } else { knn_caption };
    HybridDecision {
        image_id: image_id.to_string(),
        predicted,
        probability: model.probability(features),
        nic_caption: nic_caption.to_vec(),
        knn_caption: knn_caption.to_vec(),
        final_caption: final_caption.to_vec(),
        features: *features,
    }
}

const GATE_MAGIC: &str = "capfuse.gate";

#[derive(Serialize, Deserialize)]
struct GateFile {
    magic: String,
    version: u32,
    vocab_hash: String,
    model: GateModel,
}

pub fn save_gate(path: &Path, model: &GateModel, vocab_hash: &str) -> Result<()> {
    let file = GateFile {
        magic: GATE_MAGIC.to_string(),
        version: 1,
        vocab_hash: vocab_hash.to_string(),
        model: model.clone(),
    };
    let mut body = serde_json::to_string_pretty(&file).expect("gate model serializes");
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_gate(path: &Path) -> Result<(GateModel, String)> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: GateFile = serde_json::from_str(&body).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    if file.magic != GATE_MAGIC {
        return Err(Error::InvalidCheckpoint {
            path: path.into(),
            message: format!("bad magic {:?}", file.magic),
        });
    }
    Ok((file.model, file.vocab_hash))
}
