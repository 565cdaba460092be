//! Pipeline orchestration behind the CLI: prepare, train, caption, evaluate
//! and the beam sweep.
//!
//! Every artifact is written deterministically (sorted orders, no clocks),
//! so a rerun with the same config and seed reproduces each file byte for
//! byte.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use crate::bleu::{corpus_bleu, sentence_bleu};
use crate::config::RunConfig;
use crate::corpus::{self, DatasetSplit, ImageRecord, Split, Vocabulary};
use crate::error::{Error, Result};
use crate::gate::{self, CandidatePair, GateModel, GateSample, HybridDecision};
use crate::knn::{self, CandidateSet, IndexManifest};
use crate::nic::{self, NicParameters, TrainExample};

pub const VOCAB_FILE: &str = "vocab.json";
pub const INDEX_MANIFEST_FILE: &str = "index.manifest.json";
pub const INDEX_FEATURES_FILE: &str = "index.features.jsonl";
pub const NIC_FILE: &str = "nic.json";
pub const GATE_FILE: &str = "gate.json";
pub const CAPTIONS_FILE: &str = "captions.jsonl";

#[derive(Debug, Clone, Serialize)]
pub struct PrepareSummary {
    pub images: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub vocab_size: usize,
    pub real_tokens: usize,
    pub feature_dim: usize,
}

/// Loads the corpus, builds the vocabulary from the training captions, and
/// persists the vocabulary plus the neighbor index (training feature vectors
/// and a manifest). Idempotent: a rerun rewrites identical bytes.
pub fn prepare(config: &RunConfig) -> Result<PrepareSummary> {
    let (records, split) = corpus::load_corpus(&config.captions, &config.features, &config.splits)?;
    let train_captions: Vec<_> = records_for(&records, &split.train)
        .flat_map(|r| r.references.iter().cloned())
        .collect();
    let vocab = Vocabulary::build(&train_captions, config.cutoff)?;
    if vocab.real_token_count() == 0 {
        return Err(Error::EmptyVocabulary { cutoff: config.cutoff });
    }

    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    vocab.save(&config.out_dir.join(VOCAB_FILE))?;

    let train_records: Vec<ImageRecord> = records_for(&records, &split.train).cloned().collect();
    let feature_dim = train_records.first().map(|r| r.features.len()).unwrap_or(0);
    let manifest = IndexManifest::new(
        config.k,
        config.m,
        feature_dim,
        corpus::corpus_hash(&config.captions, &config.features, &config.splits)?,
        train_records.len(),
    );
    manifest.save(&config.out_dir.join(INDEX_MANIFEST_FILE))?;
    knn::save_index_features(&config.out_dir.join(INDEX_FEATURES_FILE), &train_records)?;

    Ok(PrepareSummary {
        images: records.len(),
        train: split.train.len(),
        validation: split.validation.len(),
        test: split.test.len(),
        vocab_size: vocab.len(),
        real_tokens: vocab.real_token_count(),
        feature_dim,
    })
}

fn records_for<'a>(
    records: &'a [ImageRecord],
    ids: &'a [String],
) -> impl Iterator<Item = &'a ImageRecord> {
    let by_id: HashMap<&str, &ImageRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    ids.iter().filter_map(move |id| by_id.get(id.as_str()).copied())
}

/// Corpus plus persisted artifacts, cross-checked.
struct LoadedRun {
    records: Vec<ImageRecord>,
    split: DatasetSplit,
    vocab: Vocabulary,
    /// Training images as retrieved from the persisted index (features from
    /// the index file, captions joined from the corpus).
    index: Vec<ImageRecord>,
    manifest: IndexManifest,
}

fn load_run(config: &RunConfig) -> Result<LoadedRun> {
    let (records, split) = corpus::load_corpus(&config.captions, &config.features, &config.splits)?;
    let vocab = Vocabulary::load(&config.out_dir.join(VOCAB_FILE))?;
    let manifest = IndexManifest::load(&config.out_dir.join(INDEX_MANIFEST_FILE))?;
    let current_hash = corpus::corpus_hash(&config.captions, &config.features, &config.splits)?;
    if manifest.corpus_hash != current_hash {
        return Err(Error::CheckpointMismatch(
            "corpus files changed since prepare; run prepare again".into(),
        ));
    }
    let by_id: HashMap<&str, &ImageRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let index_features = corpus::load_features(&config.out_dir.join(INDEX_FEATURES_FILE))?;
    let mut index = Vec::with_capacity(index_features.len());
    for record in index_features {
        let source = by_id.get(record.image_id.as_str()).ok_or_else(|| {
            Error::CheckpointMismatch(format!(
                "index image {} is missing from the corpus",
                record.image_id
            ))
        })?;
        index.push(ImageRecord {
            image_id: record.image_id,
            features: record.features,
            references: source.references.clone(),
        });
    }
    Ok(LoadedRun {
        records,
        split,
        vocab,
        index,
        manifest,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub nic_epoch_token_loss: Vec<f64>,
    pub gate_samples: usize,
    pub gate_label_ones: usize,
    pub gate_accuracy: f64,
    pub gate_final_loss: f64,
    pub majority_baseline: f64,
    pub degenerate_gate: bool,
}

/// Trains the neural captioner on the train split, labels the validation
/// split by BLEU-4 comparison of the two models, trains the gate, and
/// persists both checkpoints.
pub fn train(config: &RunConfig) -> Result<TrainSummary> {
    let run = load_run(config)?;
    let vocab_hash = run.vocab.hash();

    let mut examples = Vec::new();
    for record in records_for(&run.records, &run.split.train) {
        for reference in &record.references {
            examples.push(TrainExample {
                features: record.features.clone(),
                target_ids: run.vocab.encode(&reference.tokens),
            });
        }
    }
    let nic_hp = config.nic_hyperparams();
    let feature_dim = run.manifest.feature_dim;
    let (params, report) = nic::train(&examples, feature_dim, run.vocab.len(), &nic_hp)?;
    nic::save_nic(&config.out_dir.join(NIC_FILE), &params, &nic_hp, &report, &vocab_hash)?;

    if run.split.validation.is_empty() {
        return Err(Error::NoGateTrainingData);
    }
    let validation: Vec<&ImageRecord> = records_for(&run.records, &run.split.validation).collect();
    let pairs = candidate_pairs(&validation, &params, &run, config)?;
    let samples = gate::make_labels(&pairs);
    if samples.is_empty() {
        return Err(Error::NoGateTrainingData);
    }
    for sample in &samples {
        if !sample.features.in_unit_range() {
            return Err(Error::InvalidInput(format!(
                "gate features out of range for image {}",
                sample.image_id
            )));
        }
    }
    let trained = gate::train_gate(&samples, &config.gate_hyperparams())?;
    gate::save_gate(&config.out_dir.join(GATE_FILE), &trained.model, &vocab_hash)?;

    let ones = samples.iter().filter(|s| s.label == 1).count();
    let majority = ones.max(samples.len() - ones) as f64 / samples.len() as f64;
    Ok(TrainSummary {
        nic_epoch_token_loss: report.epoch_token_loss,
        gate_samples: samples.len(),
        gate_label_ones: ones,
        gate_accuracy: trained.model.train_accuracy,
        gate_final_loss: trained.model.final_loss,
        majority_baseline: majority,
        degenerate_gate: trained.model.degenerate,
    })
}

/// Runs both captioners for each image, in parallel, in input order.
fn candidate_pairs(
    images: &[&ImageRecord],
    params: &NicParameters,
    run: &LoadedRun,
    config: &RunConfig,
) -> Result<Vec<CandidatePair>> {
    let by_id: HashMap<&str, &ImageRecord> =
        run.index.iter().map(|r| (r.image_id.as_str(), r)).collect();
    images
        .par_iter()
        .map(|record| {
            let decoded =
                nic::decode_beam(params, &run.vocab, &record.features, config.beam, config.max_len)?;
            let neighbors = knn::find_neighbors(record, &run.index, config.k)?;
            let candidates = CandidateSet::gather(&neighbors, &by_id);
            let consensus = knn::consensus_caption(&candidates, config.m)?;
            Ok(CandidatePair {
                image_id: record.image_id.clone(),
                nic: decoded,
                cosine_sum: neighbors.cosine_sum(),
                neighbor_count: neighbors.len(),
                consensus,
                references: record.reference_tokens(),
            })
        })
        .collect()
}

/// Checkpoints loaded for inference commands.
struct InferenceState {
    run: LoadedRun,
    params: NicParameters,
    gate: GateModel,
}

fn load_inference(config: &RunConfig) -> Result<InferenceState> {
    let run = load_run(config)?;
    let vocab_hash = run.vocab.hash();
    let (params, _, nic_vocab_hash) = nic::load_nic(&config.out_dir.join(NIC_FILE))?;
    if nic_vocab_hash != vocab_hash {
        return Err(Error::CheckpointMismatch(
            "neural checkpoint was trained against a different vocabulary".into(),
        ));
    }
    let (gate, gate_vocab_hash) = gate::load_gate(&config.out_dir.join(GATE_FILE))?;
    if gate_vocab_hash != vocab_hash {
        return Err(Error::CheckpointMismatch(
            "gate checkpoint was trained against a different vocabulary".into(),
        ));
    }
    Ok(InferenceState { run, params, gate })
}

/// What to caption.
#[derive(Debug, Clone)]
pub enum CaptionTarget {
    /// The test split of the corpus.
    TestSplit,
    /// Explicit image ids resolved against the corpus.
    Ids(Vec<String>),
    /// An external features JSONL file (no references required).
    FeaturesFile(PathBuf),
}

/// One output line of the caption stream: either a decision or a per-image
/// error record.
#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum CaptionLine {
    Decision(HybridDecision),
    Error { image_id: String, error: String },
}

/// Captions images with both models and lets the gate pick. Emits one JSON
/// line per image (ordered by image id), persists the stream to
/// `captions.jsonl`, and keeps going past unknown ids with per-line error
/// records.
pub fn caption(
    config: &RunConfig,
    target: &CaptionTarget,
    force_gate: Option<u8>,
) -> Result<Vec<CaptionLine>> {
    let state = load_inference(config)?;
    let mut queries: Vec<std::result::Result<ImageRecord, (String, String)>> = Vec::new();
    match target {
        CaptionTarget::TestSplit => {
            for record in records_for(&state.run.records, &state.run.split.test) {
                queries.push(Ok(record.clone()));
            }
        }
        CaptionTarget::Ids(ids) => {
            let by_id: HashMap<&str, &ImageRecord> = state
                .run
                .records
                .iter()
                .map(|r| (r.image_id.as_str(), r))
                .collect();
            let mut sorted = ids.clone();
            sorted.sort();
            sorted.dedup();
            for id in sorted {
                match by_id.get(id.as_str()) {
                    Some(record) => queries.push(Ok((*record).clone())),
                    None => queries.push(Err((id.clone(), "unknown image id".to_string()))),
                }
            }
        }
        CaptionTarget::FeaturesFile(path) => {
            let mut features = corpus::load_features(path)?;
            features.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            for record in features {
                if record.features.len() != state.run.manifest.feature_dim {
                    queries.push(Err((
                        record.image_id.clone(),
                        format!(
                            "feature dimension {} does not match index dimension {}",
                            record.features.len(),
                            state.run.manifest.feature_dim
                        ),
                    )));
                    continue;
                }
                queries.push(Ok(ImageRecord {
                    image_id: record.image_id,
                    features: record.features,
                    references: Vec::new(),
                }));
            }
        }
    }

    let lines: Vec<CaptionLine> = queries
        .into_par_iter()
        .map(|query| match query {
            Err((image_id, error)) => CaptionLine::Error { image_id, error },
            Ok(record) => {
                match caption_one(&record, &state, config, force_gate) {
                    Ok(decision) => CaptionLine::Decision(decision),
                    Err(e) => CaptionLine::Error {
                        image_id: record.image_id.clone(),
                        error: e.to_string(),
                    },
                }
            }
        })
        .collect();

    let mut body = String::new();
    for line in &lines {
        writeln!(body, "{}", serde_json::to_string(line).expect("line serializes")).unwrap();
    }
    let path = config.out_dir.join(CAPTIONS_FILE);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(lines)
}

fn caption_one(
    record: &ImageRecord,
    state: &InferenceState,
    config: &RunConfig,
    force_gate: Option<u8>,
) -> Result<HybridDecision> {
    let by_id: HashMap<&str, &ImageRecord> = state
        .run
        .index
        .iter()
        .map(|r| (r.image_id.as_str(), r))
        .collect();
    let decoded = nic::decode_beam(
        &state.params,
        &state.run.vocab,
        &record.features,
        config.beam,
        config.max_len,
    )?;
    let neighbors = knn::find_neighbors(record, &state.run.index, config.k)?;
    let candidates = CandidateSet::gather(&neighbors, &by_id);
    let consensus = knn::consensus_caption(&candidates, config.m)?;
    let features = gate::extract_features(&decoded, &consensus, neighbors.cosine_sum(), neighbors.len());
    let mut decision = gate::decide(
        &state.gate,
        &features,
        &record.image_id,
        &decoded.tokens,
        &consensus.caption.tokens,
    );
    if let Some(forced) = force_gate {
        decision.predicted = forced;
        decision.final_caption = if forced == 0 {
            decision.nic_caption.clone()
        } else {
            decision.knn_caption.clone()
        };
    }
    Ok(decision)
}

/// Corpus-level and mean sentence-level scores for one selection strategy,
/// scaled to [0, 100] and rounded to two decimals.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ModelScores {
    pub bleu1: f64,
    pub bleu4: f64,
    pub mean_sentence_bleu4: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecisionSummary {
    pub image_id: String,
    pub predicted: u8,
    pub oracle_label: u8,
    /// Smoothed sentence BLEU-4 of each candidate, scaled to [0, 100].
    pub nic_bleu4: f64,
    pub knn_bleu4: f64,
    pub final_caption: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub images: usize,
    pub knn: ModelScores,
    pub nic: ModelScores,
    pub hybrid: ModelScores,
    /// Hybrid with ground-truth labels substituted for predictions.
    pub oracle: ModelScores,
    pub gate_accuracy: f64,
    pub majority_baseline: f64,
    pub decisions: Vec<DecisionSummary>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn scale_bleu(x: f64) -> f64 {
    round2(x * 100.0)
}

/// Scores both captioners, the gated hybrid, and the oracle-gated hybrid on
/// a split, and reports gate accuracy against the oracle labels.
pub fn evaluate(config: &RunConfig, split: Split) -> Result<EvalReport> {
    let state = load_inference(config)?;
    let ids = state.run.split.ids(split);
    if ids.is_empty() {
        return Err(Error::EmptySplit {
            split: split.to_string(),
        });
    }
    let images: Vec<&ImageRecord> = records_for(&state.run.records, ids).collect();
    let pairs = candidate_pairs(&images, &state.params, &state.run, config)?;

    struct PerImage {
        pair: CandidatePair,
        nic_bleu4: f64,
        knn_bleu4: f64,
        predicted: u8,
        oracle_label: u8,
    }

    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let nic_bleu4 = sentence_bleu(&pair.nic.tokens, &pair.references, 4)?.value;
        let knn_bleu4 = sentence_bleu(&pair.consensus.caption.tokens, &pair.references, 4)?.value;
        let oracle_label = u8::from(nic_bleu4 < knn_bleu4);
        let predicted = state.gate.predict(&pair.features());
        rows.push(PerImage {
            pair,
            nic_bleu4,
            knn_bleu4,
            predicted,
            oracle_label,
        });
    }

    let select = |row: &PerImage, label: u8| -> Vec<String> {
        if label == 0 {
            row.pair.nic.tokens.clone()
        } else {
            row.pair.consensus.caption.tokens.clone()
        }
    };
    let scores = |selector: &dyn Fn(&PerImage) -> (Vec<String>, f64)| -> Result<ModelScores> {
        let mut pairs = Vec::with_capacity(rows.len());
        let mut sentence_sum = 0.0;
        for row in &rows {
            let (tokens, sentence) = selector(row);
            sentence_sum += sentence;
            pairs.push((tokens, row.pair.references.clone()));
        }
        Ok(ModelScores {
            bleu1: scale_bleu(corpus_bleu(&pairs, 1)?.value),
            bleu4: scale_bleu(corpus_bleu(&pairs, 4)?.value),
            mean_sentence_bleu4: scale_bleu(sentence_sum / rows.len() as f64),
        })
    };

    let nic_scores = scores(&|row| (row.pair.nic.tokens.clone(), row.nic_bleu4))?;
    let knn_scores = scores(&|row| (row.pair.consensus.caption.tokens.clone(), row.knn_bleu4))?;
    let hybrid_scores = scores(&|row| {
        let tokens = select(row, row.predicted);
        let sentence = if row.predicted == 0 { row.nic_bleu4 } else { row.knn_bleu4 };
        (tokens, sentence)
    })?;
    let oracle_scores = scores(&|row| {
        let tokens = select(row, row.oracle_label);
        let sentence = row.nic_bleu4.max(row.knn_bleu4);
        (tokens, sentence)
    })?;

    let agreements = rows.iter().filter(|r| r.predicted == r.oracle_label).count();
    let ones = rows.iter().filter(|r| r.oracle_label == 1).count();
    let majority = ones.max(rows.len() - ones) as f64 / rows.len() as f64;

    let decisions = rows
        .iter()
        .map(|row| DecisionSummary {
            image_id: row.pair.image_id.clone(),
            predicted: row.predicted,
            oracle_label: row.oracle_label,
            nic_bleu4: scale_bleu(row.nic_bleu4),
            knn_bleu4: scale_bleu(row.knn_bleu4),
            final_caption: select(row, row.predicted).join(" "),
        })
        .collect();

    let report = EvalReport {
        split: split.to_string(),
        images: rows.len(),
        knn: knn_scores,
        nic: nic_scores,
        hybrid: hybrid_scores,
        oracle: oracle_scores,
        gate_accuracy: agreements as f64 / rows.len() as f64,
        majority_baseline: majority,
        decisions,
    };
    let path = config.out_dir.join(format!("eval_{split}.json"));
    let mut body = serde_json::to_string_pretty(&report).expect("report serializes");
    body.push('\n');
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Renders the evaluation report as the usual three-plus-one row table.
pub fn render_eval(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(out, "split: {} ({} images)", report.split, report.images).unwrap();
    writeln!(out, "{:<24} {:>8} {:>8} {:>14}", "Model", "BLEU-1", "BLEU-4", "mean sBLEU-4").unwrap();
    for (name, scores) in [
        ("kNN consensus", &report.knn),
        ("NIC", &report.nic),
        ("Hybrid model", &report.hybrid),
        ("Hybrid (oracle gate)", &report.oracle),
    ] {
        writeln!(
            out,
            "{:<24} {:>8.2} {:>8.2} {:>14.2}",
            name, scores.bleu1, scores.bleu4, scores.mean_sentence_bleu4
        )
        .unwrap();
    }
    writeln!(
        out,
        "gate accuracy {:.4} (majority baseline {:.4})",
        report.gate_accuracy, report.majority_baseline
    )
    .unwrap();
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub beam: usize,
    pub bleu1: f64,
    pub bleu4: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub split: String,
    pub images: usize,
    pub rows: Vec<SweepRow>,
}

/// Scores the neural captioner across beam widths (the classic 1/3/5/7
/// sweep) on a split.
pub fn sweep_beam(config: &RunConfig, split: Split, beams: &[usize]) -> Result<SweepReport> {
    let state = load_inference(config)?;
    let ids = state.run.split.ids(split);
    if ids.is_empty() {
        return Err(Error::EmptySplit {
            split: split.to_string(),
        });
    }
    let images: Vec<&ImageRecord> = records_for(&state.run.records, ids).collect();
    let mut rows = Vec::with_capacity(beams.len());
    for &beam in beams {
        let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = images
            .par_iter()
            .map(|record| {
                let decoded = nic::decode_beam(
                    &state.params,
                    &state.run.vocab,
                    &record.features,
                    beam,
                    config.max_len,
                )?;
                Ok((decoded.tokens, record.reference_tokens()))
            })
            .collect::<Result<_>>()?;
        rows.push(SweepRow {
            beam,
            bleu1: scale_bleu(corpus_bleu(&pairs, 1)?.value),
            bleu4: scale_bleu(corpus_bleu(&pairs, 4)?.value),
        });
    }
    let report = SweepReport {
        split: split.to_string(),
        images: images.len(),
        rows,
    };
    let path = config.out_dir.join(format!("sweep_{split}.json"));
    let mut body = serde_json::to_string_pretty(&report).expect("report serializes");
    body.push('\n');
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

pub fn render_sweep(report: &SweepReport) -> String {
    let mut out = String::new();
    writeln!(out, "split: {} ({} images)", report.split, report.images).unwrap();
    writeln!(out, "{:<12} {:>8} {:>8}", "Beam size", "BLEU-1", "BLEU-4").unwrap();
    for row in &report.rows {
        writeln!(out, "{:<12} {:>8.2} {:>8.2}", row.beam, row.bleu1, row.bleu4).unwrap();
    }
    out
}

/// Recomputes the gate samples for a list of image ids with existing
/// checkpoints (used by the feature-range checks and external verification).
pub fn gate_samples_for(
    config: &RunConfig,
    ids: &[String],
) -> Result<Vec<GateSample>> {
    let state = load_inference(config)?;
    let images: Vec<&ImageRecord> = records_for(&state.run.records, ids).collect();
    let pairs = candidate_pairs(&images, &state.params, &state.run, config)?;
    Ok(gate::make_labels(&pairs))
}

/// All image ids of the corpus, sorted.
pub fn all_image_ids(config: &RunConfig) -> Result<Vec<String>> {
    let (records, _) = corpus::load_corpus(&config.captions, &config.features, &config.splits)?;
    Ok(records.into_iter().map(|r| r.image_id).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture::{self, FixtureConfig};
    use std::path::Path;

    fn small_config(dir: &Path) -> RunConfig {
        let fixture_dir = dir.join("data");
        fixture::write(
            &FixtureConfig {
                images: 48,
                seed: 5,
                ..Default::default()
            },
            &fixture_dir,
        )
        .unwrap();
        RunConfig {
            captions: fixture_dir.join("captions.tsv"),
            features: fixture_dir.join("features.jsonl"),
            splits: fixture_dir.join("splits.tsv"),
            out_dir: dir.join("out"),
            seed: 11,
            k: 5,
            m: 8,
            beam: 2,
            cutoff: 1,
            max_len: 16,
            nic: crate::config::NicConfig {
                embed_dim: 12,
                hidden_dim: 12,
                learning_rate: 0.3,
                epochs: 4,
                clip: 5.0,
            },
            gate: crate::config::GateConfig {
                learning_rate: 0.1,
                epochs: 200,
                l2: 1e-4,
            },
        }
    }

    fn read(path: &Path) -> Vec<u8> {
        fs::read(path).unwrap()
    }

    #[test]
    fn full_pipeline_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());

        let prep = prepare(&config).unwrap();
        assert_eq!(prep.images, 48);
        assert!(prep.real_tokens > 10);

        // prepare is idempotent byte for byte
        let vocab_bytes = read(&config.out_dir.join(VOCAB_FILE));
        let manifest_bytes = read(&config.out_dir.join(INDEX_MANIFEST_FILE));
        let index_bytes = read(&config.out_dir.join(INDEX_FEATURES_FILE));
        prepare(&config).unwrap();
        assert_eq!(vocab_bytes, read(&config.out_dir.join(VOCAB_FILE)));
        assert_eq!(manifest_bytes, read(&config.out_dir.join(INDEX_MANIFEST_FILE)));
        assert_eq!(index_bytes, read(&config.out_dir.join(INDEX_FEATURES_FILE)));

        let summary = train(&config).unwrap();
        assert_eq!(summary.nic_epoch_token_loss.len(), 4);
        assert!(summary.gate_samples > 0);
        assert!(summary.gate_accuracy >= summary.majority_baseline - 1e-12);

        let lines = caption(&config, &CaptionTarget::TestSplit, None).unwrap();
        assert!(!lines.is_empty());
        for line in &lines {
            match line {
                CaptionLine::Decision(d) => {
                    let chosen = if d.predicted == 0 { &d.nic_caption } else { &d.knn_caption };
                    assert_eq!(&d.final_caption, chosen);
                    assert!(d.features.in_unit_range());
                }
                CaptionLine::Error { image_id, error } => {
                    panic!("unexpected error for {image_id}: {error}")
                }
            }
        }

        let report = evaluate(&config, Split::Test).unwrap();
        assert!(report.oracle.mean_sentence_bleu4 >= report.nic.mean_sentence_bleu4 - 1e-9);
        assert!(report.oracle.mean_sentence_bleu4 >= report.knn.mean_sentence_bleu4 - 1e-9);
        assert!((0.0..=100.0).contains(&report.hybrid.bleu1));
        assert!((0.0..=100.0).contains(&report.hybrid.bleu4));

        let sweep = sweep_beam(&config, Split::Test, &[1, 2]).unwrap();
        assert_eq!(sweep.rows.len(), 2);
    }

    #[test]
    fn caption_reports_unknown_ids_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        prepare(&config).unwrap();
        train(&config).unwrap();

        let known = all_image_ids(&config).unwrap()[0].clone();
        let lines = caption(
            &config,
            &CaptionTarget::Ids(vec!["nope".into(), known.clone()]),
            None,
        )
        .unwrap();
        assert_eq!(lines.len(), 2);
        let mut saw_error = false;
        let mut saw_decision = false;
        for line in lines {
            match line {
                CaptionLine::Error { image_id, .. } => {
                    assert_eq!(image_id, "nope");
                    saw_error = true;
                }
                CaptionLine::Decision(d) => {
                    assert_eq!(d.image_id, known);
                    saw_decision = true;
                }
            }
        }
        assert!(saw_error && saw_decision);
    }

    #[test]
    fn forced_gate_always_picks_that_model() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        prepare(&config).unwrap();
        train(&config).unwrap();
        for (forced, from_nic) in [(0u8, true), (1u8, false)] {
            let lines = caption(&config, &CaptionTarget::TestSplit, Some(forced)).unwrap();
            for line in lines {
                if let CaptionLine::Decision(d) = line {
                    let expected = if from_nic { &d.nic_caption } else { &d.knn_caption };
                    assert_eq!(&d.final_caption, expected);
                    assert_eq!(d.predicted, forced);
                }
            }
        }
    }

    /// Recomputation oracle: features in the caption stream must equal the
    /// five definitional quantities reassembled here from the raw model
    /// outputs with plain arithmetic.
    #[test]
    fn caption_stream_features_match_offline_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        prepare(&config).unwrap();
        train(&config).unwrap();
        let lines = caption(&config, &CaptionTarget::TestSplit, None).unwrap();

        let run = load_run(&config).unwrap();
        let (params, _, _) = nic::load_nic(&config.out_dir.join(NIC_FILE)).unwrap();
        let by_id: HashMap<&str, &ImageRecord> =
            run.index.iter().map(|r| (r.image_id.as_str(), r)).collect();

        for line in &lines {
            let CaptionLine::Decision(decision) = line else {
                panic!("unexpected error line")
            };
            let record = run
                .records
                .iter()
                .find(|r| r.image_id == decision.image_id)
                .unwrap();
            let decoded =
                nic::decode_beam(&params, &run.vocab, &record.features, config.beam, config.max_len)
                    .unwrap();
            let neighbors = knn::find_neighbors(record, &run.index, config.k).unwrap();
            let consensus =
                knn::consensus_caption(&CandidateSet::gather(&neighbors, &by_id), config.m).unwrap();

            let expected = [
                decoded.normalized_log_prob.exp(),
                consensus.avg_similarity,
                neighbors.cosine_sum() / (5.0 * neighbors.len() as f64),
                decoded.tokens.len() as f64 / 35.0,
                consensus.caption.tokens.len() as f64 / 35.0,
            ];
            let got = decision.features.as_array();
            for (e, g) in expected.iter().zip(got) {
                assert!((e.clamp(0.0, 1.0) - g).abs() < 1e-12, "{expected:?} vs {got:?}");
            }
        }
    }

    #[test]
    fn missing_prepare_artifacts_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        assert!(train(&config).is_err());
    }

    #[test]
    fn stale_corpus_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        prepare(&config).unwrap();
        // Change a corpus file after prepare.
        let mut splits = fs::read_to_string(&config.splits).unwrap();
        splits.push('\n');
        fs::write(&config.splits, splits).unwrap();
        assert!(matches!(train(&config), Err(Error::CheckpointMismatch(_))));
    }

    #[test]
    fn cutoff_that_empties_the_vocabulary_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = small_config(dir.path());
        config.cutoff = 100_000;
        assert!(matches!(
            prepare(&config),
            Err(Error::EmptyVocabulary { .. })
        ));
    }
}
