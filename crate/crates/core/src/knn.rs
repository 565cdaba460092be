//! Nearest-neighbor captioner: cosine retrieval over image feature vectors
//! and BLEU-4 consensus selection over the neighbors' captions.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bleu::{sentence_bleu_precomputed, SentenceStats};
use crate::corpus::{Caption, FeatureRecord, ImageRecord};
use crate::error::{Error, Result};

/// Cosine similarity of two equal-dimension vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "cosine similarity over mismatched dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut norm_a = 0.0;
    let mut norm_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    Ok(dot / (norm_a.sqrt() * norm_b.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub image_id: String,
    pub cosine: f64,
}

/// The k training images nearest to a query, cosine-descending, ties broken
/// by image id. `underfilled` flags an index smaller than the requested k.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub query_id: String,
    pub neighbors: Vec<Neighbor>,
    pub requested_k: usize,
    pub underfilled: bool,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Sum of the neighbor cosines (the raw image-similarity feature; the
    /// gate normalizes it by 5k).
    pub fn cosine_sum(&self) -> f64 {
        self.neighbors.iter().map(|n| n.cosine).sum()
    }
}

/// Finds the `k` nearest index images to the query by cosine similarity.
/// The query's own id is excluded; an index with fewer than `k` entries
/// yields all of them with the underfilled flag set.
pub fn find_neighbors(query: &ImageRecord, index: &[ImageRecord], k: usize) -> Result<NeighborSet> {
    if k == 0 {
        return Err(Error::InvalidInput("neighbor count k must be >= 1".into()));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut neighbors = Vec::with_capacity(index.len());
    for record in index {
        if record.image_id == query.image_id {
            continue;
        }
        neighbors.push(Neighbor {
            image_id: record.image_id.clone(),
            cosine: cosine_similarity(&query.features, &record.features)?,
        });
    }
    if neighbors.is_empty() {
        return Err(Error::EmptyIndex);
    }
    neighbors.sort_by(|a, b| {
        b.cosine
            .total_cmp(&a.cosine)
            .then_with(|| a.image_id.cmp(&b.image_id))
    });
    let underfilled = neighbors.len() < k;
    if underfilled {
        log::warn!(
            "index holds only {} candidates for query {} (k = {k})",
            neighbors.len(),
            query.image_id
        );
    }
    neighbors.truncate(k);
    Ok(NeighborSet {
        query_id: query.image_id.clone(),
        neighbors,
        requested_k: k,
        underfilled,
    })
}

/// One candidate caption with its provenance inside the neighbor set.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub caption: Caption,
    pub neighbor_rank: usize,
    pub reference_index: usize,
}

/// All reference captions of the neighbor images, in neighbor order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    /// Collects the captions of every neighbor, in rank order.
    pub fn gather(neighbors: &NeighborSet, records_by_id: &HashMap<&str, &ImageRecord>) -> Self {
        let mut candidates = Vec::new();
        for (rank, neighbor) in neighbors.neighbors.iter().enumerate() {
            if let Some(record) = records_by_id.get(neighbor.image_id.as_str()) {
                for (reference_index, caption) in record.references.iter().enumerate() {
                    candidates.push(Candidate {
                        caption: caption.clone(),
                        neighbor_rank: rank,
                        reference_index,
                    });
                }
            }
        }
        CandidateSet { candidates }
    }

    /// Builds a candidate set from bare token lists (tests, bindings).
    pub fn from_token_lists(captions: Vec<Vec<String>>) -> Self {
        let candidates = captions
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Candidate {
                caption: Caption {
                    image_id: format!("candidate-{i}"),
                    tokens,
                },
                neighbor_rank: i,
                reference_index: 0,
            })
            .collect();
        CandidateSet { candidates }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// The consensus caption and the quantities the gate consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusResult {
    pub caption: Caption,
    /// Index of the winning candidate within the candidate set.
    pub candidate_index: usize,
    /// Sum of the m largest similarities to the other candidates.
    pub raw_score: f64,
    /// raw_score / m_used, in [0, 1]; 0 for a singleton candidate set.
    pub avg_similarity: f64,
    pub m_used: usize,
}

/// Selects the candidate maximizing the sum of its `m` largest BLEU-4
/// similarities to the other candidates (hypothesis = candidate, single
/// reference = other candidate). Ties go to the lowest candidate index.
///
/// Similarities are nonnegative, so the best size-m subset is exactly the m
/// largest values; `m` is clamped to the number of other candidates.
pub fn consensus_caption(candidates: &CandidateSet, m: usize) -> Result<ConsensusResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("empty candidate set".into()));
    }
    if m == 0 {
        return Err(Error::InvalidInput("consensus subset size m must be >= 1".into()));
    }
    let n = candidates.len();
    let m_used = m.min(n - 1);
    let stats: Vec<SentenceStats> = candidates
        .candidates
        .iter()
        .map(|c| SentenceStats::new(&c.caption.tokens, 4))
        .collect();

    let mut best_index = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..n {
        let mut sims: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| sentence_bleu_precomputed(&stats[i], &stats[j]))
            .collect();
        sims.sort_by(|a, b| b.total_cmp(a));
        let score: f64 = sims[..m_used].iter().sum();
        if score > best_score {
            best_score = score;
            best_index = i;
        }
    }
    let raw_score = if m_used == 0 { 0.0 } else { best_score };
    let avg_similarity = if m_used == 0 {
        0.0
    } else {
        raw_score / m_used as f64
    };
    Ok(ConsensusResult {
        caption: candidates.candidates[best_index].caption.clone(),
        candidate_index: best_index,
        raw_score,
        avg_similarity,
        m_used,
    })
}

const INDEX_MAGIC: &str = "capfuse.knn-index";

/// Manifest persisted next to the index features JSONL.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndexManifest {
    pub magic: String,
    pub version: u32,
    pub k: usize,
    pub m: usize,
    pub feature_dim: usize,
    pub corpus_hash: String,
    pub image_count: usize,
}

impl IndexManifest {
    pub fn new(k: usize, m: usize, feature_dim: usize, corpus_hash: String, image_count: usize) -> Self {
        IndexManifest {
            magic: INDEX_MAGIC.to_string(),
            version: 1,
            k,
            m,
            feature_dim,
            corpus_hash,
            image_count,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = serde_json::to_string_pretty(self).expect("manifest serializes");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: IndexManifest = serde_json::from_str(&body).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if manifest.magic != INDEX_MAGIC {
            return Err(Error::InvalidCheckpoint {
                path: path.into(),
                message: format!("bad magic {:?}", manifest.magic),
            });
        }
        Ok(manifest)
    }
}

/// Writes the index feature vectors (one JSON record per line, sorted by
/// image id).
pub fn save_index_features(path: &Path, records: &[ImageRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        let line = serde_json::to_string(&FeatureRecord {
            image_id: record.image_id.clone(),
            features: record.features.clone(),
        })
        .expect("feature record serializes");
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
