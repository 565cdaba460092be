//! Corpus ingestion: caption files, precomputed image feature vectors, dataset
//! splits, and the token vocabulary built from training captions.
//!
//! File formats:
//! - captions: one record per line, `image_id<TAB>raw caption text`; an
//!   optional `#index` suffix on the image id is stripped (Flickr8k token
//!   files load as-is).
//! - features: JSON Lines, each line `{"image_id": "...", "features": [..]}`.
//! - splits: one record per line, `image_id<TAB>{train|val|test}`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Longest caption length assumed by the length-normalized gate features and
/// the default decoder budget.
pub const MAX_CAPTION_TOKENS: usize = 35;

pub const START_TOKEN: &str = "<start>";
pub const END_TOKEN: &str = "<end>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

/// Special token ids are fixed by the vocabulary construction order.
pub const START_ID: u32 = 0;
pub const END_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const PAD_ID: u32 = 3;

const SPECIAL_TOKENS: [&str; 4] = [START_TOKEN, END_TOKEN, UNK_TOKEN, PAD_TOKEN];

/// A tokenized caption attached to an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub image_id: String,
    pub tokens: Vec<String>,
}

/// One image of the corpus: id, fixed-length feature vector, and its
/// reference captions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub features: Vec<f64>,
    pub references: Vec<Caption>,
}

impl ImageRecord {
    /// Reference captions as plain token lists, the shape BLEU expects.
    pub fn reference_tokens(&self) -> Vec<Vec<String>> {
        self.references.iter().map(|c| c.tokens.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train|val|test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Disjoint train/validation/test image id lists, each sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }
}

/// Lowercases, strips punctuation, and splits on whitespace runs.
///
/// Apostrophes and hyphens survive only between two alphanumeric characters,
/// so contractions and compounds stay one token.
pub fn tokenize(raw: &str) -> Vec<String> {
    let lowered = raw.to_lowercase();
    let chars: Vec<char> = lowered.chars().collect();
    let mut cleaned = String::with_capacity(lowered.len());
    for (i, &c) in chars.iter().enumerate() {
        let intra_word = (c == '\'' || c == '-')
            && i > 0
            && chars[i - 1].is_alphanumeric()
            && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
        if c.is_alphanumeric() || c.is_whitespace() || intra_word {
            cleaned.push(c);
        }
    }
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Bijective token/id mapping with the four special tokens at fixed ids.
///
/// Ids are assigned deterministically: specials first, then kept tokens in
/// descending corpus frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    cutoff: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    magic: String,
    version: u32,
    cutoff: usize,
    tokens: Vec<String>,
}

const VOCAB_MAGIC: &str = "capfuse.vocab";

impl Vocabulary {
    /// Builds the vocabulary from training captions, keeping every token with
    /// corpus frequency strictly greater than `cutoff`.
    pub fn build(captions: &[Caption], cutoff: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::EmptyTrainingCorpus);
        }
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for caption in captions {
            for token in &caption.tokens {
                *freq.entry(token.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(token, count)| count > cutoff && !SPECIAL_TOKENS.contains(&token))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_token_list(tokens, cutoff))
    }

    /// Assembles a vocabulary from an explicit id-ordered token list. The
    /// list must start with the four special tokens.
    pub fn from_tokens(real_tokens: &[&str]) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(real_tokens.iter().map(|t| t.to_string()));
        Self::from_token_list(tokens, 0)
    }

    fn from_token_list(tokens: Vec<String>, cutoff: usize) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            ids,
            cutoff,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-special tokens.
    pub fn real_token_count(&self) -> usize {
        self.tokens.len() - SPECIAL_TOKENS.len()
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Encodes a token sequence as ids framed by START/END, mapping
    /// out-of-vocabulary tokens to UNK.
    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(START_ID);
        ids.extend(tokens.iter().map(|t| self.id_or_unk(t)));
        ids.push(END_ID);
        ids
    }

    /// Maps ids back to tokens, dropping the START/END frame.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != START_ID && id != END_ID)
            .filter_map(|&id| self.token(id).map(str::to_owned))
            .collect()
    }

    /// Content hash used to tie checkpoints to the vocabulary they were
    /// trained against.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for token in &self.tokens {
            hasher.update(token.as_bytes());
            hasher.update(b"\n");
        }
        hasher.update(self.cutoff.to_le_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabularyFile {
            magic: VOCAB_MAGIC.to_string(),
            version: 1,
            cutoff: self.cutoff,
            tokens: self.tokens.clone(),
        };
        let mut body = serde_json::to_string_pretty(&file).expect("vocabulary serializes");
        body.push('\n');
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabularyFile = serde_json::from_str(&body).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if file.magic != VOCAB_MAGIC {
            return Err(Error::InvalidCheckpoint {
                path: path.into(),
                message: format!("bad magic {:?}", file.magic),
            });
        }
        if file.tokens.len() < SPECIAL_TOKENS.len()
            || SPECIAL_TOKENS
                .iter()
                .zip(&file.tokens)
                .any(|(want, got)| want != got)
        {
            return Err(Error::InvalidCheckpoint {
                path: path.into(),
                message: "special tokens missing or out of order".into(),
            });
        }
        Ok(Self::from_token_list(file.tokens, file.cutoff))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub image_id: String,
    pub features: Vec<f64>,
}

/// Parses the captions file. Records whose text tokenizes to nothing are
/// skipped with a warning.
pub fn load_captions(path: &Path) -> Result<Vec<Caption>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut captions = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (id_field, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, lineno + 1, "expected `image_id<TAB>caption`"))?;
        let image_id = id_field.split('#').next().unwrap_or(id_field).to_string();
        if image_id.is_empty() {
            return Err(Error::format(path, lineno + 1, "empty image id"));
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            log::warn!("{}:{}: caption tokenizes to nothing, skipped", path.display(), lineno + 1);
            continue;
        }
        captions.push(Caption { image_id, tokens });
    }
    Ok(captions)
}

/// Parses the JSONL features file.
pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: FeatureRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(path, lineno + 1, e.to_string()))?;
        if let Some(first) = seen.insert(record.image_id.clone(), lineno + 1) {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("duplicate feature record for {} (first at line {first})", record.image_id),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

/// Parses the splits file.
pub fn load_splits(path: &Path) -> Result<DatasetSplit> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut split = DatasetSplit::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in body.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let (id, which) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(path, lineno + 1, "expected `image_id<TAB>split`"))?;
        let which: Split = which
            .parse()
            .map_err(|e: String| Error::format(path, lineno + 1, e))?;
        if let Some(first) = seen.insert(id.to_string(), lineno + 1) {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("image id {id} already assigned at line {first}"),
            ));
        }
        match which {
            Split::Train => split.train.push(id.to_string()),
            Split::Validation => split.validation.push(id.to_string()),
            Split::Test => split.test.push(id.to_string()),
        }
    }
    split.train.sort();
    split.validation.sort();
    split.test.sort();
    Ok(split)
}

/// Loads and cross-validates the three corpus files.
///
/// Every image id present in the splits must have a feature vector and at
/// least one reference caption; all feature vectors must share one dimension.
/// Returned records are sorted by image id.
pub fn load_corpus(
    captions_path: &Path,
    features_path: &Path,
    splits_path: &Path,
) -> Result<(Vec<ImageRecord>, DatasetSplit)> {
    let captions = load_captions(captions_path)?;
    let features = load_features(features_path)?;
    let split = load_splits(splits_path)?;

    let mut captions_by_id: HashMap<&str, Vec<&Caption>> = HashMap::new();
    for caption in &captions {
        captions_by_id.entry(&caption.image_id).or_default().push(caption);
    }
    let features_by_id: HashMap<&str, &FeatureRecord> =
        features.iter().map(|r| (r.image_id.as_str(), r)).collect();

    let mut ids: Vec<&String> = split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
        .collect();
    ids.sort();

    let mut dimension: Option<usize> = None;
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let feature = features_by_id
            .get(id.as_str())
            .ok_or_else(|| Error::MissingFeatures { image_id: id.clone() })?;
        let expected = *dimension.get_or_insert(feature.features.len());
        if feature.features.len() != expected {
            return Err(Error::DimensionMismatch {
                image_id: id.clone(),
                expected,
                found: feature.features.len(),
            });
        }
        let references: Vec<Caption> = captions_by_id
            .get(id.as_str())
            .map(|list| list.iter().map(|&c| c.clone()).collect())
            .unwrap_or_default();
        if references.is_empty() {
            return Err(Error::MissingReferences { image_id: id.clone() });
        }
        records.push(ImageRecord {
            image_id: id.clone(),
            features: feature.features.clone(),
            references,
        });
    }
    Ok((records, split))
}

/// Content hash over the three corpus input files, recorded in artifacts so
/// stale indexes and checkpoints are detected.
pub fn corpus_hash(captions_path: &Path, features_path: &Path, splits_path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for (tag, path) in [
        ("captions", captions_path),
        ("features", features_path),
        ("splits", splits_path),
    ] {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        hasher.update(tag.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}
