//! Synthetic corpus generator: clustered pseudo-image feature vectors with
//! template captions, sized so the full pipeline runs in minutes with no
//! external data.
//!
//! Images fall into themed clusters. Cluster tightness varies (loose
//! clusters blur neighbor retrieval) and the last two clusters share nearly
//! collinear centers (hard for the linear image projection, easy for cosine
//! retrieval), so neither captioner wins everywhere and the gate has a real
//! decision to learn.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FixtureConfig {
    pub images: usize,
    pub feature_dim: usize,
    pub captions_per_image: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            images: 200,
            feature_dim: 16,
            captions_per_image: 5,
            seed: 42,
        }
    }
}

/// In-memory contents of the three corpus files.
#[derive(Debug, Clone)]
pub struct FixtureFiles {
    pub captions: String,
    pub features: String,
    pub splits: String,
}

struct ClusterTheme {
    subject: &'static str,
    verbs: &'static [&'static str],
    places: &'static [&'static str],
    /// Gaussian noise scale around the cluster center.
    noise: f64,
}

const THEMES: [ClusterTheme; 8] = [
    ClusterTheme {
        subject: "a black dog",
        verbs: &["runs", "sprints", "races"],
        places: &["in the park", "across the field", "on the grass"],
        noise: 0.10,
    },
    ClusterTheme {
        subject: "a white cat",
        verbs: &["sleeps", "rests", "sits"],
        places: &["on the couch", "by the window", "near the door"],
        noise: 0.10,
    },
    ClusterTheme {
        subject: "two young children",
        verbs: &["play", "laugh", "jump"],
        places: &["on the beach", "in the sand", "by the water"],
        noise: 0.15,
    },
    ClusterTheme {
        subject: "a tall man",
        verbs: &["rides", "pedals", "steers"],
        places: &["down the street", "along the road", "through the town"],
        noise: 0.15,
    },
    ClusterTheme {
        subject: "an old woman",
        verbs: &["walks", "strolls", "wanders"],
        places: &["through the market", "past the shops", "along the river"],
        noise: 0.45,
    },
    ClusterTheme {
        subject: "a brown horse",
        verbs: &["gallops", "trots", "jumps"],
        places: &["over the fence", "across the meadow", "around the track"],
        noise: 0.45,
    },
    ClusterTheme {
        subject: "a small bird",
        verbs: &["flies", "glides", "hops"],
        places: &["above the trees", "over the lake", "between the branches"],
        noise: 0.30,
    },
    ClusterTheme {
        subject: "a red truck",
        verbs: &["drives", "rolls", "speeds"],
        places: &["down the highway", "up the hill", "past the farm"],
        noise: 0.30,
    },
];

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    // Box-Muller
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = std::f64::consts::TAU * u2;
    (r * theta.cos(), r * theta.sin())
}

fn gaussian_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(dim + 1);
    while v.len() < dim {
        let (a, b) = gaussian_pair(rng);
        v.push(a);
        v.push(b);
    }
    v.truncate(dim);
    v
}

/// Generates the corpus deterministically from the seed.
pub fn generate(config: &FixtureConfig) -> FixtureFiles {
    assert!(config.images >= THEMES.len(), "need at least one image per cluster");
    assert!(config.feature_dim >= 4);
    assert!(config.captions_per_image >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Cluster centers: six independent directions, then two nearly collinear
    // ones derived from the same base.
    let mut centers: Vec<Vec<f64>> = (0..THEMES.len() - 2)
        .map(|_| unit_vector(&mut rng, config.feature_dim))
        .collect();
    let base = unit_vector(&mut rng, config.feature_dim);
    let tilt = unit_vector(&mut rng, config.feature_dim);
    for sign in [1.0, -1.0] {
        let mixed: Vec<f64> = base
            .iter()
            .zip(&tilt)
            .map(|(b, t)| b + sign * 0.15 * t)
            .collect();
        let norm: f64 = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
        centers.push(mixed.into_iter().map(|x| x / norm).collect());
    }

    let mut captions = String::new();
    let mut features = String::new();
    let mut ids = Vec::with_capacity(config.images);
    for i in 0..config.images {
        let image_id = format!("img{i:04}");
        let cluster = i % THEMES.len();
        let theme = &THEMES[cluster];

        let noise = gaussian_vector(&mut rng, config.feature_dim);
        let vector: Vec<f64> = centers[cluster]
            .iter()
            .zip(&noise)
            .map(|(c, n)| c + theme.noise * n)
            .collect();
        let record = serde_json::json!({ "image_id": image_id, "features": vector });
        writeln!(features, "{record}").unwrap();

        for caption_index in 0..config.captions_per_image {
            let verb = theme.verbs[rng.random_range(0..theme.verbs.len())];
            let place = theme.places[rng.random_range(0..theme.places.len())];
            let mut text = format!("{} {} {}.", theme.subject, verb, place);
            // Capitalize like real annotation data; tokenize undoes it.
            text[..1].make_ascii_uppercase();
            writeln!(captions, "{image_id}#{caption_index}\t{text}").unwrap();
        }
        ids.push(image_id);
    }

    // 70/15/15 split over a seeded shuffle.
    use rand::seq::SliceRandom;
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut rng);
    let train_end = (config.images * 70) / 100;
    let val_end = train_end + (config.images * 15) / 100;
    let mut assignments: Vec<(String, &str)> = shuffled
        .iter()
        .enumerate()
        .map(|(rank, id)| {
            let split = if rank < train_end {
                "train"
            } else if rank < val_end {
                "val"
            } else {
                "test"
            };
            (id.clone(), split)
        })
        .collect();
    assignments.sort();
    let mut splits = String::new();
    for (id, split) in assignments {
        writeln!(splits, "{id}\t{split}").unwrap();
    }

    FixtureFiles {
        captions,
        features,
        splits,
    }
}

/// Writes captions.tsv, features.jsonl and splits.tsv into `dir`, returning
/// the three paths.
pub fn write(config: &FixtureConfig, dir: &Path) -> Result<(PathBuf, PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = generate(config);
    let captions = dir.join("captions.tsv");
    let features = dir.join("features.jsonl");
    let splits = dir.join("splits.tsv");
    fs::write(&captions, files.captions).map_err(|e| Error::io(&captions, e))?;
    fs::write(&features, files.features).map_err(|e| Error::io(&features, e))?;
    fs::write(&splits, files.splits).map_err(|e| Error::io(&splits, e))?;
    Ok((captions, features, splits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    #[test]
    fn generation_is_deterministic() {
        let config = FixtureConfig { images: 40, ..Default::default() };
        let a = generate(&config);
        let b = generate(&config);
        assert_eq!(a.captions, b.captions);
        assert_eq!(a.features, b.features);
        assert_eq!(a.splits, b.splits);
    }

    #[test]
    fn generated_corpus_loads_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let config = FixtureConfig { images: 40, ..Default::default() };
        let (captions, features, splits) = write(&config, dir.path()).unwrap();
        let (records, split) = corpus::load_corpus(&captions, &features, &splits).unwrap();
        assert_eq!(records.len(), 40);
        assert_eq!(split.total(), 40);
        assert!(split.train.len() >= 26);
        assert!(!split.validation.is_empty());
        assert!(!split.test.is_empty());
        for record in &records {
            assert_eq!(record.references.len(), 5);
            assert_eq!(record.features.len(), 16);
            assert!(record.references.iter().all(|c| !c.tokens.is_empty()));
        }
    }

    #[test]
    fn fixture_vocabulary_survives_the_default_cutoff() {
        let config = FixtureConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let (captions, features, splits) = write(&config, dir.path()).unwrap();
        let (records, split) = corpus::load_corpus(&captions, &features, &splits).unwrap();
        let train_ids: std::collections::HashSet<_> = split.train.iter().collect();
        let train_captions: Vec<_> = records
            .iter()
            .filter(|r| train_ids.contains(&r.image_id))
            .flat_map(|r| r.references.clone())
            .collect();
        let vocab = corpus::Vocabulary::build(&train_captions, 5).unwrap();
        // Every theme word should clear the cutoff at 200 images.
        assert!(vocab.real_token_count() > 40, "{}", vocab.real_token_count());
    }
}
