//! Teacher-forced training of the captioner with per-example SGD.
//!
//! An example is scored as the sum of negative log probabilities of the gold
//! tokens: the image projection is consumed at step 0 (its output is not
//! scored), then each subsequent input is the previous gold token and the
//! prediction is scored against the next one, through END.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nic::{cell_forward, log_softmax, logits, CellCache, LstmState, NicDims, NicParameters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NicHyperparams {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient norm clip.
    pub clip: f64,
}

impl Default for NicHyperparams {
    fn default() -> Self {
        NicHyperparams {
            embed_dim: 64,
            hidden_dim: 64,
            learning_rate: 0.1,
            epochs: 20,
            seed: 42,
            clip: 5.0,
        }
    }
}

/// One training example: image features plus the encoded caption,
/// START-to-END inclusive.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub features: Vec<f64>,
    pub target_ids: Vec<u32>,
}

impl TrainExample {
    /// Number of scored predictions (caption tokens plus END).
    fn scored_tokens(&self) -> usize {
        self.target_ids.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token loss after each epoch.
    pub epoch_token_loss: Vec<f64>,
    pub final_learning_rate: f64,
}

struct ForwardPass {
    caches: Vec<CellCache>,
    /// Softmax distributions at the scored steps (index t-1 for step t).
    probs: Vec<Vec<f64>>,
    loss: f64,
}

fn forward_pass(params: &NicParameters, example: &TrainExample) -> Result<ForwardPass> {
    let ids = &example.target_ids;
    if ids.len() < 2 {
        return Err(Error::InvalidInput(
            "training caption must contain START and END".into(),
        ));
    }
    let steps = ids.len(); // image + ids[0..len-1]
    let mut caches = Vec::with_capacity(steps);
    let mut probs = Vec::with_capacity(steps - 1);
    let mut state = LstmState::zero(params.dims.hidden_dim);
    let mut loss = 0.0;
    let image_input = params.image_projection(&example.features)?;
    for t in 0..steps {
        let cache = if t == 0 {
            cell_forward(params, &state, &image_input)
        } else {
            cell_forward(params, &state, params.embedding(ids[t - 1]))
        };
        state = cache.state();
        if t >= 1 {
            let raw = logits(params, &cache.hidden);
            let log_probs = log_softmax(&raw);
            let target = ids[t] as usize;
            loss -= log_probs[target];
            probs.push(log_probs.iter().map(|lp| lp.exp()).collect());
        }
        caches.push(cache);
    }
    if !loss.is_finite() {
        return Err(Error::NumericalOverflow);
    }
    Ok(ForwardPass { caches, probs, loss })
}

/// Sum of negative log probabilities of the gold tokens for one example.
pub fn example_loss(params: &NicParameters, example: &TrainExample) -> Result<f64> {
    forward_pass(params, example).map(|fp| fp.loss)
}

/// Analytic gradients of `example_loss`, backpropagated through every step.
/// Returns the gradients (in a parameter-shaped container) and the loss.
pub fn example_gradients(
    params: &NicParameters,
    example: &TrainExample,
) -> Result<(NicParameters, f64)> {
    let fp = forward_pass(params, example)?;
    let ids = &example.target_ids;
    let dims = params.dims;
    let embed = dims.embed_dim;
    let hidden = dims.hidden_dim;
    let mut grads = NicParameters::zeros(dims);

    let mut d_hidden_next = vec![0.0; hidden];
    let mut d_cell_next = vec![0.0; hidden];
    for t in (0..fp.caches.len()).rev() {
        let cache = &fp.caches[t];
        let mut d_hidden = d_hidden_next.clone();
        if t >= 1 {
            // d loss / d logits = softmax - onehot(target)
            let mut d_logits = fp.probs[t - 1].clone();
            d_logits[ids[t] as usize] -= 1.0;
            grads.w_logit.add_outer(&d_logits, &cache.hidden);
            for (g, d) in grads.b_logit.iter_mut().zip(&d_logits) {
                *g += d;
            }
            let back = params.w_logit.matvec_transposed(&d_logits);
            for (dh, b) in d_hidden.iter_mut().zip(&back) {
                *dh += b;
            }
        }

        let mut d_gate_i = vec![0.0; hidden];
        let mut d_gate_f = vec![0.0; hidden];
        let mut d_gate_g = vec![0.0; hidden];
        let mut d_gate_o = vec![0.0; hidden];
        let mut d_cell_prev = vec![0.0; hidden];
        for k in 0..hidden {
            let d_out = d_hidden[k] * cache.tanh_cell[k];
            let d_cell = d_cell_next[k]
                + d_hidden[k] * cache.gate_o[k] * (1.0 - cache.tanh_cell[k] * cache.tanh_cell[k]);
            let d_in = d_cell * cache.gate_g[k];
            let d_forget = d_cell * cache.cell_prev[k];
            let d_cand = d_cell * cache.gate_i[k];
            d_cell_prev[k] = d_cell * cache.gate_f[k];
            // through the gate nonlinearities
            d_gate_i[k] = d_in * cache.gate_i[k] * (1.0 - cache.gate_i[k]);
            d_gate_f[k] = d_forget * cache.gate_f[k] * (1.0 - cache.gate_f[k]);
            d_gate_g[k] = d_cand * (1.0 - cache.gate_g[k] * cache.gate_g[k]);
            d_gate_o[k] = d_out * cache.gate_o[k] * (1.0 - cache.gate_o[k]);
        }

        grads.w_input.add_outer(&d_gate_i, &cache.z);
        grads.w_forget.add_outer(&d_gate_f, &cache.z);
        grads.w_cell.add_outer(&d_gate_g, &cache.z);
        grads.w_output.add_outer(&d_gate_o, &cache.z);
        for k in 0..hidden {
            grads.b_input[k] += d_gate_i[k];
            grads.b_forget[k] += d_gate_f[k];
            grads.b_cell[k] += d_gate_g[k];
            grads.b_output[k] += d_gate_o[k];
        }

        let mut d_z = params.w_input.matvec_transposed(&d_gate_i);
        for (dz, v) in d_z.iter_mut().zip(params.w_forget.matvec_transposed(&d_gate_f)) {
            *dz += v;
        }
        for (dz, v) in d_z.iter_mut().zip(params.w_cell.matvec_transposed(&d_gate_g)) {
            *dz += v;
        }
        for (dz, v) in d_z.iter_mut().zip(params.w_output.matvec_transposed(&d_gate_o)) {
            *dz += v;
        }

        let d_input = &d_z[..embed];
        if t == 0 {
            grads.w_image.add_outer(d_input, &example.features);
        } else {
            let row = grads.w_embed.row_mut(ids[t - 1] as usize);
            for (g, d) in row.iter_mut().zip(d_input) {
                *g += d;
            }
        }
        d_hidden_next = d_z[embed..].to_vec();
        d_cell_next = d_cell_prev;
    }
    Ok((grads, fp.loss))
}

fn clip_gradients(grads: &mut NicParameters, clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let norm: f64 = grads
        .blocks()
        .iter()
        .flat_map(|(_, b)| b.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let scale = clip / norm;
        for (_, block) in grads.blocks_mut() {
            for g in block.iter_mut() {
                *g *= scale;
            }
        }
    }
}

fn apply_sgd(params: &mut NicParameters, grads: &NicParameters, learning_rate: f64) {
    for ((_, p), (_, g)) in params.blocks_mut().into_iter().zip(grads.blocks()) {
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= learning_rate * gv;
        }
    }
}

/// Trains the captioner with per-example SGD under teacher forcing.
///
/// Deterministic given the seed: initialization and the per-epoch shuffle
/// both draw from one seeded stream. The learning rate halves whenever an
/// epoch fails to improve on the best mean loss seen so far.
pub fn train(
    examples: &[TrainExample],
    feature_dim: usize,
    vocab_size: usize,
    hp: &NicHyperparams,
) -> Result<(NicParameters, TrainReport)> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let dims = NicDims {
        feature_dim,
        embed_dim: hp.embed_dim,
        hidden_dim: hp.hidden_dim,
        vocab_size,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut params = NicParameters::init(dims, &mut rng);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut learning_rate = hp.learning_rate;
    let mut best = f64::INFINITY;
    let mut report = TrainReport {
        epoch_token_loss: Vec::with_capacity(hp.epochs),
        final_learning_rate: learning_rate,
    };
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for &i in &order {
            let example = &examples[i];
            let (mut grads, loss) = example_gradients(&params, example)
                .map_err(|e| match e {
                    Error::NumericalOverflow => Error::Divergence { epoch },
                    other => other,
                })?;
            clip_gradients(&mut grads, hp.clip);
            apply_sgd(&mut params, &grads, learning_rate);
            loss_sum += loss;
            token_sum += example.scored_tokens();
        }
        let mean = loss_sum / token_sum as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        report.epoch_token_loss.push(mean);
        if mean >= best {
            learning_rate *= 0.5;
        } else {
            best = mean;
        }
    }
    report.final_learning_rate = learning_rate;
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Vocabulary, END_ID, START_ID};
    use crate::nic::decode_greedy;

    fn encode(vocab: &Vocabulary, text: &str) -> Vec<u32> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        vocab.encode(&tokens)
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let vocab = Vocabulary::from_tokens(&["a", "dog"]);
        let examples = vec![TrainExample {
            features: vec![1.0, 0.5],
            target_ids: encode(&vocab, "a dog"),
        }];
        let hp = NicHyperparams {
            embed_dim: 4,
            hidden_dim: 4,
            learning_rate: 0.0,
            epochs: 1,
            seed: 11,
            clip: 5.0,
        };
        let (params, _) = train(&examples, 2, vocab.len(), &hp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let init = NicParameters::init(
            NicDims {
                feature_dim: 2,
                embed_dim: 4,
                hidden_dim: 4,
                vocab_size: vocab.len(),
            },
            &mut rng,
        );
        assert_eq!(params, init);
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let vocab = Vocabulary::from_tokens(&["a", "dog", "runs"]);
        let examples = vec![
            TrainExample {
                features: vec![1.0, 0.0],
                target_ids: encode(&vocab, "a dog runs"),
            },
            TrainExample {
                features: vec![0.0, 1.0],
                target_ids: encode(&vocab, "a dog"),
            },
        ];
        let hp = NicHyperparams {
            embed_dim: 6,
            hidden_dim: 6,
            learning_rate: 0.1,
            epochs: 3,
            seed: 5,
            clip: 5.0,
        };
        let (a, ra) = train(&examples, 2, vocab.len(), &hp).unwrap();
        let (b, rb) = train(&examples, 2, vocab.len(), &hp).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epoch_token_loss, rb.epoch_token_loss);
    }

    #[test]
    fn memorizes_a_single_repeated_caption() {
        let vocab = Vocabulary::from_tokens(&["a", "brown", "dog", "chases", "the", "ball"]);
        let caption = "a brown dog chases the ball";
        let examples = vec![TrainExample {
            features: vec![0.8, -0.3, 0.5],
            target_ids: encode(&vocab, caption),
        }];
        let hp = NicHyperparams {
            embed_dim: 16,
            hidden_dim: 16,
            learning_rate: 0.5,
            epochs: 200,
            seed: 7,
            clip: 5.0,
        };
        let (params, report) = train(&examples, 3, vocab.len(), &hp).unwrap();
        let final_loss = *report.epoch_token_loss.last().unwrap();
        assert!(final_loss < 0.1, "mean per-token loss {final_loss}");
        let decoded = decode_greedy(&params, &vocab, &[0.8, -0.3, 0.5], 35).unwrap();
        assert_eq!(decoded.tokens.join(" "), caption);
    }

    #[test]
    fn per_epoch_loss_is_finite_and_reported() {
        let vocab = Vocabulary::from_tokens(&["a", "cat", "sits"]);
        let examples = vec![TrainExample {
            features: vec![1.0],
            target_ids: encode(&vocab, "a cat sits"),
        }];
        let hp = NicHyperparams {
            embed_dim: 4,
            hidden_dim: 4,
            learning_rate: 0.2,
            epochs: 5,
            seed: 1,
            clip: 5.0,
        };
        let (_, report) = train(&examples, 1, vocab.len(), &hp).unwrap();
        assert_eq!(report.epoch_token_loss.len(), 5);
        assert!(report.epoch_token_loss.iter().all(|l| l.is_finite()));
    }

    /// Central finite differences on every scalar of every parameter block.
    #[test]
    fn analytic_gradients_match_finite_differences() {
        use rand::SeedableRng;
        let dims = NicDims {
            feature_dim: 3,
            embed_dim: 2,
            hidden_dim: 2,
            vocab_size: 5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = NicParameters::init(dims, &mut rng);
        let example = TrainExample {
            features: vec![0.6, -0.4, 0.9],
            target_ids: vec![START_ID, 4, 4, END_ID],
        };
        let (grads, _) = example_gradients(&params, &example).unwrap();

        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        let n_blocks = params.blocks().len();
        for block_idx in 0..n_blocks {
            let block_len = params.blocks()[block_idx].1.len();
            for i in 0..block_len {
                let mut plus = params.clone();
                plus.blocks_mut()[block_idx].1[i] += eps;
                let mut minus = params.clone();
                minus.blocks_mut()[block_idx].1[i] -= eps;
                let numeric = (example_loss(&plus, &example).unwrap()
                    - example_loss(&minus, &example).unwrap())
                    / (2.0 * eps);
                let analytic = grads.blocks()[block_idx].1[i];
                let denom = analytic.abs().max(numeric.abs());
                if denom > 1e-8 {
                    max_rel = max_rel.max((analytic - numeric).abs() / denom);
                } else {
                    assert!(
                        (analytic - numeric).abs() < 1e-8,
                        "near-zero gradient mismatch in block {}",
                        params.blocks()[block_idx].0
                    );
                }
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let hp = NicHyperparams::default();
        assert!(train(&[], 4, 10, &hp).is_err());
    }

    #[test]
    fn divergence_is_reported_with_the_epoch() {
        // Saturating activations keep the loss finite under almost any
        // learning rate, so non-finite input is the reliable trigger.
        let vocab = Vocabulary::from_tokens(&["a", "dog"]);
        let examples = vec![TrainExample {
            features: vec![f64::INFINITY, 1.0],
            target_ids: encode(&vocab, "a dog"),
        }];
        let hp = NicHyperparams {
            embed_dim: 8,
            hidden_dim: 8,
            learning_rate: 0.1,
            epochs: 5,
            seed: 2,
            clip: 5.0,
        };
        match train(&examples, 2, vocab.len(), &hp) {
            Err(Error::Divergence { epoch }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_roundtrips_and_rejects_bad_magic() {
        let vocab = Vocabulary::from_tokens(&["a", "dog"]);
        let examples = vec![TrainExample {
            features: vec![0.5, 0.5],
            target_ids: encode(&vocab, "a dog"),
        }];
        let hp = NicHyperparams {
            embed_dim: 4,
            hidden_dim: 4,
            learning_rate: 0.1,
            epochs: 2,
            seed: 3,
            clip: 5.0,
        };
        let (params, report) = train(&examples, 2, vocab.len(), &hp).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nic.json");
        crate::nic::save_nic(&path, &params, &hp, &report, "vhash").unwrap();
        let (loaded, loaded_hp, hash) = crate::nic::load_nic(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(loaded_hp, hp);
        assert_eq!(hash, "vhash");

        let tampered = std::fs::read_to_string(&path)
            .unwrap()
            .replace("capfuse.nic", "other.magic");
        std::fs::write(&path, tampered).unwrap();
        assert!(crate::nic::load_nic(&path).is_err());
    }
}
