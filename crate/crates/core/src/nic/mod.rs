//! Neural captioner: a learned linear projection of the image feature vector
//! conditions a single-layer LSTM decoder over the vocabulary.
//!
//! The projection output is consumed as the first LSTM input, then START and
//! the caption tokens follow (teacher forcing in training, the model's own
//! emissions when decoding). Everything is f64 and hand-rolled so gradients
//! can be checked scalar-by-scalar against finite differences.

mod decode;
mod train;

pub use decode::{decode_beam, decode_greedy, DecodedCaption};
pub use train::{example_gradients, example_loss, train, NicHyperparams, TrainExample, TrainReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Xavier-style uniform init over [-a, a], a = sqrt(6 / (fan_in + fan_out)).
    pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-a..a)).collect(),
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// y = M x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for (yr, row) in y.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *yr = acc;
        }
        y
    }

    /// y = M^T x
    pub fn matvec_transposed(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (&xv, row) in x.iter().zip(self.data.chunks_exact(self.cols)) {
            for (yc, w) in y.iter_mut().zip(row) {
                *yc += w * xv;
            }
        }
        y
    }

    /// M += outer(a, b)
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &av) in a.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (w, &bv) in self.row_mut(r).iter_mut().zip(b) {
                *w += av * bv;
            }
        }
    }
}

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NicDims {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
}

/// All trainable parameter blocks. The same struct doubles as the gradient
/// accumulator, block for block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NicParameters {
    pub dims: NicDims,
    /// Image feature projection, embed_dim x feature_dim.
    pub w_image: Mat,
    /// Token embeddings, vocab_size x embed_dim.
    pub w_embed: Mat,
    /// Gate weights, hidden_dim x (embed_dim + hidden_dim).
    pub w_input: Mat,
    pub w_forget: Mat,
    pub w_cell: Mat,
    pub w_output: Mat,
    pub b_input: Vec<f64>,
    pub b_forget: Vec<f64>,
    pub b_cell: Vec<f64>,
    pub b_output: Vec<f64>,
    /// Output projection to vocabulary logits, vocab_size x hidden_dim.
    pub w_logit: Mat,
    pub b_logit: Vec<f64>,
}

impl NicParameters {
    pub fn zeros(dims: NicDims) -> Self {
        let z = dims.embed_dim + dims.hidden_dim;
        NicParameters {
            dims,
            w_image: Mat::zeros(dims.embed_dim, dims.feature_dim),
            w_embed: Mat::zeros(dims.vocab_size, dims.embed_dim),
            w_input: Mat::zeros(dims.hidden_dim, z),
            w_forget: Mat::zeros(dims.hidden_dim, z),
            w_cell: Mat::zeros(dims.hidden_dim, z),
            w_output: Mat::zeros(dims.hidden_dim, z),
            b_input: vec![0.0; dims.hidden_dim],
            b_forget: vec![0.0; dims.hidden_dim],
            b_cell: vec![0.0; dims.hidden_dim],
            b_output: vec![0.0; dims.hidden_dim],
            w_logit: Mat::zeros(dims.vocab_size, dims.hidden_dim),
            b_logit: vec![0.0; dims.vocab_size],
        }
    }

    /// Deterministic initialization: Xavier matrices (in field order), zero
    /// biases.
    pub fn init(dims: NicDims, rng: &mut impl Rng) -> Self {
        let z = dims.embed_dim + dims.hidden_dim;
        NicParameters {
            dims,
            w_image: Mat::xavier(dims.embed_dim, dims.feature_dim, rng),
            w_embed: Mat::xavier(dims.vocab_size, dims.embed_dim, rng),
            w_input: Mat::xavier(dims.hidden_dim, z, rng),
            w_forget: Mat::xavier(dims.hidden_dim, z, rng),
            w_cell: Mat::xavier(dims.hidden_dim, z, rng),
            w_output: Mat::xavier(dims.hidden_dim, z, rng),
            b_input: vec![0.0; dims.hidden_dim],
            b_forget: vec![0.0; dims.hidden_dim],
            b_cell: vec![0.0; dims.hidden_dim],
            b_output: vec![0.0; dims.hidden_dim],
            w_logit: Mat::xavier(dims.vocab_size, dims.hidden_dim, rng),
            b_logit: vec![0.0; dims.vocab_size],
        }
    }

    /// Named views of every parameter block, in a fixed order shared with
    /// `blocks_mut`.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w_image", self.w_image.data.as_slice()),
            ("w_embed", self.w_embed.data.as_slice()),
            ("w_input", self.w_input.data.as_slice()),
            ("w_forget", self.w_forget.data.as_slice()),
            ("w_cell", self.w_cell.data.as_slice()),
            ("w_output", self.w_output.data.as_slice()),
            ("b_input", self.b_input.as_slice()),
            ("b_forget", self.b_forget.as_slice()),
            ("b_cell", self.b_cell.as_slice()),
            ("b_output", self.b_output.as_slice()),
            ("w_logit", self.w_logit.data.as_slice()),
            ("b_logit", self.b_logit.as_slice()),
        ]
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Vec<f64>)> {
        vec![
            ("w_image", &mut self.w_image.data),
            ("w_embed", &mut self.w_embed.data),
            ("w_input", &mut self.w_input.data),
            ("w_forget", &mut self.w_forget.data),
            ("w_cell", &mut self.w_cell.data),
            ("w_output", &mut self.w_output.data),
            ("b_input", &mut self.b_input),
            ("b_forget", &mut self.b_forget),
            ("b_cell", &mut self.b_cell),
            ("b_output", &mut self.b_output),
            ("w_logit", &mut self.w_logit.data),
            ("b_logit", &mut self.b_logit),
        ]
    }

    /// Projects the image feature vector into the embedding space (the
    /// decoder's step-0 input).
    pub fn image_projection(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dims.feature_dim {
            return Err(Error::InvalidInput(format!(
                "feature vector has dimension {}, model expects {}",
                features.len(),
                self.dims.feature_dim
            )));
        }
        Ok(self.w_image.matvec(features))
    }

    /// Embedding row of a token id.
    pub fn embedding(&self, id: u32) -> &[f64] {
        self.w_embed.row(id as usize)
    }
}

const NIC_MAGIC: &str = "capfuse.nic";

#[derive(Serialize, Deserialize)]
struct NicFile {
    magic: String,
    version: u32,
    vocab_hash: String,
    hyperparams: NicHyperparams,
    params: NicParameters,
    train_report: TrainReport,
}

/// Writes a model checkpoint: magic header, dimensions (inside the
/// parameters), hyperparameters, vocabulary hash, and every parameter block.
pub fn save_nic(
    path: &std::path::Path,
    params: &NicParameters,
    hp: &NicHyperparams,
    report: &TrainReport,
    vocab_hash: &str,
) -> Result<()> {
    let file = NicFile {
        magic: NIC_MAGIC.to_string(),
        version: 1,
        vocab_hash: vocab_hash.to_string(),
        hyperparams: hp.clone(),
        params: params.clone(),
        train_report: report.clone(),
    };
    let mut body = serde_json::to_string(&file).expect("checkpoint serializes");
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_nic(path: &std::path::Path) -> Result<(NicParameters, NicHyperparams, String)> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: NicFile = serde_json::from_str(&body).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    if file.magic != NIC_MAGIC {
        return Err(Error::InvalidCheckpoint {
            path: path.into(),
            message: format!("bad magic {:?}", file.magic),
        });
    }
    let dims = file.params.dims;
    let z = dims.embed_dim + dims.hidden_dim;
    let consistent = file.params.w_image.rows == dims.embed_dim
        && file.params.w_image.cols == dims.feature_dim
        && file.params.w_embed.rows == dims.vocab_size
        && file.params.w_input.cols == z
        && file.params.w_logit.rows == dims.vocab_size
        && file.params.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()));
    if !consistent {
        return Err(Error::InvalidCheckpoint {
            path: path.into(),
            message: "inconsistent parameter dimensions or non-finite values".into(),
        });
    }
    Ok((file.params, file.hyperparams, file.vocab_hash))
}

/// LSTM hidden and cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zero(hidden_dim: usize) -> Self {
        LstmState {
            hidden: vec![0.0; hidden_dim],
            cell: vec![0.0; hidden_dim],
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Everything the backward pass needs about one LSTM step.
#[derive(Debug, Clone)]
pub(crate) struct CellCache {
    /// Concatenated [input, previous hidden].
    pub z: Vec<f64>,
    pub gate_i: Vec<f64>,
    pub gate_f: Vec<f64>,
    pub gate_g: Vec<f64>,
    pub gate_o: Vec<f64>,
    pub cell_prev: Vec<f64>,
    pub cell: Vec<f64>,
    pub tanh_cell: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl CellCache {
    pub(crate) fn state(&self) -> LstmState {
        LstmState {
            hidden: self.hidden.clone(),
            cell: self.cell.clone(),
        }
    }
}

/// One LSTM cell step: sigmoid input/forget/output gates, tanh candidate.
pub(crate) fn cell_forward(params: &NicParameters, state: &LstmState, input: &[f64]) -> CellCache {
    let h = params.dims.hidden_dim;
    debug_assert_eq!(input.len(), params.dims.embed_dim);
    let mut z = Vec::with_capacity(params.dims.embed_dim + h);
    z.extend_from_slice(input);
    z.extend_from_slice(&state.hidden);

    let mut gate_i = params.w_input.matvec(&z);
    let mut gate_f = params.w_forget.matvec(&z);
    let mut gate_g = params.w_cell.matvec(&z);
    let mut gate_o = params.w_output.matvec(&z);
    for k in 0..h {
        gate_i[k] = sigmoid(gate_i[k] + params.b_input[k]);
        gate_f[k] = sigmoid(gate_f[k] + params.b_forget[k]);
        gate_g[k] = (gate_g[k] + params.b_cell[k]).tanh();
        gate_o[k] = sigmoid(gate_o[k] + params.b_output[k]);
    }
    let mut cell = vec![0.0; h];
    let mut tanh_cell = vec![0.0; h];
    let mut hidden = vec![0.0; h];
    for k in 0..h {
        cell[k] = gate_f[k] * state.cell[k] + gate_i[k] * gate_g[k];
        tanh_cell[k] = cell[k].tanh();
        hidden[k] = gate_o[k] * tanh_cell[k];
    }
    CellCache {
        z,
        gate_i,
        gate_f,
        gate_g,
        gate_o,
        cell_prev: state.cell.clone(),
        cell,
        tanh_cell,
        hidden,
    }
}

/// Numerically stable log-softmax. `-inf` logits stay `-inf`.
pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

/// Vocabulary logits for a hidden state.
pub(crate) fn logits(params: &NicParameters, hidden: &[f64]) -> Vec<f64> {
    let mut out = params.w_logit.matvec(hidden);
    for (o, b) in out.iter_mut().zip(&params.b_logit) {
        *o += b;
    }
    out
}

/// One decoder step: LSTM cell followed by the log-probability distribution
/// over the vocabulary.
pub fn forward_step(
    params: &NicParameters,
    state: &LstmState,
    input: &[f64],
) -> Result<(LstmState, Vec<f64>)> {
    if input.len() != params.dims.embed_dim {
        return Err(Error::InvalidInput(format!(
            "step input has dimension {}, model expects {}",
            input.len(),
            params.dims.embed_dim
        )));
    }
    let cache = cell_forward(params, state, input);
    if !cache.hidden.iter().all(|v| v.is_finite()) || !cache.cell.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalOverflow);
    }
    let raw = logits(params, &cache.hidden);
    if !raw.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericalOverflow);
    }
    Ok((cache.state(), log_softmax(&raw)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> NicDims {
        NicDims {
            feature_dim: 2,
            embed_dim: 2,
            hidden_dim: 2,
            vocab_size: 3,
        }
    }

    #[test]
    fn zero_model_step_is_uniform() {
        let params = NicParameters::zeros(tiny_dims());
        let state = LstmState::zero(2);
        let (next, log_probs) = forward_step(&params, &state, &[0.0, 0.0]).unwrap();
        let expected = -(3.0f64).ln();
        for lp in &log_probs {
            assert!((lp - expected).abs() < 1e-12);
        }
        assert_eq!(next.hidden, vec![0.0, 0.0]);
        assert_eq!(next.cell, vec![0.0, 0.0]);
    }

    #[test]
    fn step_distribution_sums_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let params = NicParameters::init(tiny_dims(), &mut rng);
        let state = LstmState::zero(2);
        let (_, log_probs) = forward_step(&params, &state, &[0.4, -1.2]).unwrap();
        let total: f64 = log_probs.iter().map(|lp| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn step_matches_hand_rolled_scalar_oracle() {
        // E = H = 2, vocab 3, fixed small weights; every intermediate is
        // recomputed below with plain scalar arithmetic.
        let dims = tiny_dims();
        let mut params = NicParameters::zeros(dims);
        params.w_image.data = vec![0.1, -0.2, 0.3, 0.05];
        params.w_embed.data = vec![0.02, -0.03, 0.11, 0.07, -0.09, 0.13];
        params.w_input.data = vec![0.1, 0.2, -0.1, 0.05, 0.0, -0.2, 0.15, 0.1];
        params.w_forget.data = vec![-0.05, 0.1, 0.2, -0.15, 0.1, 0.05, -0.1, 0.2];
        params.w_cell.data = vec![0.2, -0.1, 0.05, 0.1, -0.2, 0.15, 0.0, -0.05];
        params.w_output.data = vec![0.05, 0.05, -0.05, 0.1, 0.2, -0.1, 0.1, 0.0];
        params.b_input = vec![0.01, -0.02];
        params.b_forget = vec![0.03, 0.0];
        params.b_cell = vec![-0.01, 0.02];
        params.b_output = vec![0.0, 0.01];
        params.w_logit.data = vec![0.3, -0.2, 0.1, 0.4, -0.25, 0.15];
        params.b_logit = vec![0.05, -0.05, 0.0];

        let state = LstmState {
            hidden: vec![0.2, -0.1],
            cell: vec![0.05, 0.3],
        };
        let input = [0.5, -0.4];
        let (next, log_probs) = forward_step(&params, &state, &input).unwrap();

        // Oracle, scalar by scalar.
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let z = [0.5, -0.4, 0.2, -0.1];
        let dot = |w: &[f64]| w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>();
        let i0 = sig(dot(&[0.1, 0.2, -0.1, 0.05]) + 0.01);
        let i1 = sig(dot(&[0.0, -0.2, 0.15, 0.1]) - 0.02);
        let f0 = sig(dot(&[-0.05, 0.1, 0.2, -0.15]) + 0.03);
        let f1 = sig(dot(&[0.1, 0.05, -0.1, 0.2]) + 0.0);
        let g0 = (dot(&[0.2, -0.1, 0.05, 0.1]) - 0.01).tanh();
        let g1 = (dot(&[-0.2, 0.15, 0.0, -0.05]) + 0.02).tanh();
        let o0 = sig(dot(&[0.05, 0.05, -0.05, 0.1]) + 0.0);
        let o1 = sig(dot(&[0.2, -0.1, 0.1, 0.0]) + 0.01);
        let c0 = f0 * 0.05 + i0 * g0;
        let c1 = f1 * 0.3 + i1 * g1;
        let h0 = o0 * c0.tanh();
        let h1 = o1 * c1.tanh();
        let logit0 = 0.3 * h0 - 0.2 * h1 + 0.05;
        let logit1 = 0.1 * h0 + 0.4 * h1 - 0.05;
        let logit2 = -0.25 * h0 + 0.15 * h1 + 0.0;
        let lse = (logit0.exp() + logit1.exp() + logit2.exp()).ln();

        assert!((next.cell[0] - c0).abs() < 1e-10);
        assert!((next.cell[1] - c1).abs() < 1e-10);
        assert!((next.hidden[0] - h0).abs() < 1e-10);
        assert!((next.hidden[1] - h1).abs() < 1e-10);
        assert!((log_probs[0] - (logit0 - lse)).abs() < 1e-10);
        assert!((log_probs[1] - (logit1 - lse)).abs() < 1e-10);
        assert!((log_probs[2] - (logit2 - lse)).abs() < 1e-10);
    }

    #[test]
    fn non_finite_activations_are_reported() {
        let mut params = NicParameters::zeros(tiny_dims());
        params.w_logit.data[0] = f64::NAN;
        let state = LstmState::zero(2);
        assert!(matches!(
            forward_step(&params, &state, &[1.0, 1.0]),
            Err(Error::NumericalOverflow)
        ));
    }
}
