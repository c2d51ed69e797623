use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::{Mat, Tape, Var, EPS_NORM};
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::synth::Modality;

/// Fully connected network: affine layers with `tanh` between them and,
/// optionally, row normalization after the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub widths: Vec<usize>,
    /// `in × out` per layer.
    pub weights: Vec<Mat>,
    /// `1 × out` per layer.
    pub biases: Vec<Mat>,
    pub normalize_output: bool,
}

/// Parameter leaves of one forward pass, in [`Mlp::params`] order.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub output: Var,
    pub params: Vec<Var>,
}

impl Mlp {
    /// Symmetric uniform initialization with bound `1/√fan_in`; biases start at zero.
    pub fn new(widths: &[usize], normalize_output: bool, rng: &mut SeededRng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in widths.windows(2) {
            let bound = 1.0 / libm::sqrt(w[0] as f64);
            weights.push(rng::uniform_mat(rng, w[0], w[1], bound));
            biases.push(Mat::zeros(1, w[1]));
        }
        Mlp { widths: widths.to_vec(), weights, biases, normalize_output }
    }

    /// Assembles a network from `in × out` weights and `1 × out` biases.
    pub fn from_layers(weights: Vec<Mat>, biases: Vec<Mat>, normalize_output: bool) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::InvalidSpec("an MLP needs one bias per weight matrix and at least one layer".into()));
        }
        let mut widths = alloc::vec![weights[0].rows()];
        for (w, b) in weights.iter().zip(&biases) {
            let last = *widths.last().expect("nonempty");
            if w.rows() != last || b.shape() != (1, w.cols()) {
                return Err(Error::ShapeMismatch { op: "mlp layer", expected: (last, b.cols()), found: w.shape() });
            }
            widths.push(w.cols());
        }
        Ok(Mlp { widths, weights, biases, normalize_output })
    }

    /// Single affine layer with identity weights and zero bias.
    pub fn identity(dim: usize, normalize_output: bool) -> Self {
        Mlp {
            widths: alloc::vec![dim, dim],
            weights: alloc::vec![Mat::identity(dim)],
            biases: alloc::vec![Mat::zeros(1, dim)],
            normalize_output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("nonempty widths")
    }

    pub fn params(&self) -> Vec<&Mat> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.as_slice().len()).sum()
    }

    /// Records a forward pass. Parameters become trainable leaves when
    /// `trainable`, constants otherwise.
    pub fn forward_on(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<MlpVars> {
        let (_, cols) = tape.value(x).shape();
        if cols != self.input_dim() {
            return Err(Error::ShapeMismatch { op: "mlp input", expected: (0, self.input_dim()), found: (0, cols) });
        }
        let mut params = Vec::with_capacity(2 * self.weights.len());
        let mut h = x;
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (wv, bv) = if trainable {
                (tape.param(w.clone()), tape.param(b.clone()))
            } else {
                (tape.constant(w.clone()), tape.constant(b.clone()))
            };
            params.push(wv);
            params.push(bv);
            h = tape.matmul(h, wv)?;
            h = tape.add_bias(h, bv)?;
            if l < last {
                h = tape.tanh(h);
            }
        }
        if self.normalize_output {
            h = tape.row_normalize(h, EPS_NORM)?;
        }
        Ok(MlpVars { output: h, params })
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, xv, false)?.output;
        Ok(tape.value(out).clone())
    }

    /// SHA-256 over widths and parameter bits.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for &w in &self.widths {
            h.update((w as u64).to_le_bytes());
        }
        h.update([self.normalize_output as u8]);
        for p in self.params() {
            for v in p.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// A modality encoder: an [`Mlp`] whose output rows always lie on the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub modality: Modality,
    pub mlp: Mlp,
    pub frozen: bool,
}

impl Encoder {
    /// `input → hidden… → embed_dim`, normalized output.
    pub fn new(modality: Modality, input_dim: usize, hidden: &[usize], embed_dim: usize, rng: &mut SeededRng) -> Self {
        let mut widths = alloc::vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(embed_dim);
        Encoder { modality, mlp: Mlp::new(&widths, true, rng), frozen: false }
    }

    pub fn from_mlp(modality: Modality, mut mlp: Mlp) -> Self {
        mlp.normalize_output = true;
        Encoder { modality, mlp, frozen: false }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn embed_dim(&self) -> usize {
        self.mlp.output_dim()
    }
}

/// `N × d_m` observations to `N × d` unit rows.
pub fn encoder_forward(e: &Encoder, inputs: &Mat) -> Result<Mat> {
    e.mlp.forward(inputs)
}
