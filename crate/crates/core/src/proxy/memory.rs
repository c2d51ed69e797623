use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffmath::{dot, log_sum_exp, norm, normalize, normalize_rows, Embedding, Mat, EPS_NORM, UNIT_TOL};
use crate::error::{Error, Result};

/// Which side of the bank the query lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryDirection {
    ImgToText,
    TextToImg,
}

/// Paired unit entries `(m_img, m_text)` and a retrieval temperature.
///
/// In the bridge setting the image side holds anchor embeddings and the text
/// side the aligned-modality embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    img: Mat,
    text: Mat,
    tau: f64,
}

impl MemoryBank {
    /// Rows are normalized on the way in.
    pub fn new(mut img: Mat, mut text: Mat, tau: f64) -> Result<Self> {
        if img.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        if img.shape() != text.shape() {
            return Err(Error::ShapeMismatch { op: "memory_bank", expected: img.shape(), found: text.shape() });
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("memory temperature must be positive, got {tau}")));
        }
        normalize_rows(&mut img, EPS_NORM)?;
        normalize_rows(&mut text, EPS_NORM)?;
        Ok(MemoryBank { img, text, tau })
    }

    /// Wraps rows that are already unit length, leaving their bits untouched.
    pub fn from_unit_rows(img: Mat, text: Mat, tau: f64) -> Result<Self> {
        let mut bank = MemoryBank::new(img.clone(), text.clone(), tau)?;
        for m in [&img, &text] {
            if let Some(row) = m.iter_rows().find(|r| libm::fabs(norm(r) - 1.0) > UNIT_TOL) {
                return Err(Error::DegenerateVector { norm: norm(row) });
            }
        }
        bank.img = img;
        bank.text = text;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.img.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.img.rows() == 0
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn img(&self) -> &Mat {
        &self.img
    }

    pub fn text(&self) -> &Mat {
        &self.text
    }

    fn sides(&self, direction: MemoryDirection) -> (&Mat, &Mat) {
        match direction {
            MemoryDirection::ImgToText => (&self.img, &self.text),
            MemoryDirection::TextToImg => (&self.text, &self.img),
        }
    }
}

/// `normalize(Σ_k softmax_k(qᵀm_k/τ_m) · m'_k)` where `m` is the query side and
/// `m'` its partner.
pub fn memory_proxy(bank: &MemoryBank, q: &[f64], direction: MemoryDirection) -> Result<Embedding> {
    let (same, cross) = bank.sides(direction);
    if q.len() != same.cols() {
        return Err(Error::ShapeMismatch { op: "memory_proxy", expected: (1, same.cols()), found: (1, q.len()) });
    }
    let logits: Vec<f64> = same.iter_rows().map(|m| dot(q, m) / bank.tau).collect();
    let lse = log_sum_exp(&logits);
    let mut out = alloc::vec![0.0; cross.cols()];
    for (l, m) in logits.iter().zip(cross.iter_rows()) {
        let w = libm::exp(l - lse);
        for (o, v) in out.iter_mut().zip(m) {
            *o += w * v;
        }
    }
    normalize(&out, EPS_NORM)
}
