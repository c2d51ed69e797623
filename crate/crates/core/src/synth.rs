//! Synthetic multimodal worlds with a controlled pairing graph.
//!
//! Every sample carries one latent `z` drawn around its class mean. The anchor
//! modality C is a fixed random map of `z` followed by normalization; it plays
//! the role of a frozen, already-trained embedding space. Modalities A and B
//! are raw observations `tanh(F_m z) + noise` that trainable encoders must map
//! into that space. Training splits pair C with A and C with B on disjoint
//! samples; the (A, B) pair only ever appears in evaluation splits.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::{normalize_rows, Mat, EPS_NORM};
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Anchor,
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairId {
    /// Anchor modality C with modality A.
    AnchorA,
    /// Anchor modality C with modality B.
    AnchorB,
    /// The emergent pair. Evaluation only.
    AB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainCA,
    TrainCB,
    EvalAB,
    EvalClassify,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainCA, Split::TrainCB, Split::EvalAB, Split::EvalClassify];

    pub fn is_train(self) -> bool {
        matches!(self, Split::TrainCA | Split::TrainCB)
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainCA => "train_CA",
            Split::TrainCB => "train_CB",
            Split::EvalAB => "eval_AB",
            Split::EvalClassify => "eval_classify",
        }
    }

    pub fn from_name(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub obs_dim: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    /// Standard deviation of the class means around the origin.
    pub class_spread: f64,
    /// Within-class standard deviation of the latent.
    pub latent_std: f64,
    pub modality_a: ModalitySpec,
    pub modality_b: ModalitySpec,
    /// Apply `tanh` after the linear observation map.
    pub nonlinear: bool,
    /// Samples in each paired training split.
    pub train_samples: usize,
    /// Samples in each evaluation split.
    pub eval_samples: usize,
    pub training_pairs: Vec<PairId>,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_classes: 10,
            latent_dim: 8,
            embed_dim: 16,
            class_spread: 1.0,
            latent_std: 1.0,
            modality_a: ModalitySpec { obs_dim: 32, noise_std: 0.1 },
            modality_b: ModalitySpec { obs_dim: 32, noise_std: 0.1 },
            nonlinear: true,
            train_samples: 2000,
            eval_samples: 500,
            training_pairs: vec![PairId::AnchorA, PairId::AnchorB],
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.training_pairs.contains(&PairId::AB) {
            return bad("training pairing graph must not contain the emergent (A, B) pair");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.latent_dim < 1 || self.embed_dim < 2 {
            return bad("latent_dim must be >= 1 and embed_dim >= 2");
        }
        if self.modality_a.obs_dim < 1 || self.modality_b.obs_dim < 1 {
            return bad("observation dims must be positive");
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if ![self.class_spread, self.latent_std, self.modality_a.noise_std, self.modality_b.noise_std]
            .into_iter()
            .all(finite_nonneg)
        {
            return bad("spreads and noise levels must be finite and non-negative");
        }
        if self.eval_samples < 1 {
            return bad("eval_samples must be positive");
        }
        Ok(())
    }
}

/// One split: co-indexed rows for every modality the split carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitData {
    pub split: Split,
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    /// Unit-norm anchor embeddings.
    pub anchors: Mat,
    pub obs_a: Option<Mat>,
    pub obs_b: Option<Mat>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn serves(&self, pair: PairId) -> bool {
        match pair {
            PairId::AnchorA => self.obs_a.is_some(),
            PairId::AnchorB => self.obs_b.is_some(),
            PairId::AB => self.obs_a.is_some() && self.obs_b.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub splits: Vec<SplitData>,
    /// Unit-norm class prototypes in the anchor space.
    pub anchor_prototypes: Mat,
    /// Noise-free modality-A observation of each class mean; encoding these
    /// gives class prototypes on the A side.
    pub class_obs_a: Mat,
}

struct Maps {
    class_means: Mat,
    anchor_map: Mat,
    obs_a: Mat,
    obs_b: Mat,
}

impl SyntheticWorld {
    pub fn split(&self, split: Split) -> &SplitData {
        self.splits.iter().find(|s| s.split == split).expect("world carries every split")
    }

    /// SHA-256 over the spec-independent contents of the world.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let put_mat = |h: &mut Sha256, m: &Mat| {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        };
        h.update(b"world");
        for s in &self.splits {
            h.update(s.split.name().as_bytes());
            for (&id, &l) in s.ids.iter().zip(&s.labels) {
                h.update(id.to_le_bytes());
                h.update((l as u64).to_le_bytes());
            }
            put_mat(&mut h, &s.anchors);
            for m in [&s.obs_a, &s.obs_b] {
                match m {
                    Some(m) => put_mat(&mut h, m),
                    None => h.update([0u8]),
                }
            }
        }
        put_mat(&mut h, &self.anchor_prototypes);
        put_mat(&mut h, &self.class_obs_a);
        h.finalize().into()
    }

    pub fn fingerprint_hex(&self) -> alloc::string::String {
        self.fingerprint().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Mean anchor cosine within classes and across classes on `split`.
    pub fn class_structure(&self, split: Split) -> (f64, f64) {
        let s = self.split(split);
        let sims = s.anchors.matmul_t(&s.anchors);
        let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..s.len() {
            for j in (i + 1)..s.len() {
                if s.labels[i] == s.labels[j] {
                    intra += sims[(i, j)];
                    ni += 1;
                } else {
                    inter += sims[(i, j)];
                    ne += 1;
                }
            }
        }
        (intra / ni.max(1) as f64, inter / ne.max(1) as f64)
    }
}

fn observe(map: &Mat, z: &Mat, noise: f64, nonlinear: bool, rng: &mut SeededRng) -> Mat {
    let mut o = z.matmul_t(map);
    if nonlinear {
        o = o.map(libm::tanh);
    }
    if noise > 0.0 {
        o.as_mut_slice().iter_mut().for_each(|v| *v += noise * rng::gaussian(rng));
    }
    o
}

#[allow(clippy::too_many_arguments)]
fn draw_split(
    spec: &WorldSpec,
    maps: &Maps,
    split: Split,
    n: usize,
    first_id: u64,
    with_a: bool,
    with_b: bool,
    rng: &mut SeededRng,
) -> Result<SplitData> {
    let k = spec.latent_dim;
    let labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    let mut z = rng::gaussian_mat(rng, n, k, spec.latent_std);
    for (i, &l) in labels.iter().enumerate() {
        for (zv, &m) in z.row_mut(i).iter_mut().zip(maps.class_means.row(l)) {
            *zv += m;
        }
    }
    let mut anchors = z.matmul_t(&maps.anchor_map);
    normalize_rows(&mut anchors, EPS_NORM)?;
    let obs_a = with_a.then(|| observe(&maps.obs_a, &z, spec.modality_a.noise_std, spec.nonlinear, rng));
    let obs_b = with_b.then(|| observe(&maps.obs_b, &z, spec.modality_b.noise_std, spec.nonlinear, rng));
    Ok(SplitData { split, ids: (first_id..first_id + n as u64).collect(), labels, anchors, obs_a, obs_b })
}

/// Deterministic in `spec.seed`.
pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut r = rng::seeded(rng::derive_seed(spec.seed, 0x5757));
    let k = spec.latent_dim;
    let scale = 1.0 / libm::sqrt(k as f64);
    let maps = Maps {
        class_means: rng::gaussian_mat(&mut r, spec.num_classes, k, spec.class_spread),
        anchor_map: rng::gaussian_mat(&mut r, spec.embed_dim, k, scale),
        obs_a: rng::gaussian_mat(&mut r, spec.modality_a.obs_dim, k, scale),
        obs_b: rng::gaussian_mat(&mut r, spec.modality_b.obs_dim, k, scale),
    };
    let n = spec.train_samples;
    let e = spec.eval_samples;
    let has_ca = spec.training_pairs.contains(&PairId::AnchorA);
    let has_cb = spec.training_pairs.contains(&PairId::AnchorB);
    let n_ca = if has_ca { n } else { 0 };
    let n_cb = if has_cb { n } else { 0 };
    let mut id = 0u64;
    let mut splits = Vec::with_capacity(4);
    for (split, count, a, b) in [
        (Split::TrainCA, n_ca, true, false),
        (Split::TrainCB, n_cb, false, true),
        (Split::EvalAB, e, true, true),
        (Split::EvalClassify, e, true, true),
    ] {
        splits.push(draw_split(spec, &maps, split, count, id, a, b, &mut r)?);
        id += count as u64;
    }
    let mut anchor_prototypes = maps.class_means.matmul_t(&maps.anchor_map);
    normalize_rows(&mut anchor_prototypes, EPS_NORM)?;
    let mut class_obs_a = maps.class_means.matmul_t(&maps.obs_a);
    if spec.nonlinear {
        class_obs_a = class_obs_a.map(libm::tanh);
    }
    Ok(SyntheticWorld { spec: spec.clone(), splits, anchor_prototypes, class_obs_a })
}

/// A co-indexed batch: `left` holds the first modality of the pair (anchor
/// embeddings for anchor pairs, A observations for the emergent pair) and
/// `right` the second.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub rows: Vec<usize>,
    pub left: Mat,
    pub right: Mat,
}

/// Seeded iteration over one split. Keeps an audit log of every pair served.
#[derive(Debug, Clone)]
pub struct EpochCursor {
    rng: SeededRng,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    audit: Vec<(PairId, Split, usize)>,
}

impl EpochCursor {
    pub fn new(seed: u64) -> Self {
        EpochCursor { rng: rng::seeded(seed), order: Vec::new(), pos: 0, epoch: 0, audit: Vec::new() }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// `(pair, split, rows served)` for every batch handed out.
    pub fn audit_log(&self) -> &[(PairId, Split, usize)] {
        &self.audit
    }

    fn next_rows(&mut self, n: usize, batch: usize) -> Vec<usize> {
        if self.pos >= self.order.len() || self.order.len() != n {
            if !self.order.is_empty() && self.pos >= self.order.len() {
                self.epoch += 1;
            }
            self.order = rng::permutation(&mut self.rng, n);
            self.pos = 0;
        }
        let mut end = (self.pos + batch).min(n);
        // never leave a single trailing row: contrastive batches need two
        if n - end == 1 {
            end = n;
        }
        let rows = self.order[self.pos..end].to_vec();
        self.pos = end;
        rows
    }
}

/// Serves the next batch of `pair` from `split`. Training splits never serve
/// the emergent pair.
pub fn sample_pairs(
    world: &SyntheticWorld,
    pair: PairId,
    split: Split,
    batch_size: usize,
    cursor: &mut EpochCursor,
) -> Result<PairBatch> {
    if split.is_train() && pair == PairId::AB {
        return Err(Error::ForbiddenPair { pair, split });
    }
    let data = world.split(split);
    if !data.serves(pair) || data.is_empty() {
        return Err(Error::ForbiddenPair { pair, split });
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let rows = cursor.next_rows(data.len(), batch_size);
    let (left, right) = match pair {
        PairId::AnchorA => (&data.anchors, data.obs_a.as_ref()),
        PairId::AnchorB => (&data.anchors, data.obs_b.as_ref()),
        PairId::AB => (data.obs_a.as_ref().expect("checked"), data.obs_b.as_ref()),
    };
    let right = right.expect("checked");
    cursor.audit.push((pair, split, rows.len()));
    Ok(PairBatch {
        ids: rows.iter().map(|&r| data.ids[r]).collect(),
        labels: rows.iter().map(|&r| data.labels[r]).collect(),
        left: left.select_rows(&rows),
        right: right.select_rows(&rows),
        rows,
    })
}
