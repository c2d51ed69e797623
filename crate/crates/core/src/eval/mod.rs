//! Retrieval and zero-shot metrics, experiment tables, and the numerical
//! checks of the first-order preservation result and its matrix lemma.

mod experiments;
mod lemma;
mod theorem;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use experiments::{
    lambda_sweep, osr_vs_direct_ablation, theorem_on_snapshots, AblationRow, SnapshotPlan, SnapshotTheoremReport,
    SweepRow,
};
pub use lemma::{verify_lemma1, LemmaRecord, LemmaReport};
pub use theorem::{
    theorem_samples, verify_theorem1, LambdaChoice, SampleTheorem, TheoremBatch, TheoremRecord, TheoremReport,
    TheoremSettings,
};

use crate::diffmath::{cosine_matrix, normalize_rows, Mat, EPS_NORM};
use crate::error::{Error, Result};
use crate::synth::{Split, SyntheticWorld};
use crate::train::{encoder_forward, Encoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// `(K, recall@K)` in the order requested.
    pub recalls: Vec<(usize, f64)>,
    pub num_queries: usize,
    pub gallery_size: usize,
}

impl RetrievalResult {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Zero-based rank of gallery item `truth` for a row of similarities: items
/// scoring higher, plus equal-scoring items with a lower index, come first.
fn rank_of(sims: &[f64], truth: usize) -> usize {
    let s = sims[truth];
    sims.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < truth)).count()
}

/// Fraction of queries whose ground-truth gallery item is among the `K` most
/// cosine-similar gallery items.
pub fn recall_at_k(queries: &Mat, gallery: &Mat, truth: &[usize], ks: &[usize]) -> Result<RetrievalResult> {
    if gallery.rows() == 0 {
        return Err(Error::EmptyGallery);
    }
    if truth.len() != queries.rows() {
        return Err(Error::ShapeMismatch { op: "recall_at_k", expected: (queries.rows(), 1), found: (truth.len(), 1) });
    }
    if let Some(&bad) = truth.iter().find(|&&t| t >= gallery.rows()) {
        return Err(Error::ShapeMismatch {
            op: "recall_at_k truth",
            expected: (gallery.rows(), 1),
            found: (bad + 1, 1),
        });
    }
    let sims = cosine_matrix(queries, gallery)?;
    let ranks: Vec<usize> = truth.iter().enumerate().map(|(i, &t)| rank_of(sims.row(i), t)).collect();
    let n = queries.rows().max(1) as f64;
    let recalls = ks.iter().map(|&k| (k, ranks.iter().filter(|&&r| r < k).count() as f64 / n)).collect();
    Ok(RetrievalResult { recalls, num_queries: queries.rows(), gallery_size: gallery.rows() })
}

/// Index of the most similar prototype; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Accuracy of nearest-prototype (by cosine) classification.
pub fn top1_zero_shot(embeds: &Mat, prototypes: &Mat, labels: &[usize]) -> Result<f64> {
    if let Some(&l) = labels.iter().max() {
        if l >= prototypes.rows() {
            return Err(Error::ClassCountMismatch { expected: l + 1, found: prototypes.rows() });
        }
    }
    if labels.len() != embeds.rows() {
        return Err(Error::ShapeMismatch {
            op: "top1_zero_shot",
            expected: (embeds.rows(), 1),
            found: (labels.len(), 1),
        });
    }
    if embeds.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let sims = cosine_matrix(embeds, prototypes)?;
    let correct = labels.iter().enumerate().filter(|&(i, &l)| argmax(sims.row(i)) == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Metrics of a trained `(E_a, E_b)` pair on the evaluation splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// `M_b → M_a` retrieval, the pair never seen in training.
    pub emergent_r1: f64,
    pub emergent_r5: f64,
    /// Mean of `M_b → C` and `C → M_b` Recall@1.
    pub anchor_r1: f64,
    /// `M_b` embeddings classified against `E_a` class prototypes.
    pub emergent_top1: f64,
    /// `M_b` embeddings classified against anchor-space class prototypes.
    pub anchor_top1: f64,
}

pub fn evaluate(world: &SyntheticWorld, e_a: &Encoder, e_b: &Encoder) -> Result<EvalMetrics> {
    let ab = world.split(Split::EvalAB);
    let (oa, ob) = match (&ab.obs_a, &ab.obs_b) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::EmptyInput),
    };
    let xa = encoder_forward(e_a, oa)?;
    let xb = encoder_forward(e_b, ob)?;
    let ident: Vec<usize> = (0..ab.len()).collect();
    let emergent = recall_at_k(&xb, &xa, &ident, &[1, 5])?;
    let b_to_c = recall_at_k(&xb, &ab.anchors, &ident, &[1])?;
    let c_to_b = recall_at_k(&ab.anchors, &xb, &ident, &[1])?;

    let cls = world.split(Split::EvalClassify);
    let ob_cls = cls.obs_b.as_ref().ok_or(Error::EmptyInput)?;
    let xb_cls = encoder_forward(e_b, ob_cls)?;
    let mut proto_a = encoder_forward(e_a, &world.class_obs_a)?;
    normalize_rows(&mut proto_a, EPS_NORM)?;

    Ok(EvalMetrics {
        emergent_r1: emergent.at(1).unwrap_or(0.0),
        emergent_r5: emergent.at(5).unwrap_or(0.0),
        anchor_r1: 0.5 * (b_to_c.at(1).unwrap_or(0.0) + c_to_b.at(1).unwrap_or(0.0)),
        emergent_top1: top1_zero_shot(&xb_cls, &proto_a, &cls.labels)?,
        anchor_top1: top1_zero_shot(&xb_cls, &world.anchor_prototypes, &cls.labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    /// Sort-based ranking: order gallery indices by descending similarity,
    /// ties by index, and find the truth. Similarities come from the same
    /// kernel so that near-ties are resolved identically.
    fn oracle_recall(q: &Mat, g: &Mat, truth: &[usize], k: usize) -> f64 {
        let sims = cosine_matrix(q, g).unwrap();
        let mut hits = 0;
        for (i, &t) in truth.iter().enumerate() {
            let mut idx: Vec<(f64, usize)> = sims.row(i).iter().copied().zip(0..).collect();
            idx.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            if idx.iter().position(|&(_, j)| j == t).unwrap() < k {
                hits += 1;
            }
        }
        hits as f64 / truth.len() as f64
    }

    fn oracle_top1(e: &Mat, p: &Mat, labels: &[usize]) -> f64 {
        let all = cosine_matrix(e, p).unwrap();
        let mut correct = 0;
        for (i, &l) in labels.iter().enumerate() {
            let sims = all.row(i);
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pred = sims.iter().position(|&s| s == best).unwrap();
            correct += (pred == l) as usize;
        }
        correct as f64 / labels.len() as f64
    }

    #[test]
    fn identity_gallery_is_perfect() {
        let mut r = rng::seeded(1);
        let q = rng::unit_rows(&mut r, 12, 5);
        let res = recall_at_k(&q, &q, &(0..12).collect::<Vec<_>>(), &[1, 5]).unwrap();
        assert_eq!(res.at(1), Some(1.0));
        assert_eq!((res.num_queries, res.gallery_size), (12, 12));
    }

    #[test]
    fn distractor_equal_to_query_wins() {
        let q = Mat::from_rows(&[[1.0, 0.0]]);
        let g = Mat::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(recall_at_k(&q, &g, &[0], &[1]).unwrap().at(1), Some(0.0));
        assert_eq!(recall_at_k(&q, &g, &[0], &[2]).unwrap().at(2), Some(1.0));
        assert!(matches!(recall_at_k(&q, &Mat::zeros(0, 2), &[0], &[1]), Err(Error::EmptyGallery)));
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let q = Mat::from_rows(&[[1.0, 0.0]]);
        let g = Mat::from_rows(&[[1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(recall_at_k(&q, &g, &[0], &[1]).unwrap().at(1), Some(1.0));
        assert_eq!(recall_at_k(&q, &g, &[1], &[1]).unwrap().at(1), Some(0.0));
        let protos = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let h = core::f64::consts::FRAC_1_SQRT_2;
        let e = Mat::from_rows(&[[h, h]]);
        assert_eq!(top1_zero_shot(&e, &protos, &[0]).unwrap(), 1.0);
        assert_eq!(top1_zero_shot(&e, &protos, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn zero_shot_examples() {
        let mut r = rng::seeded(2);
        let p = rng::unit_rows(&mut r, 4, 6);
        let labels = [0, 1, 2, 3, 2, 1];
        let e = p.select_rows(&labels);
        assert_eq!(top1_zero_shot(&e, &p, &labels).unwrap(), 1.0);
        assert!(matches!(
            top1_zero_shot(&e, &p.select_rows(&[0, 1, 2]), &labels),
            Err(Error::ClassCountMismatch { expected: 4, found: 3 })
        ));
    }

    proptest! {
        #[test]
        fn recall_matches_sort_oracle(seed in 0u64..1000, n in 1usize..=50, m in 1usize..=50, k in 1usize..10) {
            let mut r = rng::seeded(seed);
            let q = rng::unit_rows(&mut r, n, 3);
            // coarse values produce ties
            let g = Mat::from_rows(&rng::uniform_mat(&mut r, m, 3, 1.0).map(|v| (v * 2.0).round()).iter_rows()
                .map(|row| if row.iter().all(|v| *v == 0.0) { alloc::vec![1.0, 0.0, 0.0] } else { row.to_vec() })
                .collect::<Vec<_>>());
            let truth: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % m).collect();
            let res = recall_at_k(&q, &g, &truth, &[k]).unwrap();
            prop_assert_eq!(res.at(k).unwrap(), oracle_recall(&q, &g, &truth, k));
        }

        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..500, n in 1usize..=30) {
            let mut r = rng::seeded(seed);
            let q = rng::unit_rows(&mut r, n, 4);
            let g = rng::unit_rows(&mut r, n, 4);
            let res = recall_at_k(&q, &g, &(0..n).collect::<Vec<_>>(), &[1, 2, 5, 10, 50]).unwrap();
            prop_assert!(res.recalls.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert!(res.recalls.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn top1_matches_oracle(seed in 0u64..1000, n in 1usize..=50, c in 2usize..8) {
            let mut r = rng::seeded(seed);
            let p = Mat::from_rows(&rng::uniform_mat(&mut r, c, 3, 1.0).map(|v| v.round() + 0.5).iter_rows().collect::<Vec<_>>());
            let e = Mat::from_rows(&rng::uniform_mat(&mut r, n, 3, 1.0).map(|v| v.round() + 0.5).iter_rows().collect::<Vec<_>>());
            let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % c).collect();
            prop_assert_eq!(top1_zero_shot(&e, &p, &labels).unwrap(), oracle_top1(&e, &p, &labels));
        }
    }
}
