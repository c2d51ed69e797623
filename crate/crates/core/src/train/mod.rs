//! Encoders, the optimizer, and the three training stages.

mod mlp;
mod optim;
pub mod pipeline;
mod stages;

use alloc::vec::Vec;

pub use mlp::{encoder_forward, Encoder, Mlp, MlpVars};
pub use optim::{optimizer_step, AdamWConfig, OptimizerState};
pub use stages::{
    stage1_anchor_align, stage2_proxy_fit, stage3_bridge_align, stage3_with_proxies, LogRecord, MonitorRecord,
    StageConfig, StageOutput,
};

use crate::rng::{self, SeededRng};

/// Row indices of one shuffled pass over `n` items, cut into batches of
/// `batch`. A trailing batch of one row is merged into the previous batch.
pub fn minibatches(rng: &mut SeededRng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let order = rng::permutation(rng, n);
    let batch = batch.max(1);
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().map(Vec::len) == Some(1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}
