//! Batched vector math on the unit sphere and a minimal reverse-mode tape.

pub mod gradcheck;
mod mat;
mod tape;
mod vector;

pub use mat::{dot, norm, Mat};
pub(crate) use tape::log_sum_exp;
pub use tape::{Gradients, Tape, Var};
pub use vector::{
    cosine_matrix, cosine_sim, normalize, normalize_rows, project_orthogonal, Embedding, EPS_NORM, EPS_PROJ, UNIT_TOL,
};
