//! Numeric kernels and trainable-layer primitives shared by every other module.

pub mod gradcheck;
mod grid;
mod layers;
pub mod linalg;
pub mod loss;
mod mlp;

pub use gradcheck::{finite_diff_check, finite_diff_check_subset};
pub use grid::{mean_squared_difference, Grid};
pub use layers::{
    affine_backward, affine_backward_step, affine_forward, conv2d_valid_forward, conv_output_len,
    im2col, sgd_update, LayerGrads, LayerParams,
};
pub use loss::{mse_loss, sigmoid, sigmoid_bce_with_logits, softmax, softmax_cross_entropy};
pub use mlp::{NetTrace, TwoLayerNet};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values, ties broken by lowest index, returned
/// in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| {
        values[*b]
            .partial_cmp(&values[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}
