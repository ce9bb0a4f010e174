use crate::error::{Error, Result};

use super::grid::Grid;
use super::linalg::{self, MatRef};

/// Weights and biases of one trainable layer.
///
/// Dense layers store weights as `[fan_out, fan_in]`. Convolutional banks store
/// `[filters, receptive_field * receptive_field]`. When `tied` is set the
/// decoder direction reuses the transposed weights and has no storage of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Grid,
    pub biases: Grid,
    pub tied: bool,
}

/// Gradients with the same shapes as a [`LayerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Grid,
    pub biases: Grid,
}

impl LayerParams {
    pub fn new(weights: Grid, biases: Grid, tied: bool) -> Result<Self> {
        if weights.ndim() != 2 || biases.ndim() != 1 || biases.len() != weights.shape()[0] {
            return Err(Error::shape(
                "layer params",
                weights.shape(),
                biases.shape(),
            ));
        }
        Ok(LayerParams {
            weights,
            biases,
            tied,
        })
    }

    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        LayerParams {
            weights: Grid::zeros(&[fan_out, fan_in]),
            biases: Grid::zeros(&[fan_out]),
            tied: false,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn zero_grads(&self) -> LayerGrads {
        LayerGrads {
            weights: Grid::zeros(self.weights.shape()),
            biases: Grid::zeros(self.biases.shape()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.weights.data().to_vec();
        v.extend_from_slice(self.biases.data());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let nw = self.weights.len();
        self.weights.data_mut().copy_from_slice(&flat[..nw]);
        self.biases.data_mut().copy_from_slice(&flat[nw..]);
    }

    pub fn fingerprint(&self) -> u64 {
        self.weights.fingerprint() ^ self.biases.fingerprint().rotate_left(17)
    }
}

impl LayerGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.weights.data().to_vec();
        v.extend_from_slice(self.biases.data());
        v
    }

    pub fn add_assign(&mut self, other: &LayerGrads) {
        linalg::axpy(1.0, other.weights.data(), self.weights.data_mut());
        linalg::axpy(1.0, other.biases.data(), self.biases.data_mut());
    }
}

/// `weights · input + biases`.
pub fn affine_forward(input: &[f64], params: &LayerParams) -> Result<Vec<f64>> {
    if input.len() != params.fan_in() {
        return Err(Error::shape(
            "affine_forward",
            &[input.len()],
            params.weights.shape(),
        ));
    }
    let n = params.fan_in();
    let w = params.weights.data();
    Ok(params
        .biases
        .data()
        .iter()
        .enumerate()
        .map(|(o, b)| b + linalg::dot(&w[o * n..(o + 1) * n], input))
        .collect())
}

/// Parameter gradients and input gradient of [`affine_forward`].
pub fn affine_backward(
    input: &[f64],
    params: &LayerParams,
    grad_out: &[f64],
) -> Result<(LayerGrads, Vec<f64>)> {
    if input.len() != params.fan_in() || grad_out.len() != params.fan_out() {
        return Err(Error::shape(
            "affine_backward",
            &[grad_out.len(), input.len()],
            params.weights.shape(),
        ));
    }
    let n = params.fan_in();
    let w = params.weights.data();
    let mut grads = params.zero_grads();
    let mut grad_in = vec![0.0; n];
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut grads.weights.data_mut()[o * n..(o + 1) * n];
        linalg::axpy(g, input, row);
        linalg::axpy(g, &w[o * n..(o + 1) * n], &mut grad_in);
    }
    grads.biases.data_mut().copy_from_slice(grad_out);
    Ok((grads, grad_in))
}

/// Fused backward pass and SGD update; equivalent to [`affine_backward`]
/// followed by [`sgd_update`], but never materializes the weight gradient.
/// Returns the gradient with respect to the input, taken before the update.
pub fn affine_backward_step(
    input: &[f64],
    params: &mut LayerParams,
    grad_out: &[f64],
    learning_rate: f64,
    need_input_grad: bool,
) -> Result<Vec<f64>> {
    check_learning_rate(learning_rate)?;
    if input.len() != params.fan_in() || grad_out.len() != params.fan_out() {
        return Err(Error::shape(
            "affine_backward_step",
            &[grad_out.len(), input.len()],
            params.weights.shape(),
        ));
    }
    let n = params.fan_in();
    let mut grad_in = Vec::new();
    if need_input_grad {
        grad_in = vec![0.0; n];
        let w = params.weights.data();
        for (o, &g) in grad_out.iter().enumerate() {
            if g != 0.0 {
                linalg::axpy(g, &w[o * n..(o + 1) * n], &mut grad_in);
            }
        }
    }
    if learning_rate == 0.0 {
        return Ok(grad_in);
    }
    let nonzero: Vec<usize> = (0..n).filter(|&i| input[i] != 0.0).collect();
    let dense = nonzero.len() * 2 > n;
    let w = params.weights.data_mut();
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let scale = -learning_rate * g;
        let row = &mut w[o * n..(o + 1) * n];
        if dense {
            linalg::axpy(scale, input, row);
        } else {
            for &i in &nonzero {
                row[i] += scale * input[i];
            }
        }
    }
    for (b, g) in params.biases.data_mut().iter_mut().zip(grad_out) {
        *b -= learning_rate * g;
    }
    Ok(grad_in)
}

fn check_learning_rate(learning_rate: f64) -> Result<()> {
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {learning_rate}"
        )));
    }
    Ok(())
}

/// `params <- params - learning_rate * grads`.
pub fn sgd_update(params: &mut LayerParams, grads: &LayerGrads, learning_rate: f64) -> Result<()> {
    check_learning_rate(learning_rate)?;
    params
        .weights
        .ensure_shape("sgd_update", grads.weights.shape())?;
    params
        .biases
        .ensure_shape("sgd_update", grads.biases.shape())?;
    linalg::axpy(
        -learning_rate,
        grads.weights.data(),
        params.weights.data_mut(),
    );
    linalg::axpy(
        -learning_rate,
        grads.biases.data(),
        params.biases.data_mut(),
    );
    Ok(())
}

/// Output side length of a valid convolution.
pub fn conv_output_len(input: usize, receptive_field: usize, stride: usize) -> usize {
    (input - receptive_field) / stride + 1
}

/// Extracts every receptive-field patch of `image` (`[H, W]`) as a row of a
/// `[positions, R * R]` matrix, positions in row-major output order.
pub fn im2col(
    image: &Grid,
    receptive_field: usize,
    stride: usize,
) -> Result<(Vec<f64>, usize, usize)> {
    if image.ndim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "expected a 2-D image, got shape {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let r = receptive_field;
    if stride == 0 || r == 0 {
        return Err(Error::InvalidArgument(
            "stride and receptive field must be positive".into(),
        ));
    }
    if h < r || w < r {
        return Err(Error::InvalidArgument(format!(
            "receptive field {r}x{r} is larger than image {h}x{w}"
        )));
    }
    let (oh, ow) = (conv_output_len(h, r, stride), conv_output_len(w, r, stride));
    let mut cols = vec![0.0; oh * ow * r * r];
    let src = image.data();
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * r * r;
            for dy in 0..r {
                let row = (oy * stride + dy) * w + ox * stride;
                cols[base + dy * r..base + dy * r + r].copy_from_slice(&src[row..row + r]);
            }
        }
    }
    Ok((cols, oh, ow))
}

/// Valid (unpadded) 2-D cross-correlation of an `[H, W]` image with an
/// `[F, R, R]` filter bank. Returns `[F, H', W']`.
pub fn conv2d_valid_forward(image: &Grid, filters: &Grid, stride: usize) -> Result<Grid> {
    if filters.ndim() != 3 || filters.shape()[1] != filters.shape()[2] {
        return Err(Error::InvalidArgument(format!(
            "filters must be [F, R, R], got {:?}",
            filters.shape()
        )));
    }
    let f = filters.shape()[0];
    let r = filters.shape()[1];
    let (cols, oh, ow) = im2col(image, r, stride)?;
    let positions = oh * ow;
    let mut out = vec![0.0; f * positions];
    linalg::gemm(
        MatRef::row_major(filters.data(), f, r * r),
        MatRef::transposed(&cols, positions, r * r),
        0.0,
        &mut out,
    );
    Grid::new(vec![f, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, shape: &[usize]) -> Grid {
        Grid::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn affine_zero_weights_returns_bias() {
        let mut p = LayerParams::zeros(3, 4);
        p.biases = Grid::vector(vec![0.5, -1.0, 2.0]);
        let out = affine_forward(&[9.0, -3.0, 1.0, 7.0], &p).unwrap();
        assert_eq!(out, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn affine_identity_weights_pass_input_through() {
        let mut p = LayerParams::zeros(3, 3);
        for i in 0..3 {
            p.weights.data_mut()[i * 3 + i] = 1.0;
        }
        let x = [0.25, -4.0, 3.5];
        assert_eq!(affine_forward(&x, &p).unwrap(), x.to_vec());
    }

    #[test]
    fn affine_matches_hand_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LayerParams::new(
            random_grid(&mut rng, &[3, 2]),
            random_grid(&mut rng, &[3]),
            false,
        )
        .unwrap();
        let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let out = affine_forward(&x, &p).unwrap();
        let w = p.weights.data();
        let b = p.biases.data();
        for o in 0..3 {
            let want = w[o * 2] * x[0] + w[o * 2 + 1] * x[1] + b[o];
            assert!((out[o] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let p = LayerParams::zeros(3, 4);
        let err = affine_forward(&[1.0, 2.0], &p).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3, 4]"), "{err}");
    }

    #[test]
    fn fused_step_equals_backward_then_sgd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = LayerParams::new(
            random_grid(&mut rng, &[4, 6]),
            random_grid(&mut rng, &[4]),
            false,
        )
        .unwrap();
        let mut x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        x[2] = 0.0;
        let g: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (grads, gin) = affine_backward(&x, &p, &g).unwrap();
        let mut q = p.clone();
        sgd_update(&mut p, &grads, 0.1).unwrap();
        let gin_fused = affine_backward_step(&x, &mut q, &g, 0.1, true).unwrap();
        for (a, b) in p.flat().iter().zip(q.flat()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in gin.iter().zip(&gin_fused) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = LayerParams::new(
            random_grid(&mut rng, &[2, 3]),
            random_grid(&mut rng, &[2]),
            false,
        )
        .unwrap();
        let before = p.clone();
        let zero = p.zero_grads();
        sgd_update(&mut p, &zero, 0.7).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_unit_rate_on_own_params_zeroes_them() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = LayerParams::new(
            random_grid(&mut rng, &[2, 3]),
            random_grid(&mut rng, &[2]),
            false,
        )
        .unwrap();
        let g = LayerGrads {
            weights: p.weights.clone(),
            biases: p.biases.clone(),
        };
        sgd_update(&mut p, &g, 1.0).unwrap();
        assert!(p.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_two_steps_equal_one_summed_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p0 = LayerParams::new(
            random_grid(&mut rng, &[2, 3]),
            random_grid(&mut rng, &[2]),
            false,
        )
        .unwrap();
        let g1 = LayerGrads {
            weights: random_grid(&mut rng, &[2, 3]),
            biases: random_grid(&mut rng, &[2]),
        };
        let g2 = LayerGrads {
            weights: random_grid(&mut rng, &[2, 3]),
            biases: random_grid(&mut rng, &[2]),
        };
        let mut a = p0.clone();
        sgd_update(&mut a, &g1, 0.3).unwrap();
        sgd_update(&mut a, &g2, 0.3).unwrap();
        let mut sum = g1.clone();
        sum.add_assign(&g2);
        let mut b = p0;
        sgd_update(&mut b, &sum, 0.3).unwrap();
        for (x, y) in a.flat().iter().zip(b.flat()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn sgd_rejects_mismatched_gradients() {
        let mut p = LayerParams::zeros(2, 3);
        let g = LayerParams::zeros(3, 2).zero_grads();
        assert!(sgd_update(&mut p, &g, 0.1).is_err());
    }

    #[test]
    fn conv_single_position_is_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_grid(&mut rng, &[10, 10]);
        let f = random_grid(&mut rng, &[1, 10, 10]);
        let out = conv2d_valid_forward(&img, &f, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        let want: f64 = img.data().iter().zip(f.data()).map(|(a, b)| a * b).sum();
        assert!((out.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn conv_all_ones_counts_window() {
        let img = Grid::filled(&[5, 5], 1.0);
        let f = Grid::filled(&[1, 3, 3], 1.0);
        let out = conv2d_valid_forward(&img, &f, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    fn naive_conv(img: &Grid, f: &Grid, stride: usize) -> Grid {
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let (nf, r) = (f.shape()[0], f.shape()[1]);
        let oh = (h - r) / stride + 1;
        let ow = (w - r) / stride + 1;
        let mut out = Grid::zeros(&[nf, oh, ow]);
        for k in 0..nf {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..r {
                        for dx in 0..r {
                            s += img.at2(y * stride + dy, x * stride + dx) * f.at3(k, dy, dx);
                        }
                    }
                    out.data_mut()[(k * oh + y) * ow + x] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_grid(&mut rng, &[6, 6]);
        let f = random_grid(&mut rng, &[2, 3, 3]);
        for stride in [1, 2] {
            let got = conv2d_valid_forward(&img, &f, stride).unwrap();
            let want = naive_conv(&img, &f, stride);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_receptive_field() {
        let img = Grid::zeros(&[4, 4]);
        let f = Grid::zeros(&[1, 5, 5]);
        assert!(conv2d_valid_forward(&img, &f, 1).is_err());
        assert!(conv2d_valid_forward(&Grid::zeros(&[6, 6]), &Grid::zeros(&[1, 3, 3]), 0).is_err());
    }
}
