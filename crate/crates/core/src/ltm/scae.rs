//! Single-layer winner-take-all sparse convolutional autoencoder with tied
//! weights.
//!
//! Encoding is a valid convolution followed by two sparsity rules: at each
//! spatial position only the `spatial_k` strongest filters survive (and only if
//! their response is positive), and during training every filter that stayed
//! silent over a whole batch is forced on at the single position where its
//! response was largest. A unit that survives these rules is "gated"; its value
//! is its linear response. Forced units may carry a non-positive response,
//! which keeps their filter receiving gradient.
//!
//! Decoding is the transposed convolution with the same filters plus a scalar
//! decoder bias. Loss is pixel-wise MSE.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::linalg::{self, MatRef};
use crate::tensor::{conv_output_len, im2col, mse_loss, top_k_indices, Grid, LayerParams};

use super::SparseFeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaeConfig {
    pub num_filters: usize,
    pub receptive_field: usize,
    pub stride: usize,
    pub spatial_k: usize,
    pub pool_size: usize,
}

impl Default for ScaeConfig {
    fn default() -> Self {
        ScaeConfig {
            num_filters: 121,
            receptive_field: 10,
            stride: 1,
            spatial_k: 1,
            pool_size: 4,
        }
    }
}

impl ScaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_filters == 0
            || self.receptive_field == 0
            || self.stride == 0
            || self.pool_size == 0
        {
            return Err(Error::InvalidArgument(format!(
                "SCAE sizes must be positive: {self:?}"
            )));
        }
        if self.spatial_k == 0 || self.spatial_k > self.num_filters {
            return Err(Error::InvalidArgument(format!(
                "spatial_k {} must lie in 1..={}",
                self.spatial_k, self.num_filters
            )));
        }
        Ok(())
    }

    /// Spatial side of the encoding for a square input.
    pub fn encoding_side(&self, image_side: usize) -> usize {
        conv_output_len(image_side, self.receptive_field, self.stride)
    }

    /// Side of the pooled grid (partial windows at the border are kept).
    pub fn pooled_side(&self, image_side: usize) -> usize {
        self.encoding_side(image_side).div_ceil(self.pool_size)
    }
}

/// Responses and patches of one image, reused across encode/decode/backward.
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    /// `[positions, R * R]` receptive-field patches.
    pub cols: Vec<f64>,
    /// `[F, positions]` pre-nonlinearity responses (bias included).
    pub responses: Vec<f64>,
    pub out_h: usize,
    pub out_w: usize,
}

impl EncodeTrace {
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Per-sample gate set: `gates[f * positions + p]`.
pub type Gates = Vec<bool>;

/// Result of the lifetime sparsity rule on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LifetimeMasks {
    pub gates: Vec<Gates>,
    /// `(filter, sample, position)` of each forced activation.
    pub forced: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scae {
    config: ScaeConfig,
    /// Encoder bank `[F, R * R]`, biases `[F]`; `tied` is always set.
    params: LayerParams,
    decoder_bias: f64,
    frozen: bool,
}

impl Scae {
    pub fn new(config: ScaeConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let rr = config.receptive_field * config.receptive_field;
        let a = (6.0 / (rr + config.num_filters) as f64).sqrt();
        let dist = Uniform::new(-a, a).expect("valid init range");
        let weights = Grid::from_fn(&[config.num_filters, rr], |_| dist.sample(rng));
        Ok(Scae {
            params: LayerParams::new(weights, Grid::zeros(&[config.num_filters]), true)?,
            config,
            decoder_bias: 0.0,
            frozen: false,
        })
    }

    pub fn config(&self) -> &ScaeConfig {
        &self.config
    }

    pub fn params(&self) -> &LayerParams {
        &self.params
    }

    pub fn decoder_bias(&self) -> f64 {
        self.decoder_bias
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint() ^ self.decoder_bias.to_bits().rotate_left(7)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params() + 1
    }

    /// Weights, encoder biases, decoder bias.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.params.flat();
        v.push(self.decoder_bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let n = self.params.num_params();
        self.params.set_flat(&flat[..n]);
        self.decoder_bias = flat[n];
    }

    pub fn trace(&self, image: &Grid) -> Result<EncodeTrace> {
        let r = self.config.receptive_field;
        let (cols, out_h, out_w) = im2col(image, r, self.config.stride)?;
        let positions = out_h * out_w;
        let f = self.config.num_filters;
        let mut responses = vec![0.0; f * positions];
        linalg::gemm(
            MatRef::row_major(self.params.weights.data(), f, r * r),
            MatRef::transposed(&cols, positions, r * r),
            0.0,
            &mut responses,
        );
        for (k, b) in self.params.biases.data().iter().enumerate() {
            responses[k * positions..(k + 1) * positions]
                .iter_mut()
                .for_each(|v| *v += b);
        }
        Ok(EncodeTrace {
            cols,
            responses,
            out_h,
            out_w,
        })
    }

    /// Per-position top-`spatial_k` competition across filters, restricted to
    /// positive responses. Ties go to the lowest filter index.
    pub fn spatial_gates(&self, trace: &EncodeTrace) -> Gates {
        let f = self.config.num_filters;
        let p = trace.positions();
        let mut gates = vec![false; f * p];
        let mut column = vec![0.0; f];
        for pos in 0..p {
            for (k, c) in column.iter_mut().enumerate() {
                *c = trace.responses[k * p + pos];
            }
            if self.config.spatial_k >= f {
                for k in 0..f {
                    gates[k * p + pos] = column[k] > 0.0;
                }
                continue;
            }
            for k in top_k_indices(&column, self.config.spatial_k) {
                gates[k * p + pos] = column[k] > 0.0;
            }
        }
        gates
    }

    fn to_feature_map(&self, trace: &EncodeTrace, gates: &Gates) -> SparseFeatureMap {
        let data = trace
            .responses
            .iter()
            .zip(gates)
            .map(|(&r, &g)| if g { r } else { 0.0 })
            .collect();
        SparseFeatureMap {
            values: Grid::new(
                vec![self.config.num_filters, trace.out_h, trace.out_w],
                data,
            )
            .expect("encoding shape"),
            spatial_k: self.config.spatial_k,
        }
    }

    /// Inference-mode encoding (spatial rule only).
    pub fn encode(&self, image: &Grid) -> Result<SparseFeatureMap> {
        let trace = self.trace(image)?;
        let gates = self.spatial_gates(&trace);
        Ok(self.to_feature_map(&trace, &gates))
    }

    /// Applies the lifetime rule on top of the spatial gates of a batch.
    pub fn lifetime_sparsity_mask(
        &self,
        traces: &[EncodeTrace],
        spatial: Vec<Gates>,
    ) -> LifetimeMasks {
        let f = self.config.num_filters;
        let mut gates = spatial;
        let mut forced = Vec::new();
        for k in 0..f {
            let active = traces.iter().zip(&gates).any(|(t, g)| {
                let p = t.positions();
                g[k * p..(k + 1) * p].iter().any(|&b| b)
            });
            if active {
                continue;
            }
            let mut best: Option<(usize, usize, f64)> = None;
            for (s, t) in traces.iter().enumerate() {
                let p = t.positions();
                for (pos, &r) in t.responses[k * p..(k + 1) * p].iter().enumerate() {
                    if best.is_none_or(|(_, _, b)| r > b) {
                        best = Some((s, pos, r));
                    }
                }
            }
            if let Some((s, pos, _)) = best {
                let p = traces[s].positions();
                gates[s][k * p + pos] = true;
                forced.push((k, s, pos));
            }
        }
        LifetimeMasks { gates, forced }
    }

    /// Gates for a training batch: spatial rule plus lifetime rule.
    pub fn training_gates(&self, traces: &[EncodeTrace]) -> LifetimeMasks {
        let spatial = traces.iter().map(|t| self.spatial_gates(t)).collect();
        self.lifetime_sparsity_mask(traces, spatial)
    }

    /// Transposed-convolution reconstruction from gated units.
    pub fn decode(&self, trace: &EncodeTrace, gates: &Gates, image_shape: (usize, usize)) -> Grid {
        let (h, w) = image_shape;
        let r = self.config.receptive_field;
        let s = self.config.stride;
        let p = trace.positions();
        let weights = self.params.weights.data();
        let mut out = vec![self.decoder_bias; h * w];
        for k in 0..self.config.num_filters {
            let wk = &weights[k * r * r..(k + 1) * r * r];
            for pos in 0..p {
                if !gates[k * p + pos] {
                    continue;
                }
                let a = trace.responses[k * p + pos];
                let (oy, ox) = (pos / trace.out_w, pos % trace.out_w);
                for dy in 0..r {
                    let row = (oy * s + dy) * w + ox * s;
                    linalg::axpy(a, &wk[dy * r..(dy + 1) * r], &mut out[row..row + r]);
                }
            }
        }
        Grid::new(vec![h, w], out).expect("image shape")
    }

    /// Inference-mode reconstruction (spatial rule only).
    pub fn reconstruct(&self, image: &Grid) -> Result<Grid> {
        let trace = self.trace(image)?;
        let gates = self.spatial_gates(&trace);
        Ok(self.decode(&trace, &gates, (image.shape()[0], image.shape()[1])))
    }

    /// Mean reconstruction loss over a batch with fixed gates, and the
    /// gradient with respect to [`Scae::flat`]. The loss is smooth in the
    /// parameters once the gates are held fixed.
    pub fn loss_and_grad(&self, batch: &[Grid], gates: &[Gates]) -> Result<(f64, Vec<f64>)> {
        if batch.len() != gates.len() || batch.is_empty() {
            return Err(Error::InvalidArgument(
                "batch and gate counts differ".into(),
            ));
        }
        let r = self.config.receptive_field;
        let rr = r * r;
        let s = self.config.stride;
        let f = self.config.num_filters;
        let mut g_w = vec![0.0; f * rr];
        let mut g_b = vec![0.0; f];
        let mut g_c = 0.0;
        let mut total = 0.0;
        let inv_batch = 1.0 / batch.len() as f64;
        let weights = self.params.weights.data();
        for (image, gate) in batch.iter().zip(gates) {
            let (h, w) = (image.shape()[0], image.shape()[1]);
            let trace = self.trace(image)?;
            let recon = self.decode(&trace, gate, (h, w));
            let (loss, g_recon) = mse_loss(recon.data(), image.data())?;
            total += loss;
            g_c += g_recon.iter().sum::<f64>() * inv_batch;
            let p = trace.positions();
            let mut patch = vec![0.0; rr];
            for pos in 0..p {
                let (oy, ox) = (pos / trace.out_w, pos % trace.out_w);
                let mut loaded = false;
                for k in 0..f {
                    if !gate[k * p + pos] {
                        continue;
                    }
                    if !loaded {
                        for dy in 0..r {
                            let row = (oy * s + dy) * w + ox * s;
                            patch[dy * r..(dy + 1) * r].copy_from_slice(&g_recon[row..row + r]);
                        }
                        loaded = true;
                    }
                    let a = trace.responses[k * p + pos];
                    let wk = &weights[k * rr..(k + 1) * rr];
                    let g_a = linalg::dot(wk, &patch) * inv_batch;
                    let gk = &mut g_w[k * rr..(k + 1) * rr];
                    // decoder path
                    linalg::axpy(a * inv_batch, &patch, gk);
                    // encoder path
                    linalg::axpy(g_a, &trace.cols[pos * rr..(pos + 1) * rr], gk);
                    g_b[k] += g_a;
                }
            }
        }
        let mut grad = g_w;
        grad.extend(g_b);
        grad.push(g_c);
        Ok((total * inv_batch, grad))
    }

    /// One SGD step on a batch with both sparsity rules. Returns the batch
    /// loss and the masks that were used.
    pub fn train_step(
        &mut self,
        batch: &[Grid],
        learning_rate: f64,
    ) -> Result<(f64, LifetimeMasks)> {
        if self.frozen {
            return Err(Error::Frozen("SCAE"));
        }
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bad learning rate {learning_rate}"
            )));
        }
        let traces = batch
            .iter()
            .map(|im| self.trace(im))
            .collect::<Result<Vec<_>>>()?;
        let masks = self.training_gates(&traces);
        let (loss, grad) = self.loss_and_grad(batch, &masks.gates)?;
        if learning_rate > 0.0 {
            let mut theta = self.flat();
            linalg::axpy(-learning_rate, &grad, &mut theta);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("SCAE update"));
            }
            self.set_flat(&theta);
        }
        Ok((loss, masks))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("weights", self.params.weights.clone());
        c.insert("biases", self.params.biases.clone());
        c.insert_scalar("decoder_bias", self.decoder_bias);
        c.insert_scalar("frozen", if self.frozen { 1.0 } else { 0.0 });
        c.insert_scalar("num_filters", self.config.num_filters as f64);
        c.insert_scalar("receptive_field", self.config.receptive_field as f64);
        c.insert_scalar("stride", self.config.stride as f64);
        c.insert_scalar("spatial_k", self.config.spatial_k as f64);
        c.insert_scalar("pool_size", self.config.pool_size as f64);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = ScaeConfig {
            num_filters: c.scalar_usize("num_filters")?,
            receptive_field: c.scalar_usize("receptive_field")?,
            stride: c.scalar_usize("stride")?,
            spatial_k: c.scalar_usize("spatial_k")?,
            pool_size: c.scalar_usize("pool_size")?,
        };
        config.validate()?;
        let rr = config.receptive_field * config.receptive_field;
        let weights = c.get("weights")?.clone();
        weights.ensure_shape("SCAE checkpoint", &[config.num_filters, rr])?;
        let params = LayerParams::new(weights, c.get("biases")?.clone(), true)?;
        Ok(Scae {
            config,
            params,
            decoder_bias: c.scalar("decoder_bias")?,
            frozen: c.scalar("frozen")? != 0.0,
        })
    }
}
