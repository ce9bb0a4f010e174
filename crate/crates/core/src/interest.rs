//! Retina-like interest filter.
//!
//! A Difference-of-Gaussians (centre minus surround) response highlights
//! strokes and edges. Its magnitude is smoothed, resampled onto the encoder's
//! spatial grid and thresholded, giving a `[0, 1]` mask that suppresses coding
//! of empty background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltm::SparseFeatureMap;
use crate::tensor::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoGParams {
    pub kernel_size: usize,
    pub sigma: f64,
    pub sigma_ratio: f64,
    pub smoothing_sigma: f64,
    pub keep_fraction: f64,
}

impl Default for DoGParams {
    fn default() -> Self {
        DoGParams {
            kernel_size: 7,
            sigma: 1.0,
            sigma_ratio: 1.6,
            smoothing_sigma: 2.0,
            keep_fraction: 0.5,
        }
    }
}

impl DoGParams {
    // Negated comparisons so NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("DoG params: {m}")));
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return bad("kernel_size must be odd and positive");
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive");
        }
        if !(self.sigma_ratio > 1.0) {
            return bad("sigma_ratio must exceed 1");
        }
        if !(self.smoothing_sigma >= 0.0) {
            return bad("smoothing_sigma must be non-negative");
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad("keep_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

/// L1-normalized isotropic Gaussian on a `size x size` grid.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Grid {
    let c = (size as f64 - 1.0) / 2.0;
    let mut g = Grid::from_fn(&[size, size], |i| {
        let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
        (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
    });
    let s = g.sum();
    g.data_mut().iter_mut().for_each(|v| *v /= s);
    g
}

/// Centre Gaussian minus surround Gaussian, each L1-normalized first, so the
/// kernel sums to zero.
pub fn build_dog_kernel(params: &DoGParams) -> Result<Grid> {
    params.validate()?;
    let centre = gaussian_kernel(params.kernel_size, params.sigma);
    let surround = gaussian_kernel(params.kernel_size, params.sigma * params.sigma_ratio);
    let data = centre
        .data()
        .iter()
        .zip(surround.data())
        .map(|(a, b)| a - b)
        .collect();
    Grid::new(vec![params.kernel_size; 2], data)
}

/// Zero-padded "same" correlation of a 2-D image with an odd square kernel.
pub fn convolve_same(image: &Grid, kernel: &Grid) -> Grid {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let k = kernel.shape()[0];
    let r = (k / 2) as isize;
    let mut out = Grid::zeros(&[h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    s += image.at2(yy as usize, xx as usize)
                        * kernel.at2((dy + r) as usize, (dx + r) as usize);
                }
            }
            out.data_mut()[y as usize * w + x as usize] = s;
        }
    }
    out
}

/// Separable Gaussian blur with edge renormalization; `sigma == 0` is identity.
pub fn gaussian_smooth(image: &Grid, sigma: f64) -> Grid {
    if sigma == 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let pass = |src: &Grid, horizontal: bool| {
        let mut out = Grid::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut norm) = (0.0, 0.0);
                for (t, d) in taps.iter().zip(-radius..=radius) {
                    let (yy, xx) = if horizontal {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        s += t * src.at2(yy as usize, xx as usize);
                        norm += t;
                    }
                }
                out.data_mut()[y * w + x] = s / norm;
            }
        }
        out
    };
    pass(&pass(image, true), false)
}

fn bilinear(src: &Grid, y: f64, x: f64) -> f64 {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = src.at2(y0, x0) * (1.0 - fx) + src.at2(y0, x1) * fx;
    let bottom = src.at2(y1, x0) * (1.0 - fx) + src.at2(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Centre-aligned resampling: output cell `(i, j)` reads the source at
/// `(i + (H - H') / 2, j + (W - W') / 2)`. For a valid convolution this is the
/// centre of the receptive field feeding that output position.
pub fn resample_centred(src: &Grid, target: (usize, usize)) -> Grid {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let oy = (h as f64 - target.0 as f64) / 2.0;
    let ox = (w as f64 - target.1 as f64) / 2.0;
    Grid::from_fn(&[target.0, target.1], |i| {
        bilinear(src, (i / target.1) as f64 + oy, (i % target.1) as f64 + ox)
    })
}

/// Interest mask over a `target_shape` grid, values in `[0, 1]`.
pub fn interest_mask(
    image: &Grid,
    params: &DoGParams,
    target_shape: (usize, usize),
) -> Result<Grid> {
    if image.ndim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "interest_mask expects a 2-D image, got {:?}",
            image.shape()
        )));
    }
    if target_shape.0 == 0 || target_shape.1 == 0 {
        return Err(Error::InvalidArgument("empty mask target shape".into()));
    }
    let kernel = build_dog_kernel(params)?;
    let response = convolve_same(image, &kernel).map(f64::abs);
    let smoothed = gaussian_smooth(&response, params.smoothing_sigma);
    let mut mask = resample_centred(&smoothed, target_shape);
    let peak = mask.max();
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(peak > 1e-12) {
        return Ok(Grid::zeros(&[target_shape.0, target_shape.1]));
    }
    mask.data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v / peak).clamp(0.0, 1.0));
    let cut = lower_quantile(mask.data(), 1.0 - params.keep_fraction);
    mask.data_mut().iter_mut().for_each(|v| {
        if *v < cut {
            *v = 0.0
        }
    });
    Ok(mask)
}

/// Value at rank `floor(q * (n - 1))` of the sorted data.
fn lower_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((q.clamp(0.0, 1.0)) * (sorted.len() - 1) as f64).floor() as usize;
    sorted[rank]
}

/// Multiplies every channel at spatial position `(i, j)` by `mask[i, j]`.
pub fn apply_mask(encoding: &SparseFeatureMap, mask: &Grid) -> Result<SparseFeatureMap> {
    let shape = encoding.values.shape();
    if mask.shape() != &shape[1..] {
        return Err(Error::shape("apply_mask", &shape[1..], mask.shape()));
    }
    let plane = mask.len();
    let mut values = encoding.values.clone();
    for (i, v) in values.data_mut().iter_mut().enumerate() {
        *v *= mask.data()[i % plane];
    }
    Ok(SparseFeatureMap {
        values,
        spatial_k: encoding.spatial_k,
    })
}
