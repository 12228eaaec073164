//! Dense feature maps and the linear ops the micro pyramid is built from.
//!
//! Everything here is bias-free and activation-free, so every op is exactly
//! linear in both its input and its weights. Loop orders are fixed, which
//! makes results bitwise reproducible for identical inputs.

use rand::Rng;

/// A `channels x height x width` tensor, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Uniform entries in `[-amplitude, amplitude]`.
    pub fn random<R: Rng>(
        rng: &mut R,
        channels: usize,
        height: usize,
        width: usize,
        amplitude: f64,
    ) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.gen_range(-amplitude..=amplitude))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// `self += factor * other`. A factor of exactly zero is a no-op, so a
    /// disabled fusion path cannot perturb the result even at the bit level.
    pub fn add_scaled(&mut self, other: &FeatureMap, factor: f64) {
        assert_eq!(self.shape(), other.shape());
        if factor == 0.0 {
            return;
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Elementwise `self - other`, used for quadratic-loss residuals.
    pub fn sub(&self, other: &FeatureMap) -> FeatureMap {
        assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn bitwise_eq(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// 1x1 convolution: per-pixel channel mixing. `w[o * in_ch + i]`.
pub fn conv1x1_forward(x: &FeatureMap, w: &[f64], out_ch: usize) -> FeatureMap {
    let (in_ch, h, width) = x.shape();
    assert_eq!(w.len(), out_ch * in_ch);
    let mut y = FeatureMap::zeros(out_ch, h, width);
    for o in 0..out_ch {
        for i in 0..in_ch {
            let wv = w[o * in_ch + i];
            for r in 0..h {
                for c in 0..width {
                    *y.at_mut(o, r, c) += wv * x.at(i, r, c);
                }
            }
        }
    }
    y
}

/// Gradient of a 1x1 convolution w.r.t. its input.
pub fn conv1x1_backward_input(gy: &FeatureMap, w: &[f64], in_ch: usize) -> FeatureMap {
    let (out_ch, h, width) = gy.shape();
    assert_eq!(w.len(), out_ch * in_ch);
    let mut gx = FeatureMap::zeros(in_ch, h, width);
    for i in 0..in_ch {
        for o in 0..out_ch {
            let wv = w[o * in_ch + i];
            for r in 0..h {
                for c in 0..width {
                    *gx.at_mut(i, r, c) += wv * gy.at(o, r, c);
                }
            }
        }
    }
    gx
}

/// Gradient of a 1x1 convolution w.r.t. its weights.
pub fn conv1x1_backward_weights(gy: &FeatureMap, x: &FeatureMap) -> Vec<f64> {
    let (out_ch, h, width) = gy.shape();
    let (in_ch, xh, xw) = x.shape();
    assert_eq!((h, width), (xh, xw));
    let mut gw = vec![0.0; out_ch * in_ch];
    for o in 0..out_ch {
        for i in 0..in_ch {
            let mut acc = 0.0;
            for r in 0..h {
                for c in 0..width {
                    acc += gy.at(o, r, c) * x.at(i, r, c);
                }
            }
            gw[o * in_ch + i] = acc;
        }
    }
    gw
}

/// 3x3 convolution, stride 1, zero padding 1, no bias.
/// `w[((o * in_ch + i) * 3 + ky) * 3 + kx]`.
pub fn conv3x3_forward(x: &FeatureMap, w: &[f64], out_ch: usize) -> FeatureMap {
    let (in_ch, h, width) = x.shape();
    assert_eq!(w.len(), out_ch * in_ch * 9);
    let mut y = FeatureMap::zeros(out_ch, h, width);
    for o in 0..out_ch {
        for i in 0..in_ch {
            let base = (o * in_ch + i) * 9;
            for r in 0..h {
                for c in 0..width {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        let yy = r as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = c as isize + kx as isize - 1;
                            if xx < 0 || xx >= width as isize {
                                continue;
                            }
                            acc += w[base + ky * 3 + kx] * x.at(i, yy as usize, xx as usize);
                        }
                    }
                    *y.at_mut(o, r, c) += acc;
                }
            }
        }
    }
    y
}

/// Gradient of the 3x3 convolution w.r.t. its input (correlation with the
/// kernel flipped in both spatial axes).
pub fn conv3x3_backward_input(gy: &FeatureMap, w: &[f64], in_ch: usize) -> FeatureMap {
    let (out_ch, h, width) = gy.shape();
    assert_eq!(w.len(), out_ch * in_ch * 9);
    let mut gx = FeatureMap::zeros(in_ch, h, width);
    for i in 0..in_ch {
        for o in 0..out_ch {
            let base = (o * in_ch + i) * 9;
            for a in 0..h {
                for b in 0..width {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        let r = a as isize + 1 - ky as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let c = b as isize + 1 - kx as isize;
                            if c < 0 || c >= width as isize {
                                continue;
                            }
                            acc += w[base + ky * 3 + kx] * gy.at(o, r as usize, c as usize);
                        }
                    }
                    *gx.at_mut(i, a, b) += acc;
                }
            }
        }
    }
    gx
}

/// Gradient of the 3x3 convolution w.r.t. its weights.
pub fn conv3x3_backward_weights(gy: &FeatureMap, x: &FeatureMap) -> Vec<f64> {
    let (out_ch, h, width) = gy.shape();
    let (in_ch, xh, xw) = x.shape();
    assert_eq!((h, width), (xh, xw));
    let mut gw = vec![0.0; out_ch * in_ch * 9];
    for o in 0..out_ch {
        for i in 0..in_ch {
            let base = (o * in_ch + i) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    for r in 0..h {
                        let yy = r as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for c in 0..width {
                            let xx = c as isize + kx as isize - 1;
                            if xx < 0 || xx >= width as isize {
                                continue;
                            }
                            acc += gy.at(o, r, c) * x.at(i, yy as usize, xx as usize);
                        }
                    }
                    gw[base + ky * 3 + kx] = acc;
                }
            }
        }
    }
    gw
}

/// 2x nearest-neighbor upsampling.
pub fn upsample2x(x: &FeatureMap) -> FeatureMap {
    let (ch, h, w) = x.shape();
    let mut y = FeatureMap::zeros(ch, h * 2, w * 2);
    for c in 0..ch {
        for r in 0..h * 2 {
            for col in 0..w * 2 {
                *y.at_mut(c, r, col) = x.at(c, r / 2, col / 2);
            }
        }
    }
    y
}

/// Adjoint of [`upsample2x`]: each coarse cell collects the gradient of the
/// four fine positions that copied it.
pub fn upsample2x_backward(gy: &FeatureMap) -> FeatureMap {
    let (ch, h2, w2) = gy.shape();
    assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = FeatureMap::zeros(ch, h, w);
    for c in 0..ch {
        for r in 0..h {
            for col in 0..w {
                *gx.at_mut(c, r, col) = gy.at(c, 2 * r, 2 * col)
                    + gy.at(c, 2 * r, 2 * col + 1)
                    + gy.at(c, 2 * r + 1, 2 * col)
                    + gy.at(c, 2 * r + 1, 2 * col + 1);
            }
        }
    }
    gx
}

/// Stride-2 top-left subsampling; output dims are the ceiling halves.
pub fn subsample2(x: &FeatureMap) -> FeatureMap {
    let (ch, h, w) = x.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = FeatureMap::zeros(ch, oh, ow);
    for c in 0..ch {
        for r in 0..oh {
            for col in 0..ow {
                *y.at_mut(c, r, col) = x.at(c, 2 * r, 2 * col);
            }
        }
    }
    y
}

/// Adjoint of [`subsample2`]: scatter back to the sampled positions.
pub fn subsample2_backward(gy: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    let (ch, oh, ow) = gy.shape();
    assert_eq!((oh, ow), (height.div_ceil(2), width.div_ceil(2)));
    let mut gx = FeatureMap::zeros(ch, height, width);
    for c in 0..ch {
        for r in 0..oh {
            for col in 0..ow {
                *gx.at_mut(c, 2 * r, 2 * col) = gy.at(c, r, col);
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv1x1_mixes_channels_pointwise() {
        let x = FeatureMap::from_data(2, 1, 2, vec![1.0, 2.0, 10.0, 20.0]);
        // y0 = 1*c0 + 0.5*c1, y1 = -1*c0 + 0*c1
        let y = conv1x1_forward(&x, &[1.0, 0.5, -1.0, 0.0], 2);
        assert_eq!(y.data(), &[6.0, 12.0, -1.0, -2.0]);
    }

    #[test]
    fn conv3x3_identity_kernel_passes_through() {
        let x = FeatureMap::from_data(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut w = vec![0.0; 9];
        w[4] = 1.0; // center tap
        let y = conv3x3_forward(&x, &w, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv3x3_zero_padding_at_borders() {
        // All-ones kernel sums the 3x3 neighborhood with zeros outside.
        let x = FeatureMap::from_data(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = conv3x3_forward(&x, &[1.0; 9], 1);
        assert_eq!(y.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn upsample_then_adjoint_sums_blocks() {
        let x = FeatureMap::from_data(1, 1, 2, vec![3.0, 5.0]);
        let up = upsample2x(&x);
        assert_eq!(up.data(), &[3.0, 3.0, 5.0, 5.0, 3.0, 3.0, 5.0, 5.0]);
        let back = upsample2x_backward(&up);
        assert_eq!(back.data(), &[12.0, 20.0]);
    }

    #[test]
    fn subsample_takes_top_left_and_ceils() {
        let x = FeatureMap::from_data(1, 3, 3, (1..=9).map(f64::from).collect());
        let y = subsample2(&x);
        assert_eq!(y.shape(), (1, 2, 2));
        assert_eq!(y.data(), &[1.0, 3.0, 7.0, 9.0]);
        let back = subsample2_backward(&y, 3, 3);
        assert_eq!(back.data(), &[1.0, 0.0, 3.0, 0.0, 0.0, 0.0, 7.0, 0.0, 9.0]);
    }

    /// The backward ops must be true adjoints: <A x, y> == <x, A^T y>.
    #[test]
    fn backward_ops_are_adjoint() {
        let mut r = rng();
        let x = FeatureMap::random(&mut r, 3, 4, 4, 1.0);
        let gy = FeatureMap::random(&mut r, 2, 4, 4, 1.0);
        let w: Vec<f64> = (0..2 * 3).map(|_| r.gen_range(-1.0..=1.0)).collect();
        let dot = |a: &FeatureMap, b: &FeatureMap| -> f64 {
            a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum()
        };

        let ax = conv1x1_forward(&x, &w, 2);
        let aty = conv1x1_backward_input(&gy, &w, 3);
        assert!((dot(&ax, &gy) - dot(&x, &aty)).abs() < 1e-12);

        let w3: Vec<f64> = (0..2 * 3 * 9).map(|_| r.gen_range(-1.0..=1.0)).collect();
        let ax = conv3x3_forward(&x, &w3, 2);
        let aty = conv3x3_backward_input(&gy, &w3, 3);
        assert!((dot(&ax, &gy) - dot(&x, &aty)).abs() < 1e-12);

        let up = upsample2x(&x);
        let gy_up = FeatureMap::random(&mut r, 3, 8, 8, 1.0);
        let down = upsample2x_backward(&gy_up);
        assert!((dot(&up, &gy_up) - dot(&x, &down)).abs() < 1e-12);

        let sub = subsample2(&x);
        let gy_sub = FeatureMap::random(&mut r, 3, 2, 2, 1.0);
        let scat = subsample2_backward(&gy_sub, 4, 4);
        assert!((dot(&sub, &gy_sub) - dot(&x, &scat)).abs() < 1e-12);
    }

    #[test]
    fn weight_gradients_match_directional_derivative() {
        let mut r = rng();
        let x = FeatureMap::random(&mut r, 2, 4, 4, 1.0);
        let gy = FeatureMap::random(&mut r, 2, 4, 4, 1.0);
        let w: Vec<f64> = (0..2 * 2 * 9).map(|_| r.gen_range(-1.0..=1.0)).collect();
        let gw = conv3x3_backward_weights(&gy, &x);
        // <gw, dw> must equal <gy, conv(x; dw)> for any dw; try a basis-ish dw.
        let mut dw = vec![0.0; w.len()];
        dw[13] = 1.0;
        dw[2] = -0.5;
        let lhs: f64 = gw.iter().zip(&dw).map(|(a, b)| a * b).sum();
        let y_dir = conv3x3_forward(&x, &dw, 2);
        let rhs: f64 = gy.data().iter().zip(y_dir.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn add_scaled_skips_exact_zero_factor() {
        let mut a = FeatureMap::from_data(1, 1, 1, vec![-0.0]);
        let b = FeatureMap::from_data(1, 1, 1, vec![5.0]);
        a.add_scaled(&b, 0.0);
        assert_eq!(a.data()[0].to_bits(), (-0.0f64).to_bits());
        a.add_scaled(&b, 2.0);
        assert_eq!(a.data()[0], 10.0);
    }
}
