//! Raw numeric kernels behind the tape operations.

use crate::tensor::Real;

/// Geometry of a square-kernel 2-D convolution over an `[N, C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvDims {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Option<ConvDims> {
        if input.len() != 4 || weight.len() != 4 || stride == 0 {
            return None;
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, ci, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if ci != c || kh != kw || kh == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return None;
        }
        Some(ConvDims {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: kh,
            stride,
            padding,
            out_height: (h + 2 * padding - kh) / stride + 1,
            out_width: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix: `C_in·K·K`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }
}

/// Unfolds the input into a `[C·K·K, N·OH·OW]` patch matrix.
///
/// Row order is channel-major, then kernel row, then kernel column, the same
/// order used to flatten a filter into a row of the weight matrix. Column
/// `n·OH·OW + p` holds output pixel `p` of sample `n`.
pub fn im2col<T: Real>(x: &[T], d: &ConvDims) -> Vec<T> {
    let cols_n = d.batch * d.out_pixels();
    let mut cols = vec![T::zero(); d.patch_len() * cols_n];
    let (h, w, k) = (d.height as isize, d.width as isize, d.kernel);
    for c in 0..d.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..d.batch {
                    let src = &x[(n * d.in_channels + c) * d.height * d.width..];
                    let dst = &mut dst_row[n * d.out_pixels()..(n + 1) * d.out_pixels()];
                    for oh in 0..d.out_height {
                        let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        let src_row = &src[ih as usize * d.width..];
                        for ow in 0..d.out_width {
                            let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                            if iw >= 0 && iw < w {
                                dst[oh * d.out_width + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im<T: Real>(cols: &[T], d: &ConvDims) -> Vec<T> {
    let cols_n = d.batch * d.out_pixels();
    let mut x = vec![T::zero(); d.batch * d.in_channels * d.height * d.width];
    let (h, w, k) = (d.height as isize, d.width as isize, d.kernel);
    for c in 0..d.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for n in 0..d.batch {
                    let dst = &mut x[(n * d.in_channels + c) * d.height * d.width..];
                    let src = &src_row[n * d.out_pixels()..(n + 1) * d.out_pixels()];
                    for oh in 0..d.out_height {
                        let ih = (oh * d.stride + ki) as isize - d.padding as isize;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        let base = ih as usize * d.width;
                        for ow in 0..d.out_width {
                            let iw = (ow * d.stride + kj) as isize - d.padding as isize;
                            if iw >= 0 && iw < w {
                                dst[base + iw as usize] += src[oh * d.out_width + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N, C, S]` → `[C, N·S]`.
pub fn batch_to_channel_major<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * s..(b * c + ch + 1) * s];
            out[ch * n * s + b * s..ch * n * s + (b + 1) * s].copy_from_slice(src);
        }
    }
    out
}

/// `[C, N·S]` → `[N, C, S]`.
pub fn channel_major_to_batch<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * s..(b * c + ch + 1) * s]
                .copy_from_slice(&x[ch * n * s + b * s..ch * n * s + (b + 1) * s]);
        }
    }
    out
}

/// Per-channel mean and biased variance over an `[N, C, S]` layout, in f64.
pub fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * s) as f64;
    let mut mean = vec![0.0f64; c];
    for b in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += x[(b * c + ch) * s..(b * c + ch + 1) * s]
                .iter()
                .map(|v| v.f64())
                .sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0f64; c];
    for b in 0..n {
        for (ch, v) in var.iter_mut().enumerate() {
            let m = mean[ch];
            *v += x[(b * c + ch) * s..(b * c + ch + 1) * s]
                .iter()
                .map(|x| {
                    let d = x.f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_arithmetic() {
        let d = ConvDims::new(&[2, 3, 28, 28], &[8, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(d.output_shape(), [2, 8, 14, 14]);
        assert_eq!(d.patch_len(), 27);
        assert!(ConvDims::new(&[1, 3, 2, 2], &[8, 3, 5, 5], 1, 0).is_none());
        assert!(ConvDims::new(&[1, 2, 5, 5], &[8, 3, 3, 3], 1, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let d = ConvDims::new(&[2, 2, 5, 4], &[1, 2, 3, 3], 2, 1).unwrap();
        let nx = 2 * 2 * 5 * 4;
        let x: Vec<f64> = (0..nx).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let ny = d.patch_len() * d.batch * d.out_pixels();
        let y: Vec<f64> = (0..ny).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
        let lhs: f64 = im2col(&x, &d).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &d)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn layout_permutations_invert() {
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let cm = batch_to_channel_major(&x, 2, 3, 4);
        assert_eq!(channel_major_to_batch(&cm, 2, 3, 4), x);
        assert_eq!(&cm[0..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&cm[4..8], &[12.0, 13.0, 14.0, 15.0]);
    }
}
