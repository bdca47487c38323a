//! Forward and backward kernels on channel-major batches.

use crate::error::{Error, Result};
use crate::planar::Planar;
use crate::tensor::{gemm, MatRef, Real};

/// Activations laid out `[channel][batch][row][col]`, so each channel is one contiguous run
/// and a convolution over the whole batch is a single matrix product.
#[derive(Clone, Debug, PartialEq)]
pub struct Act<T> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self { c, b, h, w, data: vec![T::zero(); c * b * h * w] }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Values per channel across the batch.
    pub fn per_channel(&self) -> usize {
        self.b * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, b: usize, y: usize, x: usize) -> usize {
        ((c * self.b + b) * self.h + y) * self.w + x
    }

    pub fn at(&self, c: usize, b: usize, y: usize, x: usize) -> T {
        self.data[self.idx(c, b, y, x)]
    }

    /// Stacks equally sized images into one batch.
    pub fn from_images(images: &[&Planar<f32>]) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyDataset)?;
        let (c, h, w) = (first.channels, first.height, first.width);
        if let Some(i) = images.iter().position(|im| (im.channels, im.height, im.width) != (c, h, w)) {
            return Err(Error::Shape(format!("image {i} differs in shape from image 0")));
        }
        let b = images.len();
        let mut act = Self::zeros(c, b, h, w);
        let plane = h * w;
        for (bi, im) in images.iter().enumerate() {
            for ci in 0..c {
                let dst = (ci * b + bi) * plane;
                for (d, s) in act.data[dst..dst + plane].iter_mut().zip(&im.data[ci * plane..(ci + 1) * plane]) {
                    *d = T::from(*s).expect("finite pixel");
                }
            }
        }
        Ok(act)
    }

    /// One batch element as a `C x H x W` image.
    pub fn image(&self, b: usize) -> Planar<T> {
        Planar::from_fn(self.c, self.h, self.w, |c, y, x| self.at(c, b, y, x))
    }
}

/// Geometry of one convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }

    /// Output positions `o` with `o * stride + tap - padding` inside `0..input`.
    fn valid_outputs(&self, tap: usize, input: usize, output: usize) -> std::ops::Range<usize> {
        let lo = if tap >= self.padding { 0 } else { (self.padding - tap).div_ceil(self.stride) };
        let limit = input + self.padding; // o * stride + tap < limit
        let hi = if limit > tap { (limit - tap).div_ceil(self.stride).min(output) } else { 0 };
        lo.min(hi)..hi
    }
}

/// `[Cin*k*k, B*Ho*Wo]` patch matrix.
pub fn im2col<T: Real>(input: &Act<T>, win: Window, ho: usize, wo: usize) -> Vec<T> {
    let k = win.kernel;
    let rows = input.c * k * k;
    let cols = input.b * ho * wo;
    let mut out = vec![T::zero(); rows * cols];
    for ci in 0..input.c {
        for ky in 0..k {
            let oy_range = win.valid_outputs(ky, input.h, ho);
            for kx in 0..k {
                let ox_range = win.valid_outputs(kx, input.w, wo);
                let row = (ci * k + ky) * k + kx;
                let row_data = &mut out[row * cols..(row + 1) * cols];
                for b in 0..input.b {
                    for oy in oy_range.clone() {
                        let iy = oy * win.stride + ky - win.padding;
                        let src = input.idx(ci, b, iy, 0);
                        let dst = (b * ho + oy) * wo;
                        for ox in ox_range.clone() {
                            row_data[dst + ox] = input.data[src + ox * win.stride + kx - win.padding];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the input grid.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(dcols: &[T], c: usize, b: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize) -> Act<T> {
    let k = win.kernel;
    let cols = b * ho * wo;
    let mut out = Act::zeros(c, b, h, w);
    for ci in 0..c {
        for ky in 0..k {
            let oy_range = win.valid_outputs(ky, h, ho);
            for kx in 0..k {
                let ox_range = win.valid_outputs(kx, w, wo);
                let row = (ci * k + ky) * k + kx;
                let row_data = &dcols[row * cols..(row + 1) * cols];
                for bi in 0..b {
                    for oy in oy_range.clone() {
                        let iy = oy * win.stride + ky - win.padding;
                        let dst = out.idx(ci, bi, iy, 0);
                        let src = (bi * ho + oy) * wo;
                        for ox in ox_range.clone() {
                            out.data[dst + ox * win.stride + kx - win.padding] += row_data[src + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct ConvOutput<T> {
    pub out: Act<T>,
    pub cols: Vec<T>,
}

/// `weight` is `[Cout, Cin, k, k]`.
pub fn conv_forward<T: Real>(input: &Act<T>, weight: &[T], bias: &[T], cout: usize, win: Window) -> Result<ConvOutput<T>> {
    let kdim = input.c * win.kernel * win.kernel;
    if weight.len() != cout * kdim || bias.len() != cout {
        return Err(Error::Shape(format!(
            "conv weight {} / bias {} do not fit {cout}x{kdim}",
            weight.len(),
            bias.len()
        )));
    }
    let (ho, wo) = match (win.output_len(input.h), win.output_len(input.w)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::InsufficientInput {
                size: input.h.min(input.w),
                message: format!("kernel {} with padding {} does not fit", win.kernel, win.padding),
            })
        }
    };
    let cols = im2col(input, win, ho, wo);
    let n = input.b * ho * wo;
    let mut out = Act::zeros(cout, input.b, ho, wo);
    for (co, chunk) in out.data.chunks_mut(n).enumerate() {
        chunk.fill(bias[co]);
    }
    gemm(T::one(), MatRef::new(weight, cout, kdim), MatRef::new(&cols, kdim, n), T::one(), &mut out.data);
    Ok(ConvOutput { out, cols })
}

pub struct ConvGrads<T> {
    pub d_input: Option<Act<T>>,
    pub d_weight: Option<Vec<T>>,
    pub d_bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    d_out: &Act<T>,
    cols: &[T],
    weight: &[T],
    input_shape: (usize, usize, usize, usize),
    win: Window,
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let (c, b, h, w) = input_shape;
    let cout = d_out.c;
    let kdim = c * win.kernel * win.kernel;
    let n = d_out.per_channel();
    let (d_weight, d_bias) = if need_params {
        let mut dw = vec![T::zero(); cout * kdim];
        gemm(T::one(), MatRef::new(&d_out.data, cout, n), MatRef::new(cols, kdim, n).t(), T::zero(), &mut dw);
        let db = d_out.data.chunks(n).map(|ch| ch.iter().copied().sum()).collect();
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    let d_input = need_input.then(|| {
        let mut dcols = vec![T::zero(); kdim * n];
        gemm(T::one(), MatRef::new(weight, cout, kdim).t(), MatRef::new(&d_out.data, cout, n), T::zero(), &mut dcols);
        col2im(&dcols, c, b, h, w, win, d_out.h, d_out.w)
    });
    ConvGrads { d_input, d_weight, d_bias }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics kept for the backward pass and the running-average update.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// True when batch statistics were used; false when running statistics normalized.
    pub batch_stats: bool,
}

pub fn bn_forward_train<T: Real>(x: &mut Act<T>, gamma: &[T], beta: &[T]) -> BnCache<T> {
    let n = x.per_channel();
    let nf = T::from_usize_lossy(n);
    let eps = T::lit(BN_EPS);
    let mut cache = BnCache {
        xhat: vec![T::zero(); x.data.len()],
        inv_std: Vec::with_capacity(x.c),
        mean: Vec::with_capacity(x.c),
        var: Vec::with_capacity(x.c),
        batch_stats: true,
    };
    for (c, (chunk, xh)) in x.data.chunks_mut(n).zip(cache.xhat.chunks_mut(n)).enumerate() {
        let mean = chunk.iter().copied().sum::<T>() / nf;
        let var = chunk.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
        let inv = T::one() / (var + eps).sqrt();
        for (v, h) in chunk.iter_mut().zip(xh.iter_mut()) {
            *h = (*v - mean) * inv;
            *v = gamma[c] * *h + beta[c];
        }
        cache.inv_std.push(inv);
        cache.mean.push(mean);
        cache.var.push(var);
    }
    cache
}

pub fn bn_forward_eval<T: Real>(x: &mut Act<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T]) -> BnCache<T> {
    let n = x.per_channel();
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.data.len()];
    for (c, (chunk, xh)) in x.data.chunks_mut(n).zip(xhat.chunks_mut(n)).enumerate() {
        for (v, h) in chunk.iter_mut().zip(xh.iter_mut()) {
            *h = (*v - mean[c]) * inv_std[c];
            *v = gamma[c] * *h + beta[c];
        }
    }
    BnCache { xhat, inv_std, mean: mean.to_vec(), var: var.to_vec(), batch_stats: false }
}

/// Returns `(d_gamma, d_beta)`; `d_y` is overwritten with `d_x`.
pub fn bn_backward<T: Real>(d_y: &mut Act<T>, cache: &BnCache<T>, gamma: &[T]) -> (Vec<T>, Vec<T>) {
    let n = d_y.per_channel();
    let nf = T::from_usize_lossy(n);
    let mut d_gamma = Vec::with_capacity(d_y.c);
    let mut d_beta = Vec::with_capacity(d_y.c);
    for (c, chunk) in d_y.data.chunks_mut(n).enumerate() {
        if cache.batch_stats {
            let xh = &cache.xhat[c * n..(c + 1) * n];
            let sum_dy: T = chunk.iter().copied().sum();
            let sum_dy_xh: T = chunk.iter().zip(xh).map(|(d, x)| *d * *x).sum();
            let k = gamma[c] * cache.inv_std[c] / nf;
            for (d, x) in chunk.iter_mut().zip(xh) {
                *d = k * (nf * *d - sum_dy - *x * sum_dy_xh);
            }
            d_gamma.push(sum_dy_xh);
            d_beta.push(sum_dy);
        } else {
            // Running statistics are constants, so the layer is affine in x.
            let xh = &cache.xhat[c * n..(c + 1) * n];
            d_gamma.push(chunk.iter().zip(xh).map(|(d, x)| *d * *x).sum());
            d_beta.push(chunk.iter().copied().sum());
            let scale = gamma[c] * cache.inv_std[c];
            chunk.iter_mut().for_each(|d| *d *= scale);
        }
    }
    (d_gamma, d_beta)
}

pub fn relu_inplace<T: Real>(x: &mut Act<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradients where the rectified output was not positive.
pub fn relu_backward<T: Real>(d: &mut Act<T>, out: &Act<T>) {
    for (g, o) in d.data.iter_mut().zip(&out.data) {
        if *o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub struct PoolOutput<T> {
    pub out: Act<T>,
    /// Flat input index chosen for each output element.
    pub argmax: Vec<usize>,
}

/// Max pooling; padded positions never win.
pub fn maxpool_forward<T: Real>(input: &Act<T>, win: Window) -> Result<PoolOutput<T>> {
    let (ho, wo) = match (win.output_len(input.h), win.output_len(input.w)) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::InsufficientInput {
                size: input.h.min(input.w),
                message: format!("pool kernel {} does not fit", win.kernel),
            })
        }
    };
    let mut out = Act::zeros(input.c, input.b, ho, wo);
    let mut argmax = vec![0usize; out.data.len()];
    for c in 0..input.c {
        for b in 0..input.b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..win.kernel {
                        let iy = (oy * win.stride + ky) as isize - win.padding as isize;
                        if iy < 0 || iy as usize >= input.h {
                            continue;
                        }
                        for kx in 0..win.kernel {
                            let ix = (ox * win.stride + kx) as isize - win.padding as isize;
                            if ix < 0 || ix as usize >= input.w {
                                continue;
                            }
                            let i = input.idx(c, b, iy as usize, ix as usize);
                            if best.is_none_or(|(v, _)| input.data[i] > v) {
                                best = Some((input.data[i], i));
                            }
                        }
                    }
                    let o = out.idx(c, b, oy, ox);
                    let (v, i) = best.ok_or_else(|| Error::InsufficientInput {
                        size: input.h.min(input.w),
                        message: "pool window covers only padding".into(),
                    })?;
                    out.data[o] = v;
                    argmax[o] = i;
                }
            }
        }
    }
    Ok(PoolOutput { out, argmax })
}

pub fn maxpool_backward<T: Real>(d_out: &Act<T>, argmax: &[usize], input_shape: (usize, usize, usize, usize)) -> Act<T> {
    let (c, b, h, w) = input_shape;
    let mut d = Act::zeros(c, b, h, w);
    for (g, &i) in d_out.data.iter().zip(argmax) {
        d.data[i] += *g;
    }
    d
}

/// Mean softmax cross-entropy over rows of `logits` (`rows x classes`), skipping rows whose label
/// is `None`. Returns the loss and `d loss / d logits`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], classes: usize, labels: &[Option<usize>]) -> Result<(T, Vec<T>)> {
    if logits.len() != labels.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits for {} rows of {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let counted = labels.iter().filter(|l| l.is_some()).count();
    let mut grad = vec![T::zero(); logits.len()];
    if counted == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::one() / T::from_usize_lossy(counted);
    let mut loss = T::zero();
    for (r, label) in labels.iter().enumerate() {
        let Some(label) = *label else { continue };
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|v| (*v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (g, v) in grad[r * classes..(r + 1) * classes].iter_mut().zip(row) {
            *g = (*v - log_z).exp() * inv;
        }
        grad[r * classes + label] -= inv;
    }
    Ok((loss * inv, grad))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_output_ranges() {
        let win = Window { kernel: 3, stride: 2, padding: 1 };
        // input 5 -> output 3; tap 0 reads index 2o-1, valid for o in 1..3.
        assert_eq!(win.valid_outputs(0, 5, 3), 1..3);
        assert_eq!(win.valid_outputs(1, 5, 3), 0..3);
        assert_eq!(win.valid_outputs(2, 5, 3), 0..2);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let win = Window { kernel: 3, stride: 2, padding: 1 };
        let mut input = Act::<f64>::zeros(2, 2, 5, 6);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f64 - 5.0;
        }
        let weight: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let bias = vec![0.5, -1.0, 2.0];
        let out = conv_forward(&input, &weight, &bias, 3, win).unwrap().out;
        assert_eq!((out.h, out.w), (3, 3));
        for co in 0..3 {
            for b in 0..2 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = bias[co];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                        continue;
                                    }
                                    acc += weight[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * input.at(ci, b, iy as usize, ix as usize);
                                }
                            }
                        }
                        assert_eq!(out.at(co, b, oy, ox), acc);
                    }
                }
            }
        }
    }

    #[test]
    fn cross_entropy_two_class_toy() {
        let logits = [2.0f64, 0.0, 0.0, 1.0];
        let (loss, _) = softmax_cross_entropy(&logits, 2, &[Some(0), Some(1)]).unwrap();
        let e = std::f64::consts::E;
        let expected = 0.5 * (-(e * e / (e * e + 1.0)).ln() - (e / (1.0 + e)).ln());
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.2201).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0f64; 4], 2, &[Some(0), Some(2)]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 9]), 0);
    }

    #[test]
    fn maxpool_ignores_padding() {
        let mut input = Act::<f64>::zeros(1, 1, 2, 2);
        input.data.copy_from_slice(&[-4.0, -3.0, -2.0, -1.0]);
        let out = maxpool_forward(&input, Window { kernel: 3, stride: 2, padding: 1 }).unwrap();
        assert_eq!(out.out.data, vec![-1.0]);
    }
}
