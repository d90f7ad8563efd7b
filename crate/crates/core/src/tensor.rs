//! Dense row-major tensors and the raw numeric kernels behind the tape.

use std::fmt;

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` values in row-major order.
///
/// Construction checks that the shape matches the payload and that every
/// value is finite; tensors are immutable once built.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor construction (index {pos})"
            )));
        }
        Ok(Self { shape, data })
    }

    /// Builds without the finiteness scan. Callers guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a tensor with exactly one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim(format!(
                "expected a single element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// Element at a multi-index. Panics when out of range.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}…", &self.data[..SHOWN])
        }
    }
}

/// Geometry of a 2-D convolution over NCHW input and OIHW kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects NCHW input and OIHW kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let (batch, in_channels, in_h, in_w) = (input[0], input[1], input[2], input[3]);
        let (out_channels, k_in, kernel_h, kernel_w) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if k_in != in_channels {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input has {in_channels}, kernel expects {k_in}"
            )));
        }
        let padded_h = in_h + 2 * pad;
        let padded_w = in_w + 2 * pad;
        if kernel_h == 0 || kernel_w == 0 || kernel_h > padded_h || kernel_w > padded_w {
            return Err(Error::dim(format!(
                "kernel {kernel_h}x{kernel_w} does not fit padded input {padded_h}x{padded_w}"
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            out_channels,
            in_h,
            in_w,
            kernel_h,
            kernel_w,
            out_h: (padded_h - kernel_h) / stride + 1,
            out_w: (padded_w - kernel_w) / stride + 1,
            stride,
            pad,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Output positions `o` along one axis whose source `o*stride + k - pad`
    /// lands inside `[0, len)`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let offset = k as isize - self.pad as isize;
        // o*s + offset >= 0
        let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
        // o*s + offset <= len - 1
        let hi_num = len as isize - 1 - offset;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_len as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    /// Visits every (output, input, weight) index triple that contributes a
    /// product term. The callback receives flat indices.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = self;
        let in_plane = g.in_h * g.in_w;
        let out_plane = g.out_h * g.out_w;
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                let out_base = (n * g.out_channels + o) * out_plane;
                for c in 0..g.in_channels {
                    let in_base = (n * g.in_channels + c) * in_plane;
                    for kh in 0..g.kernel_h {
                        let (oh_lo, oh_hi) = g.valid_range(kh, g.in_h, g.out_h);
                        for kw in 0..g.kernel_w {
                            let w_idx = ((o * g.in_channels + c) * g.kernel_h + kh) * g.kernel_w + kw;
                            let (ow_lo, ow_hi) = g.valid_range(kw, g.in_w, g.out_w);
                            for oh in oh_lo..oh_hi {
                                let ih = oh * g.stride + kh - g.pad;
                                let out_row = out_base + oh * g.out_w;
                                let in_row = in_base + ih * g.in_w;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.stride + kw - g.pad;
                                    f(out_row + ow, in_row + iw, w_idx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.out_channels * self.out_h * self.out_w];
        self.for_each_tap(|o, i, w| out[o] += kernel[w] * input[i]);
        out
    }

    pub fn grad_input(&self, grad_out: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.batch * self.in_channels * self.in_h * self.in_w];
        self.for_each_tap(|o, i, w| g[i] += kernel[w] * grad_out[o]);
        g
    }

    pub fn grad_kernel(&self, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.out_channels * self.in_channels * self.kernel_h * self.kernel_w];
        self.for_each_tap(|o, i, w| g[w] += input[i] * grad_out[o]);
        g
    }
}

/// 2-D cross-correlation of an NCHW input with an OIHW kernel, zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let geom = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    Tensor::new(geom.output_shape(), geom.forward(input.data(), kernel.data()))
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross entropy on a logit: `-[t ln σ(z) + (1-t) ln(1-σ(z))]`,
/// rewritten as `softplus(z) - t z` so that large |z| never overflows.
pub fn bce_with_logit(logit: f64, target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::contract(format!("bce target {target} outside [0, 1]")));
    }
    let loss = if logit > 0.0 {
        (1.0 - target) * logit + (-logit).exp().ln_1p()
    } else {
        -target * logit + logit.exp().ln_1p()
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("bce_loss".into()));
    }
    Ok(loss.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_payload() {
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -1.25]).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_output_size_formula() {
        for (h, k, s, p) in [(8, 3, 2, 1), (7, 3, 2, 1), (5, 5, 1, 2), (9, 2, 3, 0)] {
            let g = ConvGeometry::new(&[1, 1, h, h], &[1, 1, k, k], s, p).unwrap();
            assert_eq!(g.out_h, (h + 2 * p - k) / s + 1);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn bce_reference_points() {
        assert!((bce_with_logit(0.0, 0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let tail = bce_with_logit(40.0, 1.0).unwrap();
        assert!(tail.is_finite() && tail < 1e-10);
        assert!(bce_with_logit(-800.0, 0.0).unwrap() < 1e-300);
        assert!(matches!(bce_with_logit(0.0, 1.5), Err(Error::Contract(_))));
    }
}
