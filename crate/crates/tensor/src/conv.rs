//! Dilated 2-D convolution: geometry, patch unrolling, and a naive
//! reference evaluator.
//!
//! The fast path unrolls input patches into a matrix and multiplies
//! (im2col + GEMM). [`conv2d_reference`] walks the definition directly,
//! one kernel tap at a time, and stays available as an independent route
//! for checking the unrolled kernel.

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Convolution hyperparameters. Dilation is uniform across height and
/// width; a 3x3 kernel keeps "same" spatial dims at stride 1 whenever
/// padding equals the dilation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            dilation,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(TensorError::ShapeMismatch(
                "kernel and stride entries must be >= 1".into(),
            ));
        }
        if self.dilation == 0 {
            return Err(TensorError::ShapeMismatch("dilation must be >= 1".into()));
        }
        Ok(())
    }

    /// Span of the dilated kernel in input samples: d*(k-1) + 1.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel.0 - 1) + 1,
            self.dilation * (self.kernel.1 - 1) + 1,
        )
    }

    /// Output spatial dims: floor((x + 2p - d*(k-1) - 1) / s) + 1.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        self.validate()?;
        let (eff_h, eff_w) = self.effective_kernel();
        let padded_h = h + 2 * self.padding.0;
        let padded_w = w + 2 * self.padding.1;
        if padded_h < eff_h || padded_w < eff_w {
            return Err(TensorError::DegenerateOutput(format!(
                "effective kernel {}x{} exceeds padded input {}x{}",
                eff_h, eff_w, padded_h, padded_w
            )));
        }
        Ok((
            (padded_h - eff_h) / self.stride.0 + 1,
            (padded_w - eff_w) / self.stride.1 + 1,
        ))
    }
}

/// Unroll one sample's patches: `input` is the [C,H,W] slice of a sample,
/// output is [C*kh*kw, out_h*out_w] with out-of-range taps left at zero.
pub(crate) fn im2col<T: Scalar>(
    input: &[T],
    channels: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let d = geom.dilation;
    debug_assert_eq!(cols.len(), channels * kh * kw * out_h * out_w);
    cols.fill(T::zero());

    let span = out_h * out_w;
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * span;
                for oy in 0..out_h {
                    let iy = (oy * sh + ki * d) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = iy as usize * w;
                    let out_row = row + oy * out_w;
                    for ox in 0..out_w {
                        let ix = (ox * sw + kj * d) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[out_row + ox] = plane[in_row + ix as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`]: fold the unrolled gradient
/// columns back onto the input gradient plane.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    out_h: usize,
    out_w: usize,
    grad_input: &mut [T],
) {
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let d = geom.dilation;
    debug_assert_eq!(cols.len(), channels * kh * kw * out_h * out_w);
    debug_assert_eq!(grad_input.len(), channels * h * w);

    let span = out_h * out_w;
    for c in 0..channels {
        let plane = &mut grad_input[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * span;
                for oy in 0..out_h {
                    let iy = (oy * sh + ki * d) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = iy as usize * w;
                    let out_row = row + oy * out_w;
                    for ox in 0..out_w {
                        let ix = (ox * sw + kj * d) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[in_row + ix as usize] += cols[out_row + ox];
                    }
                }
            }
        }
    }
}

/// Naive dilated cross-correlation, summing W[i,j] * X[m*s + i*d - p, n*s + j*d - p]
/// tap by tap with out-of-range input treated as zero.
///
/// Always available as the second route when validating the unrolled path.
pub fn conv2d_reference<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>, TensorError> {
    let (batch, c_in, h, w) = expect_nchw(input, "conv input")?;
    let (c_out, wc_in, kh, kw) = expect_nchw(weight, "conv weight")?;
    if wc_in != c_in {
        return Err(TensorError::ShapeMismatch(format!(
            "weight expects {} input channels, input has {}",
            wc_in, c_in
        )));
    }
    if (kh, kw) != geom.kernel {
        return Err(TensorError::ShapeMismatch(format!(
            "weight kernel {}x{} does not match geometry {:?}",
            kh, kw, geom.kernel
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch(format!(
                "bias shape {:?}, expected [{}]",
                b.shape(),
                c_out
            )));
        }
    }
    let (out_h, out_w) = geom.output_dims(h, w)?;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let d = geom.dilation;

    let mut out = Tensor::zeros(&[batch, c_out, out_h, out_w]);
    let x = input.data();
    let wt = weight.data();
    let y = out.data_mut();
    for n in 0..batch {
        for co in 0..c_out {
            let b = bias.map_or(T::zero(), |b| b.data()[co]);
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = b;
                    for ci in 0..c_in {
                        for ki in 0..kh {
                            let iy = (oy * sh + ki * d) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let ix = (ox * sw + kj * d) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((n * c_in + ci) * h + iy as usize) * w + ix as usize];
                                let wv = wt[((co * c_in + ci) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((n * c_out + co) * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn expect_nchw<T: Scalar>(
    t: &Tensor<T>,
    what: &str,
) -> Result<(usize, usize, usize, usize), TensorError> {
    match t.shape() {
        &[n, c, h, w] => Ok((n, c, h, w)),
        other => Err(TensorError::ShapeMismatch(format!(
            "{} must be rank 4 [N,C,H,W], got {:?}",
            what, other
        ))),
    }
}
