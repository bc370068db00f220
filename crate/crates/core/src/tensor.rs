//! Dense row-major `f64` tensors and the dilated 2-D convolution kernels.
//!
//! Everything downstream (layers, autodiff tape, model) is built on the
//! handful of operations in this module. The convolution here supports an
//! arbitrary dilation rate: a kernel tap at offset `t` reads the input at
//! offset `t * dilation`, so the kernel covers a window of
//! `(k - 1) * dilation + 1` pixels while touching only `k` of them per axis.
//! Raising the dilation widens the receptive field without adding weights,
//! which is what lets the backbone trade stride for dilation.

use crate::error::{Error, Result};

/// Dense tensor: a shape plus row-major contiguous storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches the shape's volume.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let volume = checked_volume(&shape)?;
        if data.len() != volume {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                volume,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let volume = checked_volume(&shape).expect("tensor volume overflows usize");
        Tensor {
            shape,
            data: vec![0.0; volume],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let volume = checked_volume(&shape).expect("tensor volume overflows usize");
        Tensor {
            shape,
            data: vec![value; volume],
        }
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise max(x, 0).
    pub fn relu(&self) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Element-wise sum; both operands must have identical shapes.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add: operand shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Multiplies every element by a scalar.
    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * factor).collect();
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

fn checked_volume(shape: &[usize]) -> Result<usize> {
    let mut volume: usize = 1;
    for &dim in shape {
        volume = volume
            .checked_mul(dim)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} volume overflows usize")))?;
    }
    Ok(volume)
}

/// Geometry of one 2-D convolution. Kernels are square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self> {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            dilation,
            padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("conv channels must be positive".into()));
        }
        if self.kernel == 0 {
            return Err(Error::Config("conv kernel size must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        if self.dilation == 0 {
            return Err(Error::Config("conv dilation must be positive".into()));
        }
        Ok(())
    }

    /// Number of input pixels spanned by the dilated kernel along one axis.
    pub fn extent(&self) -> usize {
        (self.kernel - 1) * self.dilation + 1
    }

    /// Output height/width for a given input height/width:
    /// `floor((in + 2*padding - extent) / stride) + 1`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let extent = self.extent();
        let padded_h = h + 2 * self.padding;
        let padded_w = w + 2 * self.padding;
        if padded_h < extent || padded_w < extent {
            return Err(Error::Shape(format!(
                "conv input {h}x{w} (padding {}) smaller than dilated kernel extent {extent}",
                self.padding
            )));
        }
        Ok((
            (padded_h - extent) / self.stride + 1,
            (padded_w - extent) / self.stride + 1,
        ))
    }
}

/// Gradients produced by [`conv2d_backward`].
#[derive(Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Half-open range of output coordinates `o` for which
/// `o * stride + offset` lands inside `[0, input_len)`.
///
/// Splitting each row into this in-bounds span (plus implicitly-zero padding
/// outside it) keeps the inner loops free of per-element bounds checks.
fn in_bounds_span(
    input_len: usize,
    output_len: usize,
    stride: usize,
    offset: isize,
) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        let need = (-offset) as usize;
        need.div_ceil(stride)
    };
    let last = input_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(output_len);
    (lo.min(hi), hi)
}

fn check_conv_operands(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<()> {
    spec.validate()?;
    if input.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv input must be [batch, channels, h, w], got shape {:?}",
            input.shape()
        )));
    }
    if input.shape()[1] != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv input has {} channels, spec expects {}",
            input.shape()[1],
            spec.in_channels
        )));
    }
    let expected_weight = [
        spec.out_channels,
        spec.in_channels,
        spec.kernel,
        spec.kernel,
    ];
    if weight.shape() != expected_weight {
        return Err(Error::Shape(format!(
            "conv weight shape {:?} does not match spec {:?}",
            weight.shape(),
            expected_weight
        )));
    }
    if let Some(bias) = bias {
        if bias.shape() != [spec.out_channels] {
            return Err(Error::Shape(format!(
                "conv bias shape {:?} does not match {} output channels",
                bias.shape(),
                spec.out_channels
            )));
        }
    }
    Ok(())
}

/// Dilated 2-D convolution over a `[batch, in_channels, h, w]` input.
///
/// Output element `(n, k, oy, ox)` is
/// `bias[k] + sum over (c, ky, kx) of weight[k,c,ky,kx] * input[n, c, oy*stride + ky*dilation - padding, ox*stride + kx*dilation - padding]`
/// with out-of-range input reads treated as zero (zero padding).
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    check_conv_operands(input, weight, Some(bias), spec)?;
    let (batch, c_in, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (h_out, w_out) = spec.output_hw(h, w)?;
    let k_out = spec.out_channels;
    let kernel = spec.kernel;
    let stride = spec.stride;
    let dilation = spec.dilation;
    let padding = spec.padding as isize;

    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();
    let mut out = vec![0.0; batch * k_out * h_out * w_out];

    for n in 0..batch {
        let in_image = &in_data[n * c_in * h * w..][..c_in * h * w];
        for k in 0..k_out {
            let out_chan = &mut out[(n * k_out + k) * h_out * w_out..][..h_out * w_out];
            out_chan.fill(b_data[k]);
            let w_chan = &w_data[k * c_in * kernel * kernel..][..c_in * kernel * kernel];
            for c in 0..c_in {
                let in_chan = &in_image[c * h * w..][..h * w];
                let w_taps = &w_chan[c * kernel * kernel..][..kernel * kernel];
                for ky in 0..kernel {
                    let y_off = (ky * dilation) as isize - padding;
                    let (oy_lo, oy_hi) = in_bounds_span(h, h_out, stride, y_off);
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * stride) as isize + y_off;
                        let in_row = &in_chan[iy as usize * w..][..w];
                        let out_row = &mut out_chan[oy * w_out..][..w_out];
                        for kx in 0..kernel {
                            let tap = w_taps[ky * kernel + kx];
                            if tap == 0.0 {
                                continue;
                            }
                            let x_off = (kx * dilation) as isize - padding;
                            let (ox_lo, ox_hi) = in_bounds_span(w, w_out, stride, x_off);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + x_off) as usize;
                                let src = &in_row[ix0..ix0 + (ox_hi - ox_lo)];
                                for (dst, &v) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *dst += tap * v;
                                }
                            } else {
                                let mut ix = ((ox_lo * stride) as isize + x_off) as usize;
                                for dst in &mut out_row[ox_lo..ox_hi] {
                                    *dst += tap * in_row[ix];
                                    ix += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Tensor::new(vec![batch, k_out, h_out, w_out], out)
}

/// Backward pass of [`conv2d`]: given `d loss / d output`, recovers the
/// gradients with respect to the input, the weights, and the bias. The
/// forward operands (`input`, `weight`) must be passed back in unchanged.
pub fn conv2d_backward(
    output_grad: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
) -> Result<ConvGrads> {
    check_conv_operands(input, weight, None, spec)?;
    let (batch, c_in, h, w) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (h_out, w_out) = spec.output_hw(h, w)?;
    let k_out = spec.out_channels;
    let expected = [batch, k_out, h_out, w_out];
    if output_grad.shape() != expected {
        return Err(Error::Shape(format!(
            "conv output gradient shape {:?} does not match forward output {:?}",
            output_grad.shape(),
            expected
        )));
    }
    let kernel = spec.kernel;
    let stride = spec.stride;
    let dilation = spec.dilation;
    let padding = spec.padding as isize;

    let in_data = input.data();
    let w_data = weight.data();
    let g_data = output_grad.data();
    let mut d_input = vec![0.0; in_data.len()];
    let mut d_weight = vec![0.0; w_data.len()];
    let mut d_bias = vec![0.0; k_out];

    for n in 0..batch {
        let in_image = &in_data[n * c_in * h * w..][..c_in * h * w];
        let din_image = &mut d_input[n * c_in * h * w..][..c_in * h * w];
        for k in 0..k_out {
            let g_chan = &g_data[(n * k_out + k) * h_out * w_out..][..h_out * w_out];
            d_bias[k] += g_chan.iter().sum::<f64>();
            let w_chan = &w_data[k * c_in * kernel * kernel..][..c_in * kernel * kernel];
            let dw_chan = &mut d_weight[k * c_in * kernel * kernel..][..c_in * kernel * kernel];
            for c in 0..c_in {
                let in_chan = &in_image[c * h * w..][..h * w];
                let din_chan = &mut din_image[c * h * w..][..h * w];
                for ky in 0..kernel {
                    let y_off = (ky * dilation) as isize - padding;
                    let (oy_lo, oy_hi) = in_bounds_span(h, h_out, stride, y_off);
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * stride) as isize + y_off) as usize;
                        let in_row = &in_chan[iy * w..][..w];
                        let din_row = &mut din_chan[iy * w..][..w];
                        let g_row = &g_chan[oy * w_out..][..w_out];
                        for kx in 0..kernel {
                            let x_off = (kx * dilation) as isize - padding;
                            let (ox_lo, ox_hi) = in_bounds_span(w, w_out, stride, x_off);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let widx = (c * kernel + ky) * kernel + kx;
                            let tap = w_chan[widx];
                            if stride == 1 {
                                let ix0 = (ox_lo as isize + x_off) as usize;
                                let span = ox_hi - ox_lo;
                                let g_span = &g_row[ox_lo..ox_hi];
                                let mut acc = 0.0;
                                for (&g, &v) in g_span.iter().zip(&in_row[ix0..ix0 + span]) {
                                    acc += g * v;
                                }
                                dw_chan[widx] += acc;
                                for (d, &g) in din_row[ix0..ix0 + span].iter_mut().zip(g_span) {
                                    *d += tap * g;
                                }
                            } else {
                                let mut acc = 0.0;
                                let mut ix = ((ox_lo * stride) as isize + x_off) as usize;
                                for &g in &g_row[ox_lo..ox_hi] {
                                    acc += g * in_row[ix];
                                    din_row[ix] += tap * g;
                                    ix += stride;
                                }
                                dw_chan[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), d_input)?,
        weight: Tensor::new(weight.shape().to_vec(), d_weight)?,
        bias: Tensor::new(vec![k_out], d_bias)?,
    })
}
