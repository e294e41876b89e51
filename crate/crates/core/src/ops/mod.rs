//! Layer primitives with explicit forward and backward passes.
//!
//! Backward functions take the forward inputs again (not a saved context)
//! and return gradients with exactly the shapes of their primals.

mod conv;
mod deform;
mod pool;
mod sample;
mod strip;

pub use conv::{conv2d_backward, conv2d_forward, rect_filter_bank, rect_filter_bank_backward};
pub use deform::{deform_conv2d_backward, deform_conv2d_forward, offset_conv, OffsetField};
pub use pool::{maxpool2, maxpool2_backward, relu, relu_backward, upsample_nn2, upsample_nn2_backward};
pub use sample::{bilinear_sample, bilinear_sample_grad};
pub use strip::{
    spm_backward, spm_forward, spm_gate, strip_pool_h, strip_pool_h_backward, strip_pool_v,
    strip_pool_v_backward, StripMode,
};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

/// Weights `(out, in, kh, kw)` plus per-output-channel bias and geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor4,
    pub bias: Vec<f64>,
    pub stride: usize,
    /// (rows, cols) of zero padding.
    pub padding: (usize, usize),
    pub dilation: usize,
}

impl ConvParams {
    pub fn new(
        weight: Tensor4,
        bias: Vec<f64>,
        stride: usize,
        padding: (usize, usize),
        dilation: usize,
    ) -> Result<Self> {
        if bias.len() != weight.batch() {
            return shape_err(format!(
                "bias has {} entries for {} output channels",
                bias.len(),
                weight.batch()
            ));
        }
        if stride == 0 || dilation == 0 {
            return shape_err("stride and dilation must be positive");
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            dilation,
        })
    }

    /// Stride-1, dilation-1 params with "same" padding for odd kernels.
    pub fn same(weight: Tensor4, bias: Vec<f64>) -> Result<Self> {
        let pad = ((weight.height() - 1) / 2, (weight.width() - 1) / 2);
        Self::new(weight, bias, 1, pad, 1)
    }

    pub fn zeros(out_ch: usize, in_ch: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::same(Tensor4::zeros([out_ch, in_ch, kh, kw])?, vec![0.0; out_ch])
    }

    pub fn out_channels(&self) -> usize {
        self.weight.batch()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.channels()
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.height(), self.weight.width())
    }

    /// Output dims for an input of dims `x`.
    pub fn output_dims(&self, x: [usize; 4]) -> Result<[usize; 4]> {
        if x[1] != self.in_channels() {
            return shape_err(format!(
                "input has {} channels, kernel expects {}",
                x[1],
                self.in_channels()
            ));
        }
        let (kh, kw) = self.kernel();
        let oh = out_extent(x[2], kh, self.padding.0, self.stride, self.dilation);
        let ow = out_extent(x[3], kw, self.padding.1, self.stride, self.dilation);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok([x[0], self.out_channels(), oh, ow]),
            _ => shape_err(format!("convolution of {x:?} yields an empty output")),
        }
    }
}

fn out_extent(len: usize, k: usize, pad: usize, stride: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * pad;
    (padded >= span).then(|| (padded - span) / stride + 1)
}

/// Gradients of one convolution's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub weight: Tensor4,
    pub bias: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_for(p: &ConvParams) -> Self {
        Self {
            weight: p.weight.zeros_like(),
            bias: vec![0.0; p.bias.len()],
        }
    }
}

/// Result of a parameterised backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub d_input: Tensor4,
    /// One entry per parameter set, in the order the layer takes them.
    pub d_params: Vec<ParamGrads>,
    /// Gradient for an auxiliary input such as a deformable offset field.
    pub d_aux: Option<Tensor4>,
}
