use crate::error::{shape_err, Error, Result};
use crate::ops::{
    conv2d_backward, conv2d_forward, deform_conv2d_backward, deform_conv2d_forward, maxpool2,
    maxpool2_backward, offset_conv, rect_filter_bank, rect_filter_bank_backward, relu,
    relu_backward, spm_backward, spm_forward, upsample_nn2, upsample_nn2_backward, ConvParams,
    OffsetField, ParamGrads,
};
use crate::tensor::Tensor4;

use super::{ModelState, StagePlan};

const DA_KERNEL: (usize, usize) = (3, 3);

struct StageCache {
    input: Tensor4,
    conv_pre: Tensor4,
    conv_out: Tensor4,
    /// Input of the distortion-aware block (after the optional first SPM).
    da_in: Tensor4,
    offsets: Option<OffsetField>,
    da_pre: Tensor4,
    da_out: Tensor4,
    /// Stage output, also the skip feature.
    out: Tensor4,
}

struct DecoderCache {
    cat: Tensor4,
    pre: Tensor4,
}

/// Activations recorded by [`forward`] for use by [`backward`].
pub struct ForwardCache {
    version: u64,
    rgb: Tensor4,
    stem_pre: Tensor4,
    stages: Vec<StageCache>,
    /// Indexed like `Plan::decoder`.
    decoder: Vec<DecoderCache>,
    head_in: Tensor4,
}

/// Parameter gradients aligned with [`ModelState::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<ParamGrads>,
}

impl ModelGrads {
    pub fn zeros_for(state: &ModelState) -> Self {
        Self {
            layers: state.layers.iter().map(|l| ParamGrads::zeros_for(&l.params)).collect(),
        }
    }

    /// Gradient slices in [`ModelState::named_tensors`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for g in &self.layers {
            out.push(g.weight.data());
            out.push(&g.bias[..]);
        }
        out
    }

    fn accumulate(&mut self, idx: usize, g: ParamGrads) -> Result<()> {
        let dst = &mut self.layers[idx];
        dst.weight.add_assign(&g.weight)?;
        for (a, b) in dst.bias.iter_mut().zip(&g.bias) {
            *a += b;
        }
        Ok(())
    }
}

fn stage_forward(state: &ModelState, plan: &StagePlan, x: Tensor4) -> Result<StageCache> {
    let mode = state.config.strip_mode;
    let conv_pre = conv2d_forward(&x, state.params(plan.conv))?;
    let conv_out = relu(&conv_pre);
    let da_in = match plan.spm_first {
        Some(i) => spm_forward(&conv_out, state.params(i), mode)?,
        None => conv_out.clone(),
    };
    let (offsets, da_pre) = match plan.offset {
        Some(oi) => {
            let off = offset_conv(&da_in, state.params(oi), DA_KERNEL)?;
            let pre = deform_conv2d_forward(&da_in, state.params(plan.da), &off)?;
            (Some(off), pre)
        }
        None => (None, conv2d_forward(&da_in, state.params(plan.da))?),
    };
    let da_out = relu(&da_pre);
    let out = match plan.spm {
        Some(i) => spm_forward(&da_out, state.params(i), mode)?,
        None => da_out.clone(),
    };
    Ok(StageCache {
        input: x,
        conv_pre,
        conv_out,
        da_in,
        offsets,
        da_pre,
        da_out,
        out,
    })
}

/// Runs the network on `rgb` of shape `(n, 3, H, W)` and returns depth
/// `(n, 1, H, W)` with the activations needed for [`backward`].
pub fn forward(state: &ModelState, rgb: &Tensor4) -> Result<(Tensor4, ForwardCache)> {
    let cfg = &state.config;
    let [_, c, h, w] = rgb.dims();
    if c != 3 || h != cfg.height || w != cfg.width {
        return shape_err(format!(
            "input {:?} does not match a 3x{}x{} model",
            rgb.dims(),
            cfg.height,
            cfg.width
        ));
    }
    let plan = state.plan();
    let banks: Vec<ConvParams> = plan.stem.iter().map(|&i| state.params(i).clone()).collect();
    let stem_pre = rect_filter_bank(rgb, &banks)?;
    let mut x = relu(&stem_pre);
    let mut stages = Vec::with_capacity(plan.stages.len());
    let last = plan.stages.len() - 1;
    for (s, sp) in plan.stages.iter().enumerate() {
        let cache = stage_forward(state, sp, x)?;
        x = if s < last {
            maxpool2(&cache.out)?
        } else {
            cache.out.clone()
        };
        stages.push(cache);
    }
    let mut decoder: Vec<DecoderCache> = Vec::with_capacity(plan.decoder.len());
    for s in (0..plan.decoder.len()).rev() {
        let up = upsample_nn2(&x);
        let cat = Tensor4::concat_channels(&[&up, &stages[s].out])?;
        let pre = conv2d_forward(&cat, state.params(plan.decoder[s]))?;
        x = relu(&pre);
        decoder.push(DecoderCache { cat, pre });
    }
    decoder.reverse();
    let depth = conv2d_forward(&x, state.params(plan.head))?;
    Ok((
        depth,
        ForwardCache {
            version: state.version,
            rgb: rgb.clone(),
            stem_pre,
            stages,
            decoder,
            head_in: x,
        },
    ))
}

fn stage_backward(
    state: &ModelState,
    plan: &StagePlan,
    cache: &StageCache,
    d_out: Tensor4,
    grads: &mut ModelGrads,
) -> Result<Tensor4> {
    let mode = state.config.strip_mode;
    let mut d = d_out;
    if let Some(i) = plan.spm {
        let g = spm_backward(&cache.da_out, state.params(i), mode, &d)?;
        grads.accumulate(i, g.d_params.into_iter().next().expect("one fuse"))?;
        d = g.d_input;
    }
    d = relu_backward(&cache.da_pre, &d)?;
    d = match (plan.offset, &cache.offsets) {
        (Some(oi), Some(off)) => {
            let g = deform_conv2d_backward(&cache.da_in, state.params(plan.da), off, &d)?;
            grads.accumulate(plan.da, g.d_params.into_iter().next().expect("one conv"))?;
            let d_off = g.d_aux.expect("deformable backward yields offset grads");
            let go = conv2d_backward(&cache.da_in, state.params(oi), &d_off)?;
            grads.accumulate(oi, go.d_params.into_iter().next().expect("one conv"))?;
            let mut dx = g.d_input;
            dx.add_assign(&go.d_input)?;
            dx
        }
        _ => {
            let g = conv2d_backward(&cache.da_in, state.params(plan.da), &d)?;
            grads.accumulate(plan.da, g.d_params.into_iter().next().expect("one conv"))?;
            g.d_input
        }
    };
    if let Some(i) = plan.spm_first {
        let g = spm_backward(&cache.conv_out, state.params(i), mode, &d)?;
        grads.accumulate(i, g.d_params.into_iter().next().expect("one fuse"))?;
        d = g.d_input;
    }
    d = relu_backward(&cache.conv_pre, &d)?;
    let g = conv2d_backward(&cache.input, state.params(plan.conv), &d)?;
    grads.accumulate(plan.conv, g.d_params.into_iter().next().expect("one conv"))?;
    Ok(g.d_input)
}

/// Gradients of `Σ d_depth ⊙ depth` with respect to every parameter.
pub fn backward(state: &ModelState, cache: &ForwardCache, d_depth: &Tensor4) -> Result<ModelGrads> {
    if cache.version != state.version {
        return Err(Error::Usage(
            "forward cache was recorded before the parameters changed".into(),
        ));
    }
    let plan = state.plan();
    let mut grads = ModelGrads::zeros_for(state);
    let head = conv2d_backward(&cache.head_in, state.params(plan.head), d_depth)?;
    grads.accumulate(plan.head, head.d_params.into_iter().next().expect("one conv"))?;
    let mut d = head.d_input;

    let n_stages = plan.stages.len();
    let mut d_skip: Vec<Option<Tensor4>> = vec![None; n_stages];
    for (s, dc) in cache.decoder.iter().enumerate() {
        d = relu_backward(&dc.pre, &d)?;
        let g = conv2d_backward(&dc.cat, state.params(plan.decoder[s]), &d)?;
        grads.accumulate(plan.decoder[s], g.d_params.into_iter().next().expect("one conv"))?;
        let up_ch = state.config.channels[s + 1];
        let mut parts = g.d_input.split_channels(&[up_ch, state.config.channels[s]])?;
        d_skip[s] = parts.pop();
        d = upsample_nn2_backward(&parts[0])?;
    }

    for s in (0..n_stages).rev() {
        let sc = &cache.stages[s];
        let d_out = if s == n_stages - 1 {
            d
        } else {
            let mut g = maxpool2_backward(&sc.out, &d)?;
            if let Some(ds) = d_skip[s].take() {
                g.add_assign(&ds)?;
            }
            g
        };
        d = stage_backward(state, &plan.stages[s], sc, d_out, &mut grads)?;
    }

    d = relu_backward(&cache.stem_pre, &d)?;
    let banks: Vec<ConvParams> = plan.stem.iter().map(|&i| state.params(i).clone()).collect();
    let g = rect_filter_bank_backward(&cache.rgb, &banks, &d)?;
    for (&i, pg) in plan.stem.iter().zip(g.d_params) {
        grads.accumulate(i, pg)?;
    }
    Ok(grads)
}
