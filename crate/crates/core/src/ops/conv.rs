use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

use super::{ConvParams, LayerGrads, ParamGrads};

/// Output positions `o` in `0..out_len` whose input index `o * stride + offset`
/// lands inside `0..in_len`, as a half-open range.
#[inline]
pub(super) fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let hi_excl = in_len as isize - offset; // o * s < hi_excl
    let hi = if hi_excl <= 0 { 0 } else { (hi_excl + s - 1) / s };
    let lo = lo.max(0) as usize;
    let hi = (hi as usize).min(out_len);
    (lo, hi.max(lo))
}

/// Zero-padded cross-correlation.
pub fn conv2d_forward(x: &Tensor4, p: &ConvParams) -> Result<Tensor4> {
    let od = p.output_dims(x.dims())?;
    let [n, in_c, h, w] = x.dims();
    let [_, out_c, oh, ow] = od;
    let (kh, kw) = p.kernel();
    let (s, d) = (p.stride, p.dilation);
    let mut out = Tensor4::zeros(od)?;
    for b in 0..n {
        for o in 0..out_c {
            let plane = out.plane_mut(b, o);
            plane.fill(p.bias[o]);
            for c in 0..in_c {
                let xp = x.plane(b, c);
                for ki in 0..kh {
                    let roff = (ki * d) as isize - p.padding.0 as isize;
                    let (i0, i1) = valid_range(oh, h, s, roff);
                    for kj in 0..kw {
                        let wv = p.weight.at(o, c, ki, kj);
                        let coff = (kj * d) as isize - p.padding.1 as isize;
                        let (j0, j1) = valid_range(ow, w, s, coff);
                        for i in i0..i1 {
                            let ih = (i * s) as isize + roff;
                            let xrow = &xp[ih as usize * w..(ih as usize + 1) * w];
                            let orow = &mut plane[i * ow..(i + 1) * ow];
                            for j in j0..j1 {
                                let iw = ((j * s) as isize + coff) as usize;
                                orow[j] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv2d_backward(x: &Tensor4, p: &ConvParams, d_out: &Tensor4) -> Result<LayerGrads> {
    let od = p.output_dims(x.dims())?;
    if d_out.dims() != od {
        return shape_err(format!(
            "d_out dims {:?} differ from output dims {:?}",
            d_out.dims(),
            od
        ));
    }
    let [n, in_c, h, w] = x.dims();
    let [_, out_c, oh, ow] = od;
    let (kh, kw) = p.kernel();
    let (s, d) = (p.stride, p.dilation);
    let mut dx = x.zeros_like();
    let mut grads = ParamGrads::zeros_for(p);
    for b in 0..n {
        for o in 0..out_c {
            let gp = d_out.plane(b, o);
            grads.bias[o] += gp.iter().sum::<f64>();
            for c in 0..in_c {
                let xp = x.plane(b, c);
                for ki in 0..kh {
                    let roff = (ki * d) as isize - p.padding.0 as isize;
                    let (i0, i1) = valid_range(oh, h, s, roff);
                    for kj in 0..kw {
                        let wv = p.weight.at(o, c, ki, kj);
                        let coff = (kj * d) as isize - p.padding.1 as isize;
                        let (j0, j1) = valid_range(ow, w, s, coff);
                        let mut dw = 0.0;
                        let dxp = dx.plane_mut(b, c);
                        for i in i0..i1 {
                            let ih = ((i * s) as isize + roff) as usize;
                            for j in j0..j1 {
                                let iw = ((j * s) as isize + coff) as usize;
                                let g = gp[i * ow + j];
                                dw += g * xp[ih * w + iw];
                                dxp[ih * w + iw] += g * wv;
                            }
                        }
                        let wi = grads.weight.offset(o, c, ki, kj);
                        grads.weight.data_mut()[wi] += dw;
                    }
                }
            }
        }
    }
    Ok(LayerGrads {
        d_input: dx,
        d_params: vec![grads],
        d_aux: None,
    })
}

/// Runs every bank on `x` and concatenates the results along channels.
pub fn rect_filter_bank(x: &Tensor4, banks: &[ConvParams]) -> Result<Tensor4> {
    if banks.is_empty() {
        return shape_err("filter bank needs at least one convolution");
    }
    let outs = banks
        .iter()
        .map(|b| conv2d_forward(x, b))
        .collect::<Result<Vec<_>>>()?;
    let (h, w) = (outs[0].height(), outs[0].width());
    if outs.iter().any(|o| o.height() != h || o.width() != w) {
        return shape_err("filter-bank members produce different spatial dims");
    }
    let refs: Vec<&Tensor4> = outs.iter().collect();
    Tensor4::concat_channels(&refs)
}

pub fn rect_filter_bank_backward(
    x: &Tensor4,
    banks: &[ConvParams],
    d_out: &Tensor4,
) -> Result<LayerGrads> {
    let sizes: Vec<usize> = banks.iter().map(ConvParams::out_channels).collect();
    let parts = d_out.split_channels(&sizes)?;
    let mut dx = x.zeros_like();
    let mut d_params = Vec::with_capacity(banks.len());
    for (bank, g) in banks.iter().zip(&parts) {
        let lg = conv2d_backward(x, bank, g)?;
        dx.add_assign(&lg.d_input)?;
        d_params.extend(lg.d_params);
    }
    Ok(LayerGrads {
        d_input: dx,
        d_params,
        d_aux: None,
    })
}
