//! Deformable convolution: each kernel tap reads the input at its regular
//! grid position plus a learned, per-output-location displacement.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

use super::conv::conv2d_forward;
use super::sample::{taps, Taps};
use super::{ConvParams, LayerGrads, ParamGrads};

/// Per-location sampling displacements for a `kh × kw` kernel.
///
/// Channels `2k` and `2k + 1` hold (Δrow, Δcol) for kernel tap `k`, with
/// taps numbered row-major over the kernel window.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetField {
    offsets: Tensor4,
    kernel: (usize, usize),
}

impl OffsetField {
    pub fn new(offsets: Tensor4, kernel: (usize, usize)) -> Result<Self> {
        let expected = 2 * kernel.0 * kernel.1;
        if offsets.channels() != expected {
            return shape_err(format!(
                "offset field has {} channels, a {}x{} kernel needs {}",
                offsets.channels(),
                kernel.0,
                kernel.1,
                expected
            ));
        }
        Ok(Self { offsets, kernel })
    }

    pub fn zeros(n: usize, kernel: (usize, usize), h: usize, w: usize) -> Result<Self> {
        Self::new(Tensor4::zeros([n, 2 * kernel.0 * kernel.1, h, w])?, kernel)
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.offsets
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.offsets
    }

    pub fn kernel(&self) -> (usize, usize) {
        self.kernel
    }
}

/// Predicts an offset field with an ordinary convolution over `x`.
pub fn offset_conv(x: &Tensor4, p: &ConvParams, kernel: (usize, usize)) -> Result<OffsetField> {
    if p.out_channels() != 2 * kernel.0 * kernel.1 {
        return shape_err(format!(
            "offset conv emits {} channels, {}x{} kernel needs {}",
            p.out_channels(),
            kernel.0,
            kernel.1,
            2 * kernel.0 * kernel.1
        ));
    }
    OffsetField::new(conv2d_forward(x, p)?, kernel)
}

fn check_offsets(x: &Tensor4, p: &ConvParams, off: &OffsetField) -> Result<[usize; 4]> {
    let od = p.output_dims(x.dims())?;
    if off.kernel != p.kernel() {
        return shape_err(format!(
            "offset field built for kernel {:?}, weights are {:?}",
            off.kernel,
            p.kernel()
        ));
    }
    let t = &off.offsets;
    if t.batch() != od[0] || t.height() != od[2] || t.width() != od[3] {
        return shape_err(format!(
            "offset dims {:?} do not cover output dims {:?}",
            t.dims(),
            od
        ));
    }
    Ok(od)
}

/// Sampling taps for every (channel-independent) kernel tap and output
/// location of batch item `b`, laid out `[k][i * ow + j]`.
fn sampling_taps(x: &Tensor4, p: &ConvParams, off: &Tensor4, b: usize, od: [usize; 4]) -> Vec<Taps> {
    let (kh, kw) = p.kernel();
    let (oh, ow) = (od[2], od[3]);
    let (h, w) = (x.height(), x.width());
    let (s, d) = (p.stride as f64, p.dilation as f64);
    let mut out = Vec::with_capacity(kh * kw * oh * ow);
    for ki in 0..kh {
        for kj in 0..kw {
            let k = ki * kw + kj;
            let dr = off.plane(b, 2 * k);
            let dc = off.plane(b, 2 * k + 1);
            for i in 0..oh {
                for j in 0..ow {
                    let base_r = i as f64 * s - p.padding.0 as f64 + ki as f64 * d;
                    let base_c = j as f64 * s - p.padding.1 as f64 + kj as f64 * d;
                    let l = i * ow + j;
                    out.push(taps(h, w, base_r + dr[l], base_c + dc[l]));
                }
            }
        }
    }
    out
}

/// Sampled input columns `[c][k][l]` for batch item `b`.
fn columns(x: &Tensor4, b: usize, tap: &[Taps], kk: usize, ohw: usize) -> Vec<f64> {
    let c_in = x.channels();
    let mut cols = vec![0.0; c_in * kk * ohw];
    for c in 0..c_in {
        let plane = x.plane(b, c);
        let dst = &mut cols[c * kk * ohw..(c + 1) * kk * ohw];
        for (v, t) in dst.iter_mut().zip(tap) {
            *v = t.value(plane);
        }
    }
    cols
}

pub fn deform_conv2d_forward(x: &Tensor4, p: &ConvParams, off: &OffsetField) -> Result<Tensor4> {
    let od = check_offsets(x, p, off)?;
    let [n, out_c, oh, ow] = od;
    let ohw = oh * ow;
    let (kh, kw) = p.kernel();
    let kk = kh * kw;
    let c_in = x.channels();
    let mut out = Tensor4::zeros(od)?;
    for b in 0..n {
        let tap = sampling_taps(x, p, &off.offsets, b, od);
        let cols = columns(x, b, &tap, kk, ohw);
        for o in 0..out_c {
            let plane = out.plane_mut(b, o);
            plane.fill(p.bias[o]);
            for c in 0..c_in {
                for k in 0..kk {
                    let wv = p.weight.at(o, c, k / kw, k % kw);
                    let col = &cols[(c * kk + k) * ohw..(c * kk + k + 1) * ohw];
                    for (acc, v) in plane.iter_mut().zip(col) {
                        *acc += wv * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients for the input, the weights/bias and (in `d_aux`) the offsets.
pub fn deform_conv2d_backward(
    x: &Tensor4,
    p: &ConvParams,
    off: &OffsetField,
    d_out: &Tensor4,
) -> Result<LayerGrads> {
    let od = check_offsets(x, p, off)?;
    if d_out.dims() != od {
        return shape_err(format!(
            "d_out dims {:?} differ from output dims {:?}",
            d_out.dims(),
            od
        ));
    }
    let [n, out_c, oh, ow] = od;
    let ohw = oh * ow;
    let (kh, kw) = p.kernel();
    let kk = kh * kw;
    let c_in = x.channels();
    let mut dx = x.zeros_like();
    let mut d_off = off.offsets.zeros_like();
    let mut grads = ParamGrads::zeros_for(p);
    for b in 0..n {
        let tap = sampling_taps(x, p, &off.offsets, b, od);
        let cols = columns(x, b, &tap, kk, ohw);
        let mut d_cols = vec![0.0; c_in * kk * ohw];
        for o in 0..out_c {
            let g = d_out.plane(b, o);
            grads.bias[o] += g.iter().sum::<f64>();
            for c in 0..c_in {
                for k in 0..kk {
                    let span = (c * kk + k) * ohw..(c * kk + k + 1) * ohw;
                    let wi = grads.weight.offset(o, c, k / kw, k % kw);
                    let wv = p.weight.data()[wi];
                    let mut dw = 0.0;
                    for ((dc, &v), &gv) in d_cols[span.clone()].iter_mut().zip(&cols[span]).zip(g) {
                        dw += gv * v;
                        *dc += gv * wv;
                    }
                    grads.weight.data_mut()[wi] += dw;
                }
            }
        }
        for c in 0..c_in {
            let xp = x.plane(b, c);
            for k in 0..kk {
                let base = (c * kk + k) * ohw;
                for l in 0..ohw {
                    let g = d_cols[base + l];
                    if g == 0.0 {
                        continue;
                    }
                    let t = &tap[k * ohw + l];
                    let (mut dr, mut dc) = (0.0, 0.0);
                    let dxp = dx.plane_mut(b, c);
                    for q in 0..4 {
                        if t.valid[q] {
                            dxp[t.idx[q]] += g * t.w[q];
                            dr += t.dw_r[q] * xp[t.idx[q]];
                            dc += t.dw_c[q] * xp[t.idx[q]];
                        }
                    }
                    let (i, j) = (l / ow, l % ow);
                    let ir = d_off.offset(b, 2 * k, i, j);
                    let ic = d_off.offset(b, 2 * k + 1, i, j);
                    d_off.data_mut()[ir] += g * dr;
                    d_off.data_mut()[ic] += g * dc;
                }
            }
        }
    }
    Ok(LayerGrads {
        d_input: dx,
        d_params: vec![grads],
        d_aux: Some(d_off),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::conv2d_backward;
    use crate::tensor::{numeric_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_params(r: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> ConvParams {
        let w = Tensor4::random_uniform([out, inp, k, k], -1.0, 1.0, r).unwrap();
        let b = Tensor4::random_uniform([1, 1, 1, out], -1.0, 1.0, r).unwrap().into_vec();
        ConvParams::same(w, b).unwrap()
    }

    #[test]
    fn zero_offsets_reduce_to_conv() {
        let mut r = rng(1);
        for _ in 0..10 {
            let x = Tensor4::random_uniform([2, 3, 5, 7], -1.0, 1.0, &mut r).unwrap();
            let p = rand_params(&mut r, 4, 3, 3);
            let off = OffsetField::zeros(2, (3, 3), 5, 7).unwrap();
            let a = deform_conv2d_forward(&x, &p, &off).unwrap();
            let b = conv2d_forward(&x, &p).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);

            let g = Tensor4::random_uniform(a.dims(), -1.0, 1.0, &mut r).unwrap();
            let ga = deform_conv2d_backward(&x, &p, &off, &g).unwrap();
            let gb = conv2d_backward(&x, &p, &g).unwrap();
            assert!(ga.d_input.max_abs_diff(&gb.d_input).unwrap() < 1e-12);
            assert!(ga.d_params[0].weight.max_abs_diff(&gb.d_params[0].weight).unwrap() < 1e-12);
        }
    }

    #[test]
    fn unit_column_shift_matches_shifted_conv() {
        let mut r = rng(2);
        let x = Tensor4::random_uniform([1, 2, 6, 8], -1.0, 1.0, &mut r).unwrap();
        let p = rand_params(&mut r, 2, 2, 3);
        let mut t = Tensor4::zeros([1, 18, 6, 8]).unwrap();
        for k in 0..9 {
            t.plane_mut(0, 2 * k + 1).fill(1.0);
        }
        let off = OffsetField::new(t, (3, 3)).unwrap();
        let y = deform_conv2d_forward(&x, &p, &off).unwrap();
        // Brute force: x shifted left by one column, then ordinary conv.
        let mut shifted = x.zeros_like();
        for c in 0..2 {
            for i in 0..6 {
                for j in 0..7 {
                    shifted.set(0, c, i, j, x.at(0, c, i, j + 1));
                }
            }
        }
        let z = conv2d_forward(&shifted, &p).unwrap();
        for o in 0..2 {
            for i in 1..5 {
                for j in 1..6 {
                    assert!((y.at(0, o, i, j) - z.at(0, o, i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn half_pixel_offset_on_ramp() {
        let x = Tensor4::from_vec([1, 1, 2, 4], vec![0.0, 2.0, 4.0, 6.0, 0.0, 2.0, 4.0, 6.0]).unwrap();
        let p = ConvParams::same(Tensor4::new_filled([1, 1, 1, 1], 1.0).unwrap(), vec![0.0]).unwrap();
        let mut t = Tensor4::zeros([1, 2, 2, 4]).unwrap();
        t.plane_mut(0, 1).fill(0.5);
        let y = deform_conv2d_forward(&x, &p, &OffsetField::new(t, (1, 1)).unwrap()).unwrap();
        for i in 0..2 {
            assert_eq!(&y.plane(0, 0)[i * 4..i * 4 + 3], &[1.0, 3.0, 5.0]);
        }
    }

    #[test]
    fn flat_input_has_no_offset_gradient() {
        let mut r = rng(3);
        let x = Tensor4::new_filled([1, 2, 8, 8], 0.8).unwrap();
        let p = rand_params(&mut r, 3, 2, 3);
        let t = Tensor4::random_uniform([1, 18, 8, 8], -0.3, 0.3, &mut r).unwrap();
        let off = OffsetField::new(t, (3, 3)).unwrap();
        // Only interior outputs receive gradient, so no tap touches the padding.
        let mut dy = Tensor4::zeros([1, 3, 8, 8]).unwrap();
        for o in 0..3 {
            for i in 2..6 {
                for j in 2..6 {
                    dy.set(0, o, i, j, 1.0);
                }
            }
        }
        let g = deform_conv2d_backward(&x, &p, &off, &dy).unwrap();
        assert!(g.d_aux.unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(4);
        let x = Tensor4::random_uniform([1, 2, 5, 6], -1.0, 1.0, &mut r).unwrap();
        let p = rand_params(&mut r, 2, 2, 3);
        // Offsets with fractional parts near ±0.3 stay clear of kinks.
        let mut t = Tensor4::random_uniform([1, 18, 5, 6], -0.05, 0.05, &mut r).unwrap();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += if i % 3 == 0 { 0.3 } else { -0.3 } + (i % 5) as f64 - 2.0;
        }
        let off = OffsetField::new(t, (3, 3)).unwrap();
        let y = deform_conv2d_forward(&x, &p, &off).unwrap();
        let dy = Tensor4::random_uniform(y.dims(), -1.0, 1.0, &mut r).unwrap();
        let proj = |t: &Tensor4| t.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>();
        let g = deform_conv2d_backward(&x, &p, &off, &dy).unwrap();
        let h = 1e-6;

        let nx = numeric_gradient(|v| proj(&deform_conv2d_forward(v, &p, &off).unwrap()), &x, h).unwrap();
        assert!(relative_error(g.d_input.data(), nx.data(), 1e-12) < 1e-5);

        let nw = numeric_gradient(
            |v| {
                let mut q = p.clone();
                q.weight = v.clone();
                proj(&deform_conv2d_forward(&x, &q, &off).unwrap())
            },
            &p.weight,
            h,
        )
        .unwrap();
        assert!(relative_error(g.d_params[0].weight.data(), nw.data(), 1e-12) < 1e-5);

        let no = numeric_gradient(
            |v| proj(&deform_conv2d_forward(&x, &p, &OffsetField::new(v.clone(), (3, 3)).unwrap()).unwrap()),
            off.tensor(),
            h,
        )
        .unwrap();
        assert!(relative_error(g.d_aux.as_ref().unwrap().data(), no.data(), 1e-12) < 1e-5);
    }

    #[test]
    fn offset_conv_contract() {
        let mut r = rng(5);
        let x = Tensor4::random_uniform([1, 4, 8, 16], -1.0, 1.0, &mut r).unwrap();
        let zero = ConvParams::zeros(18, 4, 3, 3).unwrap();
        let off = offset_conv(&x, &zero, (3, 3)).unwrap();
        assert_eq!(off.tensor().dims(), [1, 18, 8, 16]);
        assert_eq!(off.tensor().max_abs(), 0.0);
        let p = rand_params(&mut r, 18, 4, 3);
        let off = offset_conv(&x, &p, (3, 3)).unwrap();
        assert!(off.tensor().is_finite());
        assert!(offset_conv(&x, &ConvParams::zeros(16, 4, 3, 3).unwrap(), (3, 3)).is_err());
    }

    #[test]
    fn offset_channel_mismatch_is_rejected() {
        assert!(OffsetField::new(Tensor4::zeros([1, 16, 4, 4]).unwrap(), (3, 3)).is_err());
        let x = Tensor4::zeros([1, 1, 4, 4]).unwrap();
        let p = ConvParams::zeros(1, 1, 3, 3).unwrap();
        let off = OffsetField::zeros(1, (3, 3), 3, 4).unwrap();
        assert!(deform_conv2d_forward(&x, &p, &off).is_err());
    }
}
