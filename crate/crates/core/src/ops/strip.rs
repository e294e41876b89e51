//! Strip pooling along rows/columns and the strip pooling module (SPM)
//! that gates its input with `sigmoid(f(y_h ⊕ y_v))`.

use crate::error::{shape_err, Result};
use crate::tensor::{sigmoid, Tensor4};

use super::conv::{conv2d_backward, conv2d_forward};
use super::{ConvParams, LayerGrads};

/// Reduction used inside a strip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StripMode {
    #[default]
    Max,
    Mean,
}

/// Index of the first maximum.
#[inline]
fn argmax(vals: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut at = 0;
    for (i, v) in vals.enumerate() {
        if i == 0 || v > best {
            best = v;
            at = i;
        }
    }
    at
}

/// Pools each row to one value: output `(n, c, h, 1)`.
pub fn strip_pool_h(x: &Tensor4, mode: StripMode) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros([n, c, h, 1]).expect("dims are positive");
    for b in 0..n {
        for ch in 0..c {
            let p = x.plane(b, ch);
            let o = out.plane_mut(b, ch);
            for i in 0..h {
                let row = &p[i * w..(i + 1) * w];
                o[i] = match mode {
                    StripMode::Max => row[argmax(row.iter().copied())],
                    StripMode::Mean => row.iter().sum::<f64>() / w as f64,
                };
            }
        }
    }
    out
}

/// Pools each column to one value: output `(n, c, 1, w)`.
pub fn strip_pool_v(x: &Tensor4, mode: StripMode) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros([n, c, 1, w]).expect("dims are positive");
    for b in 0..n {
        for ch in 0..c {
            let p = x.plane(b, ch);
            let o = out.plane_mut(b, ch);
            for j in 0..w {
                let col = (0..h).map(|i| p[i * w + j]);
                o[j] = match mode {
                    StripMode::Max => p[argmax(col) * w + j],
                    StripMode::Mean => col.sum::<f64>() / h as f64,
                };
            }
        }
    }
    out
}

pub fn strip_pool_h_backward(x: &Tensor4, d_out: &Tensor4, mode: StripMode) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    if d_out.dims() != [n, c, h, 1] {
        return shape_err(format!("d_out dims {:?}, expected {:?}", d_out.dims(), [n, c, h, 1]));
    }
    let mut dx = x.zeros_like();
    for b in 0..n {
        for ch in 0..c {
            let p = x.plane(b, ch);
            let g = d_out.plane(b, ch).to_vec();
            let d = dx.plane_mut(b, ch);
            for i in 0..h {
                match mode {
                    StripMode::Max => {
                        let j = argmax(p[i * w..(i + 1) * w].iter().copied());
                        d[i * w + j] += g[i];
                    }
                    StripMode::Mean => {
                        for v in &mut d[i * w..(i + 1) * w] {
                            *v += g[i] / w as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

pub fn strip_pool_v_backward(x: &Tensor4, d_out: &Tensor4, mode: StripMode) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    if d_out.dims() != [n, c, 1, w] {
        return shape_err(format!("d_out dims {:?}, expected {:?}", d_out.dims(), [n, c, 1, w]));
    }
    let mut dx = x.zeros_like();
    for b in 0..n {
        for ch in 0..c {
            let p = x.plane(b, ch);
            let g = d_out.plane(b, ch).to_vec();
            let d = dx.plane_mut(b, ch);
            for j in 0..w {
                match mode {
                    StripMode::Max => {
                        let i = argmax((0..h).map(|i| p[i * w + j]));
                        d[i * w + j] += g[j];
                    }
                    StripMode::Mean => {
                        for i in 0..h {
                            d[i * w + j] += g[j] / h as f64;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn check_fuse(x: &Tensor4, fuse: &ConvParams) -> Result<()> {
    let c = x.channels();
    if fuse.kernel() != (1, 1) || fuse.in_channels() != c || fuse.out_channels() != c {
        return shape_err(format!(
            "SPM fuse must be a 1x1 {c}->{c} convolution, got {:?}",
            fuse.weight.dims()
        ));
    }
    if fuse.stride != 1 || fuse.padding != (0, 0) {
        return shape_err("SPM fuse must use stride 1 without padding");
    }
    Ok(())
}

/// `y[c, i, j] = y_h[c, i] + y_v[c, j]`, expanded back to the input size.
fn strip_sum(x: &Tensor4, mode: StripMode) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let yh = strip_pool_h(x, mode);
    let yv = strip_pool_v(x, mode);
    let mut y = x.zeros_like();
    for b in 0..n {
        for ch in 0..c {
            let hp = yh.plane(b, ch).to_vec();
            let vp = yv.plane(b, ch).to_vec();
            let yp = y.plane_mut(b, ch);
            for i in 0..h {
                for j in 0..w {
                    yp[i * w + j] = hp[i] + vp[j];
                }
            }
        }
    }
    y
}

/// Gate activations `sigmoid(f(y))`, each strictly inside (0, 1) for
/// moderate pre-activations.
pub fn spm_gate(x: &Tensor4, fuse: &ConvParams, mode: StripMode) -> Result<Tensor4> {
    check_fuse(x, fuse)?;
    Ok(conv2d_forward(&strip_sum(x, mode), fuse)?.map(sigmoid))
}

pub fn spm_forward(x: &Tensor4, fuse: &ConvParams, mode: StripMode) -> Result<Tensor4> {
    let gate = spm_gate(x, fuse, mode)?;
    x.map_binary(&gate, |a, g| a * g)
}

pub fn spm_backward(x: &Tensor4, fuse: &ConvParams, mode: StripMode, d_out: &Tensor4) -> Result<LayerGrads> {
    check_fuse(x, fuse)?;
    x.same_dims(d_out, "spm_backward")?;
    let [n, c, h, w] = x.dims();
    let y = strip_sum(x, mode);
    let gate = conv2d_forward(&y, fuse)?.map(sigmoid);
    let mut dx = d_out.map_binary(&gate, |g, s| g * s)?;
    let mut d_pre = d_out.map_binary(x, |g, a| g * a)?;
    for (dp, s) in d_pre.data_mut().iter_mut().zip(gate.data()) {
        *dp *= s * (1.0 - s);
    }
    let conv = conv2d_backward(&y, fuse, &d_pre)?;
    let dy = &conv.d_input;
    let mut dyh = Tensor4::zeros([n, c, h, 1])?;
    let mut dyv = Tensor4::zeros([n, c, 1, w])?;
    for b in 0..n {
        for ch in 0..c {
            let g = dy.plane(b, ch);
            let dh = dyh.plane_mut(b, ch);
            for i in 0..h {
                dh[i] = g[i * w..(i + 1) * w].iter().sum();
            }
            let dv = dyv.plane_mut(b, ch);
            for j in 0..w {
                dv[j] = (0..h).map(|i| g[i * w + j]).sum();
            }
        }
    }
    dx.add_assign(&strip_pool_h_backward(x, &dyh, mode)?)?;
    dx.add_assign(&strip_pool_v_backward(x, &dyv, mode)?)?;
    Ok(LayerGrads {
        d_input: dx,
        d_params: conv.d_params,
        d_aux: None,
    })
}
