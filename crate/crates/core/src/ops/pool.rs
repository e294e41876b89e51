use crate::error::{shape_err, Result};
use crate::tensor::Tensor4;

/// 2×2 max pooling with stride 2.
pub fn maxpool2(x: &Tensor4) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("maxpool2 needs even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow])?;
    for b in 0..n {
        for ch in 0..c {
            let p = x.plane(b, ch);
            let o = out.plane_mut(b, ch);
            for i in 0..oh {
                for j in 0..ow {
                    o[i * ow + j] = p[window_argmax(p, w, i, j)];
                }
            }
        }
    }
    Ok(out)
}

/// Linear index of the first maximum of window (i, j), scanning row-major.
#[inline]
fn window_argmax(p: &[f64], w: usize, i: usize, j: usize) -> usize {
    let base = 2 * i * w + 2 * j;
    let mut best = base;
    for idx in [base + 1, base + w, base + w + 1] {
        if p[idx] > p[best] {
            best = idx;
        }
    }
    best
}

pub fn maxpool2_backward(x: &Tensor4, d_out: &Tensor4) -> Result<Tensor4> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 || d_out.dims() != [n, c, h / 2, w / 2] {
        return shape_err(format!(
            "maxpool2_backward: d_out {:?} does not match input {:?}",
            d_out.dims(),
            x.dims()
        ));
    }
    let ow = w / 2;
    let mut dx = x.zeros_like();
    for b in 0..n {
        for ch in 0..c {
            let p = x.plane(b, ch);
            let g = d_out.plane(b, ch);
            let d = dx.plane_mut(b, ch);
            for (l, &gv) in g.iter().enumerate() {
                d[window_argmax(p, w, l / ow, l % ow)] += gv;
            }
        }
    }
    Ok(dx)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_nn2(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.dims();
    let mut out = Tensor4::zeros([n, c, 2 * h, 2 * w]).expect("dims are positive");
    for b in 0..n {
        for ch in 0..c {
            let p = x.plane(b, ch);
            let o = out.plane_mut(b, ch);
            for i in 0..2 * h {
                for j in 0..2 * w {
                    o[i * 2 * w + j] = p[(i / 2) * w + j / 2];
                }
            }
        }
    }
    out
}

pub fn upsample_nn2_backward(d_out: &Tensor4) -> Result<Tensor4> {
    let [n, c, h2, w2] = d_out.dims();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return shape_err(format!("upsample gradient has odd dims {h2}x{w2}"));
    }
    let w = w2 / 2;
    let mut dx = Tensor4::zeros([n, c, h2 / 2, w])?;
    for b in 0..n {
        for ch in 0..c {
            let g = d_out.plane(b, ch);
            let d = dx.plane_mut(b, ch);
            for i in 0..h2 {
                for j in 0..w2 {
                    d[(i / 2) * w + j / 2] += g[i * w2 + j];
                }
            }
        }
    }
    Ok(dx)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Subgradient 0 at `x == 0`.
pub fn relu_backward(x: &Tensor4, d_out: &Tensor4) -> Result<Tensor4> {
    x.map_binary(d_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{numeric_gradient, relative_error, Reduction};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxpool_and_upsample_examples() {
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&x).unwrap().data(), &[4.0]);
        let five = Tensor4::from_vec([1, 1, 1, 1], vec![5.0]).unwrap();
        assert_eq!(upsample_nn2(&five).data(), &[5.0; 4]);
        assert!(maxpool2(&Tensor4::zeros([1, 1, 3, 2]).unwrap()).is_err());
    }

    #[test]
    fn maxpool_backward_matches_oracle_on_distinct_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut vals: Vec<f64> = (0..2 * 3 * 4 * 6).map(|i| i as f64 * 0.1).collect();
        vals.shuffle(&mut rng);
        let x = Tensor4::from_vec([2, 3, 4, 6], vals).unwrap();
        let dy = Tensor4::random_uniform([2, 3, 2, 3], -1.0, 1.0, &mut rng).unwrap();
        let proj = |t: &Tensor4| maxpool2(t).unwrap().data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>();
        let g = maxpool2_backward(&x, &dy).unwrap();
        let num = numeric_gradient(proj, &x, 1e-6).unwrap();
        assert!(relative_error(g.data(), num.data(), 1e-12) < 1e-8);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let g = Tensor4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(upsample_nn2_backward(&g).unwrap().data(), &[10.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor4::random_uniform([1, 2, 3, 2], -1.0, 1.0, &mut rng).unwrap();
        let num = numeric_gradient(|t| upsample_nn2(t).reduce(Reduction::Sum), &x, 1e-6).unwrap();
        let g = upsample_nn2_backward(&Tensor4::new_filled([1, 2, 6, 4], 1.0).unwrap()).unwrap();
        assert!(relative_error(g.data(), num.data(), 1e-12) < 1e-8);
    }

    #[test]
    fn relu_cases() {
        let x = Tensor4::from_vec([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&relu(&x)), relu(&x));
        let g = relu_backward(&x, &Tensor4::new_filled([1, 1, 1, 3], 1.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }
}
