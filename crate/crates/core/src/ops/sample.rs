//! Bilinear sampling with zero padding outside the image.
//!
//! The interpolation kernel `g(a, b) = max(0, 1 - |a - b|)` has kinks at
//! integer distances. At those points the derivative is taken from the left
//! (approaching from smaller coordinates), which amounts to anchoring the
//! lower corner at `ceil(p) - 1` instead of `floor(p)`.

use crate::tensor::Tensor4;

/// Lower corner index and the fractional weight of the upper corner, in
/// `(0, 1]` for the left-derivative convention.
#[inline]
fn anchor(p: f64) -> (isize, f64) {
    let lo = p.ceil() - 1.0;
    (lo as isize, p - lo)
}

/// Corner taps of one bilinear sample: up to four (linear index, weight)
/// pairs plus the partial derivatives of the weights with respect to the
/// row and column coordinates.
#[derive(Clone, Copy, Debug, Default)]
pub(super) struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
    pub dw_r: [f64; 4],
    pub dw_c: [f64; 4],
    pub valid: [bool; 4],
}

impl Taps {
    #[inline]
    pub fn value(&self, plane: &[f64]) -> f64 {
        let mut v = 0.0;
        for k in 0..4 {
            if self.valid[k] {
                v += self.w[k] * plane[self.idx[k]];
            }
        }
        v
    }
}

#[inline]
pub(super) fn taps(h: usize, w: usize, pr: f64, pc: f64) -> Taps {
    let (r0, tr) = anchor(pr);
    let (c0, tc) = anchor(pc);
    let mut t = Taps::default();
    let corners = [
        (r0, c0, (1.0 - tr) * (1.0 - tc), -(1.0 - tc), -(1.0 - tr)),
        (r0, c0 + 1, (1.0 - tr) * tc, -tc, 1.0 - tr),
        (r0 + 1, c0, tr * (1.0 - tc), 1.0 - tc, -tr),
        (r0 + 1, c0 + 1, tr * tc, tc, tr),
    ];
    for (k, &(r, c, wt, dr, dc)) in corners.iter().enumerate() {
        if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
            t.idx[k] = r as usize * w + c as usize;
            t.w[k] = wt;
            t.dw_r[k] = dr;
            t.dw_c[k] = dc;
            t.valid[k] = true;
        }
    }
    t
}

/// Interpolated value of `x[n, c]` at fractional (row, col); zero outside.
pub fn bilinear_sample(x: &Tensor4, n: usize, c: usize, pr: f64, pc: f64) -> f64 {
    taps(x.height(), x.width(), pr, pc).value(x.plane(n, c))
}

/// Value and partial derivatives `(v, dv/drow, dv/dcol)`.
pub fn bilinear_sample_grad(x: &Tensor4, n: usize, c: usize, pr: f64, pc: f64) -> (f64, f64, f64) {
    let plane = x.plane(n, c);
    let t = taps(x.height(), x.width(), pr, pc);
    let (mut dr, mut dc) = (0.0, 0.0);
    for k in 0..4 {
        if t.valid[k] {
            dr += t.dw_r[k] * plane[t.idx[k]];
            dc += t.dw_c[k] * plane[t.idx[k]];
        }
    }
    (t.value(plane), dr, dc)
}
