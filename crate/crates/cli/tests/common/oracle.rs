//! Naive reference implementations over flat NCHW vectors. They share no code
//! with the library and favour obviousness over speed.

pub fn idx(d: [usize; 4], n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * d[1] + c) * d[2] + h) * d[3] + w
}

pub struct Conv<'a> {
    pub w: &'a [f64],
    pub wd: [usize; 4],
    pub b: &'a [f64],
    pub stride: usize,
    pub pad: (usize, usize),
    pub dil: usize,
}

impl Conv<'_> {
    pub fn out_dims(&self, xd: [usize; 4]) -> [usize; 4] {
        let span_h = self.dil * (self.wd[2] - 1) + 1;
        let span_w = self.dil * (self.wd[3] - 1) + 1;
        let oh = (xd[2] + 2 * self.pad.0 - span_h) / self.stride + 1;
        let ow = (xd[3] + 2 * self.pad.1 - span_w) / self.stride + 1;
        [xd[0], self.wd[0], oh, ow]
    }
}

fn read_padded(x: &[f64], xd: [usize; 4], n: usize, c: usize, r: isize, q: isize) -> f64 {
    if r < 0 || q < 0 || r >= xd[2] as isize || q >= xd[3] as isize {
        0.0
    } else {
        x[idx(xd, n, c, r as usize, q as usize)]
    }
}

pub fn conv2d(x: &[f64], xd: [usize; 4], p: &Conv) -> (Vec<f64>, [usize; 4]) {
    let od = p.out_dims(xd);
    let mut out = vec![0.0; od.iter().product()];
    for n in 0..od[0] {
        for o in 0..od[1] {
            for i in 0..od[2] {
                for j in 0..od[3] {
                    let mut acc = p.b[o];
                    for c in 0..xd[1] {
                        for ki in 0..p.wd[2] {
                            for kj in 0..p.wd[3] {
                                let r = (i * p.stride + ki * p.dil) as isize - p.pad.0 as isize;
                                let q = (j * p.stride + kj * p.dil) as isize - p.pad.1 as isize;
                                acc += p.w[idx(p.wd, o, c, ki, kj)] * read_padded(x, xd, n, c, r, q);
                            }
                        }
                    }
                    out[idx(od, n, o, i, j)] = acc;
                }
            }
        }
    }
    (out, od)
}

/// Bilinear read at a real position, summing the hat kernel over every pixel.
pub fn bilinear(x: &[f64], xd: [usize; 4], n: usize, c: usize, pr: f64, pc: f64) -> f64 {
    let mut v = 0.0;
    for r in 0..xd[2] {
        for q in 0..xd[3] {
            let g = (1.0 - (pr - r as f64).abs()).max(0.0) * (1.0 - (pc - q as f64).abs()).max(0.0);
            v += g * x[idx(xd, n, c, r, q)];
        }
    }
    v
}

/// Offsets laid out `(n, 2K, oh, ow)`, channel `2k` row and `2k+1` column.
pub fn deform_conv2d(x: &[f64], xd: [usize; 4], p: &Conv, off: &[f64]) -> (Vec<f64>, [usize; 4]) {
    let od = p.out_dims(xd);
    let kk = p.wd[2] * p.wd[3];
    let offd = [od[0], 2 * kk, od[2], od[3]];
    let mut out = vec![0.0; od.iter().product()];
    for n in 0..od[0] {
        for o in 0..od[1] {
            for i in 0..od[2] {
                for j in 0..od[3] {
                    let mut acc = p.b[o];
                    for c in 0..xd[1] {
                        for ki in 0..p.wd[2] {
                            for kj in 0..p.wd[3] {
                                let k = ki * p.wd[3] + kj;
                                let base_r = (i * p.stride + ki * p.dil) as f64 - p.pad.0 as f64;
                                let base_c = (j * p.stride + kj * p.dil) as f64 - p.pad.1 as f64;
                                let pr = base_r + off[idx(offd, n, 2 * k, i, j)];
                                let pc = base_c + off[idx(offd, n, 2 * k + 1, i, j)];
                                acc += p.w[idx(p.wd, o, c, ki, kj)] * bilinear(x, xd, n, c, pr, pc);
                            }
                        }
                    }
                    out[idx(od, n, o, i, j)] = acc;
                }
            }
        }
    }
    (out, od)
}

pub fn strip_h(x: &[f64], xd: [usize; 4], mean: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..xd[0] {
        for c in 0..xd[1] {
            for i in 0..xd[2] {
                let row: Vec<f64> = (0..xd[3]).map(|j| x[idx(xd, n, c, i, j)]).collect();
                out.push(if mean {
                    row.iter().sum::<f64>() / row.len() as f64
                } else {
                    row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                });
            }
        }
    }
    out
}

pub fn strip_v(x: &[f64], xd: [usize; 4], mean: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..xd[0] {
        for c in 0..xd[1] {
            for j in 0..xd[3] {
                let col: Vec<f64> = (0..xd[2]).map(|i| x[idx(xd, n, c, i, j)]).collect();
                out.push(if mean {
                    col.iter().sum::<f64>() / col.len() as f64
                } else {
                    col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                });
            }
        }
    }
    out
}

pub fn spm(x: &[f64], xd: [usize; 4], fw: &[f64], fb: &[f64], mean: bool) -> Vec<f64> {
    let yh = strip_h(x, xd, mean);
    let yv = strip_v(x, xd, mean);
    let c = xd[1];
    let mut out = vec![0.0; x.len()];
    for n in 0..xd[0] {
        for o in 0..c {
            for i in 0..xd[2] {
                for j in 0..xd[3] {
                    let mut pre = fb[o];
                    for ci in 0..c {
                        let y = yh[(n * c + ci) * xd[2] + i] + yv[(n * c + ci) * xd[3] + j];
                        pre += fw[o * c + ci] * y;
                    }
                    let gate = 1.0 / (1.0 + (-pre).exp());
                    let k = idx(xd, n, o, i, j);
                    out[k] = x[k] * gate;
                }
            }
        }
    }
    out
}

pub fn maxpool2(x: &[f64], xd: [usize; 4]) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..xd[0] {
        for c in 0..xd[1] {
            for i in 0..xd[2] / 2 {
                for j in 0..xd[3] / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for a in 0..2 {
                        for b in 0..2 {
                            m = m.max(x[idx(xd, n, c, 2 * i + a, 2 * j + b)]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

pub fn upsample2(x: &[f64], xd: [usize; 4]) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..xd[0] {
        for c in 0..xd[1] {
            for i in 0..2 * xd[2] {
                for j in 0..2 * xd[3] {
                    out.push(x[idx(xd, n, c, i / 2, j / 2)]);
                }
            }
        }
    }
    out
}

/// Weighted Berhu with the switch point at a fifth of the largest valid error.
pub fn berhu(pred: &[f64], gt: &[f64], mask: &[f64], weight: &[f64]) -> f64 {
    let mut max_err: f64 = 0.0;
    for i in 0..pred.len() {
        if mask[i] == 1.0 {
            max_err = max_err.max((pred[i] - gt[i]).abs());
        }
    }
    let tau = 0.2 * max_err;
    if tau == 0.0 {
        return 0.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..pred.len() {
        if mask[i] == 1.0 {
            let a = (pred[i] - gt[i]).abs();
            let l = if a <= tau { a } else { (a * a + tau * tau) / (2.0 * tau) };
            num += weight[i] * l;
            den += weight[i];
        }
    }
    num / den
}

/// `[rmse, abs_rel, rmse_log, d1, d2, d3]` after optional median scaling.
pub fn metrics(pred: &[f64], gt: &[f64], median: bool) -> [f64; 6] {
    let med = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s[(s.len() - 1) / 2]
    };
    let s = if median { med(gt) / med(pred) } else { 1.0 };
    let n = pred.len() as f64;
    let mut m = [0.0; 6];
    for (&p0, &g) in pred.iter().zip(gt) {
        let p = p0 * s;
        m[0] += (p - g).powi(2);
        m[1] += (p - g).abs() / g;
        m[2] += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        m[3] += (ratio < 1.25) as u8 as f64;
        m[4] += (ratio < 1.25 * 1.25) as u8 as f64;
        m[5] += (ratio < 1.25 * 1.25 * 1.25) as u8 as f64;
    }
    [(m[0] / n).sqrt(), m[1] / n, (m[2] / n).sqrt(), m[3] / n, m[4] / n, m[5] / n]
}
