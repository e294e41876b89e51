//! Finite-difference verification of every backward pass.
//!
//! Each case draws random inputs (kept away from max ties, bilinear kinks and
//! the Berhu switch point), projects the output onto a random cotangent `r`
//! and compares the analytic gradient of `Σ r ⊙ op(x)` against central
//! differences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::spherical_weight_matrix;
use crate::loss::{berhu_threshold_slices, berhu_value, weighted_berhu_slices, LossReduction};
use crate::model::{backward, build, forward, DamoConfig, ModelState};
use crate::ops::{
    conv2d_backward, conv2d_forward, deform_conv2d_backward, deform_conv2d_forward, maxpool2,
    maxpool2_backward, rect_filter_bank, rect_filter_bank_backward, relu, relu_backward,
    spm_backward, spm_forward, strip_pool_h, strip_pool_h_backward, strip_pool_v,
    strip_pool_v_backward, upsample_nn2, upsample_nn2_backward, ConvParams, OffsetField,
    StripMode,
};
use crate::tensor::{numeric_gradient, numeric_partials, relative_error, Tensor4};

pub const FD_STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_CASES: usize = 20;
/// Denominator floor for the norm-wise relative error.
const ERR_FLOOR: f64 = 1e-8;

pub const OPS: &[&str] = &[
    "conv2d",
    "deform_conv2d",
    "strip_pool_h",
    "strip_pool_v",
    "spm",
    "maxpool2",
    "upsample_nn2",
    "relu",
    "rect_filter_bank",
    "berhu",
    "weighted_berhu",
    "network",
];

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub cases: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tolerance
    }
}

/// Pairs of (analytic, numeric) gradient blocks for one case.
type Blocks = Vec<(Vec<f64>, Vec<f64>)>;

fn dot(a: &Tensor4, r: &Tensor4) -> f64 {
    a.data().iter().zip(r.data()).map(|(x, y)| x * y).sum()
}

fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
    Tensor4::random_uniform(dims, -1.0, 1.0, rng).expect("positive dims")
}

/// Shuffled, well-separated values so finite differences never reorder them.
fn distinct(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05 + rng.random_range(0.0..0.01)).collect();
    v.shuffle(rng);
    Tensor4::from_vec(dims, v).expect("matching length")
}

fn random_conv(rng: &mut ChaCha8Rng, out: usize, inp: usize, kh: usize, kw: usize, stride: usize, padding: (usize, usize), dilation: usize) -> ConvParams {
    let w = uniform(rng, [out, inp, kh, kw]);
    let b = (0..out).map(|_| rng.random_range(-0.5..0.5)).collect();
    ConvParams::new(w, b, stride, padding, dilation).expect("valid geometry")
}

/// Gradients of `Σ r ⊙ f(x)` w.r.t. `x` by central differences.
fn fd_input(f: impl Fn(&Tensor4) -> Tensor4, x: &Tensor4, r: &Tensor4) -> Result<Vec<f64>> {
    Ok(numeric_gradient(|t| dot(&f(t), r), x, FD_STEP)?.into_vec())
}

fn fd_params(f: impl Fn(&ConvParams) -> Tensor4, p: &ConvParams, r: &Tensor4) -> Result<(Vec<f64>, Vec<f64>)> {
    let dw = numeric_gradient(
        |w| {
            let mut q = p.clone();
            q.weight = w.clone();
            dot(&f(&q), r)
        },
        &p.weight,
        FD_STEP,
    )?;
    let bias = Tensor4::from_vec([1, 1, 1, p.bias.len()], p.bias.clone())?;
    let db = numeric_gradient(
        |b| {
            let mut q = p.clone();
            q.bias = b.data().to_vec();
            dot(&f(&q), r)
        },
        &bias,
        FD_STEP,
    )?;
    Ok((dw.into_vec(), db.into_vec()))
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<Blocks> {
    let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let (s, d) = (rng.random_range(1..=2), rng.random_range(1..=2));
    let pad = (rng.random_range(0..=1), rng.random_range(0..=1));
    let (h, w) = (rng.random_range(5..=7), rng.random_range(5..=8));
    let x = uniform(rng, [n, ci, h, w]);
    let p = random_conv(rng, co, ci, kh, kw, s, pad, d);
    let r = uniform(rng, p.output_dims(x.dims())?);
    let g = conv2d_backward(&x, &p, &r)?;
    let dx = fd_input(|t| conv2d_forward(t, &p).expect("shapes"), &x, &r)?;
    let (dw, db) = fd_params(|q| conv2d_forward(&x, q).expect("shapes"), &p, &r)?;
    let gp = &g.d_params[0];
    Ok(vec![(g.d_input.into_vec(), dx), (gp.weight.data().to_vec(), dw), (gp.bias.clone(), db)])
}

/// Offsets whose fractional parts stay in ±[0.2, 0.8], away from integer kinks.
fn smooth_offsets(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
    let n: usize = dims.iter().product();
    let v = (0..n)
        .map(|_| {
            let whole = rng.random_range(-1..=1) as f64;
            let frac = rng.random_range(0.2..0.8);
            whole + if rng.random_bool(0.5) { frac } else { -frac }
        })
        .collect();
    Tensor4::from_vec(dims, v).expect("matching length")
}

fn case_deform(rng: &mut ChaCha8Rng) -> Result<Blocks> {
    let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(4..=6), rng.random_range(4..=7));
    let k = if rng.random_bool(0.5) { (3, 3) } else { (1, 3) };
    let x = uniform(rng, [n, ci, h, w]);
    let p = random_conv(rng, co, ci, k.0, k.1, 1, ((k.0 - 1) / 2, (k.1 - 1) / 2), 1);
    let od = p.output_dims(x.dims())?;
    let off = OffsetField::new(smooth_offsets(rng, [n, 2 * k.0 * k.1, od[2], od[3]]), k)?;
    let r = uniform(rng, od);
    let g = deform_conv2d_backward(&x, &p, &off, &r)?;
    let dx = fd_input(|t| deform_conv2d_forward(t, &p, &off).expect("shapes"), &x, &r)?;
    let (dw, db) = fd_params(|q| deform_conv2d_forward(&x, q, &off).expect("shapes"), &p, &r)?;
    let doff = fd_input(
        |o| deform_conv2d_forward(&x, &p, &OffsetField::new(o.clone(), k).expect("channels")).expect("shapes"),
        off.tensor(),
        &r,
    )?;
    let gp = &g.d_params[0];
    Ok(vec![
        (g.d_input.into_vec(), dx),
        (gp.weight.data().to_vec(), dw),
        (gp.bias.clone(), db),
        (g.d_aux.expect("offset gradient").into_vec(), doff),
    ])
}

fn small_dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=5), rng.random_range(2..=6)]
}

fn case_strip(rng: &mut ChaCha8Rng, horizontal: bool) -> Result<Blocks> {
    let mode = if rng.random_bool(0.75) { StripMode::Max } else { StripMode::Mean };
    let dims = small_dims(rng);
    let x = distinct(rng, dims);
    let fwd = |t: &Tensor4| if horizontal { strip_pool_h(t, mode) } else { strip_pool_v(t, mode) };
    let r = uniform(rng, fwd(&x).dims());
    let g = if horizontal {
        strip_pool_h_backward(&x, &r, mode)?
    } else {
        strip_pool_v_backward(&x, &r, mode)?
    };
    Ok(vec![(g.into_vec(), fd_input(fwd, &x, &r)?)])
}

fn case_spm(rng: &mut ChaCha8Rng) -> Result<Blocks> {
    let mode = if rng.random_bool(0.75) { StripMode::Max } else { StripMode::Mean };
    let dims = small_dims(rng);
    let x = distinct(rng, dims);
    let c = x.channels();
    let p = random_conv(rng, c, c, 1, 1, 1, (0, 0), 1);
    let r = uniform(rng, x.dims());
    let g = spm_backward(&x, &p, mode, &r)?;
    let dx = fd_input(|t| spm_forward(t, &p, mode).expect("shapes"), &x, &r)?;
    let (dw, db) = fd_params(|q| spm_forward(&x, q, mode).expect("shapes"), &p, &r)?;
    let gp = &g.d_params[0];
    Ok(vec![(g.d_input.into_vec(), dx), (gp.weight.data().to_vec(), dw), (gp.bias.clone(), db)])
}

fn case_maxpool(rng: &mut ChaCha8Rng) -> Result<Blocks> {
    let [n, c, h, w] = small_dims(rng);
    let x = distinct(rng, [n, c, 2 * h, 2 * w]);
    let r = uniform(rng, [n, c, h, w]);
    let g = maxpool2_backward(&x, &r)?;
    Ok(vec![(g.into_vec(), fd_input(|t| maxpool2(t).expect("even dims"), &x, &r)?)])
}

fn case_upsample(rng: &mut ChaCha8Rng) -> Result<Blocks> {
    let dims = small_dims(rng);
    let x = uniform(rng, dims);
    let r = uniform(rng, upsample_nn2(&x).dims());
    let g = upsample_nn2_backward(&r)?;
    Ok(vec![(g.into_vec(), fd_input(upsample_nn2, &x, &r)?)])
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<Blocks> {
    let dims = small_dims(rng);
    let x = uniform(rng, dims).map(|v| if v.abs() < 0.01 { v + 0.02_f64.copysign(v) } else { v });
    let r = uniform(rng, x.dims());
    let g = relu_backward(&x, &r)?;
    Ok(vec![(g.into_vec(), fd_input(relu, &x, &r)?)])
}

fn case_bank(rng: &mut ChaCha8Rng) -> Result<Blocks> {
    let (n, ci) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(3..=6), rng.random_range(5..=9));
    let x = uniform(rng, [n, ci, h, w]);
    let a = rng.random_range(1..=3);
    let b = rng.random_range(1..=3);
    let banks = vec![
        random_conv(rng, a, ci, 3, 5, 1, (1, 2), 1),
        random_conv(rng, b, ci, 3, 3, 1, (1, 1), 1),
    ];
    let r = uniform(rng, [n, a + b, x.height(), x.width()]);
    let g = rect_filter_bank_backward(&x, &banks, &r)?;
    let mut blocks = vec![(g.d_input.into_vec(), fd_input(|t| rect_filter_bank(t, &banks).expect("shapes"), &x, &r)?)];
    for (i, gp) in g.d_params.iter().enumerate() {
        let (dw, db) = fd_params(
            |q| {
                let mut bs = banks.clone();
                bs[i] = q.clone();
                rect_filter_bank(&x, &bs).expect("shapes")
            },
            &banks[i],
            &r,
        )?;
        blocks.push((gp.weight.data().to_vec(), dw));
        blocks.push((gp.bias.clone(), db));
    }
    Ok(blocks)
}

fn case_berhu(rng: &mut ChaCha8Rng, weighted: bool) -> Result<Blocks> {
    let h = rng.random_range(2..=6);
    let w = 2 * h;
    let n = h * w;
    let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..5.0)).collect();
    let mut mask: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.85) { 1.0 } else { 0.0 }).collect();
    mask[0] = 1.0;
    let mut pred: Vec<f64> = gt.iter().map(|g| g + rng.random_range(-2.0..2.0)).collect();
    let tau = berhu_threshold_slices(&pred, &gt, &mask)?;
    // Keep residuals clear of 0 and of the switch point.
    for i in 0..n {
        let r = pred[i] - gt[i];
        if r.abs() < 1e-3 || (r.abs() - tau).abs() < 1e-3 {
            pred[i] += 3e-3 * if r >= 0.0 { 1.0 } else { -1.0 };
        }
    }
    let tau = berhu_threshold_slices(&pred, &gt, &mask)?;
    let wm = spherical_weight_matrix(h, w, false)?;
    let weight = |i: usize| if weighted { wm.grid().data()[i] } else { 1.0 };
    let reduction = if weighted && rng.random_bool(0.3) { LossReduction::Sum } else { LossReduction::WeightedMean };
    let (_, grad) = weighted_berhu_slices(&pred, &gt, &mask, weight, reduction)?;
    // The switch point is held fixed while differentiating.
    let frozen = |t: &Tensor4| {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            if mask[i] == 1.0 {
                num += weight(i) * berhu_value(t.data()[i] - gt[i], tau);
                den += weight(i);
            }
        }
        match reduction {
            LossReduction::WeightedMean => num / den,
            LossReduction::Sum => num,
        }
    };
    let x = Tensor4::from_vec([1, 1, h, w], pred)?;
    let num = numeric_gradient(frozen, &x, FD_STEP)?;
    Ok(vec![(grad, num.into_vec())])
}

fn network_model(rng: &mut ChaCha8Rng) -> Result<ModelState> {
    let cfg = DamoConfig {
        channels: vec![4, 6, 8, 8],
        spm_stack_all: rng.random_bool(0.5),
        ..DamoConfig::new(8, rng.random())
    };
    let mut m = build(&cfg)?;
    for l in m.layers_mut() {
        if l.name.ends_with(".offset") {
            for v in l.params.weight.data_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
            for v in &mut l.params.bias {
                *v = rng.random_range(0.2..0.45) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
    }
    Ok(m)
}

fn case_network(rng: &mut ChaCha8Rng) -> Result<Blocks> {
    let m = network_model(rng)?;
    let x = Tensor4::random_uniform([1, 3, 8, 16], 0.0, 1.0, rng)?;
    let (y, cache) = forward(&m, &x)?;
    let r = uniform(rng, y.dims());
    let grads = backward(&m, &cache, &r)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (li, layer) in m.layers().iter().enumerate() {
        let idx: Vec<usize> = (0..2).map(|_| rng.random_range(0..layer.params.weight.len())).collect();
        let num = numeric_partials(
            |w| {
                let mut p = m.clone();
                p.layers_mut()[li].params.weight = w.clone();
                dot(&forward(&p, &x).expect("shapes").0, &r)
            },
            &layer.params.weight,
            &idx,
            FD_STEP,
        )?;
        for (k, v) in idx.iter().zip(num) {
            analytic.push(grads.layers[li].weight.data()[*k]);
            numeric.push(v);
        }
    }
    Ok(vec![(analytic, numeric)])
}

fn run_case(op: &str, rng: &mut ChaCha8Rng) -> Result<Blocks> {
    match op {
        "conv2d" => case_conv2d(rng),
        "deform_conv2d" => case_deform(rng),
        "strip_pool_h" => case_strip(rng, true),
        "strip_pool_v" => case_strip(rng, false),
        "spm" => case_spm(rng),
        "maxpool2" => case_maxpool(rng),
        "upsample_nn2" => case_upsample(rng),
        "relu" => case_relu(rng),
        "rect_filter_bank" => case_bank(rng),
        "berhu" => case_berhu(rng, false),
        "weighted_berhu" => case_berhu(rng, true),
        "network" => case_network(rng),
        _ => Err(Error::Usage(format!("unknown op {op:?}; known ops: {}", OPS.join(", ")))),
    }
}

/// Checks one op over `cases` seeded cases. With `flip_sign` the analytic
/// gradient is negated, which must make the check fail.
pub fn check_op(op: &str, seed: u64, cases: usize, flip_sign: bool) -> Result<OpReport> {
    let op_index = OPS
        .iter()
        .position(|&o| o == op)
        .ok_or_else(|| Error::Usage(format!("unknown op {op:?}; known ops: {}", OPS.join(", "))))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(op_index as u64));
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        for (mut a, n) in run_case(op, &mut rng)? {
            if flip_sign {
                a.iter_mut().for_each(|v| *v = -*v);
            }
            let err = relative_error(&a, &n, ERR_FLOOR);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
    }
    let tolerance = if op == "network" { NETWORK_TOLERANCE } else { OP_TOLERANCE };
    Ok(OpReport { op: op.to_string(), cases, worst_rel_err: worst, tolerance })
}

/// Runs all registered ops, or just `only`.
pub fn run(seed: u64, only: Option<&str>, cases: usize, flip_sign: bool) -> Result<Vec<OpReport>> {
    match only {
        Some(op) => Ok(vec![check_op(op, seed, cases, flip_sign)?]),
        None => OPS.iter().map(|op| check_op(op, seed, cases, flip_sign)).collect(),
    }
}
