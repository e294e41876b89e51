//! Reverse Huber (Berhu) loss and its latitude-weighted variant.
//!
//! The switch point `tau` is 20% of the largest absolute residual over all
//! valid pixels of the batch, and is held constant when differentiating.

use crate::error::{shape_err, Error, Result};
use crate::geometry::WeightMatrix;
use crate::tensor::{Tensor2, Tensor4};

/// Fraction of the largest residual used as the L1/L2 switch point.
pub const TAU_FRACTION: f64 = 0.2;

/// Depth in meters plus a {0, 1} validity mask of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub depth: Tensor2,
    pub mask: Tensor2,
}

impl DepthMap {
    pub fn new(depth: Tensor2, mask: Tensor2) -> Result<Self> {
        if depth.dims() != mask.dims() {
            return shape_err(format!(
                "depth {:?} and mask {:?} differ",
                depth.dims(),
                mask.dims()
            ));
        }
        check_mask(&mask)?;
        Ok(Self { depth, mask })
    }

    /// Every pixel valid.
    pub fn dense(depth: Tensor2) -> Self {
        let mask = depth.map(|_| 1.0);
        Self { depth, mask }
    }
}

fn check_mask(mask: &Tensor2) -> Result<()> {
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Domain("mask entries must be 0 or 1".into()));
    }
    Ok(())
}

/// Prediction, ground truth and validity mask over one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDepthPair {
    pred: Tensor2,
    gt: Tensor2,
    mask: Tensor2,
}

impl MaskedDepthPair {
    pub fn new(pred: Tensor2, gt: Tensor2, mask: Tensor2) -> Result<Self> {
        if pred.dims() != gt.dims() || gt.dims() != mask.dims() {
            return shape_err(format!(
                "pred {:?}, gt {:?} and mask {:?} must share dims",
                pred.dims(),
                gt.dims(),
                mask.dims()
            ));
        }
        check_mask(&mask)?;
        if gt
            .data()
            .iter()
            .zip(mask.data())
            .any(|(&g, &m)| m == 1.0 && !(g > 0.0 && g.is_finite()))
        {
            return Err(Error::Domain("ground truth must be positive under the mask".into()));
        }
        Ok(Self { pred, gt, mask })
    }

    pub fn from_depth(pred: Tensor2, target: &DepthMap) -> Result<Self> {
        Self::new(pred, target.depth.clone(), target.mask.clone())
    }

    pub fn pred(&self) -> &Tensor2 {
        &self.pred
    }

    pub fn gt(&self) -> &Tensor2 {
        &self.gt
    }

    pub fn mask(&self) -> &Tensor2 {
        &self.mask
    }

    pub fn dims(&self) -> [usize; 2] {
        self.gt.dims()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }

    pub(crate) fn with_pred(&self, pred: Tensor2) -> Self {
        Self {
            pred,
            gt: self.gt.clone(),
            mask: self.mask.clone(),
        }
    }
}

/// How the per-pixel weighted terms are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossReduction {
    /// `Σ W·L·m / Σ W·m`; uniform weights reproduce the plain mean.
    #[default]
    WeightedMean,
    /// `Σ W·L·m`.
    Sum,
}

/// Loss value and gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub d_pred: Tensor2,
}

/// Per-pixel Berhu of residual `r` with switch point `tau > 0`.
#[inline]
pub fn berhu_value(r: f64, tau: f64) -> f64 {
    let a = r.abs();
    if a <= tau {
        a
    } else {
        quadratic_branch(a, tau)
    }
}

/// Quadratic branch for `a = |r|`: `(a² + tau²) / (2 tau)` rewritten as
/// `a + (a - tau)² / (2 tau)`, which evaluates to exactly `tau` at `a == tau`.
#[inline]
pub fn quadratic_branch(a: f64, tau: f64) -> f64 {
    let d = a - tau;
    a + d * d / (2.0 * tau)
}

#[inline]
pub fn berhu_derivative(r: f64, tau: f64) -> f64 {
    if r.abs() <= tau {
        if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        r / tau
    }
}

/// Switch point over the valid entries of flat prediction/target slices.
pub fn berhu_threshold_slices(pred: &[f64], gt: &[f64], mask: &[f64]) -> Result<f64> {
    let mut max_err = None::<f64>;
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if m == 1.0 {
            let e = (p - g).abs();
            max_err = Some(max_err.map_or(e, |cur| cur.max(e)));
        }
    }
    max_err
        .map(|e| TAU_FRACTION * e)
        .ok_or_else(|| Error::Degenerate("mask selects no pixels".into()))
}

pub fn berhu_threshold(pair: &MaskedDepthPair) -> Result<f64> {
    berhu_threshold_slices(pair.pred.data(), pair.gt.data(), pair.mask.data())
}

/// Weighted Berhu over flat slices; `weight(i)` gives the weight of entry `i`.
pub fn weighted_berhu_slices(
    pred: &[f64],
    gt: &[f64],
    mask: &[f64],
    weight: impl Fn(usize) -> f64,
    reduction: LossReduction,
) -> Result<(f64, Vec<f64>)> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return shape_err("pred, gt and mask lengths differ");
    }
    if gt.iter().zip(mask).any(|(&g, &m)| m == 1.0 && !(g > 0.0)) {
        return Err(Error::Domain("ground truth must be positive under the mask".into()));
    }
    let tau = berhu_threshold_slices(pred, gt, mask)?;
    let mut norm = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if m == 1.0 {
            norm += weight(i);
        }
    }
    if reduction == LossReduction::WeightedMean && norm <= 0.0 {
        return Err(Error::Degenerate("effective weight over valid pixels is zero".into()));
    }
    let mut grad = vec![0.0; pred.len()];
    if tau == 0.0 {
        return Ok((0.0, grad));
    }
    let scale = match reduction {
        LossReduction::WeightedMean => 1.0 / norm,
        LossReduction::Sum => 1.0,
    };
    let mut total = 0.0;
    for i in 0..pred.len() {
        if mask[i] != 1.0 {
            continue;
        }
        let r = pred[i] - gt[i];
        let w = weight(i);
        total += w * berhu_value(r, tau);
        grad[i] = scale * w * berhu_derivative(r, tau);
    }
    Ok((total * scale, grad))
}

/// Mean Berhu over the valid pixels.
pub fn berhu(pair: &MaskedDepthPair) -> Result<LossOutput> {
    let (loss, grad) = weighted_berhu_slices(
        pair.pred.data(),
        pair.gt.data(),
        pair.mask.data(),
        |_| 1.0,
        LossReduction::WeightedMean,
    )?;
    Ok(LossOutput {
        loss,
        d_pred: Tensor2::from_vec(pair.dims(), grad)?,
    })
}

/// Berhu weighted per pixel by `weights`.
pub fn weighted_berhu(
    pair: &MaskedDepthPair,
    weights: &WeightMatrix,
    reduction: LossReduction,
) -> Result<LossOutput> {
    if weights.dims() != pair.dims() {
        return shape_err(format!(
            "weight matrix {:?} does not match depth {:?}",
            weights.dims(),
            pair.dims()
        ));
    }
    let w = weights.grid().data();
    let (loss, grad) = weighted_berhu_slices(
        pair.pred.data(),
        pair.gt.data(),
        pair.mask.data(),
        |i| w[i],
        reduction,
    )?;
    Ok(LossOutput {
        loss,
        d_pred: Tensor2::from_vec(pair.dims(), grad)?,
    })
}

/// Weighted Berhu over a batch of single-channel predictions `(n, 1, h, w)`,
/// with one shared threshold for the whole batch.
pub fn weighted_berhu_batch(
    pred: &Tensor4,
    targets: &[&DepthMap],
    weights: &WeightMatrix,
    reduction: LossReduction,
) -> Result<(f64, Tensor4)> {
    let [n, c, h, w] = pred.dims();
    if c != 1 || n != targets.len() {
        return shape_err(format!(
            "prediction {:?} does not match {} targets",
            pred.dims(),
            targets.len()
        ));
    }
    if weights.dims() != [h, w] || targets.iter().any(|t| t.depth.dims() != [h, w]) {
        return shape_err("batch targets or weights disagree with the prediction size");
    }
    let mut gt = Vec::with_capacity(n * h * w);
    let mut mask = Vec::with_capacity(n * h * w);
    for t in targets {
        gt.extend_from_slice(t.depth.data());
        mask.extend_from_slice(t.mask.data());
    }
    let wd = weights.grid().data();
    let hw = h * w;
    let (loss, grad) = weighted_berhu_slices(pred.data(), &gt, &mask, |i| wd[i % hw], reduction)?;
    Ok((loss, Tensor4::from_vec(pred.dims(), grad)?))
}
