//! Standard depth-accuracy metrics with optional median scaling.

use crate::error::{Error, Result};
use crate::loss::MaskedDepthPair;

/// Ratio thresholds for the three accuracy metrics.
pub const DELTA_BASE: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub abs_rel: f64,
    /// Natural-log RMSE.
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    /// Scalar applied to the prediction before measuring (1 when disabled).
    pub scale: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "rmse,abs_rel,rmse_log,delta1,delta2,delta3,scale";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.rmse, self.abs_rel, self.rmse_log, self.delta1, self.delta2, self.delta3, self.scale
        )
    }

    /// Field-wise mean of per-image reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::Degenerate("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            rmse: avg(|r| r.rmse),
            abs_rel: avg(|r| r.abs_rel),
            rmse_log: avg(|r| r.rmse_log),
            delta1: avg(|r| r.delta1),
            delta2: avg(|r| r.delta2),
            delta3: avg(|r| r.delta3),
            scale: avg(|r| r.scale),
        })
    }
}

/// Median of the values; even counts take the lower-middle element.
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    Some(values[(values.len() - 1) / 2])
}

fn valid_values(data: &[f64], mask: &[f64]) -> Vec<f64> {
    data.iter()
        .zip(mask)
        .filter(|(_, &m)| m == 1.0)
        .map(|(&v, _)| v)
        .collect()
}

/// Rescales the prediction by `median(gt) / median(pred)` over valid pixels.
pub fn median_scale(pair: &MaskedDepthPair) -> Result<(MaskedDepthPair, f64)> {
    let mask = pair.mask().data();
    let med_gt = lower_median(&mut valid_values(pair.gt().data(), mask))
        .ok_or_else(|| Error::Degenerate("mask selects no pixels".into()))?;
    let med_pred = lower_median(&mut valid_values(pair.pred().data(), mask))
        .ok_or_else(|| Error::Degenerate("mask selects no pixels".into()))?;
    if !(med_pred > 0.0) {
        return Err(Error::Domain(format!(
            "prediction median {med_pred} is not positive"
        )));
    }
    let s = med_gt / med_pred;
    let mut pred = pair.pred().clone();
    for (p, &m) in pred.data_mut().iter_mut().zip(mask) {
        if m == 1.0 {
            *p *= s;
        }
    }
    Ok((pair.with_pred(pred), s))
}

pub fn compute_metrics(pair: &MaskedDepthPair, apply_median_scaling: bool) -> Result<MetricReport> {
    let (pair, scale) = if apply_median_scaling {
        median_scale(pair)?
    } else {
        (pair.clone(), 1.0)
    };
    let mask = pair.mask().data();
    let (mut se, mut rel, mut sle) = (0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    let mut count = 0usize;
    for ((&p, &g), &m) in pair.pred().data().iter().zip(pair.gt().data()).zip(mask) {
        if m != 1.0 {
            continue;
        }
        if !(p > 0.0) {
            return Err(Error::Domain(format!("prediction {p} is not positive under the mask")));
        }
        count += 1;
        let d = p - g;
        se += d * d;
        rel += d.abs() / g;
        let l = (p / g).ln();
        sle += l * l;
        let ratio = (p / g).max(g / p);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < DELTA_BASE.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("mask selects no pixels".into()));
    }
    let n = count as f64;
    Ok(MetricReport {
        rmse: (se / n).sqrt(),
        abs_rel: rel / n,
        rmse_log: (sle / n).sqrt(),
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
        scale,
    })
}
