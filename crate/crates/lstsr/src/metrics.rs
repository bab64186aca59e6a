//! Evaluation metrics: RMSE, PSNR, and a global-statistics SSIM.
//!
//! PSNR uses the ground truth's dynamic range (max - min) as the peak signal,
//! `20 log10(DR / RMSE)`, so scores are comparable across scenes regardless of
//! the absolute Kelvin level. SSIM is the single-window variant computed from
//! whole-image statistics with population (1/N) variances and the standard
//! stabilizers `c1 = (0.01 DR)^2`, `c2 = (0.03 DR)^2`.

use crate::error::{Error, Result};

fn check_pair(gt: &[f64], pred: &[f64]) -> Result<()> {
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    if gt.len() != pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "ground truth has {} values, prediction {}",
            gt.len(),
            pred.len()
        )));
    }
    if gt.iter().chain(pred.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "metrics require nodata-free, finite inputs".into(),
        ));
    }
    Ok(())
}

/// Root-mean-square error over paired values.
pub fn rmse(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(gt, pred)?;
    let mut sum = 0.0f64;
    for (a, b) in gt.iter().zip(pred) {
        let d = a - b;
        sum += d * d;
    }
    Ok((sum / gt.len() as f64).sqrt())
}

/// Dynamic range (max - min) of a value set.
pub fn dynamic_range(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty input".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "dynamic range requires finite values".into(),
        ));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(hi - lo)
}

fn psnr_from(dr: f64, rmse: f64) -> Result<f64> {
    if dr <= 0.0 {
        return Err(Error::InvalidArgument(
            "PSNR undefined for zero ground-truth dynamic range".into(),
        ));
    }
    if rmse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (dr / rmse).log10())
}

/// Peak signal-to-noise ratio in dB, `20 log10(DR_gt / RMSE)`. A perfect
/// prediction gives +inf; a constant ground truth is an error.
pub fn psnr(gt: &[f64], pred: &[f64]) -> Result<f64> {
    let e = rmse(gt, pred)?;
    psnr_from(dynamic_range(gt)?, e)
}

/// Two-pass centered first and second moments: (mean_a, mean_b, var_a, var_b,
/// cov). Population normalization (1/N).
fn moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mu_a, y - mu_b);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    (mu_a, mu_b, va / n, vb / n, cov / n)
}

/// Global-statistics structural similarity. Equal inputs score exactly 1.
pub fn ssim(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair(gt, pred)?;
    let dr = dynamic_range(gt)?;
    if dr <= 0.0 {
        return Err(Error::InvalidArgument(
            "SSIM undefined for zero ground-truth dynamic range".into(),
        ));
    }
    let (mu_g, mu_p, var_g, var_p, cov) = moments(gt, pred);
    let c1 = (0.01 * dr) * (0.01 * dr);
    let c2 = (0.03 * dr) * (0.03 * dr);
    Ok(((2.0 * mu_g * mu_p + c1) * (2.0 * cov + c2))
        / ((mu_g * mu_g + mu_p * mu_p + c1) * (var_g + var_p + c2)))
}

/// Metrics for one evaluated item (or the aggregate row).
#[derive(Debug, Clone, PartialEq)]
pub struct ItemMetrics {
    pub id: String,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub dr: f64,
}

/// Per-item metrics plus an aggregate.
///
/// The aggregate RMSE pools squared errors over every pixel of every item;
/// its PSNR is recomputed from that pooled RMSE and the pooled dynamic range
/// (so the aggregate row obeys the same PSNR identity as item rows), and its
/// SSIM is the unweighted mean over items.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub items: Vec<ItemMetrics>,
    pub aggregate: ItemMetrics,
}

impl MetricReport {
    /// CSV with header `id,rmse,psnr,ssim,dr`, one row per item, aggregate
    /// last. Floats use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,rmse,psnr,ssim,dr\n");
        for m in self.items.iter().chain(std::iter::once(&self.aggregate)) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                m.id, m.rmse, m.psnr, m.ssim, m.dr
            ));
        }
        out
    }
}

/// Evaluate a set of (id, ground truth, prediction) items.
pub fn evaluate_set<T: AsRef<[f64]>>(items: &[(String, T, T)]) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no items to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(items.len());
    let mut sq_sum = 0.0f64;
    let mut px_total = 0usize;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut ssim_sum = 0.0f64;
    for (id, gt, pred) in items {
        let (gt, pred) = (gt.as_ref(), pred.as_ref());
        let e = rmse(gt, pred)?;
        let dr = dynamic_range(gt)?;
        let p = psnr_from(dr, e)?;
        let s = ssim(gt, pred)?;
        rows.push(ItemMetrics {
            id: id.clone(),
            rmse: e,
            psnr: p,
            ssim: s,
            dr,
        });
        sq_sum += e * e * gt.len() as f64;
        px_total += gt.len();
        lo = lo.min(gt.iter().cloned().fold(f64::INFINITY, f64::min));
        hi = hi.max(gt.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        ssim_sum += s;
    }
    let pooled_rmse = (sq_sum / px_total as f64).sqrt();
    let pooled_dr = hi - lo;
    let aggregate = ItemMetrics {
        id: "aggregate".into(),
        rmse: pooled_rmse,
        psnr: psnr_from(pooled_dr, pooled_rmse)?,
        ssim: ssim_sum / items.len() as f64,
        dr: pooled_dr,
    };
    Ok(MetricReport {
        items: rows,
        aggregate,
    })
}
