//! Area-to-point regression kriging baseline.
//!
//! The sharpener models coarse LST as a linear function of coarse NDVI,
//! transfers the regression to the fine NDVI grid, and downscales the
//! regression residuals by area-to-point kriging so that block means of the
//! output reproduce the coarse field. Variogram family, neighborhood size,
//! unit-sum constraint and support quadrature follow the standard ATPRK
//! construction and are exposed as configuration with the usual defaults.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::RasterGrid;
use crate::resample::area_weighted_downsample;

/// Exponential semivariogram `gamma(h) = nugget + (sill-nugget)*(1-exp(-3h/range))`.
///
/// `range_m` is the practical range: the lag where the variogram reaches 95%
/// of the sill. A pure-nugget model has `sill == nugget` (possibly both 0 for
/// a constant field); kriging then degenerates to the neighborhood mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variogram {
    pub nugget: f64,
    pub sill: f64,
    pub range_m: f64,
}

impl Variogram {
    pub fn validate(&self) -> Result<()> {
        if !(self.nugget >= 0.0) || !(self.sill >= self.nugget) {
            return Err(Error::Kriging(format!(
                "need sill >= nugget >= 0, got nugget {} sill {}",
                self.nugget, self.sill
            )));
        }
        if !(self.range_m > 0.0) {
            return Err(Error::Kriging(format!(
                "range_m must be > 0, got {}",
                self.range_m
            )));
        }
        Ok(())
    }

    pub fn gamma(&self, h_m: f64) -> f64 {
        if h_m <= 0.0 {
            return 0.0;
        }
        self.nugget + (self.sill - self.nugget) * (1.0 - (-3.0 * h_m / self.range_m).exp())
    }

    /// Point-support covariance without the nugget atom. The nugget is a
    /// spike at h = 0 with zero integral, so it vanishes when the variogram
    /// is regularized over pixel supports; dropping it here keeps the
    /// quadrature consistent with that limit.
    fn cov_point(&self, h_m: f64) -> f64 {
        (self.sill - self.nugget) * (-3.0 * h_m / self.range_m).exp()
    }
}

/// Fitted sharpening model plus the kriging configuration used to apply it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtprkModel {
    /// Kelvin per NDVI unit.
    pub slope: f64,
    /// Kelvin at NDVI zero.
    pub intercept: f64,
    pub variogram: Variogram,
    /// Fine pixels per coarse pixel along each axis.
    pub ratio: usize,
    /// Side of the square coarse-pixel window used per kriging solve; odd.
    pub neighborhood: usize,
    /// Quadrature points per axis when averaging the point covariance over a
    /// coarse pixel. Equal to `ratio` makes block means of the kriged field
    /// reproduce the coarse residuals exactly.
    pub quadrature: usize,
}

impl AtprkModel {
    pub fn validate(&self) -> Result<()> {
        self.variogram.validate()?;
        if self.ratio < 2 {
            return Err(Error::Kriging(format!(
                "ratio must be >= 2, got {}",
                self.ratio
            )));
        }
        if self.neighborhood == 0 || self.neighborhood % 2 == 0 {
            return Err(Error::Kriging(format!(
                "neighborhood must be odd and >= 1, got {}",
                self.neighborhood
            )));
        }
        if self.quadrature == 0 {
            return Err(Error::Kriging("quadrature must be >= 1".into()));
        }
        Ok(())
    }
}

/// Tuning knobs for [`atprk_sharpen`]; the defaults are the standard choices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtprkOptions {
    pub neighborhood: usize,
    pub quadrature: usize,
    /// Lag bins offered to the variogram fit; capped by the grid size.
    pub n_lags: usize,
}

impl Default for AtprkOptions {
    fn default() -> Self {
        Self {
            neighborhood: 5,
            quadrature: 4,
            n_lags: 15,
        }
    }
}

/// Ordinary least squares of `lst ~ ndvi` over pixels valid in both grids.
///
/// Returns the coefficients and the residual grid `lst - (slope*ndvi + b)`;
/// residual pixels where either input is nodata stay NaN. Errors when fewer
/// than two valid pixels remain or the NDVI variance vanishes.
pub fn fit_regression(
    lst_coarse: &RasterGrid,
    ndvi_coarse: &RasterGrid,
) -> Result<(f64, f64, RasterGrid)> {
    if lst_coarse.width() != ndvi_coarse.width() || lst_coarse.height() != ndvi_coarse.height() {
        return Err(Error::ShapeMismatch(format!(
            "lst {}x{} vs ndvi {}x{}",
            lst_coarse.width(),
            lst_coarse.height(),
            ndvi_coarse.width(),
            ndvi_coarse.height()
        )));
    }
    let pairs: Vec<(f64, f64)> = ndvi_coarse
        .values()
        .iter()
        .zip(lst_coarse.values())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(&x, &y)| (x, y))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Kriging(format!(
            "regression needs >= 2 valid pixels, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in &pairs {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    // Constant NDVI leaves only rounding noise in sxx; treat that as zero
    // variance rather than dividing by it.
    let degenerate = sxx <= n * (1e-13 * mx.abs().max(1.0)).powi(2);
    if degenerate {
        return Err(Error::Kriging("degenerate NDVI: zero variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = residual_grid(lst_coarse, ndvi_coarse, slope, intercept)?;
    Ok((slope, intercept, residuals))
}

fn residual_grid(
    lst: &RasterGrid,
    ndvi: &RasterGrid,
    slope: f64,
    intercept: f64,
) -> Result<RasterGrid> {
    let values = lst
        .values()
        .iter()
        .zip(ndvi.values())
        .map(|(&y, &x)| y - (slope * x + intercept))
        .collect();
    RasterGrid::new(lst.width(), lst.height(), lst.pixel_size_m(), values)
}

/// Matheron estimate of the semivariogram on integer-pixel lag bins followed
/// by a weighted least-squares fit of the exponential model.
///
/// Bin `k` collects pixel pairs with distance in `(k-0.5, k+0.5]` coarse
/// pixels and is weighted by its pair count. The range is chosen by grid
/// search; for each candidate the nugget and partial sill solve a 2x2 linear
/// problem, clamped to the valid cone. Near-collinear candidates (range far
/// below the first lag) and fits whose partial sill is under 5% of the sill
/// collapse to the pure-nugget model, and ties prefer the smallest range.
/// Falls back to a pure-nugget variogram at the sample variance when no fit
/// is possible.
pub fn fit_variogram(residuals: &RasterGrid, n_lags: usize) -> Result<Variogram> {
    let valid = residuals.values().iter().filter(|v| v.is_finite()).count();
    if valid < 30 {
        return Err(Error::Kriging(format!(
            "variogram needs >= 30 valid pixels, got {valid}"
        )));
    }
    if n_lags == 0 {
        return Err(Error::Kriging("n_lags must be >= 1".into()));
    }
    let p = residuals.pixel_size_m();
    let (w, h) = (residuals.width(), residuals.height());
    let max_off = n_lags as isize;
    let max_d = n_lags as f64 + 0.5;

    let mut sums = vec![0.0f64; n_lags];
    let mut dists = vec![0.0f64; n_lags];
    let mut counts = vec![0u64; n_lags];
    for dr in 0..=max_off {
        for dc in -max_off..=max_off {
            if dr == 0 && dc <= 0 {
                continue;
            }
            let d = ((dr * dr + dc * dc) as f64).sqrt();
            if d > max_d {
                continue;
            }
            let bin = (d + 0.5).floor() as usize - 1;
            if bin >= n_lags {
                continue;
            }
            for r in 0..h as isize - dr {
                let (r2, lo, hi) = (r + dr, (-dc).max(0), (w as isize - dc).min(w as isize));
                for c in lo..hi {
                    let a = residuals.get(r as usize, c as usize);
                    let b = residuals.get(r2 as usize, (c + dc) as usize);
                    if a.is_finite() && b.is_finite() {
                        sums[bin] += (a - b) * (a - b);
                        dists[bin] += d * p;
                        counts[bin] += 1;
                    }
                }
            }
        }
    }

    let bins: Vec<(f64, f64, f64)> = (0..n_lags)
        .filter(|&k| counts[k] > 0)
        .map(|k| {
            let c = counts[k] as f64;
            (dists[k] / c, sums[k] / (2.0 * c), c)
        })
        .collect();

    let mean = residuals
        .values()
        .iter()
        .filter(|v| v.is_finite())
        .sum::<f64>()
        / valid as f64;
    let var = residuals
        .values()
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / valid as f64;
    let fallback = Variogram {
        nugget: var,
        sill: var,
        range_m: p,
    };
    if bins.len() < 2 {
        return Ok(fallback);
    }

    let wss = |nug: f64, psill: f64, range: f64| -> f64 {
        bins.iter()
            .map(|&(hm, g, w)| {
                let m = nug + psill * (1.0 - (-3.0 * hm / range).exp());
                w * (m - g) * (m - g)
            })
            .sum()
    };
    let candidates: Vec<f64> = {
        let (lo, hi) = (0.4 * p, 3.0 * n_lags as f64 * p);
        let steps = 60usize;
        (0..steps)
            .map(|i| lo * (hi / lo).powf(i as f64 / (steps - 1) as f64))
            .collect()
    };

    let mut best: Option<(f64, Variogram)> = None;
    for &range in &candidates {
        let g: Vec<f64> = bins
            .iter()
            .map(|&(hm, _, _)| 1.0 - (-3.0 * hm / range).exp())
            .collect();
        let spread =
            g.iter().cloned().fold(f64::MIN, f64::max) - g.iter().cloned().fold(f64::MAX, f64::min);
        let sw: f64 = bins.iter().map(|b| b.2).sum();
        let swg: f64 = bins.iter().zip(&g).map(|(b, gi)| b.2 * gi).sum();
        let swgg: f64 = bins.iter().zip(&g).map(|(b, gi)| b.2 * gi * gi).sum();
        let swy: f64 = bins.iter().map(|b| b.2 * b.1).sum();
        let swgy: f64 = bins.iter().zip(&g).map(|(b, gi)| b.2 * gi * b.1).sum();

        let pure_nugget = (swy / sw, 0.0);
        let mut fits = vec![pure_nugget];
        if spread > 0.05 {
            let det = sw * swgg - swg * swg;
            if det.abs() > 1e-12 * sw * swgg.max(1e-300) {
                let a = (swgg * swy - swg * swgy) / det;
                let b = (sw * swgy - swg * swy) / det;
                if a >= 0.0 && b >= 0.0 {
                    fits.push((a, b));
                }
            }
            if swgg > 0.0 {
                let b = (swgy / swgg).max(0.0);
                fits.push((0.0, b));
            }
        }
        for (mut nug, mut psill) in fits {
            if psill < 0.05 * (nug + psill) {
                (nug, psill) = (swy / sw, 0.0);
            }
            let vario = Variogram {
                nugget: nug,
                sill: nug + psill,
                range_m: range,
            };
            let score = wss(nug, psill, range);
            let better = match &best {
                None => true,
                // Strict improvement only: equal-quality fits keep the
                // earlier (smaller) range.
                Some((s, _)) => score < *s * (1.0 - 1e-9) || (score == 0.0 && *s > 0.0),
            };
            if better {
                best = Some((score, vario));
            }
        }
    }
    Ok(best.map(|(_, v)| v).unwrap_or(fallback))
}

/// Result of a kriging pass: the grid plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct KrigedResiduals {
    pub grid: RasterGrid,
    /// Parents whose system needed diagonal jitter or the equal-weight
    /// fallback (flat variogram or degenerate geometry).
    pub jittered_parents: usize,
    /// Worst |sum(weights) - 1| across all solved subpixels.
    pub max_weight_sum_dev: f64,
}

/// Downscale coarse residuals to `ratio` times the resolution by
/// area-to-point kriging with a unit-sum constraint.
///
/// One system is factorized per coarse parent pixel over its neighborhood
/// window; every subpixel of the parent reuses the factorization with its
/// own covariance right-hand side. Singular systems are retried with
/// `1e-8 * sill` diagonal jitter and finally fall back to equal weights,
/// which the unit-sum constraint turns into the neighborhood mean.
pub fn atpk_residuals(residual_coarse: &RasterGrid, model: &AtprkModel) -> Result<KrigedResiduals> {
    model.validate()?;
    if residual_coarse.has_nodata() {
        return Err(Error::Kriging("residual grid contains nodata".into()));
    }
    let (wc, hc) = (residual_coarse.width(), residual_coarse.height());
    let ratio = model.ratio;
    let p = residual_coarse.pixel_size_m();
    let hw = (model.neighborhood - 1) / 2;
    let nq = model.quadrature;
    let vario = &model.variogram;

    // Covariances depend only on relative geometry: block-block on the
    // absolute offset between coarse pixels, block-point on the signed offset
    // from the parent and the subpixel position inside it.
    let quad: Vec<f64> = (0..nq).map(|q| (q as f64 + 0.5) * p / nq as f64).collect();
    let covbb = |dr: usize, dc: usize| -> f64 {
        let (ox, oy) = (dc as f64 * p, dr as f64 * p);
        let mut acc = 0.0;
        for &y1 in &quad {
            for &x1 in &quad {
                for &y2 in &quad {
                    for &x2 in &quad {
                        let (dx, dy) = (ox + x2 - x1, oy + y2 - y1);
                        acc += vario.cov_point((dx * dx + dy * dy).sqrt());
                    }
                }
            }
        }
        acc / (nq * nq * nq * nq) as f64
    };
    let mut bb = vec![vec![0.0; 2 * hw + 1]; 2 * hw + 1];
    for (dr, row) in bb.iter_mut().enumerate() {
        for (dc, v) in row.iter_mut().enumerate() {
            *v = covbb(dr, dc);
        }
    }
    let n_side = 2 * hw + 1;
    let mut bp = vec![0.0; n_side * n_side * ratio * ratio];
    let bp_at = move |dr: isize, dc: isize, sr: usize, sc: usize| -> usize {
        (((dr + hw as isize) as usize * n_side + (dc + hw as isize) as usize) * ratio + sr) * ratio
            + sc
    };
    for dr in -(hw as isize)..=hw as isize {
        for dc in -(hw as isize)..=hw as isize {
            for sr in 0..ratio {
                for sc in 0..ratio {
                    let (px, py) = (
                        (sc as f64 + 0.5) * p / ratio as f64,
                        (sr as f64 + 0.5) * p / ratio as f64,
                    );
                    let mut acc = 0.0;
                    for &qy in &quad {
                        for &qx in &quad {
                            let dx = dc as f64 * p + qx - px;
                            let dy = dr as f64 * p + qy - py;
                            acc += vario.cov_point((dx * dx + dy * dy).sqrt());
                        }
                    }
                    bp[bp_at(dr, dc, sr, sc)] = acc / (nq * nq) as f64;
                }
            }
        }
    }

    let flat = vario.sill - vario.nugget <= 0.0;
    let jitter = 1e-8 * vario.sill;
    let (wf, hf) = (wc * ratio, hc * ratio);
    let mut out = vec![0.0f64; wf * hf];
    let stats: Vec<(usize, f64)> = out
        .par_chunks_mut(wf * ratio)
        .enumerate()
        .map(|(pr, band)| {
            let mut jittered = 0usize;
            let mut max_dev = 0.0f64;
            for pc in 0..wc {
                // Clip the window to the grid; members keep their signed
                // offsets so the cached covariances apply at borders too.
                let r0 = pr.saturating_sub(hw);
                let r1 = (pr + hw).min(hc - 1);
                let c0 = pc.saturating_sub(hw);
                let c1 = (pc + hw).min(wc - 1);
                let members: Vec<(isize, isize, f64)> = (r0..=r1)
                    .flat_map(|mr| {
                        (c0..=c1).map(move |mc| {
                            (
                                mr as isize - pr as isize,
                                mc as isize - pc as isize,
                                (mr, mc),
                            )
                        })
                    })
                    .map(|(dr, dc, (mr, mc))| (dr, dc, residual_coarse.get(mr, mc)))
                    .collect();
                let m = members.len();

                let solve = |use_jitter: bool| -> Option<Vec<DVector<f64>>> {
                    let mut a = DMatrix::zeros(m + 1, m + 1);
                    for i in 0..m {
                        for j in 0..m {
                            let dr = (members[i].0 - members[j].0).unsigned_abs();
                            let dc = (members[i].1 - members[j].1).unsigned_abs();
                            a[(i, j)] = bb[dr][dc];
                        }
                        if use_jitter {
                            a[(i, i)] += jitter;
                        }
                        a[(i, m)] = 1.0;
                        a[(m, i)] = 1.0;
                    }
                    let lu = a.lu();
                    let mut sols = Vec::with_capacity(ratio * ratio);
                    for sr in 0..ratio {
                        for sc in 0..ratio {
                            let mut b = DVector::zeros(m + 1);
                            for (i, &(dr, dc, _)) in members.iter().enumerate() {
                                b[i] = bp[bp_at(dr, dc, sr, sc)];
                            }
                            b[m] = 1.0;
                            match lu.solve(&b) {
                                Some(x) if x.iter().all(|v| v.is_finite()) => sols.push(x),
                                _ => return None,
                            }
                        }
                    }
                    Some(sols)
                };

                let solutions = if flat { None } else { solve(false) };
                let solutions = match solutions {
                    Some(s) => s,
                    None => {
                        jittered += 1;
                        if flat || jitter <= 0.0 {
                            None
                        } else {
                            solve(true)
                        }
                        .unwrap_or_else(|| {
                            let mut eq = DVector::zeros(m + 1);
                            for i in 0..m {
                                eq[i] = 1.0 / m as f64;
                            }
                            vec![eq; ratio * ratio]
                        })
                    }
                };

                for sr in 0..ratio {
                    for sc in 0..ratio {
                        let lam = &solutions[sr * ratio + sc];
                        let mut pred = 0.0;
                        let mut wsum = 0.0;
                        for (i, &(_, _, val)) in members.iter().enumerate() {
                            pred += lam[i] * val;
                            wsum += lam[i];
                        }
                        max_dev = max_dev.max((wsum - 1.0).abs());
                        band[sr * wf + pc * ratio + sc] = pred;
                    }
                }
            }
            (jittered, max_dev)
        })
        .collect();

    let jittered_parents = stats.iter().map(|s| s.0).sum();
    let max_weight_sum_dev = stats.iter().fold(0.0f64, |acc, s| acc.max(s.1));
    let grid = RasterGrid::new(wf, hf, p / ratio as f64, out)?;
    Ok(KrigedResiduals {
        grid,
        jittered_parents,
        max_weight_sum_dev,
    })
}

/// Full sharpening output.
#[derive(Debug, Clone)]
pub struct AtprkOutput {
    pub sharpened: RasterGrid,
    pub model: AtprkModel,
    pub jittered_parents: usize,
    pub max_weight_sum_dev: f64,
}

/// Sharpen coarse LST to the NDVI grid's resolution.
///
/// Coarse NDVI is the area-weighted block mean of the fine grid, the
/// regression is fitted at coarse scale and applied at fine scale, and the
/// kriged residuals are added on top. Constant NDVI degenerates to a
/// zero-slope trend at the coarse mean, leaving pure residual downscaling.
pub fn atprk_sharpen(
    lst_coarse: &RasterGrid,
    ndvi_fine: &RasterGrid,
    ratio: usize,
    opts: &AtprkOptions,
) -> Result<AtprkOutput> {
    if ratio < 2 {
        return Err(Error::Kriging(format!("ratio must be >= 2, got {ratio}")));
    }
    if ndvi_fine.width() != lst_coarse.width() * ratio
        || ndvi_fine.height() != lst_coarse.height() * ratio
    {
        return Err(Error::ShapeMismatch(format!(
            "ndvi {}x{} is not {ratio}x the lst {}x{}",
            ndvi_fine.width(),
            ndvi_fine.height(),
            lst_coarse.width(),
            lst_coarse.height()
        )));
    }
    if lst_coarse.has_nodata() || ndvi_fine.has_nodata() {
        return Err(Error::Kriging(
            "sharpening requires cloud-free inputs".into(),
        ));
    }
    let ndvi_coarse = area_weighted_downsample(ndvi_fine, ratio as f64)?;
    let (slope, intercept, residuals) = match fit_regression(lst_coarse, &ndvi_coarse) {
        Ok(fit) => fit,
        Err(Error::Kriging(_)) => {
            let n = lst_coarse.values().len() as f64;
            let mean = lst_coarse.values().iter().sum::<f64>() / n;
            let residuals = residual_grid(lst_coarse, &ndvi_coarse, 0.0, mean)?;
            (0.0, mean, residuals)
        }
        Err(e) => return Err(e),
    };
    let n_lags = opts
        .n_lags
        .min(lst_coarse.width().max(lst_coarse.height()) - 1)
        .max(1);
    let variogram = fit_variogram(&residuals, n_lags)?;
    let model = AtprkModel {
        slope,
        intercept,
        variogram,
        ratio,
        neighborhood: opts.neighborhood,
        quadrature: opts.quadrature,
    };
    let kriged = atpk_residuals(&residuals, &model)?;
    let values = ndvi_fine
        .values()
        .iter()
        .zip(kriged.grid.values())
        .map(|(&x, &res)| slope * x + intercept + res)
        .collect();
    let sharpened = RasterGrid::new(
        ndvi_fine.width(),
        ndvi_fine.height(),
        ndvi_fine.pixel_size_m(),
        values,
    )?;
    Ok(AtprkOutput {
        sharpened,
        model,
        jittered_parents: kriged.jittered_parents,
        max_weight_sum_dev: kriged.max_weight_sum_dev,
    })
}

/// Dense exponential-covariance simulation used as the variogram-recovery
/// oracle: exact up to the Cholesky factorization, independent of the
/// spectral synthesis in the generator module.
#[cfg(test)]
pub(crate) fn simulate_exponential_field(
    side: usize,
    pixel_m: f64,
    sill: f64,
    range_m: f64,
    seed: u64,
) -> RasterGrid {
    use rand::{Rng, SeedableRng};
    let n = side * side;
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (r1, c1) = (i / side, i % side);
            let (r2, c2) = (j / side, j % side);
            let dx = (c1 as f64 - c2 as f64) * pixel_m;
            let dy = (r1 as f64 - r2 as f64) * pixel_m;
            let h = (dx * dx + dy * dy).sqrt();
            c[(i, j)] = sill * (-3.0 * h / range_m).exp();
        }
        c[(i, i)] += 1e-10 * sill;
    }
    let chol = c.cholesky().expect("covariance is PD");
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let w = DVector::from_fn(n, |_, _| {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    });
    let z = chol.l() * w;
    RasterGrid::new(side, side, pixel_m, z.iter().cloned().collect()).unwrap()
}
