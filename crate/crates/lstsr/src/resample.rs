//! Resampling operators: Norm-L4 radiometric downsampling, area-weighted
//! downsampling, and Keys bicubic upsampling.
//!
//! Norm-L4 models the sensor's coarse pixel as radiatively consistent with its
//! footprint: the coarse value is the fourth root of the block mean of T^4,
//! so total emitted power (Stefan-Boltzmann, sigma T^4) is conserved. All
//! accumulation happens in f64.

use crate::error::{Error, Result};
use crate::raster::{Patch, RasterGrid};

/// Fourth-power block mean, computed as `sqrt(sqrt(mean(T^4)))`.
fn norml4_block(values: &[f64], width: usize, row: usize, col: usize, ratio: usize) -> f64 {
    let mut sum = 0.0f64;
    for r in row..row + ratio {
        for c in col..col + ratio {
            let t = values[r * width + c];
            if t.is_nan() {
                return f64::NAN;
            }
            sum += t * t * t * t;
        }
    }
    let mean = sum / ((ratio * ratio) as f64);
    mean.sqrt().sqrt()
}

fn norml4_values(values: &[f64], width: usize, height: usize, ratio: usize) -> Result<Vec<f64>> {
    if ratio < 2 {
        return Err(Error::InvalidArgument(format!(
            "downsampling ratio must be >= 2, got {ratio}"
        )));
    }
    if width % ratio != 0 || height % ratio != 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} does not divide {width}x{height}"
        )));
    }
    if let Some(v) = values.iter().find(|v| !v.is_nan() && **v <= 0.0) {
        return Err(Error::InvalidGrid(format!(
            "non-positive temperature {v} K in Norm-L4 input"
        )));
    }
    let out_w = width / ratio;
    let out_h = height / ratio;
    let mut out = Vec::with_capacity(out_w * out_h);
    for block_row in 0..out_h {
        for block_col in 0..out_w {
            out.push(norml4_block(
                values,
                width,
                block_row * ratio,
                block_col * ratio,
                ratio,
            ));
        }
    }
    Ok(out)
}

/// Degrade a grid by the integer `ratio` under the Norm-L4 model. Blocks
/// containing nodata yield a nodata coarse pixel; the output pixel size is
/// `ratio` times the input's.
pub fn norml4_downsample(grid: &RasterGrid, ratio: usize) -> Result<RasterGrid> {
    let out = norml4_values(grid.values(), grid.width(), grid.height(), ratio)?;
    RasterGrid::new(
        grid.width() / ratio,
        grid.height() / ratio,
        grid.pixel_size_m() * ratio as f64,
        out,
    )
}

/// Area-weighted mean downsampling with a real-valued `ratio > 1`. Output
/// size is `floor(input / ratio)` per axis; each output pixel averages the
/// source pixels overlapping its footprint, weighted by exact rectangle
/// overlap. Any overlapped nodata pixel makes the output pixel nodata.
///
/// Unlike Norm-L4 this operates on plain values (no positivity requirement),
/// so it also serves index-style auxiliary rasters such as NDVI.
pub fn area_weighted_downsample(grid: &RasterGrid, ratio: f64) -> Result<RasterGrid> {
    if !(ratio > 1.0) || !ratio.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "area-weighted ratio must be a finite value > 1, got {ratio}"
        )));
    }
    let (width, height) = (grid.width(), grid.height());
    let out_w = (width as f64 / ratio).floor() as usize;
    let out_h = (height as f64 / ratio).floor() as usize;
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} leaves no whole output pixel for {width}x{height}"
        )));
    }
    let values = grid.values();
    let mut out = Vec::with_capacity(out_w * out_h);
    for block_row in 0..out_h {
        let y0 = block_row as f64 * ratio;
        let y1 = (block_row + 1) as f64 * ratio;
        for block_col in 0..out_w {
            let x0 = block_col as f64 * ratio;
            let x1 = (block_col + 1) as f64 * ratio;
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            let mut hit_nodata = false;
            let r_end = (y1.ceil() as usize).min(height);
            let c_end = (x1.ceil() as usize).min(width);
            'block: for r in y0.floor() as usize..r_end {
                let wr = (r as f64 + 1.0).min(y1) - (r as f64).max(y0);
                if wr <= 0.0 {
                    continue;
                }
                for c in x0.floor() as usize..c_end {
                    let wc = (c as f64 + 1.0).min(x1) - (c as f64).max(x0);
                    if wc <= 0.0 {
                        continue;
                    }
                    let v = values[r * width + c];
                    if v.is_nan() {
                        hit_nodata = true;
                        break 'block;
                    }
                    num += wr * wc * v;
                    den += wr * wc;
                }
            }
            out.push(if hit_nodata { f64::NAN } else { num / den });
        }
    }
    RasterGrid::new(out_w, out_h, grid.pixel_size_m() * ratio, out)
}

/// Keys cubic convolution weights (a = -0.5) for the four taps around a
/// sample with fractional offset `s` in [0, 1).
fn keys_weights(s: f64) -> [f64; 4] {
    let near = |d: f64| (1.5 * d - 2.5) * d * d + 1.0;
    let far = |d: f64| ((-0.5 * d + 2.5) * d - 4.0) * d + 2.0;
    [far(1.0 + s), near(s), near(1.0 - s), far(2.0 - s)]
}

/// Tap indices (edge-replicated) and weights for every output position along
/// one axis under half-pixel alignment: source coord `u = (j + 0.5)/r - 0.5`.
fn axis_taps(in_len: usize, ratio: usize) -> Vec<([usize; 4], [f64; 4])> {
    let clamp = |i: isize| i.clamp(0, in_len as isize - 1) as usize;
    (0..in_len * ratio)
        .map(|j| {
            let u = (j as f64 + 0.5) / ratio as f64 - 0.5;
            let i0 = u.floor();
            let s = u - i0;
            let i0 = i0 as isize;
            (
                [clamp(i0 - 1), clamp(i0), clamp(i0 + 1), clamp(i0 + 2)],
                keys_weights(s),
            )
        })
        .collect()
}

fn bicubic_values(values: &[f64], width: usize, height: usize, ratio: usize) -> Result<Vec<f64>> {
    if ratio < 2 {
        return Err(Error::InvalidArgument(format!(
            "upsampling ratio must be >= 2, got {ratio}"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidGrid(
            "bicubic upsampling requires a nodata-free input".into(),
        ));
    }
    let out_w = width * ratio;
    let out_h = height * ratio;
    let col_taps = axis_taps(width, ratio);
    let row_taps = axis_taps(height, ratio);

    // Separable: horizontal pass into an (height x out_w) buffer, then vertical.
    let mut mid = vec![0.0f64; height * out_w];
    for r in 0..height {
        let row = &values[r * width..(r + 1) * width];
        for (j, (idx, w)) in col_taps.iter().enumerate() {
            mid[r * out_w + j] =
                w[0] * row[idx[0]] + w[1] * row[idx[1]] + w[2] * row[idx[2]] + w[3] * row[idx[3]];
        }
    }
    let mut out = vec![0.0f64; out_h * out_w];
    for (i, (idx, w)) in row_taps.iter().enumerate() {
        let (r0, r1, r2, r3) = (
            idx[0] * out_w,
            idx[1] * out_w,
            idx[2] * out_w,
            idx[3] * out_w,
        );
        for j in 0..out_w {
            out[i * out_w + j] =
                w[0] * mid[r0 + j] + w[1] * mid[r1 + j] + w[2] * mid[r2 + j] + w[3] * mid[r3 + j];
        }
    }
    Ok(out)
}

/// Upsample a grid by the integer `ratio` with Keys bicubic convolution
/// (a = -0.5, half-pixel alignment, edge replication). The output pixel size
/// is the input's divided by `ratio`. Errors if the input contains nodata.
pub fn bicubic_upsample(grid: &RasterGrid, ratio: usize) -> Result<RasterGrid> {
    let out = bicubic_values(grid.values(), grid.width(), grid.height(), ratio)?;
    RasterGrid::new(
        grid.width() * ratio,
        grid.height() * ratio,
        grid.pixel_size_m() / ratio as f64,
        out,
    )
}

/// Build the interpolated-low-resolution (ILR) companion of an HR patch:
/// Norm-L4 downsample by `ratio`, then bicubic upsample back to the original
/// size. This is the network input during training and inference.
pub fn make_ilr(patch: &Patch, ratio: usize) -> Result<Patch> {
    let size = patch.size();
    if ratio < 2 || size % ratio != 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} must be >= 2 and divide the patch size {size}"
        )));
    }
    let coarse = norml4_values(patch.data(), size, size, ratio)?;
    let fine = bicubic_values(&coarse, size / ratio, size / ratio, ratio)?;
    Patch::new(size, patch.offset(), fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn grid(width: usize, height: usize, values: Vec<f64>) -> RasterGrid {
        RasterGrid::new(width, height, 1000.0, values).unwrap()
    }

    #[test]
    fn norml4_constant_field_is_identity() {
        let g = grid(8, 8, vec![301.5; 64]);
        let coarse = norml4_downsample(&g, 4).unwrap();
        assert_eq!(coarse.width(), 2);
        assert_eq!(coarse.pixel_size_m(), 4000.0);
        for &v in coarse.values() {
            assert!((v - 301.5).abs() < 1e-12);
        }
    }

    #[test]
    fn norml4_two_value_block_matches_frozen_value() {
        // ((290^4 + 310^4) / 2)^(1/4), evaluated in 60-digit arithmetic.
        let g = grid(2, 2, vec![290.0, 310.0, 310.0, 290.0]);
        let coarse = norml4_downsample(&g, 2).unwrap();
        assert!((coarse.get(0, 0) - 300.4988469712133).abs() < 1e-10);
    }

    #[test]
    fn norml4_exceeds_arithmetic_mean_for_heterogeneous_blocks() {
        let g = grid(2, 2, vec![280.0, 320.0, 300.0, 305.0]);
        let coarse = norml4_downsample(&g, 2).unwrap();
        let mean = (280.0 + 320.0 + 300.0 + 305.0) / 4.0;
        assert!(
            coarse.get(0, 0) > mean,
            "power mean of order 4 dominates order 1"
        );
    }

    #[test]
    fn norml4_conserves_fourth_power_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..64 * 64)
            .map(|_| 270.0 + 60.0 * rng.gen::<f64>())
            .collect();
        let fine_mean4: f64 =
            values.iter().map(|t| t * t * t * t).sum::<f64>() / values.len() as f64;
        let g = grid(64, 64, values);
        let coarse = norml4_downsample(&g, 4).unwrap();
        let coarse_mean4: f64 = coarse.values().iter().map(|t| t * t * t * t).sum::<f64>()
            / coarse.values().len() as f64;
        assert!(
            ((coarse_mean4 - fine_mean4) / fine_mean4).abs() < 1e-12,
            "radiative budget must survive degradation"
        );
    }

    #[test]
    fn norml4_propagates_nodata_per_block() {
        let mut values = vec![300.0; 16];
        values[5] = f64::NAN;
        let g = grid(4, 4, values);
        let coarse = norml4_downsample(&g, 2).unwrap();
        assert!(coarse.get(0, 1).is_nan() == false);
        assert!(
            coarse.get(0, 0).is_nan(),
            "block containing nodata goes nodata"
        );
        assert!((coarse.get(1, 1) - 300.0).abs() < 1e-12);
    }

    #[test]
    fn norml4_rejects_non_positive_and_non_dividing() {
        let g = grid(4, 4, {
            let mut v = vec![300.0; 16];
            v[0] = -1.0;
            v
        });
        assert!(norml4_downsample(&g, 2).is_err());
        let g = grid(6, 6, vec![300.0; 36]);
        assert!(norml4_downsample(&g, 4).is_err());
        let g = grid(4, 4, vec![300.0; 16]);
        assert!(norml4_downsample(&g, 1).is_err());
    }

    #[test]
    fn area_weighted_integer_ratio_is_block_mean() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..16 * 16).map(|_| rng.gen::<f64>()).collect();
        let g = grid(16, 16, values.clone());
        let out = area_weighted_downsample(&g, 4.0).unwrap();
        for block_row in 0..4 {
            for block_col in 0..4 {
                let mut sum = 0.0;
                for r in 0..4 {
                    for c in 0..4 {
                        sum += values[(block_row * 4 + r) * 16 + block_col * 4 + c];
                    }
                }
                assert_eq!(
                    out.get(block_row, block_col),
                    sum / 16.0,
                    "bit-exact block mean"
                );
            }
        }
    }

    #[test]
    fn area_weighted_fractional_ratio_matches_hand_computed_overlaps() {
        // 3x3 input, ratio 1.5: each output pixel spans 1.5 source pixels per
        // axis; weights worked out on paper from rectangle overlaps.
        let g = grid(3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let out = area_weighted_downsample(&g, 1.5).unwrap();
        assert_eq!(out.width(), 2);
        assert_eq!(out.height(), 2);
        let expected = [5.25 / 2.25, 8.25 / 2.25, 14.25 / 2.25, 17.25 / 2.25];
        for (i, want) in expected.iter().enumerate() {
            assert!((out.values()[i] - want).abs() < 1e-12, "pixel {i}");
        }
    }

    #[test]
    fn area_weighted_handles_negative_values_and_nodata() {
        let mut values = vec![-0.5, 0.5, 0.25, -0.25];
        let g = grid(2, 2, values.clone());
        let out = area_weighted_downsample(&g, 2.0).unwrap();
        assert!((out.get(0, 0) - 0.0).abs() < 1e-12);
        values[3] = f64::NAN;
        let g = grid(2, 2, values);
        let out = area_weighted_downsample(&g, 2.0).unwrap();
        assert!(out.get(0, 0).is_nan());
    }

    #[test]
    fn area_weighted_rejects_bad_ratios() {
        let g = grid(4, 4, vec![1.0; 16]);
        assert!(area_weighted_downsample(&g, 1.0).is_err());
        assert!(area_weighted_downsample(&g, 0.5).is_err());
        assert!(area_weighted_downsample(&g, 5.0).is_err());
        assert!(area_weighted_downsample(&g, f64::NAN).is_err());
    }

    #[test]
    fn bicubic_constant_field_is_constant() {
        let g = grid(4, 4, vec![288.25; 16]);
        let up = bicubic_upsample(&g, 4).unwrap();
        assert_eq!(up.width(), 16);
        assert_eq!(up.pixel_size_m(), 250.0);
        for &v in up.values() {
            assert!((v - 288.25).abs() < 1e-12);
        }
    }

    #[test]
    fn bicubic_reproduces_interior_linear_ramp() {
        let n = 8;
        let ramp: Vec<f64> = (0..n * n)
            .map(|i| 280.0 + (i / n) as f64 * 2.0 + (i % n) as f64 * 1.25)
            .collect();
        let g = grid(n, n, ramp);
        let r = 4;
        let up = bicubic_upsample(&g, r).unwrap();
        let margin = 2 * r;
        for i in margin..n * r - margin {
            for j in margin..n * r - margin {
                let u = (i as f64 + 0.5) / r as f64 - 0.5;
                let v = (j as f64 + 0.5) / r as f64 - 0.5;
                let want = 280.0 + u * 2.0 + v * 1.25;
                assert!(
                    (up.get(i, j) - want).abs() < 1e-10,
                    "({i},{j}): {} vs {want}",
                    up.get(i, j)
                );
            }
        }
    }

    #[test]
    fn bicubic_tracks_smooth_cubic_surface_in_interior() {
        // Kelvin-scale polynomial with a gentle cubic term; away from the
        // replicated border the interpolant stays within 1e-6 relative.
        let n = 8;
        let r = 4;
        let poly = |x: f64, y: f64| {
            290.0
                + 1.2 * x
                + 0.05 * x * x
                + 0.001 * x * x * x
                + 0.8 * y
                + 0.03 * y * y
                + 0.0005 * y * y * y
                + 0.004 * x * y
        };
        let coarse: Vec<f64> = (0..n * n)
            .map(|i| poly((i % n) as f64, (i / n) as f64))
            .collect();
        let g = grid(n, n, coarse);
        let up = bicubic_upsample(&g, r).unwrap();
        let margin = 2 * r;
        for i in margin..n * r - margin {
            for j in margin..n * r - margin {
                let u = (i as f64 + 0.5) / r as f64 - 0.5;
                let v = (j as f64 + 0.5) / r as f64 - 0.5;
                let want = poly(v, u);
                let rel = ((up.get(i, j) - want) / want).abs();
                assert!(rel < 1e-6, "({i},{j}): relative error {rel}");
            }
        }
    }

    #[test]
    fn separable_passes_match_direct_16_tap_form() {
        // Independent oracle: non-separable 2D cubic convolution with the
        // same alignment, weight polynomial, and clamping.
        fn keys(d: f64) -> f64 {
            let d = d.abs();
            if d < 1.0 {
                1.5 * d * d * d - 2.5 * d * d + 1.0
            } else if d < 2.0 {
                -0.5 * d * d * d + 2.5 * d * d - 4.0 * d + 2.0
            } else {
                0.0
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let n = 6;
        let r = 3;
        let values: Vec<f64> = (0..n * n)
            .map(|_| 260.0 + 70.0 * rng.gen::<f64>())
            .collect();
        let g = grid(n, n, values.clone());
        let up = bicubic_upsample(&g, r).unwrap();
        for i in 0..n * r {
            for j in 0..n * r {
                let uy = (i as f64 + 0.5) / r as f64 - 0.5;
                let ux = (j as f64 + 0.5) / r as f64 - 0.5;
                let (by, bx) = (uy.floor(), ux.floor());
                let mut acc = 0.0;
                for dy in -1i64..=2 {
                    for dx in -1i64..=2 {
                        let sy = (by as i64 + dy).clamp(0, n as i64 - 1) as usize;
                        let sx = (bx as i64 + dx).clamp(0, n as i64 - 1) as usize;
                        let wy = keys(uy - (by + dy as f64));
                        let wx = keys(ux - (bx + dx as f64));
                        acc += wy * wx * values[sy * n + sx];
                    }
                }
                let rel = ((up.get(i, j) - acc) / acc).abs();
                assert!(
                    rel < 1e-9,
                    "({i},{j}): separable {} direct {acc}",
                    up.get(i, j)
                );
            }
        }
    }

    #[test]
    fn bicubic_rejects_nodata_input() {
        let g = grid(2, 2, vec![300.0, f64::NAN, 300.0, 300.0]);
        assert!(bicubic_upsample(&g, 2).is_err());
    }

    #[test]
    fn make_ilr_keeps_size_offset_and_constants() {
        let patch = Patch::new(8, (3, 5), vec![297.0; 64]).unwrap();
        let ilr = make_ilr(&patch, 4).unwrap();
        assert_eq!(ilr.size(), 8);
        assert_eq!(ilr.offset(), (3, 5));
        for &v in ilr.data() {
            assert!((v - 297.0).abs() < 1e-12);
        }
        assert!(make_ilr(&patch, 3).is_err(), "3 does not divide 8");
    }

    #[test]
    fn make_ilr_smooths_high_frequency_detail() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let data: Vec<f64> = (0..16 * 16)
            .map(|_| 280.0 + 30.0 * rng.gen::<f64>())
            .collect();
        let patch = Patch::new(16, (0, 0), data).unwrap();
        let ilr = make_ilr(&patch, 4).unwrap();
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
        };
        assert!(
            var(ilr.data()) < var(patch.data()),
            "degradation must lose variance on white noise"
        );
    }

    proptest::proptest! {
        #[test]
        fn norml4_is_bounded_by_block_extremes(seed in 0u64..500) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..16).map(|_| 250.0 + 80.0 * rng.gen::<f64>()).collect();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let g = grid(4, 4, values);
            let coarse = norml4_downsample(&g, 4).unwrap();
            let v = coarse.get(0, 0);
            proptest::prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            let mean = g.values().iter().sum::<f64>() / 16.0;
            proptest::prop_assert!(v >= mean - 1e-9);
        }

        #[test]
        fn area_weighted_integer_ratio_preserves_mean(seed in 0u64..500) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..8 * 8).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let mean_in = values.iter().sum::<f64>() / values.len() as f64;
            let g = grid(8, 8, values);
            let out = area_weighted_downsample(&g, 2.0).unwrap();
            let mean_out = out.values().iter().sum::<f64>() / out.values().len() as f64;
            proptest::prop_assert!((mean_in - mean_out).abs() < 1e-12);
        }
    }
}
