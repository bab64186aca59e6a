//! Synthetic scene generation: Gaussian random fields with a prescribed
//! correlation length, an NDVI-coupled LST world for regression-based
//! sharpening tests, and simple deterministic fixtures.
//!
//! Fields are synthesized spectrally: white Gaussian noise is filtered in the
//! Fourier domain with amplitude `H(k) = exp(-|k|^2 l^2 / 4)`, the square
//! root of the spectral density of the Gaussian covariance
//! `C(h) = exp(-h^2 / (2 l^2))` (`l` in pixels). The DC bin is zeroed and the
//! field divided by its theoretical standard deviation
//! `sqrt(sum(H^2) / N)`, so the output has unit variance by construction, not
//! by per-realization normalization. Generated values are snapped to the
//! nearest f32 so a store/load round trip through the f32 payload is
//! bit-exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::raster::RasterGrid;

/// Recipe for one Gaussian-random-field grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSpec {
    pub width: usize,
    pub height: usize,
    pub pixel_size_m: f64,
    /// Correlation length of the Gaussian covariance, in meters.
    pub corr_length_m: f64,
    /// Output range; the field is centered on the midpoint with standard
    /// deviation `(max - min) / 8` and clamped to the range.
    pub min_value: f64,
    pub max_value: f64,
    pub seed: u64,
}

impl FieldSpec {
    fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidArgument(format!(
                "field must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.pixel_size_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel_size_m must be > 0, got {}",
                self.pixel_size_m
            )));
        }
        if !(self.corr_length_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "corr_length_m must be > 0, got {}",
                self.corr_length_m
            )));
        }
        if !(self.max_value > self.min_value) {
            return Err(Error::InvalidArgument(format!(
                "value range [{}, {}] is empty",
                self.min_value, self.max_value
            )));
        }
        Ok(())
    }
}

/// Standard normal draw via Box-Muller; two uniforms per sample keeps the
/// stream layout independent of rejection behavior.
fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn fft2d(data: &mut [Complex<f64>], width: usize, height: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(width)
    } else {
        planner.plan_fft_forward(width)
    };
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(height)
    } else {
        planner.plan_fft_forward(height)
    };
    let mut col = vec![Complex::default(); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = data[r * width + c];
        }
        col_fft.process(&mut col);
        for r in 0..height {
            data[r * width + c] = col[r];
        }
    }
}

/// Unit-variance correlated field (DC removed), correlation length in pixels.
fn unit_grf(width: usize, height: usize, corr_px: f64, seed: u64) -> Vec<f64> {
    let n = width * height;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut field: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(standard_normal(&mut rng), 0.0))
        .collect();
    fft2d(&mut field, width, height, false);

    let mut h_sq_sum = 0.0f64;
    for r in 0..height {
        let fy = if r <= height / 2 {
            r as f64
        } else {
            r as f64 - height as f64
        };
        let ky = std::f64::consts::TAU * fy / height as f64;
        for c in 0..width {
            let fx = if c <= width / 2 {
                c as f64
            } else {
                c as f64 - width as f64
            };
            let kx = std::f64::consts::TAU * fx / width as f64;
            let h = if r == 0 && c == 0 {
                0.0
            } else {
                (-(kx * kx + ky * ky) * corr_px * corr_px / 4.0).exp()
            };
            h_sq_sum += h * h;
            field[r * width + c] *= h;
        }
    }
    fft2d(&mut field, width, height, true);
    // rustfft leaves the inverse unscaled; fold the 1/N in with the
    // theoretical standard deviation sqrt(sum(H^2) / N) of the filtered
    // unit-white field.
    let scale = 1.0 / (n as f64 * (h_sq_sum / n as f64).sqrt());
    field.iter().map(|v| v.re * scale).collect()
}

/// Generate a correlated random field per `spec`.
pub fn gaussian_field(spec: &FieldSpec) -> Result<RasterGrid> {
    spec.validate()?;
    let corr_px = spec.corr_length_m / spec.pixel_size_m;
    let unit = unit_grf(spec.width, spec.height, corr_px, spec.seed);
    let mid = 0.5 * (spec.min_value + spec.max_value);
    let sigma = (spec.max_value - spec.min_value) / 8.0;
    let values = unit
        .iter()
        .map(|&g| {
            let v = (mid + sigma * g).clamp(spec.min_value, spec.max_value);
            v as f32 as f64
        })
        .collect();
    RasterGrid::new(spec.width, spec.height, spec.pixel_size_m, values)
}

/// Recipe for a coupled (LST, NDVI) scene where LST follows a linear
/// regression on NDVI plus correlated noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldSpec {
    /// NDVI field recipe; its value range is the NDVI range.
    pub ndvi: FieldSpec,
    /// Kelvin of LST per unit NDVI (negative over vegetated land).
    pub slope: f64,
    /// Kelvin at NDVI zero.
    pub intercept: f64,
    /// Standard deviation of the correlated noise added to LST, in Kelvin.
    pub noise_sigma_k: f64,
    /// Correlation length of the noise, in meters.
    pub noise_corr_length_m: f64,
}

/// Generate the scene. The noise field reuses the NDVI seed xor'd with a
/// fixed tag so one `WorldSpec` seed pins the whole world. Errors if the
/// resulting LST is not strictly positive everywhere.
pub fn linear_ndvi_world(spec: &WorldSpec) -> Result<(RasterGrid, RasterGrid)> {
    spec.ndvi.validate()?;
    if !(spec.noise_sigma_k >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma_k must be >= 0, got {}",
            spec.noise_sigma_k
        )));
    }
    if spec.noise_sigma_k > 0.0 && !(spec.noise_corr_length_m > 0.0) {
        return Err(Error::InvalidArgument(
            "noise_corr_length_m must be > 0 when noise is enabled".into(),
        ));
    }
    let ndvi = gaussian_field(&spec.ndvi)?;
    let noise = if spec.noise_sigma_k > 0.0 {
        let corr_px = spec.noise_corr_length_m / spec.ndvi.pixel_size_m;
        unit_grf(
            spec.ndvi.width,
            spec.ndvi.height,
            corr_px,
            spec.ndvi.seed ^ 0x6c73_745f_6e6f_6973,
        )
    } else {
        vec![0.0; spec.ndvi.width * spec.ndvi.height]
    };
    let lst: Vec<f64> = ndvi
        .values()
        .iter()
        .zip(&noise)
        .map(|(&v, &e)| (spec.slope * v + spec.intercept + spec.noise_sigma_k * e) as f32 as f64)
        .collect();
    if let Some(bad) = lst.iter().find(|v| **v <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "world parameters produce non-physical LST {bad} K"
        )));
    }
    let lst = RasterGrid::new(
        spec.ndvi.width,
        spec.ndvi.height,
        spec.ndvi.pixel_size_m,
        lst,
    )?;
    Ok((lst, ndvi))
}

/// Diagonal ramp from `lo` at the top-left to `hi` at the bottom-right.
pub fn ramp(
    width: usize,
    height: usize,
    pixel_size_m: f64,
    lo: f64,
    hi: f64,
) -> Result<RasterGrid> {
    if width < 2 || height < 2 {
        return Err(Error::InvalidArgument("ramp needs at least 2x2".into()));
    }
    let denom = (width + height - 2) as f64;
    let values = (0..width * height)
        .map(|i| {
            let (r, c) = (i / width, i % width);
            (lo + (hi - lo) * (r + c) as f64 / denom) as f32 as f64
        })
        .collect();
    RasterGrid::new(width, height, pixel_size_m, values)
}

/// Checkerboard of `cell x cell` tiles alternating `lo` and `hi`.
pub fn checkerboard(
    width: usize,
    height: usize,
    pixel_size_m: f64,
    cell: usize,
    lo: f64,
    hi: f64,
) -> Result<RasterGrid> {
    if cell == 0 {
        return Err(Error::InvalidArgument("cell must be >= 1".into()));
    }
    let values = (0..width * height)
        .map(|i| {
            let (r, c) = (i / width, i % width);
            let v = if ((r / cell) + (c / cell)) % 2 == 0 {
                lo
            } else {
                hi
            };
            v as f32 as f64
        })
        .collect();
    RasterGrid::new(width, height, pixel_size_m, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> FieldSpec {
        FieldSpec {
            width: 192,
            height: 192,
            pixel_size_m: 250.0,
            corr_length_m: 1000.0,
            min_value: 280.0,
            max_value: 312.0,
            seed,
        }
    }

    #[test]
    fn field_is_deterministic_in_the_seed() {
        let a = gaussian_field(&spec(5)).unwrap();
        let b = gaussian_field(&spec(5)).unwrap();
        assert_eq!(a.values(), b.values());
        let c = gaussian_field(&spec(6)).unwrap();
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn field_respects_range_and_f32_snap() {
        let g = gaussian_field(&spec(1)).unwrap();
        for &v in g.values() {
            assert!(v >= 280.0 && v <= 312.0);
            assert_eq!(v, v as f32 as f64, "values must be f32-representable");
        }
    }

    #[test]
    fn field_statistics_match_the_recipe() {
        // mid 296, sigma 4; correlated samples have few effective degrees of
        // freedom, so tolerances are loose but still discriminating.
        let g = gaussian_field(&spec(2)).unwrap();
        let n = g.values().len() as f64;
        let mean = g.values().iter().sum::<f64>() / n;
        let var = g
            .values()
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        assert!((mean - 296.0).abs() < 1.0, "mean {mean}");
        let sd = var.sqrt();
        assert!((sd - 4.0).abs() < 0.8, "sd {sd}");
    }

    #[test]
    fn zero_dc_centers_the_unit_field() {
        let u = unit_grf(64, 64, 4.0, 9);
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        assert!(mean.abs() < 1e-12, "DC bin removed, mean {mean}");
    }

    #[test]
    fn autocorrelation_tracks_the_gaussian_model() {
        // Row-wise empirical autocorrelation; C(h)/C(0) = exp(-h^2/(2 l^2)).
        let l = 6.0;
        let u = unit_grf(256, 256, l, 3);
        let n = 256;
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / u.len() as f64;
        let corr_at = |h: usize| {
            let mut acc = 0.0;
            let mut count = 0usize;
            for r in 0..n {
                for c in 0..n - h {
                    acc += (u[r * n + c] - mean) * (u[r * n + c + h] - mean);
                    count += 1;
                }
            }
            acc / (count as f64 * var)
        };
        let at_l = corr_at(l as usize);
        let expected = (-0.5f64).exp();
        assert!(
            (at_l - expected).abs() < 0.1,
            "corr at lag l: {at_l} vs {expected}"
        );
        assert!(corr_at(4 * l as usize) < 0.25, "long-range decorrelation");
        assert!(corr_at(1) > corr_at(l as usize), "monotone near origin");
    }

    #[test]
    fn correlation_length_scales_with_pixel_size() {
        // Same meters, half the pixel size: twice the correlation in pixels.
        let fine = FieldSpec {
            pixel_size_m: 125.0,
            ..spec(4)
        };
        let coarse = spec(4);
        let gf = gaussian_field(&fine).unwrap();
        let gc = gaussian_field(&coarse).unwrap();
        let smoothness = |g: &RasterGrid| {
            let mut acc = 0.0;
            for r in 0..g.height() {
                for c in 0..g.width() - 1 {
                    let d = g.get(r, c + 1) - g.get(r, c);
                    acc += d * d;
                }
            }
            acc
        };
        assert!(
            smoothness(&gf) < smoothness(&gc),
            "finer pixels see a smoother field"
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(gaussian_field(&FieldSpec {
            width: 1,
            ..spec(0)
        })
        .is_err());
        assert!(gaussian_field(&FieldSpec {
            corr_length_m: 0.0,
            ..spec(0)
        })
        .is_err());
        assert!(gaussian_field(&FieldSpec {
            min_value: 300.0,
            max_value: 300.0,
            ..spec(0)
        })
        .is_err());
        assert!(gaussian_field(&FieldSpec {
            pixel_size_m: -1.0,
            ..spec(0)
        })
        .is_err());
    }

    fn world(seed: u64) -> WorldSpec {
        WorldSpec {
            ndvi: FieldSpec {
                width: 160,
                height: 160,
                pixel_size_m: 250.0,
                corr_length_m: 2000.0,
                min_value: 0.05,
                max_value: 0.85,
                seed,
            },
            slope: -12.0,
            intercept: 308.0,
            noise_sigma_k: 0.4,
            noise_corr_length_m: 750.0,
        }
    }

    #[test]
    fn world_recovers_its_regression_by_least_squares() {
        let (lst, ndvi) = linear_ndvi_world(&world(11)).unwrap();
        let n = lst.values().len() as f64;
        let mx = ndvi.values().iter().sum::<f64>() / n;
        let my = lst.values().iter().sum::<f64>() / n;
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (&x, &y) in ndvi.values().iter().zip(lst.values()) {
            sxx += (x - mx) * (x - mx);
            sxy += (x - mx) * (y - my);
        }
        let slope = sxy / sxx;
        let intercept = my - slope * mx;
        assert!((slope - -12.0).abs() < 0.6, "slope {slope}");
        assert!((intercept - 308.0).abs() < 0.4, "intercept {intercept}");
    }

    #[test]
    fn world_is_deterministic_and_physical() {
        let (a_lst, a_ndvi) = linear_ndvi_world(&world(3)).unwrap();
        let (b_lst, b_ndvi) = linear_ndvi_world(&world(3)).unwrap();
        assert_eq!(a_lst.values(), b_lst.values());
        assert_eq!(a_ndvi.values(), b_ndvi.values());
        assert!(a_lst.values().iter().all(|&v| v > 0.0));
        assert!(a_ndvi.values().iter().all(|&v| (0.05..=0.85).contains(&v)));
    }

    #[test]
    fn unphysical_world_is_rejected() {
        let w = WorldSpec {
            intercept: 5.0,
            slope: -12.0,
            ..world(0)
        };
        assert!(linear_ndvi_world(&w).is_err(), "LST would go negative");
    }

    #[test]
    fn ramp_is_monotone_diagonally() {
        let g = ramp(8, 8, 100.0, 290.0, 306.0).unwrap();
        assert_eq!(g.get(0, 0), 290.0);
        assert_eq!(g.get(7, 7), 306.0);
        assert!(g.get(3, 4) > g.get(3, 3));
        assert!(g.get(4, 3) > g.get(3, 3));
    }

    #[test]
    fn checkerboard_alternates_cells() {
        let g = checkerboard(8, 8, 100.0, 2, 290.0, 310.0).unwrap();
        assert_eq!(g.get(0, 0), 290.0);
        assert_eq!(g.get(0, 2), 310.0);
        assert_eq!(g.get(2, 0), 310.0);
        assert_eq!(g.get(2, 2), 290.0);
        assert_eq!(g.get(1, 1), 290.0, "within-cell constancy");
    }
}
