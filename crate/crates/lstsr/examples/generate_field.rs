//! Generate synthetic scenes: a correlated Gaussian random field, a
//! checkerboard fixture, and an NDVI-coupled LST world.
//!
//! ```bash
//! cargo run --release -p lstsr --example generate_field
//! ```
//!
//! Artifacts land in `examples-out/`: `.lstgrid` pairs plus PGM previews you
//! can open with any image viewer.

use lstsr::cli::dump_grayscale;
use lstsr::raster::store_grid;
use lstsr::synth::{checkerboard, gaussian_field, linear_ndvi_world, FieldSpec, WorldSpec};

fn main() {
    let out = std::path::Path::new("examples-out");
    std::fs::create_dir_all(out).expect("create output dir");

    let spec = FieldSpec {
        width: 256,
        height: 256,
        pixel_size_m: 1000.0,
        corr_length_m: 8000.0,
        min_value: 280.0,
        max_value: 310.0,
        seed: 42,
    };
    let field = gaussian_field(&spec).expect("grf");
    store_grid(&field, out.join("grf.lstgrid")).expect("store");
    dump_grayscale(&field, out.join("grf.pgm")).expect("preview");
    let mean = field.values().iter().sum::<f64>() / field.values().len() as f64;
    println!(
        "grf.lstgrid: {}x{} at {} m/px, mean {:.2} K (target midpoint {})",
        field.width(),
        field.height(),
        field.pixel_size_m(),
        mean,
        0.5 * (spec.min_value + spec.max_value)
    );

    let checker = checkerboard(128, 128, 1000.0, 16, 285.0, 305.0).expect("checker");
    store_grid(&checker, out.join("checker.lstgrid")).expect("store");
    dump_grayscale(&checker, out.join("checker.pgm")).expect("preview");
    println!("checker.lstgrid: 16-px cells alternating 285/305 K");

    // LST follows a linear function of NDVI plus correlated noise; the same
    // seed pins both fields.
    let world = WorldSpec {
        ndvi: FieldSpec {
            min_value: 0.05,
            max_value: 0.85,
            corr_length_m: 16000.0,
            seed: 7,
            ..spec
        },
        slope: -12.0,
        intercept: 308.0,
        noise_sigma_k: 0.4,
        noise_corr_length_m: 3000.0,
    };
    let (lst, ndvi) = linear_ndvi_world(&world).expect("world");
    store_grid(&lst, out.join("world_lst.lstgrid")).expect("store");
    store_grid(&ndvi, out.join("world_ndvi.lstgrid")).expect("store");
    dump_grayscale(&lst, out.join("world_lst.pgm")).expect("preview");
    dump_grayscale(&ndvi, out.join("world_ndvi.pgm")).expect("preview");
    println!(
        "world_lst/world_ndvi: lst = {}*ndvi + {} + noise",
        world.slope, world.intercept
    );
}
