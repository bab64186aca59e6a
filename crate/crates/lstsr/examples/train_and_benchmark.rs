//! Train a compact network on a random-field dataset and benchmark it
//! against the bicubic and ATPRK baselines on the held-out split.

use lstsr::atprk::AtprkOptions;
use lstsr::mrunet::MruNetConfig;
use lstsr::raster::{build_dataset, extract_patches, RasterGrid};
use lstsr::synth::{gaussian_field, FieldSpec};
use lstsr::train::{benchmark, train, BenchItem, TrainConfig};

fn main() {
    let mut patches = Vec::new();
    for seed in 0..4u64 {
        let scene = gaussian_field(&FieldSpec {
            width: 256,
            height: 256,
            pixel_size_m: 250.0,
            corr_length_m: 1500.0,
            min_value: 283.0,
            max_value: 309.0,
            seed: 100 + seed,
        })
        .expect("scene");
        patches.extend(extract_patches(&scene, 64, 64).expect("patches"));
    }
    let (train_ds, test_ds) = build_dataset(&patches, 4, (0.75, 0.25), 5).expect("split");
    println!("{} train / {} test patches", train_ds.len(), test_ds.len());

    let net_cfg = MruNetConfig {
        levels: 2,
        base_filters: 8,
        seed: 6,
        ..MruNetConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 16,
        lr: 1e-3,
        lr_drop_epoch: 5,
        lr_drop_factor: 10.0,
        seed: 7,
        ratio: 4,
        checkpoint_every: 0,
        stop_below_train_loss: None,
    };
    let t0 = std::time::Instant::now();
    let out = train(&train_ds, &test_ds, &net_cfg, &cfg).expect("train");
    println!(
        "trained {} epochs in {:.1?}; best test rmse {:.3} K at epoch {}",
        cfg.epochs,
        t0.elapsed(),
        out.best_test_rmse,
        out.best_epoch
    );

    let items: Vec<BenchItem> = test_ds
        .pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| BenchItem {
            id: format!("patch_{i}"),
            hr: RasterGrid::new(64, 64, 250.0, pair.hr.data().to_vec()).expect("grid"),
            ndvi: None,
        })
        .collect();
    let mut best = out.best;
    let report = benchmark(
        &items,
        Some((&mut best, out.norm_max)),
        4,
        &AtprkOptions::default(),
    )
    .expect("benchmark");
    print!("{}", report.to_csv());
    let net_psnr = report.row("mrunet").unwrap().psnr;
    let bic_psnr = report.row("bicubic").unwrap().psnr;
    let atprk_psnr = report.row("atprk").unwrap().psnr;
    println!("PSNR: mrunet {net_psnr:.2} vs bicubic {bic_psnr:.2} vs atprk {atprk_psnr:.2} dB");
}
