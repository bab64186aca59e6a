//! Overfit a small network on eight patches until the normalized train MSE
//! collapses. Useful as a quick end-to-end sanity check of the optimizer,
//! the loss, and the data plumbing.

use lstsr::mrunet::MruNetConfig;
use lstsr::raster::{build_dataset, extract_patches};
use lstsr::synth::{gaussian_field, FieldSpec};
use lstsr::train::{train, TrainConfig};

fn main() {
    let scene = gaussian_field(&FieldSpec {
        width: 192,
        height: 192,
        pixel_size_m: 250.0,
        corr_length_m: 2000.0,
        min_value: 284.0,
        max_value: 306.0,
        seed: 1,
    })
    .expect("scene");
    let patches = extract_patches(&scene, 64, 64).expect("patches");
    // 9 patches -> 8 train / 1 test with the default 75/25 rounding.
    let (train_ds, test_ds) = build_dataset(&patches, 4, (8.0 / 9.0, 1.0 / 9.0), 2).expect("split");
    println!(
        "{} train patches, {} test patches",
        train_ds.len(),
        test_ds.len()
    );

    let net_cfg = MruNetConfig {
        levels: 2,
        base_filters: 8,
        seed: 3,
        ..MruNetConfig::default()
    };
    // One batch per epoch: each epoch is one optimizer step.
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        lr: 1e-3,
        lr_drop_epoch: 200,
        lr_drop_factor: 100.0,
        seed: 4,
        ratio: 4,
        checkpoint_every: 0,
        stop_below_train_loss: None,
    };
    let t0 = std::time::Instant::now();
    let out = train(&train_ds, &test_ds, &net_cfg, &cfg).expect("train");
    for h in out.history.iter().step_by(20) {
        println!(
            "step {:>4}: train mse {:.3e}, test rmse {:.3} K",
            h.epoch, h.train_loss, h.test_rmse
        );
    }
    let last = out.history.last().unwrap();
    println!(
        "final train mse {:.3e} after {} steps in {:.1?} (best test rmse {:.3} K at step {})",
        last.train_loss,
        cfg.epochs,
        t0.elapsed(),
        out.best_test_rmse,
        out.best_epoch
    );
}
