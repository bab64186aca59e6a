//! Command-line surface. Every subcommand is a thin binding over the library
//! modules; artifacts (grids, datasets, checkpoints, CSV reports) are byte
//! reproducible for fixed flags and seeds.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::atprk::{atprk_sharpen, AtprkOptions};
use crate::error::{Error, Result};
use crate::metrics::evaluate_set;
use crate::mrunet::{MruNet, MruNetConfig};
use crate::raster::{
    build_dataset, extract_patches, load_dataset, load_grid, store_dataset, store_grid, RasterGrid,
    SplitTag,
};
use crate::resample::{area_weighted_downsample, norml4_downsample};
use crate::synth::{checkerboard, gaussian_field, linear_ndvi_world, ramp, FieldSpec, WorldSpec};
use crate::train::{benchmark, super_resolve, train, BenchItem, TrainConfig};

#[derive(Parser)]
#[command(
    name = "lstsr",
    version,
    about = "Land surface temperature single-image super-resolution toolkit",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene.
    Synth(SynthArgs),
    /// Cut grids into patches and build train/test datasets.
    Dataset(DatasetArgs),
    /// Downsample a grid with the physical or area-weighted model.
    Degrade(DegradeArgs),
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Super-resolve a grid with a trained checkpoint.
    Sr(SrArgs),
    /// Sharpen coarse LST against a fine NDVI covariate.
    Atprk(AtprkArgs),
    /// Compare a prediction against ground truth.
    Metrics(MetricsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Generator {
    Grf,
    World,
    Ramp,
    Checker,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "grf")]
    generator: Generator,
    /// Square grid edge in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, default_value_t = 1000.0)]
    pixel_size: f64,
    /// Correlation length in pixels.
    #[arg(long, default_value_t = 8.0)]
    corr: f64,
    #[arg(long, default_value_t = 280.0)]
    min: f64,
    #[arg(long, default_value_t = 310.0)]
    max: f64,
    /// Checker cell edge in pixels.
    #[arg(long, default_value_t = 8)]
    cell: usize,
    /// World generator: Kelvin per NDVI unit.
    #[arg(long, default_value_t = -12.0, allow_hyphen_values = true)]
    slope: f64,
    /// World generator: Kelvin at NDVI zero.
    #[arg(long, default_value_t = 308.0)]
    intercept: f64,
    /// World generator: NDVI range.
    #[arg(long, default_value_t = 0.05)]
    ndvi_min: f64,
    #[arg(long, default_value_t = 0.85)]
    ndvi_max: f64,
    /// World generator: correlated noise level in Kelvin.
    #[arg(long, default_value_t = 0.4)]
    noise_sigma: f64,
    /// World generator: noise correlation length in pixels.
    #[arg(long, default_value_t = 3.0)]
    noise_corr: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// World generator: where to write the NDVI grid.
    #[arg(long)]
    ndvi_out: Option<PathBuf>,
    /// Optional grayscale preview (binary PGM).
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    /// Input grids; repeat the flag for multiple scenes.
    #[arg(long, required = true, num_args = 1.., action = clap::ArgAction::Append)]
    input: Vec<PathBuf>,
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long, default_value_t = 64)]
    stride: usize,
    #[arg(long, default_value_t = 4)]
    ratio: usize,
    /// Train fraction; the rest is the test split.
    #[arg(long, default_value_t = 0.75)]
    split: f64,
    #[arg(long)]
    seed: u64,
    /// Output directory receiving train.lstpatch and test.lstpatch.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DegradeMethod {
    Norml4,
    AreaWeighted,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    ratio: f64,
    #[arg(long, value_enum, default_value = "norml4")]
    method: DegradeMethod,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file mirroring the training config fields, with an optional
    /// "net" object for the network shape.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory holding train.lstpatch and test.lstpatch.
    #[arg(long)]
    data: PathBuf,
    /// Where the best-by-test-RMSE checkpoint is written.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Optional per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also run the bicubic and ATPRK baselines and emit a comparison CSV.
    #[arg(long)]
    benchmark: Option<PathBuf>,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 4)]
    ratio: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Args)]
struct AtprkArgs {
    /// Coarse LST grid.
    #[arg(long)]
    lst: PathBuf,
    /// Fine NDVI grid, `ratio` times the LST resolution.
    #[arg(long)]
    ndvi: PathBuf,
    #[arg(long, default_value_t = 4)]
    ratio: usize,
    #[arg(long, default_value_t = 5)]
    neighborhood: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Parse and dispatch. Exit code 0 on success, 1 on usage errors (help text
/// included), 2 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_threads();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Honor LSTSR_THREADS as a cap on worker fan-out. First caller wins; later
/// calls in the same process keep the existing pool.
fn init_threads() {
    if let Ok(v) = std::env::var("LSTSR_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Dataset(a) => cmd_dataset(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sr(a) => cmd_sr(a),
        Command::Atprk(a) => cmd_atprk(a),
        Command::Metrics(a) => cmd_metrics(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = FieldSpec {
        width: a.size,
        height: a.size,
        pixel_size_m: a.pixel_size,
        corr_length_m: a.corr * a.pixel_size,
        min_value: a.min,
        max_value: a.max,
        seed: a.seed,
    };
    let grid = match a.generator {
        Generator::Grf => gaussian_field(&spec)?,
        Generator::Ramp => ramp(a.size, a.size, a.pixel_size, a.min, a.max)?,
        Generator::Checker => checkerboard(a.size, a.size, a.pixel_size, a.cell, a.min, a.max)?,
        Generator::World => {
            let world = WorldSpec {
                ndvi: FieldSpec {
                    min_value: a.ndvi_min,
                    max_value: a.ndvi_max,
                    ..spec
                },
                slope: a.slope,
                intercept: a.intercept,
                noise_sigma_k: a.noise_sigma,
                noise_corr_length_m: a.noise_corr * a.pixel_size,
            };
            let (lst, ndvi) = linear_ndvi_world(&world)?;
            let ndvi_out = a.ndvi_out.as_ref().ok_or_else(|| {
                Error::InvalidArgument("--generator world requires --ndvi-out".into())
            })?;
            store_grid(&ndvi, ndvi_out)?;
            lst
        }
    };
    store_grid(&grid, &a.out)?;
    if let Some(p) = &a.preview {
        dump_grayscale(&grid, p)?;
    }
    println!(
        "wrote {} ({}x{}, {} m/px)",
        a.out.display(),
        grid.width(),
        grid.height(),
        grid.pixel_size_m()
    );
    Ok(())
}

fn cmd_dataset(a: DatasetArgs) -> Result<()> {
    let mut patches = Vec::new();
    for path in &a.input {
        let grid = load_grid(path)?;
        patches.extend(extract_patches(&grid, a.patch, a.stride)?);
    }
    let (train_ds, test_ds) = build_dataset(&patches, a.ratio, (a.split, 1.0 - a.split), a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    store_dataset(&train_ds, a.out.join("train.lstpatch"))?;
    store_dataset(&test_ds, a.out.join("test.lstpatch"))?;
    println!(
        "wrote {} train / {} test patches (norm_max {}) to {}",
        train_ds.len(),
        test_ds.len(),
        train_ds.norm_max,
        a.out.display()
    );
    Ok(())
}

fn cmd_degrade(a: DegradeArgs) -> Result<()> {
    let grid = load_grid(&a.input)?;
    let out = match a.method {
        DegradeMethod::Norml4 => {
            if a.ratio.fract() != 0.0 || a.ratio < 2.0 {
                return Err(Error::InvalidArgument(format!(
                    "norml4 needs an integer ratio >= 2, got {}",
                    a.ratio
                )));
            }
            norml4_downsample(&grid, a.ratio as usize)?
        }
        DegradeMethod::AreaWeighted => area_weighted_downsample(&grid, a.ratio)?,
    };
    store_grid(&out, &a.out)?;
    if let Some(p) = &a.preview {
        dump_grayscale(&out, p)?;
    }
    println!(
        "wrote {} ({}x{})",
        a.out.display(),
        out.width(),
        out.height()
    );
    Ok(())
}

/// The train config file is the TrainConfig JSON with an optional "net"
/// object; the --seed flag overrides any seed in the file.
fn read_train_file(path: &Path) -> Result<(TrainConfig, MruNetConfig)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let net = match value.as_object_mut().and_then(|m| m.remove("net")) {
        Some(v) => serde_json::from_value(v).map_err(|e| Error::json(path, e))?,
        None => MruNetConfig::default(),
    };
    let train: TrainConfig = serde_json::from_value(value).map_err(|e| Error::json(path, e))?;
    Ok((train, net))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (mut cfg, mut net_cfg) = read_train_file(&a.config)?;
    cfg.seed = a.seed;
    net_cfg.seed = a.seed;
    let train_ds = load_dataset(a.data.join("train.lstpatch"))?;
    let test_ds = load_dataset(a.data.join("test.lstpatch"))?;
    if train_ds.split != SplitTag::Train || test_ds.split != SplitTag::Test {
        return Err(Error::Dataset(
            "dataset directory has mislabeled splits".into(),
        ));
    }
    let out = train(&train_ds, &test_ds, &net_cfg, &cfg)?;
    for h in &out.history {
        println!(
            "epoch {} lr {} train_loss {:.6e} test_rmse {:.4} psnr {:.3} ssim {:.4}",
            h.epoch, h.lr, h.train_loss, h.test_rmse, h.test_psnr, h.test_ssim
        );
    }
    if let Some(hist) = &a.history {
        let mut csv = String::from("epoch,lr,train_loss,test_rmse,test_psnr,test_ssim\n");
        for h in &out.history {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                h.epoch, h.lr, h.train_loss, h.test_rmse, h.test_psnr, h.test_ssim
            ));
        }
        fs::write(hist, csv).map_err(|e| Error::io(hist, e))?;
    }
    out.best.save_checkpoint(out.norm_max, &a.out)?;
    println!(
        "best epoch {} test_rmse {:.4}; checkpoint {}",
        out.best_epoch,
        out.best_test_rmse,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (mut net, norm_max) = MruNet::<f32>::load_checkpoint(&a.checkpoint)?;
    let ds = match a.split {
        SplitArg::Train => load_dataset(a.data.join("train.lstpatch"))?,
        SplitArg::Test => load_dataset(a.data.join("test.lstpatch"))?,
    };
    if ds.is_empty() {
        return Err(Error::Dataset("selected split is empty".into()));
    }
    let ratio = ds.ratio;
    let mut items = Vec::with_capacity(ds.len());
    let size = ds.pairs[0].hr.size();
    let pixel = 1000.0;
    for (i, pair) in ds.pairs.iter().enumerate() {
        let hr = RasterGrid::new(size, size, pixel, pair.hr.data().to_vec())?;
        items.push((format!("patch_{i}"), hr, pair.ilr.data().to_vec()));
    }

    // Per-patch network metrics against ground truth.
    let mut rows = Vec::with_capacity(items.len());
    for (id, hr, _) in &items {
        let coarse = norml4_downsample(hr, ratio)?;
        let pred = super_resolve(&mut net, norm_max, &coarse, ratio)?;
        rows.push((id.clone(), hr.values().to_vec(), pred.values().to_vec()));
    }
    let report = evaluate_set(&rows)?;
    let agg = &report.aggregate;
    println!(
        "aggregate rmse={} psnr={} ssim={} dr={} over {} patches",
        agg.rmse,
        agg.psnr,
        agg.ssim,
        agg.dr,
        rows.len()
    );
    if let Some(csv) = &a.csv {
        fs::write(csv, report.to_csv()).map_err(|e| Error::io(csv, e))?;
    }
    if let Some(bench_path) = &a.benchmark {
        let bench_items: Vec<BenchItem> = items
            .iter()
            .map(|(id, hr, _)| BenchItem {
                id: id.clone(),
                hr: hr.clone(),
                ndvi: None,
            })
            .collect();
        let rep = benchmark(
            &bench_items,
            Some((&mut net, norm_max)),
            ratio,
            &AtprkOptions::default(),
        )?;
        fs::write(bench_path, rep.to_csv()).map_err(|e| Error::io(bench_path, e))?;
        for row in &rep.rows {
            println!(
                "method {} rmse={} psnr={} ssim={}",
                row.method, row.rmse, row.psnr, row.ssim
            );
        }
    }
    Ok(())
}

fn cmd_sr(a: SrArgs) -> Result<()> {
    let (mut net, norm_max) = MruNet::<f32>::load_checkpoint(&a.checkpoint)?;
    let grid = load_grid(&a.input)?;
    let out = super_resolve(&mut net, norm_max, &grid, a.ratio)?;
    store_grid(&out, &a.out)?;
    if let Some(p) = &a.preview {
        dump_grayscale(&out, p)?;
    }
    println!(
        "wrote {} ({}x{}, {} m/px)",
        a.out.display(),
        out.width(),
        out.height(),
        out.pixel_size_m()
    );
    Ok(())
}

fn cmd_atprk(a: AtprkArgs) -> Result<()> {
    let lst = load_grid(&a.lst)?;
    let ndvi = load_grid(&a.ndvi)?;
    let opts = AtprkOptions {
        neighborhood: a.neighborhood,
        ..AtprkOptions::default()
    };
    let out = atprk_sharpen(&lst, &ndvi, a.ratio, &opts)?;
    store_grid(&out.sharpened, &a.out)?;
    if let Some(p) = &a.preview {
        dump_grayscale(&out.sharpened, p)?;
    }
    println!(
        "wrote {} (slope {:.4}, intercept {:.2}, variogram nugget {:.4} sill {:.4} range {:.0} m{})",
        a.out.display(),
        out.model.slope,
        out.model.intercept,
        out.model.variogram.nugget,
        out.model.variogram.sill,
        out.model.variogram.range_m,
        if out.jittered_parents > 0 {
            format!(", {} jittered solves", out.jittered_parents)
        } else {
            String::new()
        }
    );
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let gt = load_grid(&a.gt)?;
    let pred = load_grid(&a.pred)?;
    let report = evaluate_set(&[(
        "pair".to_string(),
        gt.values().to_vec(),
        pred.values().to_vec(),
    )])?;
    let m = &report.items[0];
    println!(
        "rmse={} psnr={} ssim={} dr={}",
        m.rmse, m.psnr, m.ssim, m.dr
    );
    if let Some(csv) = &a.csv {
        fs::write(csv, report.to_csv()).map_err(|e| Error::io(csv, e))?;
    }
    Ok(())
}

/// Write a min-max stretched 8-bit grayscale dump (binary PGM, P5).
///
/// Nodata renders as 0; a grid with zero dynamic range renders mid-gray 128.
pub fn dump_grayscale(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let valid = grid.values().iter().filter(|v| v.is_finite());
    let lo = valid.clone().cloned().fold(f64::MAX, f64::min);
    let hi = valid.cloned().fold(f64::MIN, f64::max);
    let flat = !(hi > lo);
    let mut bytes = Vec::with_capacity(grid.values().len() + 32);
    bytes.extend_from_slice(format!("P5\n{} {}\n255\n", grid.width(), grid.height()).as_bytes());
    for &v in grid.values() {
        bytes.push(if !v.is_finite() {
            0
        } else if flat {
            128
        } else {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        });
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}
