//! Grid data model, `.lstgrid` file I/O, patch extraction and dataset assembly.
//!
//! A `.lstgrid` is a pair of files sharing one stem: `<name>.json` (header) and
//! `<name>.bin` (raw little-endian float32, row-major, top-left origin). Missing
//! pixels (cloud cover) are encoded as quiet NaN in the payload and as NaN in
//! memory. Values are held as `f64` in memory; the payload dtype is `f32le`, so
//! a store/load round trip is bit-exact whenever the in-memory values are
//! f32-representable (which every grid loaded from disk or produced by the
//! built-in generators is).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample;

/// Georeferenced-lite 2D field of LST values in Kelvin.
///
/// Immutable after construction; NaN marks cloud/missing pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    width: usize,
    height: usize,
    pixel_size_m: f64,
    values: Vec<f64>,
}

impl RasterGrid {
    /// Build a grid, validating the structural invariants: `values.len() ==
    /// width * height`, positive pixel size, and every non-NaN value finite.
    pub fn new(width: usize, height: usize, pixel_size_m: f64, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidGrid(format!(
                "non-positive dimensions {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::InvalidGrid(format!(
                "payload length {} does not match {width}x{height}",
                values.len()
            )));
        }
        if !(pixel_size_m > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "pixel_size_m must be > 0, got {pixel_size_m}"
            )));
        }
        if values.iter().any(|v| v.is_infinite()) {
            return Err(Error::InvalidGrid(
                "grid contains non-finite values other than the NaN nodata sentinel".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            pixel_size_m,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_size_m(&self) -> f64 {
        self.pixel_size_m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at (row, col); NaN means nodata.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn has_nodata(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    pub fn nodata_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    /// Check the physical LST invariant (every valid pixel > 0 K).
    pub fn validate_positive(&self) -> Result<()> {
        match self.values.iter().find(|v| !v.is_nan() && **v <= 0.0) {
            Some(v) => Err(Error::InvalidGrid(format!(
                "non-positive temperature {v} K"
            ))),
            None => Ok(()),
        }
    }
}

/// Square cloud-free window cut from a parent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    size: usize,
    offset: (usize, usize),
    data: Vec<f64>,
}

impl Patch {
    /// `offset` is the (row, col) of the window's top-left pixel in the parent
    /// grid. The data must be nodata-free.
    pub fn new(size: usize, offset: (usize, usize), data: Vec<f64>) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("patch size must be >= 1".into()));
        }
        if data.len() != size * size {
            return Err(Error::ShapeMismatch(format!(
                "patch data length {} != {size}x{size}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(
                "patch contains nodata or non-finite values".into(),
            ));
        }
        Ok(Self { size, offset, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn offset(&self) -> (usize, usize) {
        self.offset
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// One training record: the HR ground truth and its degraded-then-bicubic
/// interpolated counterpart at the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub hr: Patch,
    pub ilr: Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    Validation,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Test => write!(f, "test"),
            SplitTag::Validation => write!(f, "validation"),
        }
    }
}

/// Collection of (HR, ILR) pairs plus the normalization constant.
///
/// `norm_max` is always computed from the train split's HR pixels and carried
/// unchanged into the matching test split.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDataset {
    pub pairs: Vec<PatchPair>,
    pub norm_max: f64,
    pub ratio: usize,
    pub split: SplitTag,
}

impl PatchDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.pairs.first().map(|p| p.hr.size()).unwrap_or(0)
    }
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    width: usize,
    height: usize,
    pixel_size_m: f64,
    dtype: String,
    nodata: String,
}

/// Resolve the `<name>.json` / `<name>.bin` pair behind a `.lstgrid` path.
fn grid_file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("lstgrid") | Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Load a grid from a `.lstgrid` pair. NaN payload entries become the nodata
/// sentinel.
pub fn load_grid(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let (json_path, bin_path) = grid_file_pair(path.as_ref());
    let header_text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: GridHeader =
        serde_json::from_str(&header_text).map_err(|e| Error::json(&json_path, e))?;
    if header.dtype != "f32le" {
        return Err(Error::InvalidGrid(format!(
            "unsupported dtype {:?} (expected \"f32le\")",
            header.dtype
        )));
    }
    if header.nodata != "nan" {
        return Err(Error::InvalidGrid(format!(
            "unsupported nodata encoding {:?} (expected \"nan\")",
            header.nodata
        )));
    }
    let payload = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected = header
        .width
        .checked_mul(header.height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::InvalidGrid("grid dimensions overflow".into()))?;
    if payload.len() != expected {
        return Err(Error::InvalidGrid(format!(
            "payload is {} bytes, expected {expected} for {}x{}",
            payload.len(),
            header.width,
            header.height
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            // Canonicalize every NaN bit pattern to the sentinel.
            if v.is_nan() {
                f64::NAN
            } else {
                v as f64
            }
        })
        .collect();
    RasterGrid::new(header.width, header.height, header.pixel_size_m, values)
}

/// Store a grid as a `.lstgrid` pair. Values are written as little-endian f32.
pub fn store_grid(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, bin_path) = grid_file_pair(path.as_ref());
    let header = GridHeader {
        width: grid.width,
        height: grid.height,
        pixel_size_m: grid.pixel_size_m,
        dtype: "f32le".into(),
        nodata: "nan".into(),
    };
    let header_text = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(&json_path, header_text).map_err(|e| Error::io(&json_path, e))?;
    let mut payload = Vec::with_capacity(grid.values.len() * 4);
    for &v in &grid.values {
        let f = if v.is_nan() { f32::NAN } else { v as f32 };
        payload.extend_from_slice(&f.to_le_bytes());
    }
    std::fs::write(&bin_path, payload).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

/// Extract all `size`x`size` windows on the stride lattice that contain zero
/// nodata pixels. Windows touching any nodata pixel are silently discarded;
/// ordering is row-major by offset.
pub fn extract_patches(grid: &RasterGrid, size: usize, stride: usize) -> Result<Vec<Patch>> {
    if size == 0 || size > grid.width.min(grid.height) {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} out of range for {}x{} grid",
            grid.width, grid.height
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let mut patches = Vec::new();
    let mut row = 0;
    while row + size <= grid.height {
        let mut col = 0;
        while col + size <= grid.width {
            let mut data = Vec::with_capacity(size * size);
            let mut clean = true;
            'window: for r in row..row + size {
                for c in col..col + size {
                    let v = grid.get(r, c);
                    if v.is_nan() {
                        clean = false;
                        break 'window;
                    }
                    data.push(v);
                }
            }
            if clean {
                patches.push(Patch::new(size, (row, col), data)?);
            }
            col += stride;
        }
        row += stride;
    }
    Ok(patches)
}

/// Pair every HR patch with its ILR counterpart, shuffle with a seeded
/// permutation, and split into train/test datasets.
///
/// `split` are the (train, test) fractions; the default protocol is
/// `(0.75, 0.25)`. The normalization constant is the maximum HR pixel value
/// over the *train* patches only and is shared by both returned datasets.
pub fn build_dataset(
    hr_patches: &[Patch],
    ratio: usize,
    split: (f64, f64),
    seed: u64,
) -> Result<(PatchDataset, PatchDataset)> {
    if hr_patches.is_empty() {
        return Err(Error::Dataset("empty patch list".into()));
    }
    let size = hr_patches[0].size();
    if hr_patches.iter().any(|p| p.size() != size) {
        return Err(Error::Dataset("patches have mixed sizes".into()));
    }
    if ratio < 2 || size % ratio != 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} must be >= 2 and divide the patch size {size}"
        )));
    }
    let (f_train, f_test) = split;
    if !(0.0..=1.0).contains(&f_train)
        || !(0.0..=1.0).contains(&f_test)
        || (f_train + f_test - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions ({f_train}, {f_test}) must sum to 1"
        )));
    }

    let mut indices: Vec<usize> = (0..hr_patches.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let n = hr_patches.len();
    let train_n = ((n as f64) * f_train).round().min(n as f64) as usize;
    if train_n == 0 {
        return Err(Error::Dataset(
            "train split is empty; cannot compute the normalization constant".into(),
        ));
    }

    let make_pairs = |idx: &[usize]| -> Result<Vec<PatchPair>> {
        idx.iter()
            .map(|&i| {
                let hr = hr_patches[i].clone();
                let ilr = resample::make_ilr(&hr, ratio)?;
                Ok(PatchPair { hr, ilr })
            })
            .collect()
    };

    let train_pairs = make_pairs(&indices[..train_n])?;
    let test_pairs = make_pairs(&indices[train_n..])?;

    let norm_max = train_pairs
        .iter()
        .map(|p| p.hr.max())
        .fold(f64::NEG_INFINITY, f64::max);
    if !(norm_max > 0.0) {
        return Err(Error::Dataset(format!(
            "normalization constant must be > 0, got {norm_max}"
        )));
    }

    Ok((
        PatchDataset {
            pairs: train_pairs,
            norm_max,
            ratio,
            split: SplitTag::Train,
        },
        PatchDataset {
            pairs: test_pairs,
            norm_max,
            ratio,
            split: SplitTag::Test,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    patch_size: usize,
    count: usize,
    ratio: usize,
    norm_max: f64,
    split: SplitTag,
    dtype: String,
    offsets: Vec<(usize, usize)>,
}

fn dataset_file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("lstpatch") | Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Store a dataset as a `.lstpatch` pair (`<name>.json` header plus
/// `<name>.bin` with each record's HR then ILR pixels as f32le).
pub fn store_dataset(ds: &PatchDataset, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, bin_path) = dataset_file_pair(path.as_ref());
    let size = ds.patch_size();
    let header = DatasetHeader {
        patch_size: size,
        count: ds.pairs.len(),
        ratio: ds.ratio,
        norm_max: ds.norm_max,
        split: ds.split,
        dtype: "f32le".into(),
        offsets: ds.pairs.iter().map(|p| p.hr.offset()).collect(),
    };
    let header_text = serde_json::to_string_pretty(&header).expect("header serializes");
    std::fs::write(&json_path, header_text).map_err(|e| Error::io(&json_path, e))?;
    let mut payload = Vec::with_capacity(ds.pairs.len() * size * size * 8);
    for pair in &ds.pairs {
        for &v in pair.hr.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in pair.ilr.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(&bin_path, payload).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

/// Load a dataset written by [`store_dataset`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<PatchDataset> {
    let (json_path, bin_path) = dataset_file_pair(path.as_ref());
    let header_text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&header_text).map_err(|e| Error::json(&json_path, e))?;
    if header.dtype != "f32le" {
        return Err(Error::Dataset(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    if header.offsets.len() != header.count {
        return Err(Error::Dataset(format!(
            "offset table has {} entries for {} records",
            header.offsets.len(),
            header.count
        )));
    }
    let payload = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let px = header.patch_size * header.patch_size;
    let expected = header.count * px * 2 * 4;
    if payload.len() != expected {
        return Err(Error::Dataset(format!(
            "payload is {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let mut pairs = Vec::with_capacity(header.count);
    for (i, &offset) in header.offsets.iter().enumerate() {
        let base = i * px * 2;
        let hr = Patch::new(header.patch_size, offset, floats[base..base + px].to_vec())?;
        let ilr = Patch::new(
            header.patch_size,
            offset,
            floats[base + px..base + 2 * px].to_vec(),
        )?;
        pairs.push(PatchPair { hr, ilr });
    }
    Ok(PatchDataset {
        pairs,
        norm_max: header.norm_max,
        ratio: header.ratio,
        split: header.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid_from(width: usize, height: usize, values: Vec<f64>) -> RasterGrid {
        RasterGrid::new(width, height, 1000.0, values).unwrap()
    }

    #[test]
    fn store_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.lstgrid");
        let grid = grid_from(2, 2, vec![300.0, 301.0, 302.0, 303.0]);
        store_grid(&grid, &path).unwrap();
        let back = load_grid(&path).unwrap();
        assert_eq!(back.width(), 2);
        assert_eq!(back.height(), 2);
        assert_eq!(back.values(), grid.values());
        assert_eq!(back.pixel_size_m(), 1000.0);
    }

    #[test]
    fn round_trip_preserves_nodata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloudy");
        let grid = grid_from(2, 2, vec![300.0, f64::NAN, 302.0, 303.0]);
        store_grid(&grid, &path).unwrap();
        let back = load_grid(&path).unwrap();
        assert!(back.get(0, 1).is_nan());
        assert_eq!(back.nodata_count(), 1);
        assert_eq!(back.get(1, 1), 303.0);
    }

    #[test]
    fn payload_length_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.lstgrid");
        let grid = grid_from(2, 2, vec![300.0; 4]);
        store_grid(&grid, &path).unwrap();
        // Truncate the payload to 3 floats for a declared 2x2.
        std::fs::write(dir.path().join("bad.bin"), [0u8; 12]).unwrap();
        let err = load_grid(&path).unwrap_err();
        assert!(matches!(err, Error::InvalidGrid(_)), "{err}");
    }

    #[test]
    fn corrupt_header_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x.json"), "{not json").unwrap();
        std::fs::write(dir.path().join("x.bin"), []).unwrap();
        assert!(load_grid(dir.path().join("x.lstgrid")).is_err());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let grid = grid_from(2, 2, vec![300.0; 4]);
        let err = store_grid(&grid, "/nonexistent-dir/g.lstgrid").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn zero_dimension_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("z.json"),
            r#"{"width":0,"height":2,"pixel_size_m":1000.0,"dtype":"f32le","nodata":"nan"}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("z.bin"), []).unwrap();
        assert!(load_grid(dir.path().join("z.lstgrid")).is_err());
    }

    #[test]
    fn exact_tiling_yields_four_patches() {
        let grid = grid_from(128, 128, vec![300.0; 128 * 128]);
        let patches = extract_patches(&grid, 64, 64).unwrap();
        assert_eq!(patches.len(), 4);
        assert_eq!(patches[0].offset(), (0, 0));
        assert_eq!(patches[3].offset(), (64, 64));
    }

    #[test]
    fn window_containing_nodata_is_discarded() {
        let mut values = vec![300.0; 128 * 128];
        values[10 * 128 + 10] = f64::NAN;
        let grid = grid_from(128, 128, values);
        let patches = extract_patches(&grid, 64, 64).unwrap();
        assert_eq!(patches.len(), 3);
        assert!(patches.iter().all(|p| p.offset() != (0, 0)));
    }

    #[test]
    fn cloud_discard_matches_brute_force_scan() {
        // 1200x1200 grid with ~0.5% random nodata; compare against an
        // independent per-window scan.
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut values = vec![295.0; 1200 * 1200];
        for v in values.iter_mut() {
            if rng.gen::<f64>() < 0.005 {
                *v = f64::NAN;
            }
        }
        let grid = grid_from(1200, 1200, values);
        let patches = extract_patches(&grid, 64, 64).unwrap();

        let mut expected = 0usize;
        for row in (0..=1200 - 64).step_by(64) {
            for col in (0..=1200 - 64).step_by(64) {
                let mut clean = true;
                for r in row..row + 64 {
                    for c in col..col + 64 {
                        if grid.get(r, c).is_nan() {
                            clean = false;
                        }
                    }
                }
                if clean {
                    expected += 1;
                }
            }
        }
        assert_eq!(patches.len(), expected);
        assert!(patches.len() < 324, "fixture should discard something");
    }

    #[test]
    fn stride_out_of_range_rejected() {
        let grid = grid_from(64, 64, vec![300.0; 64 * 64]);
        assert!(extract_patches(&grid, 65, 64).is_err());
        assert!(extract_patches(&grid, 64, 0).is_err());
    }

    fn synthetic_patches(n: usize, size: usize) -> Vec<Patch> {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        (0..n)
            .map(|i| {
                let data: Vec<f64> = (0..size * size)
                    .map(|_| 280.0 + 40.0 * rng.gen::<f64>())
                    .collect();
                Patch::new(size, (i, 0), data).unwrap()
            })
            .collect()
    }

    #[test]
    fn default_split_is_75_25() {
        let patches = synthetic_patches(100, 8);
        let (train, test) = build_dataset(&patches, 4, (0.75, 0.25), 42).unwrap();
        assert_eq!(train.len(), 75);
        assert_eq!(test.len(), 25);
        assert_eq!(train.split, SplitTag::Train);
        assert_eq!(test.split, SplitTag::Test);
    }

    #[test]
    fn constant_patch_has_constant_ilr() {
        let patch = Patch::new(8, (0, 0), vec![300.0; 64]).unwrap();
        let (train, _) = build_dataset(&[patch], 4, (1.0, 0.0), 1).unwrap();
        for v in train.pairs[0].ilr.data() {
            assert!(
                (v - 300.0).abs() < 1e-9,
                "ILR of constant field is constant"
            );
        }
    }

    #[test]
    fn split_is_deterministic_under_seed() {
        let patches = synthetic_patches(40, 8);
        let (tr_a, te_a) = build_dataset(&patches, 2, (0.75, 0.25), 9).unwrap();
        let (tr_b, te_b) = build_dataset(&patches, 2, (0.75, 0.25), 9).unwrap();
        assert_eq!(tr_a, tr_b);
        assert_eq!(te_a, te_b);
        let (tr_c, _) = build_dataset(&patches, 2, (0.75, 0.25), 10).unwrap();
        assert_ne!(tr_a, tr_c, "different seed should reshuffle");
    }

    #[test]
    fn split_is_a_partition_and_norm_max_covers_train() {
        let patches = synthetic_patches(37, 8);
        let (train, test) = build_dataset(&patches, 4, (0.75, 0.25), 5).unwrap();
        assert_eq!(train.len() + test.len(), patches.len());
        let mut seen: Vec<(usize, usize)> = train
            .pairs
            .iter()
            .chain(test.pairs.iter())
            .map(|p| p.hr.offset())
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), patches.len(), "no patch lost or duplicated");
        for pair in &train.pairs {
            assert!(pair.hr.max() <= train.norm_max);
        }
        assert_eq!(train.norm_max, test.norm_max);
    }

    #[test]
    fn empty_patch_list_rejected() {
        assert!(build_dataset(&[], 4, (0.75, 0.25), 0).is_err());
    }

    #[test]
    fn ratio_must_divide_patch_size() {
        let patches = synthetic_patches(4, 10);
        assert!(build_dataset(&patches, 4, (0.75, 0.25), 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let patches = synthetic_patches(10, 8);
        let (train, _) = build_dataset(&patches, 4, (0.75, 0.25), 3).unwrap();
        let path = dir.path().join("train.lstpatch");
        store_dataset(&train, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.len(), train.len());
        assert_eq!(back.ratio, train.ratio);
        assert_eq!(back.split, train.split);
        // Values survive the f32 payload bit-exactly once already f32-quantized.
        let requantized: Vec<f64> = train.pairs[0]
            .hr
            .data()
            .iter()
            .map(|&v| v as f32 as f64)
            .collect();
        assert_eq!(back.pairs[0].hr.data(), requantized.as_slice());
    }

    proptest::proptest! {
        #[test]
        fn extracted_patches_never_contain_nodata(seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..48 * 48)
                .map(|_| {
                    if rng.gen::<f64>() < 0.05 {
                        f64::NAN
                    } else {
                        250.0 + 50.0 * rng.gen::<f64>()
                    }
                })
                .collect();
            let grid = grid_from(48, 48, values);
            for patch in extract_patches(&grid, 16, 8).unwrap() {
                proptest::prop_assert!(patch.data().iter().all(|v| v.is_finite()));
            }
        }

        #[test]
        fn store_load_identity_for_f32_payloads(seed in 0u64..1000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let values: Vec<f64> = (0..9)
                .map(|_| {
                    if rng.gen::<f64>() < 0.1 {
                        f64::NAN
                    } else {
                        (200.0 + 150.0 * rng.gen::<f64>()) as f32 as f64
                    }
                })
                .collect();
            let grid = grid_from(3, 3, values);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.lstgrid");
            store_grid(&grid, &path).unwrap();
            let back = load_grid(&path).unwrap();
            for (a, b) in grid.values().iter().zip(back.values()) {
                proptest::prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
            }
        }
    }
}
