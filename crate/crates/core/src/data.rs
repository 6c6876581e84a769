//! Image and mask grids, dataset ingestion, deterministic splitting and a
//! synthetic shape generator.

use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{file_error, invalid, Error, Result};
use crate::seed;

/// Dense row-major 2-D array of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("grid dimensions must be positive"));
        }
        if values.len() != height * width {
            return Err(invalid(format!(
                "grid of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.width + col] = value;
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn flip_lr(&self) -> Grid {
        Grid::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub fn flip_ud(&self) -> Grid {
        Grid::from_fn(self.height, self.width, |r, c| self.get(self.height - 1 - r, c))
    }

    /// Counter-clockwise quarter turn; swaps the dimensions.
    pub fn rot90(&self) -> Grid {
        Grid::from_fn(self.width, self.height, |r, c| self.get(c, self.width - 1 - r))
    }

    pub fn rot180(&self) -> Grid {
        Grid::from_fn(self.height, self.width, |r, c| {
            self.get(self.height - 1 - r, self.width - 1 - c)
        })
    }

    pub fn rot270(&self) -> Grid {
        Grid::from_fn(self.width, self.height, |r, c| self.get(self.height - 1 - c, r))
    }
}

fn check_unit_range(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(invalid(format!("value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Grey-level image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid(Grid);

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        check_unit_range(&pixels)?;
        Ok(Self(Grid::new(height, width, pixels)?))
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        check_unit_range(grid.values())?;
        Ok(Self(grid))
    }

    /// Builds an image by clipping every value into `[0, 1]`.
    pub fn clipped(grid: Grid) -> Self {
        Self(grid.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn pixels(&self) -> &[f64] {
        self.0.values()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Hard,
    Soft,
}

/// Segmentation mask. Hard masks hold only 0 and 1; soft masks hold
/// probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGrid {
    grid: Grid,
    kind: MaskKind,
}

impl MaskGrid {
    pub fn hard(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(invalid(format!("hard mask value {v} is not 0 or 1")));
        }
        Ok(Self {
            grid: Grid::new(height, width, pixels)?,
            kind: MaskKind::Hard,
        })
    }

    pub fn soft(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        check_unit_range(&pixels)?;
        Ok(Self {
            grid: Grid::new(height, width, pixels)?,
            kind: MaskKind::Soft,
        })
    }

    pub fn from_bools(height: usize, width: usize, fg: &[bool]) -> Result<Self> {
        Self::hard(
            height,
            width,
            fg.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            grid: Grid::from_fn(height, width, |r, c| if f(r, c) { 1.0 } else { 0.0 }),
            kind: MaskKind::Hard,
        }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            grid: Grid::filled(height, width, 0.0),
            kind: MaskKind::Hard,
        }
    }

    /// Wraps a grid already known to satisfy the invariants of `kind`.
    pub(crate) fn from_grid_unchecked(grid: Grid, kind: MaskKind) -> Self {
        Self { grid, kind }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn is_hard(&self) -> bool {
        self.kind == MaskKind::Hard
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn pixels(&self) -> &[f64] {
        self.grid.values()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    /// Pixels at or above `threshold` become foreground.
    pub fn harden(&self, threshold: f64) -> MaskGrid {
        MaskGrid {
            grid: self.grid.map(|v| if v >= threshold { 1.0 } else { 0.0 }),
            kind: MaskKind::Hard,
        }
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.pixels().iter().map(|&v| v >= 0.5).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels().iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.pixels().len() as f64
    }
}

/// One ingested file pair. `mask` is absent for unlabelled data.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: ImageGrid,
    pub mask: Option<MaskGrid>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSample {
    pub id: usize,
    pub name: String,
    pub image: ImageGrid,
    pub mask: MaskGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabelledSample {
    pub id: usize,
    pub name: String,
    pub image: ImageGrid,
}

/// Partition of a dataset into labelled, unlabelled and test parts.
///
/// Sample identity is the index into the list handed to [`split_dataset`].
/// `validation_ids` is an independent 20% draw from the training remainder
/// (labelled and unlabelled), kept by index so unlabelled members can be
/// paired with pseudo-labels later.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub labelled: Vec<LabelledSample>,
    pub unlabelled: Vec<UnlabelledSample>,
    pub test: Vec<LabelledSample>,
    pub validation_ids: Vec<usize>,
    pub seed: u64,
}

pub const TEST_FRACTION: f64 = 0.10;
pub const VALIDATION_FRACTION: f64 = 0.20;

/// Round-half-up to the nearest integer. The small bias absorbs binary
/// representation error in products like `0.05 * 90`.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Splits `samples` deterministically: 10% test, `labelled_fraction` of the
/// remainder labelled, the rest unlabelled with masks dropped.
pub fn split_dataset(samples: &[Sample], labelled_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(labelled_fraction > 0.0 && labelled_fraction <= 1.0) {
        return Err(invalid(format!(
            "labelled fraction {labelled_fraction} outside (0, 1]"
        )));
    }
    let n = samples.len();
    if n < 10 {
        return Err(invalid(format!("need at least 10 samples, got {n}")));
    }
    if let Some(s) = samples.iter().find(|s| s.mask.is_none()) {
        return Err(invalid(format!("sample {} has no mask", s.name)));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[0x5717]));
    let n_test = round_half_up(TEST_FRACTION * n as f64);
    let (test_ids, train_ids) = order.split_at(n_test);
    let n_train = train_ids.len();
    let n_labelled = round_half_up(labelled_fraction * n_train as f64).min(n_train);
    if n_labelled < 1 {
        return Err(invalid(format!(
            "labelled fraction {labelled_fraction} of {n_train} training samples rounds to zero labelled samples"
        )));
    }
    let (labelled_ids, unlabelled_ids) = train_ids.split_at(n_labelled);

    let mut validation_ids = train_ids.to_vec();
    validation_ids.shuffle(&mut seed::rng(seed, &[0x7a1]));
    validation_ids.truncate(round_half_up(VALIDATION_FRACTION * n_train as f64));
    validation_ids.sort_unstable();

    let labelled_of = |ids: &[usize]| -> Vec<LabelledSample> {
        ids.iter()
            .map(|&id| LabelledSample {
                id,
                name: samples[id].name.clone(),
                image: samples[id].image.clone(),
                mask: samples[id].mask.clone().expect("checked above"),
            })
            .collect()
    };

    Ok(DatasetSplit {
        labelled: labelled_of(labelled_ids),
        unlabelled: unlabelled_ids
            .iter()
            .map(|&id| UnlabelledSample {
                id,
                name: samples[id].name.clone(),
                image: samples[id].image.clone(),
            })
            .collect(),
        test: labelled_of(test_ids),
        validation_ids,
        seed,
    })
}

/// Shape and noise settings for [`generate_synthetic_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Standard deviation of the additive Gaussian intensity noise.
    pub noise_sigma: f64,
    /// Semi-axis bounds as fractions of the image side.
    pub min_extent: f64,
    pub max_extent: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            min_extent: 0.18,
            max_extent: 0.35,
        }
    }
}

/// Random ellipse or rectangle foreground per image with additive Gaussian
/// noise. Masks are the exact shape indicators.
pub fn generate_synthetic(count: usize, size: (usize, usize), seed: u64) -> Result<Vec<Sample>> {
    generate_synthetic_with(count, size, seed, &SynthConfig::default())
}

pub fn generate_synthetic_with(
    count: usize,
    size: (usize, usize),
    seed: u64,
    config: &SynthConfig,
) -> Result<Vec<Sample>> {
    let (h, w) = size;
    if count == 0 {
        return Err(invalid("synthetic count must be at least 1"));
    }
    if h < 16 || w < 16 {
        return Err(invalid(format!("synthetic size {h}x{w} below 16x16")));
    }
    if !(config.noise_sigma >= 0.0)
        || !(0.0 < config.min_extent && config.min_extent <= config.max_extent && config.max_extent < 0.5)
    {
        return Err(invalid("synthetic config out of range"));
    }
    let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| invalid(e.to_string()))?;

    (0..count)
        .map(|i| {
            let mut rng = seed::rng(seed, &[i as u64]);
            let (hf, wf) = (h as f64, w as f64);
            let a = rng.random_range(config.min_extent..=config.max_extent) * wf;
            let b = rng.random_range(config.min_extent..=config.max_extent) * hf;
            let ellipse = rng.random_bool(0.5);
            let mask = if ellipse {
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let reach = a.max(b);
                let cx = rng.random_range(reach.min(wf / 2.0)..=(wf - reach).max(wf / 2.0));
                let cy = rng.random_range(reach.min(hf / 2.0)..=(hf - reach).max(hf / 2.0));
                let (sin, cos) = theta.sin_cos();
                MaskGrid::from_fn(h, w, |r, c| {
                    let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                    let u = (dx * cos + dy * sin) / a;
                    let v = (-dx * sin + dy * cos) / b;
                    u * u + v * v <= 1.0
                })
            } else {
                let cx = rng.random_range(a..=wf - a);
                let cy = rng.random_range(b..=hf - b);
                MaskGrid::from_fn(h, w, |r, c| {
                    (c as f64 + 0.5 - cx).abs() <= a && (r as f64 + 0.5 - cy).abs() <= b
                })
            };
            let image = if config.noise_sigma == 0.0 {
                ImageGrid(mask.grid().clone())
            } else {
                let noisy = Grid::from_fn(h, w, |r, c| mask.grid().get(r, c) + noise.sample(&mut rng));
                ImageGrid::clipped(noisy)
            };
            Ok(Sample {
                name: format!("{i:05}"),
                image,
                mask: Some(mask),
            })
        })
        .collect()
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Reads a picture as grey levels in `[0, 1]`; colour inputs are reduced by
/// averaging the three channels.
fn read_grey(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|e| file_error(path, e))?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let values = rgb
        .pixels()
        .map(|p| ((p.0[0] as f64 + p.0[1] as f64 + p.0[2] as f64) / 3.0).clamp(0.0, 1.0))
        .collect();
    Grid::new(h as usize, w as usize, values).map_err(|e| file_error(path, e))
}

fn resize(grid: &Grid, size: (usize, usize)) -> Grid {
    if grid.dims() == size {
        return grid.clone();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_raw(
        grid.width() as u32,
        grid.height() as u32,
        grid.values().iter().map(|&v| v as f32).collect(),
    )
    .expect("buffer length matches dimensions");
    let out = image::imageops::resize(&buf, size.1 as u32, size.0 as u32, FilterType::Triangle);
    Grid::new(
        size.0,
        size.1,
        out.into_raw().into_iter().map(|v| (v as f64).clamp(0.0, 1.0)).collect(),
    )
    .expect("resize output matches requested size")
}

/// Loads `<root>/images/*.png` and, when present, the same-named files under
/// `<root>/masks/`. Images are resized to `image_size` (height, width); masks
/// are resized then binarized at 0.5. Results are ordered by filename.
pub fn load_dataset(root: &Path, image_size: (usize, usize)) -> Result<Vec<Sample>> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::MissingDirectory(images_dir));
    }
    if image_size.0 == 0 || image_size.1 == 0 {
        return Err(invalid("image size must be positive"));
    }
    let masks_dir = root.join("masks");
    let has_masks = masks_dir.is_dir();

    png_files(&images_dir)?
        .into_iter()
        .map(|path| {
            let file_name = path.file_name().expect("listed file").to_owned();
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let raw = read_grey(&path)?;
            let mask = if has_masks {
                let mask_path = masks_dir.join(&file_name);
                if !mask_path.is_file() {
                    return Err(file_error(&path, "no mask with a matching filename"));
                }
                let raw_mask = read_grey(&mask_path)?;
                if raw_mask.dims() != raw.dims() {
                    return Err(file_error(
                        &mask_path,
                        format!(
                            "mask is {:?} but image is {:?}",
                            raw_mask.dims(),
                            raw.dims()
                        ),
                    ));
                }
                let resized = resize(&raw_mask, image_size);
                Some(MaskGrid::from_grid_unchecked(resized, MaskKind::Soft).harden(0.5))
            } else {
                None
            };
            Ok(Sample {
                name,
                image: ImageGrid(resize(&raw, image_size)),
                mask,
            })
        })
        .collect()
}

fn to_u8(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes a grid in `[0, 1]` as an 8-bit greyscale PNG.
pub fn write_grey_png(path: &Path, grid: &Grid) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(grid.width() as u32, grid.height() as u32, to_u8(grid.values()))
            .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| file_error(path, e))
}

/// Reads an 8-bit PNG mask and binarizes it at 0.5 without resizing.
pub fn read_mask_png(path: &Path) -> Result<MaskGrid> {
    let grid = read_grey(path)?;
    Ok(MaskGrid::from_grid_unchecked(grid, MaskKind::Soft).harden(0.5))
}

/// Writes the `images/` + `masks/` layout read by [`load_dataset`].
pub fn save_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images)?;
    if samples.iter().any(|s| s.mask.is_some()) {
        fs::create_dir_all(&masks)?;
    }
    for s in samples {
        let file = format!("{}.png", s.name);
        write_grey_png(&images.join(&file), s.image.grid())?;
        if let Some(mask) = &s.mask {
            write_grey_png(&masks.join(&file), mask.grid())?;
        }
    }
    Ok(())
}

/// PNG files of two mask directories paired by filename.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskPairs {
    /// `(stem, left path, right path)` in filename order.
    pub pairs: Vec<(String, PathBuf, PathBuf)>,
    pub only_left: Vec<String>,
    pub only_right: Vec<String>,
}

impl MaskPairs {
    pub fn is_complete(&self) -> bool {
        self.only_left.is_empty() && self.only_right.is_empty()
    }
}

pub fn match_mask_files(left: &Path, right: &Path) -> Result<MaskPairs> {
    for dir in [left, right] {
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir.to_path_buf()));
        }
    }
    let name = |p: &Path| p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
    let l = png_files(left)?;
    let r = png_files(right)?;
    let r_names: std::collections::BTreeSet<String> = r.iter().map(|p| name(p)).collect();
    let l_names: std::collections::BTreeSet<String> = l.iter().map(|p| name(p)).collect();
    let mut out = MaskPairs::default();
    for p in &l {
        let n = name(p);
        if r_names.contains(&n) {
            let stem = n.rsplit_once('.').map(|(s, _)| s.to_string()).unwrap_or(n.clone());
            out.pairs.push((stem, p.clone(), right.join(&n)));
        } else {
            out.only_left.push(n);
        }
    }
    out.only_right = r_names.difference(&l_names).cloned().collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n: usize) -> Vec<Sample> {
        generate_synthetic(n, (16, 16), 3).unwrap()
    }

    #[test]
    fn rotations_compose_to_identity() {
        let g = Grid::from_fn(3, 5, |r, c| (r * 5 + c) as f64);
        assert_eq!(g.rot90().dims(), (5, 3));
        assert_eq!(g.rot90().rot90(), g.rot180());
        assert_eq!(g.rot90().rot270(), g);
        assert_eq!(g.flip_lr().flip_lr(), g);
        assert_eq!(g.flip_lr().flip_ud(), g.rot180());
        // top-right corner moves to top-left under a counter-clockwise turn
        assert_eq!(g.rot90().get(0, 0), g.get(0, 4));
    }

    #[test]
    fn hard_mask_rejects_fractional_values() {
        assert!(MaskGrid::hard(1, 2, vec![0.0, 0.5]).is_err());
        assert!(MaskGrid::soft(1, 2, vec![0.0, 1.5]).is_err());
        assert!(ImageGrid::new(1, 1, vec![-0.1]).is_err());
    }

    #[test]
    fn split_sizes_for_five_percent() {
        let split = split_dataset(&dummy(100), 0.05, 7).unwrap();
        assert_eq!(split.test.len(), 10);
        assert_eq!(split.labelled.len(), 5);
        assert_eq!(split.unlabelled.len(), 85);
        assert_eq!(split.validation_ids.len(), 18);
    }

    #[test]
    fn full_fraction_is_fully_supervised() {
        let split = split_dataset(&dummy(100), 1.0, 1).unwrap();
        assert_eq!(split.labelled.len(), 90);
        assert!(split.unlabelled.is_empty());
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        let samples = dummy(40);
        let a = split_dataset(&samples, 0.2, 11).unwrap();
        let b = split_dataset(&samples, 0.2, 11).unwrap();
        let c = split_dataset(&samples, 0.2, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(
            a.test.iter().map(|s| s.id).collect::<Vec<_>>(),
            c.test.iter().map(|s| s.id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn split_errors() {
        let samples = dummy(20);
        assert!(split_dataset(&samples, 0.0, 0).is_err());
        assert!(split_dataset(&samples, 1.5, 0).is_err());
        assert!(split_dataset(&samples[..9], 0.5, 0).is_err());
        // 0.02 * 18 = 0.36 rounds to zero labelled samples
        let err = split_dataset(&samples, 0.02, 0).unwrap_err();
        assert!(err.to_string().contains("zero labelled"));
    }

    #[test]
    fn synthetic_foreground_within_bounds() {
        let s = generate_synthetic(1, (64, 64), 0).unwrap();
        let frac = s[0].mask.as_ref().unwrap().foreground_fraction();
        assert!(frac > 0.05 && frac < 0.6, "{frac}");
        for s in generate_synthetic(200, (64, 64), 9).unwrap() {
            let frac = s.mask.unwrap().foreground_fraction();
            assert!(frac > 0.05 && frac < 0.6, "{frac}");
        }
    }

    #[test]
    fn noiseless_synthetic_image_is_the_indicator() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..Default::default()
        };
        for s in generate_synthetic_with(5, (32, 48), 4, &cfg).unwrap() {
            assert_eq!(s.image.pixels(), s.mask.unwrap().pixels());
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(
            generate_synthetic(3, (32, 32), 5).unwrap(),
            generate_synthetic(3, (32, 32), 5).unwrap()
        );
        assert!(generate_synthetic(0, (32, 32), 5).is_err());
        assert!(generate_synthetic(1, (8, 32), 5).is_err());
    }
}
