//! Evaluation of a machine segmentation (MS) against ground truth (GT).
//!
//! Overlap measures follow the 0/0 = 1 convention for empty-vs-empty pairs.
//! Quantities that are undefined for empty masks or boundaries (RVD, HD, ASSD,
//! the boundary Dice family) are reported as `None` and skipped during
//! aggregation, with a per-metric missing count.
//!
//! Distances are exact Euclidean distances between pixel centres; HD is the
//! maximum, not a percentile.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::MaskGrid;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_hard_pair(ms: &MaskGrid, gt: &MaskGrid) -> Result<()> {
    if ms.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            expected: gt.dims(),
            actual: ms.dims(),
        });
    }
    if !ms.is_hard() || !gt.is_hard() {
        return Err(invalid("metrics need hard masks"));
    }
    Ok(())
}

pub fn confusion_counts(ms: &MaskGrid, gt: &MaskGrid) -> Result<ConfusionCounts> {
    check_hard_pair(ms, gt)?;
    let mut c = ConfusionCounts::default();
    for (&m, &g) in ms.pixels().iter().zip(gt.pixels()) {
        match (m == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn overlap_metrics(c: &ConfusionCounts) -> OverlapMetrics {
    OverlapMetrics {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        accuracy: ratio(c.tp + c.tn, c.total()),
        precision: ratio(c.tp, c.tp + c.fp),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    }
}

/// Dice between two hard masks with the 0/0 = 1 convention.
pub fn dice(ms: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    Ok(overlap_metrics(&confusion_counts(ms, gt)?).dice)
}

/// Relative volume difference `| |MS| - |GT| | / |GT|`; `None` for an empty GT.
pub fn rvd(ms: &MaskGrid, gt: &MaskGrid) -> Result<Option<f64>> {
    check_hard_pair(ms, gt)?;
    let (m, g) = (ms.foreground_count() as f64, gt.foreground_count() as f64);
    Ok((g > 0.0).then(|| (m - g).abs() / g))
}

/// Foreground pixels with at least one 4-neighbour outside the foreground;
/// the image border counts as outside. Row-major order.
pub fn extract_boundary(mask: &MaskGrid) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let g = mask.grid();
    let fg = |r: usize, c: usize| g.get(r, c) >= 0.5;
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !fg(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !fg(r - 1, c)
                || !fg(r + 1, c)
                || !fg(r, c - 1)
                || !fg(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

const FAR: f64 = 1e30;

/// Squared Euclidean distance transform of a 1-D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|&x| x < FAR) {
        Some(i) => i,
        None => {
            out.fill(FAR);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= FAR {
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest site.
fn squared_distance_map(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(r, c) in sites {
        grid[r * w + c] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        edt_1d(&col, &mut col_out);
        for r in 0..h {
            grid[r * w + c] = col_out[r];
        }
    }
    let mut row_out = vec![0.0; w];
    for r in 0..h {
        edt_1d(&grid[r * w..(r + 1) * w], &mut row_out);
        grid[r * w..(r + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd: f64,
    pub assd: f64,
}

/// Hausdorff distance and average symmetric surface distance between the
/// boundaries of two masks. `None` when either mask is empty.
pub fn surface_distances(ms: &MaskGrid, gt: &MaskGrid) -> Result<Option<SurfaceDistances>> {
    check_hard_pair(ms, gt)?;
    let (h, w) = ms.dims();
    let bm = extract_boundary(ms);
    let bg = extract_boundary(gt);
    if bm.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let to_g = squared_distance_map(h, w, &bg);
    let to_m = squared_distance_map(h, w, &bm);
    let mut hd = 0f64;
    let mut total = 0f64;
    for &(r, c) in &bm {
        let d = to_g[r * w + c].sqrt();
        hd = hd.max(d);
        total += d;
    }
    for &(r, c) in &bg {
        let d = to_m[r * w + c].sqrt();
        hd = hd.max(d);
        total += d;
    }
    Ok(Some(SurfaceDistances {
        hd,
        assd: total / (bm.len() + bg.len()) as f64,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDice {
    pub dbd_g: Option<f64>,
    pub dbd_m: Option<f64>,
    pub sbd: Option<f64>,
}

/// Dice of the two masks restricted to the von Neumann neighbourhood of
/// `(r, c)`, clipped at the image border. 0/0 scores 0.
pub fn neighbourhood_dice(ms: &MaskGrid, gt: &MaskGrid, r: usize, c: usize) -> f64 {
    let (h, w) = ms.dims();
    let (mut g, mut m, mut both) = (0u32, 0u32, 0u32);
    let mut visit = |rr: usize, cc: usize| {
        let in_g = gt.grid().get(rr, cc) >= 0.5;
        let in_m = ms.grid().get(rr, cc) >= 0.5;
        g += in_g as u32;
        m += in_m as u32;
        both += (in_g && in_m) as u32;
    };
    visit(r, c);
    if r > 0 {
        visit(r - 1, c);
    }
    if r + 1 < h {
        visit(r + 1, c);
    }
    if c > 0 {
        visit(r, c - 1);
    }
    if c + 1 < w {
        visit(r, c + 1);
    }
    if g + m == 0 {
        0.0
    } else {
        2.0 * both as f64 / (g + m) as f64
    }
}

/// Directed boundary Dice relative to GT and MS, and their symmetric
/// combination. Each direction is `None` when its boundary is empty.
pub fn boundary_dice(ms: &MaskGrid, gt: &MaskGrid) -> Result<BoundaryDice> {
    check_hard_pair(ms, gt)?;
    let bg = extract_boundary(gt);
    let bm = extract_boundary(ms);
    let sum_g: f64 = bg.iter().map(|&(r, c)| neighbourhood_dice(ms, gt, r, c)).sum();
    let sum_m: f64 = bm.iter().map(|&(r, c)| neighbourhood_dice(ms, gt, r, c)).sum();
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok(BoundaryDice {
        dbd_g: mean(sum_g, bg.len()),
        dbd_m: mean(sum_m, bm.len()),
        sbd: mean(sum_g + sum_m, bg.len() + bm.len()),
    })
}

/// Every metric for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub dice: f64,
    pub iou: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub rvd: Option<f64>,
    pub hd: Option<f64>,
    pub assd: Option<f64>,
    pub dbd_g: Option<f64>,
    pub dbd_m: Option<f64>,
    pub sbd: Option<f64>,
}

pub fn evaluate_pair(name: &str, ms: &MaskGrid, gt: &MaskGrid) -> Result<ImageMetrics> {
    let o = overlap_metrics(&confusion_counts(ms, gt)?);
    let sd = surface_distances(ms, gt)?;
    if sd.is_none() {
        log::warn!("{name}: empty mask, HD and ASSD reported as missing");
    }
    let bd = boundary_dice(ms, gt)?;
    Ok(ImageMetrics {
        name: name.to_string(),
        dice: o.dice,
        iou: o.iou,
        accuracy: o.accuracy,
        precision: o.precision,
        sensitivity: o.sensitivity,
        specificity: o.specificity,
        rvd: rvd(ms, gt)?,
        hd: sd.map(|s| s.hd),
        assd: sd.map(|s| s.assd),
        dbd_g: bd.dbd_g,
        dbd_m: bd.dbd_m,
        sbd: bd.sbd,
    })
}

/// Means over the images where each metric is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub count: usize,
    pub dice: Option<f64>,
    pub iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub rvd: Option<f64>,
    pub hd: Option<f64>,
    pub assd: Option<f64>,
    pub dbd_g: Option<f64>,
    pub dbd_m: Option<f64>,
    pub sbd: Option<f64>,
    /// Number of images where a metric was undefined, by metric name.
    pub missing: BTreeMap<String, usize>,
}

/// Column order of the CSV report; `iou` trails the classic table columns.
pub const CSV_COLUMNS: [&str; 12] = [
    "Dice", "Acc", "Pre", "Rec/Sen", "Spe", "RVD", "HD", "ASSD", "DBD_G", "DBD_M", "SBD", "IOU",
];

impl ImageMetrics {
    fn columns(&self) -> [(&'static str, Option<f64>); 12] {
        [
            ("dice", Some(self.dice)),
            ("accuracy", Some(self.accuracy)),
            ("precision", Some(self.precision)),
            ("sensitivity", Some(self.sensitivity)),
            ("specificity", Some(self.specificity)),
            ("rvd", self.rvd),
            ("hd", self.hd),
            ("assd", self.assd),
            ("dbd_g", self.dbd_g),
            ("dbd_m", self.dbd_m),
            ("sbd", self.sbd),
            ("iou", Some(self.iou)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `exact`: HD is the maximum boundary distance.
    pub hd_mode: String,
    pub distance: String,
    pub images: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageMetrics>) -> Self {
        let mut sums: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
        let mut missing = BTreeMap::new();
        for img in &images {
            for (name, v) in img.columns() {
                let e = sums.entry(name).or_insert((0.0, 0));
                match v {
                    Some(v) => {
                        e.0 += v;
                        e.1 += 1;
                    }
                    None => *missing.entry(name.to_string()).or_insert(0) += 1,
                }
            }
        }
        let mean = |name: &str| sums.get(name).and_then(|&(s, n)| (n > 0).then(|| s / n as f64));
        let aggregate = AggregateMetrics {
            count: images.len(),
            dice: mean("dice"),
            iou: mean("iou"),
            accuracy: mean("accuracy"),
            precision: mean("precision"),
            sensitivity: mean("sensitivity"),
            specificity: mean("specificity"),
            rvd: mean("rvd"),
            hd: mean("hd"),
            assd: mean("assd"),
            dbd_g: mean("dbd_g"),
            dbd_m: mean("dbd_m"),
            sbd: mean("sbd"),
            missing,
        };
        Self {
            hd_mode: "exact".into(),
            distance: "euclidean_pixel_centres".into(),
            images,
            aggregate,
        }
    }

    /// Per-image rows; missing values are empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = format!("image,{}\n", CSV_COLUMNS.join(","));
        for img in &self.images {
            out.push_str(&img.name);
            for (_, v) in img.columns() {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}
