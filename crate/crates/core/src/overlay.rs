//! Confusion overlays: TP yellow, FN green, FP red, TN black.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::MaskGrid;
use crate::error::{file_error, invalid, Result};
use crate::metrics::ConfusionCounts;

pub const TP_COLOR: [u8; 3] = [255, 255, 0];
pub const FN_COLOR: [u8; 3] = [0, 255, 0];
pub const FP_COLOR: [u8; 3] = [255, 0, 0];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];

pub fn render_overlay(ms: &MaskGrid, gt: &MaskGrid) -> Result<RgbImage> {
    if ms.dims() != gt.dims() {
        return Err(crate::Error::ShapeMismatch {
            expected: gt.dims(),
            actual: ms.dims(),
        });
    }
    if !ms.is_hard() || !gt.is_hard() {
        return Err(invalid("overlays need hard masks"));
    }
    let (h, w) = ms.dims();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let color = match (ms.grid().get(r, c) == 1.0, gt.grid().get(r, c) == 1.0) {
            (true, true) => TP_COLOR,
            (false, true) => FN_COLOR,
            (true, false) => FP_COLOR,
            (false, false) => TN_COLOR,
        };
        Rgb(color)
    }))
}

pub fn write_overlay(path: &Path, ms: &MaskGrid, gt: &MaskGrid) -> Result<()> {
    render_overlay(ms, gt)?
        .save(path)
        .map_err(|e| file_error(path, e))
}

/// Renders `overlays/<name>.png` for every pair in `predictions/` and
/// `test_masks/` of a run directory. Returns the number written.
pub fn write_run_overlays(run_dir: &Path) -> Result<usize> {
    let pairs = crate::data::match_mask_files(&run_dir.join("predictions"), &run_dir.join("test_masks"))?;
    if !pairs.only_right.is_empty() {
        return Err(file_error(
            run_dir.join("predictions"),
            format!("missing predictions for {}", pairs.only_right.join(", ")),
        ));
    }
    let out = run_dir.join("overlays");
    std::fs::create_dir_all(&out)?;
    for (name, ms, gt) in &pairs.pairs {
        let ms = crate::data::read_mask_png(ms)?;
        let gt = crate::data::read_mask_png(gt)?;
        write_overlay(&out.join(format!("{name}.png")), &ms, &gt)?;
    }
    Ok(pairs.pairs.len())
}

/// Counts overlay pixels by colour. Any colour outside the palette is an error.
pub fn color_histogram(img: &RgbImage) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for p in img.pixels() {
        match p.0 {
            TP_COLOR => c.tp += 1,
            FN_COLOR => c.fn_ += 1,
            FP_COLOR => c.fp += 1,
            TN_COLOR => c.tn += 1,
            other => return Err(invalid(format!("colour {other:?} is not an overlay colour"))),
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::confusion_counts;

    #[test]
    fn perfect_prediction_is_yellow_and_black() {
        let gt = MaskGrid::from_fn(8, 6, |r, c| r < 3 && c > 1);
        let h = color_histogram(&render_overlay(&gt, &gt).unwrap()).unwrap();
        assert_eq!((h.tp, h.fn_, h.fp, h.tn), (12, 0, 0, 36));
    }

    #[test]
    fn empty_prediction_shows_gt_in_green() {
        let gt = MaskGrid::from_fn(8, 6, |r, _| r == 4);
        let h = color_histogram(&render_overlay(&MaskGrid::empty(8, 6), &gt).unwrap()).unwrap();
        assert_eq!((h.tp, h.fn_), (0, 6));
    }

    #[test]
    fn histogram_equals_confusion_counts() {
        let ms = MaskGrid::from_fn(9, 7, |r, c| (r + c) % 3 == 0);
        let gt = MaskGrid::from_fn(9, 7, |r, c| r * c % 2 == 1);
        let h = color_histogram(&render_overlay(&ms, &gt).unwrap()).unwrap();
        assert_eq!(h, confusion_counts(&ms, &gt).unwrap());
    }
}
