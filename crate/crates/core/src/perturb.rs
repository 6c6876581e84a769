//! Random flips, quarter-turn rotations and brightness/contrast jitter.
//!
//! Geometric transforms move image and mask together; photometric transforms
//! touch the image only. Every decision for sample `i` is drawn from a stream
//! derived from `(seed, i)`, so the output does not depend on processing order.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Grid, ImageGrid, MaskGrid};
use crate::error::{invalid, Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Fraction of each batch that is perturbed at all.
    pub select_p: f64,
    pub flip_p: f64,
    pub rotate_p: f64,
    pub brightness_p: f64,
    pub contrast_p: f64,
    /// Brightness offsets are drawn from `[-max, max]`.
    pub brightness_delta_max: f64,
    /// Contrast factors are drawn from `[lo, hi]`.
    pub contrast_range: (f64, f64),
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            select_p: 0.70,
            flip_p: 0.80,
            rotate_p: 0.25,
            brightness_p: 0.20,
            contrast_p: 0.30,
            brightness_delta_max: 0.2,
            contrast_range: (0.8, 1.25),
        }
    }
}

impl PerturbConfig {
    /// A configuration that never perturbs anything.
    pub fn disabled() -> Self {
        Self {
            select_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("select_p", self.select_p),
            ("flip_p", self.flip_p),
            ("rotate_p", self.rotate_p),
            ("brightness_p", self.brightness_p),
            ("contrast_p", self.contrast_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.brightness_delta_max >= 0.0) {
            return Err(invalid("brightness_delta_max must be non-negative"));
        }
        let (lo, hi) = self.contrast_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid(format!("contrast_range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "param", rename_all = "snake_case")]
pub enum Transform {
    FlipLr,
    FlipUd,
    Rot90,
    Rot180,
    Rot270,
    Brightness(f64),
    Contrast(f64),
}

impl Transform {
    /// Parses a transform by name; `param` is required for the photometric ones.
    pub fn parse(name: &str, param: Option<f64>) -> Result<Self> {
        let need = |p: Option<f64>| p.ok_or_else(|| invalid(format!("transform `{name}` needs a parameter")));
        Ok(match name {
            "flip_lr" => Transform::FlipLr,
            "flip_ud" => Transform::FlipUd,
            "rot90" => Transform::Rot90,
            "rot180" => Transform::Rot180,
            "rot270" => Transform::Rot270,
            "brightness" => Transform::Brightness(need(param)?),
            "contrast" => Transform::Contrast(need(param)?),
            other => return Err(Error::UnknownTransform(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Transform::FlipLr => "flip_lr",
            Transform::FlipUd => "flip_ud",
            Transform::Rot90 => "rot90",
            Transform::Rot180 => "rot180",
            Transform::Rot270 => "rot270",
            Transform::Brightness(_) => "brightness",
            Transform::Contrast(_) => "contrast",
        }
    }

    pub fn is_geometric(&self) -> bool {
        !matches!(self, Transform::Brightness(_) | Transform::Contrast(_))
    }

    pub fn is_flip(&self) -> bool {
        matches!(self, Transform::FlipLr | Transform::FlipUd)
    }

    pub fn is_rotation(&self) -> bool {
        matches!(self, Transform::Rot90 | Transform::Rot180 | Transform::Rot270)
    }

    /// Inverse of a geometric transform; `None` for photometric ones.
    pub fn inverse(&self) -> Option<Transform> {
        match self {
            Transform::FlipLr | Transform::FlipUd | Transform::Rot180 => Some(*self),
            Transform::Rot90 => Some(Transform::Rot270),
            Transform::Rot270 => Some(Transform::Rot90),
            _ => None,
        }
    }

    fn apply_geometric(&self, g: &Grid) -> Grid {
        match self {
            Transform::FlipLr => g.flip_lr(),
            Transform::FlipUd => g.flip_ud(),
            Transform::Rot90 => g.rot90(),
            Transform::Rot180 => g.rot180(),
            Transform::Rot270 => g.rot270(),
            _ => g.clone(),
        }
    }
}

/// Applies one transform to an image and, for geometric transforms, to its mask.
pub fn apply_transform(
    image: &ImageGrid,
    mask: Option<&MaskGrid>,
    transform: Transform,
) -> (ImageGrid, Option<MaskGrid>) {
    match transform {
        Transform::Brightness(delta) => (
            ImageGrid::clipped(image.grid().map(|x| x + delta)),
            mask.cloned(),
        ),
        Transform::Contrast(c) => {
            let mean = image.grid().mean();
            (
                ImageGrid::clipped(image.grid().map(|x| (x - mean) * c + mean)),
                mask.cloned(),
            )
        }
        geometric => (
            ImageGrid::clipped(geometric.apply_geometric(image.grid())),
            mask.map(|m| apply_to_mask(m, geometric)),
        ),
    }
}

/// Applies a geometric transform to a mask; photometric transforms are identity.
pub fn apply_to_mask(mask: &MaskGrid, transform: Transform) -> MaskGrid {
    if !transform.is_geometric() {
        return mask.clone();
    }
    MaskGrid::from_grid_unchecked(transform.apply_geometric(mask.grid()), mask.kind())
}

/// The transforms applied to one sample of a batch, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub sample: usize,
    pub transforms: Vec<Transform>,
}

impl TransformRecord {
    pub fn replay(&self, image: &ImageGrid, mask: &MaskGrid) -> (ImageGrid, MaskGrid) {
        let mut out = (image.clone(), mask.clone());
        for &t in &self.transforms {
            let (img, m) = apply_transform(&out.0, Some(&out.1), t);
            out = (img, m.expect("mask passed in"));
        }
        out
    }

    /// Undoes the geometric part of the record on a mask.
    pub fn invert_mask(&self, mask: &MaskGrid) -> MaskGrid {
        self.transforms
            .iter()
            .rev()
            .filter_map(Transform::inverse)
            .fold(mask.clone(), |m, t| apply_to_mask(&m, t))
    }

    pub fn has_flip(&self) -> bool {
        self.transforms.iter().any(Transform::is_flip)
    }

    pub fn has_rotation(&self) -> bool {
        self.transforms.iter().any(Transform::is_rotation)
    }
}

fn draw_transforms(config: &PerturbConfig, square: bool, rng: &mut impl Rng) -> Vec<Transform> {
    let mut out = Vec::new();
    if rng.random_bool(config.flip_p) {
        out.push(if rng.random_bool(0.5) {
            Transform::FlipLr
        } else {
            Transform::FlipUd
        });
    }
    if rng.random_bool(config.rotate_p) {
        // quarter turns would change the shape of non-square grids
        out.push(match (square, rng.random_range(0..3)) {
            (true, 0) => Transform::Rot90,
            (true, 1) | (false, _) => Transform::Rot180,
            _ => Transform::Rot270,
        });
    }
    if rng.random_bool(config.brightness_p) {
        let m = config.brightness_delta_max;
        out.push(Transform::Brightness(if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 }));
    }
    if rng.random_bool(config.contrast_p) {
        let (lo, hi) = config.contrast_range;
        out.push(Transform::Contrast(rng.random_range(lo..=hi)));
    }
    out
}

/// Perturbs `round(select_p * n)` randomly chosen samples of the batch. Within
/// the selected subset the flip, rotation, brightness and contrast stages fire
/// independently per sample. Records are ordered by sample index.
pub fn perturb_batch(
    batch: &[(ImageGrid, MaskGrid)],
    config: &PerturbConfig,
    rng_seed: u64,
) -> Result<(Vec<(ImageGrid, MaskGrid)>, Vec<TransformRecord>)> {
    if batch.is_empty() {
        return Err(invalid("cannot perturb an empty batch"));
    }
    config.validate()?;
    let n = batch.len();
    let n_selected = crate::data::round_half_up(config.select_p * n as f64).min(n);
    let mut selected = sample_indices(&mut seed::rng(rng_seed, &[u64::MAX]), n, n_selected).into_vec();
    selected.sort_unstable();

    let mut out = batch.to_vec();
    let mut records = Vec::with_capacity(selected.len());
    for i in selected {
        let (image, mask) = &batch[i];
        let square = image.height() == image.width();
        let transforms = draw_transforms(config, square, &mut seed::rng(rng_seed, &[i as u64]));
        let record = TransformRecord {
            sample: i,
            transforms,
        };
        out[i] = record.replay(image, mask);
        records.push(record);
    }
    Ok((out, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, MaskKind};

    fn sample() -> (ImageGrid, MaskGrid) {
        let s = generate_synthetic(1, (24, 24), 2).unwrap().remove(0);
        (s.image, s.mask.unwrap())
    }

    #[test]
    fn flip_is_an_involution() {
        let (img, mask) = sample();
        let (a, am) = apply_transform(&img, Some(&mask), Transform::FlipLr);
        let (b, bm) = apply_transform(&a, am.as_ref(), Transform::FlipLr);
        assert_eq!(b, img);
        assert_eq!(bm.unwrap(), mask);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let (img, mask) = sample();
        let mut cur = (img.clone(), Some(mask.clone()));
        for _ in 0..4 {
            cur = apply_transform(&cur.0, cur.1.as_ref(), Transform::Rot90);
        }
        assert_eq!(cur.0, img);
        assert_eq!(cur.1.unwrap(), mask);
    }

    #[test]
    fn brightness_clips_at_one() {
        let img = ImageGrid::new(2, 2, vec![0.95; 4]).unwrap();
        let (out, _) = apply_transform(&img, None, Transform::Brightness(0.1));
        assert_eq!(out.pixels(), &[1.0; 4]);
    }

    #[test]
    fn photometric_leaves_mask_alone() {
        let (img, mask) = sample();
        let (out, m) = apply_transform(&img, Some(&mask), Transform::Contrast(1.2));
        assert_eq!(m.unwrap(), mask);
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn parse_rejects_unknown_names() {
        assert!(matches!(
            Transform::parse("shear", None),
            Err(Error::UnknownTransform(_))
        ));
        assert_eq!(Transform::parse("rot90", None).unwrap(), Transform::Rot90);
        assert!(Transform::parse("brightness", None).is_err());
        assert_eq!(
            Transform::parse("contrast", Some(0.9)).unwrap(),
            Transform::Contrast(0.9)
        );
    }

    #[test]
    fn zero_selection_returns_batch_unchanged() {
        let batch = vec![sample(); 5];
        let (out, records) = perturb_batch(&batch, &PerturbConfig::disabled(), 3).unwrap();
        assert_eq!(out, batch);
        assert!(records.is_empty());
    }

    #[test]
    fn replay_reproduces_output_and_masks_stay_hard() {
        let batch: Vec<_> = generate_synthetic(30, (20, 20), 8)
            .unwrap()
            .into_iter()
            .map(|s| (s.image, s.mask.unwrap()))
            .collect();
        let cfg = PerturbConfig::default();
        let (out, records) = perturb_batch(&batch, &cfg, 17).unwrap();
        assert_eq!(records.len(), 21);
        for r in &records {
            let (img, mask) = &batch[r.sample];
            assert_eq!(r.replay(img, mask), out[r.sample]);
            assert_eq!(&r.invert_mask(&out[r.sample].1), mask);
        }
        for (_, m) in &out {
            assert_eq!(m.kind(), MaskKind::Hard);
            assert!(m.pixels().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert_eq!(perturb_batch(&batch, &cfg, 17).unwrap().0, out);
    }

    #[test]
    fn non_square_grids_only_turn_half_way() {
        let cfg = PerturbConfig {
            select_p: 1.0,
            rotate_p: 1.0,
            ..Default::default()
        };
        let s = generate_synthetic(40, (16, 32), 1).unwrap();
        let batch: Vec<_> = s.into_iter().map(|s| (s.image, s.mask.unwrap())).collect();
        let (out, records) = perturb_batch(&batch, &cfg, 5).unwrap();
        assert!(records
            .iter()
            .flat_map(|r| &r.transforms)
            .filter(|t| t.is_rotation())
            .all(|t| *t == Transform::Rot180));
        assert!(out.iter().all(|(i, m)| i.dims() == (16, 32) && m.dims() == (16, 32)));
    }
}
