//! Segmentation losses.
//!
//! * [`focal_tversky`]: the overlap loss used during supervised warm-up.
//! * [`mixed_loss`]: boundary length plus region overlap, used once training
//!   moves to pseudo-labels.
//!
//! The tensor functions take predictions and targets shaped `(..., H, W)`;
//! leading dimensions are treated as the batch. Each sample's loss is computed
//! over its own pixels and the batch mean is returned, so gradients flow
//! through candle's autodiff. The `*_loss` functions are scalar conveniences
//! over [`MaskGrid`]s evaluated in 64-bit precision.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Grid, MaskGrid};
use crate::error::{invalid, Error, Result};

/// Smoothing constant in both losses.
pub const EPSILON: f64 = 1e-6;

/// Constants of the focal Tversky loss. `alpha` weighs false negatives,
/// `beta` false positives, `gamma` is the focal exponent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TverskyParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for TverskyParams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 4.0 / 3.0,
        }
    }
}

impl TverskyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.gamma > 0.0) {
            return Err(invalid(format!(
                "tversky params need alpha, beta >= 0 and gamma > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// How the boundary term turns the two forward differences into a length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// `sqrt(gx^2 + gy^2 + eps)`: rotation-symmetric gradient magnitude.
    #[default]
    GradientMagnitude,
    /// `sqrt(|gx + gy + eps|)`: signed sum of the differences.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixedLossConfig {
    pub boundary_mode: BoundaryMode,
    /// Multiplier on the boundary term; the overlap term has weight 1.
    pub boundary_weight: f64,
}

impl Default for MixedLossConfig {
    fn default() -> Self {
        Self {
            boundary_mode: BoundaryMode::GradientMagnitude,
            boundary_weight: 1.0,
        }
    }
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    let dims = t.dims();
    if dims.len() < 2 {
        return Err(invalid(format!("expected (..., H, W), got {dims:?}")));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let b: usize = dims[..dims.len() - 2].iter().product();
    Ok(t.reshape((b, h, w))?)
}

fn check_same_shape(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(invalid(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

fn per_sample_sum(t: &Tensor) -> Result<Tensor> {
    Ok(t.sum((1, 2))?)
}

/// `(1 - (TP + eps) / (TP + alpha FN + beta FP + eps))^gamma` with soft counts.
pub fn focal_tversky(pred: &Tensor, target: &Tensor, params: &TverskyParams) -> Result<Tensor> {
    check_same_shape(pred, target)?;
    let p = as_batch(pred)?;
    let g = as_batch(&target.to_dtype(pred.dtype())?)?;
    let tp = per_sample_sum(&(&p * &g)?)?;
    let fn_ = per_sample_sum(&(p.affine(-1.0, 1.0)? * &g)?)?;
    let fp = per_sample_sum(&(&p * g.affine(-1.0, 1.0)?)?)?;
    let numer = (&tp + EPSILON)?;
    let denom = ((tp + (fn_ * params.alpha)?)? + (fp * params.beta)?)?;
    let ratio = (numer / (denom + EPSILON)?)?;
    let loss = ratio.affine(-1.0, 1.0)?.powf(params.gamma)?;
    Ok(loss.mean_all()?)
}

/// Forward differences along columns (`gx`) and rows (`gy`), zero at the
/// trailing edge.
pub fn spatial_gradient_tensor(pred: &Tensor) -> Result<(Tensor, Tensor)> {
    let p = as_batch(pred)?;
    let (_, h, w) = p.dims3()?;
    if h < 2 || w < 2 {
        return Err(invalid(format!("spatial gradient needs at least 2x2, got {h}x{w}")));
    }
    let gx = (p.narrow(2, 1, w - 1)? - p.narrow(2, 0, w - 1)?)?.pad_with_zeros(2, 0, 1)?;
    let gy = (p.narrow(1, 1, h - 1)? - p.narrow(1, 0, h - 1)?)?.pad_with_zeros(1, 0, 1)?;
    Ok((gx, gy))
}

/// Sum over pixels of the regularised gradient length of the prediction.
pub fn boundary_term(pred: &Tensor, mode: BoundaryMode) -> Result<Tensor> {
    let (gx, gy) = spatial_gradient_tensor(pred)?;
    let per_pixel = match mode {
        BoundaryMode::GradientMagnitude => ((gx.sqr()? + gy.sqr()?)? + EPSILON)?.sqrt()?,
        BoundaryMode::Literal => ((gx + gy)? + EPSILON)?.abs()?.sqrt()?,
    };
    Ok(per_sample_sum(&per_pixel)?.mean_all()?)
}

/// `|sum P (1 - G)^2| + |sum (1 - P) G^2|`.
pub fn overlap_term(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape(pred, target)?;
    let p = as_batch(pred)?;
    let g = as_batch(&target.to_dtype(pred.dtype())?)?;
    let outside = per_sample_sum(&(&p * g.affine(-1.0, 1.0)?.sqr()?)?)?.abs()?;
    let inside = per_sample_sum(&(p.affine(-1.0, 1.0)? * g.sqr()?)?)?.abs()?;
    Ok((outside + inside)?.mean_all()?)
}

/// Boundary plus overlap loss used once training switches to pseudo-labels.
pub fn mixed_loss(pred: &Tensor, target: &Tensor, config: &MixedLossConfig) -> Result<Tensor> {
    let boundary = boundary_term(pred, config.boundary_mode)?;
    let overlap = overlap_term(pred, target)?;
    Ok(((boundary * config.boundary_weight)? + overlap)?)
}

fn grid_tensor(grid: &Grid) -> Result<Tensor> {
    Ok(Tensor::from_slice(
        grid.values(),
        (1, grid.height(), grid.width()),
        &Device::Cpu,
    )?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_pair(pred: &MaskGrid, gt: &MaskGrid) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch {
            expected: gt.dims(),
            actual: pred.dims(),
        });
    }
    if !gt.is_hard() {
        return Err(invalid("ground truth must be a hard mask"));
    }
    Ok(())
}

pub fn focal_tversky_loss(pred: &MaskGrid, gt: &MaskGrid, params: &TverskyParams) -> Result<f64> {
    check_pair(pred, gt)?;
    params.validate()?;
    scalar(&focal_tversky(&grid_tensor(pred.grid())?, &grid_tensor(gt.grid())?, params)?)
}

pub fn spatial_gradient(pred: &MaskGrid) -> Result<(Grid, Grid)> {
    let (gx, gy) = spatial_gradient_tensor(&grid_tensor(pred.grid())?)?;
    let (h, w) = pred.dims();
    let to_grid = |t: Tensor| -> Result<Grid> { Grid::new(h, w, t.flatten_all()?.to_vec1::<f64>()?) };
    Ok((to_grid(gx)?, to_grid(gy)?))
}

pub fn boundary_loss(pred: &MaskGrid, mode: BoundaryMode) -> Result<f64> {
    scalar(&boundary_term(&grid_tensor(pred.grid())?, mode)?)
}

pub fn overlap_loss(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    check_pair(pred, gt)?;
    scalar(&overlap_term(&grid_tensor(pred.grid())?, &grid_tensor(gt.grid())?)?)
}

pub fn stage23_loss(pred: &MaskGrid, gt: &MaskGrid, config: &MixedLossConfig) -> Result<f64> {
    check_pair(pred, gt)?;
    scalar(&mixed_loss(
        &grid_tensor(pred.grid())?,
        &grid_tensor(gt.grid())?,
        config,
    )?)
}
