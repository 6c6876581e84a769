//! The triple-view model.
//!
//! A shared stem (two stride-2 conv blocks) maps an `H x W` image to an
//! `H/4 x W/4` feature map. Three views decode it back to a per-pixel
//! probability map:
//!
//! * [`ArchitectureTag::SkipConnection`]: U-style, encoder features are
//!   concatenated into the decoder.
//! * [`ArchitectureTag::SpatialBypass`]: encoder features are added to the
//!   decoder output.
//! * [`ArchitectureTag::MultiScalePyramid`]: three pyramid levels with their
//!   own heads, upsampled and averaged.
//!
//! Every view ends in the same kind of head: two stride-2 transposed convs back
//! to full resolution and a 3x3 conv that also sees the raw image, followed by
//! a sigmoid. Image sides must be multiples of 16.
//!
//! Parameters are plain candle [`Var`]s initialised from seeded ChaCha streams,
//! so a model is a pure function of `(config, seed)`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageGrid, MaskGrid, MaskKind};
use crate::error::{file_error, invalid, Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewId {
    A,
    B,
    C,
}

impl ViewId {
    pub const ALL: [ViewId; 3] = [ViewId::A, ViewId::B, ViewId::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 3]
    }

    pub fn letter(self) -> char {
        ['A', 'B', 'C'][self.index()]
    }

    /// The two views that vote pseudo-labels for this one, cyclically
    /// preceding and following it.
    pub fn donors(self) -> (ViewId, ViewId) {
        let i = self.index();
        (Self::from_index(i + 2), Self::from_index(i + 1))
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureTag {
    SkipConnection,
    SpatialBypass,
    MultiScalePyramid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_width: usize,
    pub view_width: usize,
    pub architectures: [ArchitectureTag; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_width: 8,
            view_width: 16,
            architectures: [
                ArchitectureTag::SkipConnection,
                ArchitectureTag::SpatialBypass,
                ArchitectureTag::MultiScalePyramid,
            ],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.view_width < 2 || !self.view_width.is_multiple_of(2) {
            return Err(invalid("stem_width must be positive and view_width even and >= 2"));
        }
        Ok(())
    }

    pub fn has_duplicate_architectures(&self) -> bool {
        let a = &self.architectures;
        a[0] == a[1] || a[1] == a[2] || a[0] == a[2]
    }
}

/// Named trainable tensors belonging to one network part.
#[derive(Clone, Debug, Default)]
struct ParamSet {
    prefix: String,
    params: Vec<(String, Var)>,
}

impl ParamSet {
    fn new(prefix: &str) -> Self {
        Self {
            prefix: prefix.into(),
            params: Vec::new(),
        }
    }

    fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push((format!("{}.{name}", self.prefix), var.clone()));
        Ok(var)
    }

    fn zeros(&mut self, name: &str, n: usize, dtype: DType) -> Result<Var> {
        let var = Var::zeros(n, dtype, &Device::Cpu)?;
        self.params.push((format!("{}.{name}", self.prefix), var.clone()));
        Ok(var)
    }

    fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<Conv> {
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        Ok(Conv {
            weight: self.uniform(&format!("{name}.weight"), &[c_out, c_in, k, k], bound, rng, dtype)?,
            bias: self.zeros(&format!("{name}.bias"), c_out, dtype)?,
            padding: k / 2,
            stride,
        })
    }

    /// Kernel 2, stride 2 transposed conv; each output pixel sees `c_in` inputs.
    fn up_conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<UpConv> {
        let bound = (6.0 / c_in as f64).sqrt();
        Ok(UpConv {
            weight: self.uniform(&format!("{name}.weight"), &[c_in, c_out, 2, 2], bound, rng, dtype)?,
            bias: self.zeros(&format!("{name}.bias"), c_out, dtype)?,
        })
    }

    fn count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: Var,
    bias: Var,
    padding: usize,
    stride: usize,
}

impl Conv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
struct UpConv {
    weight: Var,
    bias: Var,
}

impl UpConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Nearest-neighbour 2x upsampling through a broadcast, so the backward pass
/// is an ordinary sum over the broadcast axes.
fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((n, c, 2 * h, 2 * w))?)
}

#[derive(Clone, Debug)]
struct Stem {
    params: ParamSet,
    conv1: Conv,
    conv2: Conv,
}

impl Stem {
    fn new(width: usize, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Self> {
        let mut params = ParamSet::new("stem");
        let conv1 = params.conv("conv1", 1, width, 3, 2, rng, dtype)?;
        let conv2 = params.conv("conv2", width, width, 3, 2, rng, dtype)?;
        Ok(Self { params, conv1, conv2 })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(x)?.relu()?;
        Ok(self.conv2.forward(&h)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct Head {
    up1: UpConv,
    up2: UpConv,
    out: Conv,
}

impl Head {
    fn new(p: &mut ParamSet, width: usize, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Self> {
        Ok(Self {
            up1: p.up_conv("head.up1", width, width / 2, rng, dtype)?,
            up2: p.up_conv("head.up2", width / 2, 4, rng, dtype)?,
            out: p.conv("head.out", 5, 1, 3, 1, rng, dtype)?,
        })
    }

    fn forward(&self, features: &Tensor, image: &Tensor) -> Result<Tensor> {
        let h = self.up1.forward(features)?.relu()?;
        let h = self.up2.forward(&h)?.relu()?;
        let h = Tensor::cat(&[&h, image], 1)?;
        Ok(candle_nn::ops::sigmoid(&self.out.forward(&h)?)?)
    }
}

#[derive(Clone, Debug)]
enum Body {
    Skip { enc1: Conv, enc2: Conv, dec: Conv },
    Bypass { enc1: Conv, enc2: Conv, dec: Conv },
    Pyramid { levels: [Conv; 3], heads: [Conv; 3] },
}

#[derive(Clone, Debug)]
struct View {
    tag: ArchitectureTag,
    params: ParamSet,
    body: Body,
    head: Head,
}

impl View {
    fn new(
        id: ViewId,
        tag: ArchitectureTag,
        stem_width: usize,
        w: usize,
        rng: &mut ChaCha8Rng,
        dtype: DType,
    ) -> Result<Self> {
        let mut p = ParamSet::new(&format!("view{}", id.index()));
        let body = match tag {
            ArchitectureTag::SkipConnection => Body::Skip {
                enc1: p.conv("enc1", stem_width, w, 3, 1, rng, dtype)?,
                enc2: p.conv("enc2", w, 2 * w, 3, 1, rng, dtype)?,
                dec: p.conv("dec", 3 * w, w, 3, 1, rng, dtype)?,
            },
            ArchitectureTag::SpatialBypass => Body::Bypass {
                enc1: p.conv("enc1", stem_width, w, 3, 1, rng, dtype)?,
                enc2: p.conv("enc2", w, w, 3, 1, rng, dtype)?,
                dec: p.conv("dec", w, w, 3, 1, rng, dtype)?,
            },
            ArchitectureTag::MultiScalePyramid => Body::Pyramid {
                levels: [
                    p.conv("level1", stem_width, w, 3, 1, rng, dtype)?,
                    p.conv("level2", w, w, 3, 1, rng, dtype)?,
                    p.conv("level3", w, w, 3, 1, rng, dtype)?,
                ],
                heads: [
                    p.conv("lhead1", w, w, 1, 1, rng, dtype)?,
                    p.conv("lhead2", w, w, 1, 1, rng, dtype)?,
                    p.conv("lhead3", w, w, 1, 1, rng, dtype)?,
                ],
            },
        };
        let head = Head::new(&mut p, w, rng, dtype)?;
        Ok(Self { tag, params: p, body, head })
    }

    fn forward(&self, stem: &Tensor, image: &Tensor) -> Result<Tensor> {
        let features = match &self.body {
            Body::Skip { enc1, enc2, dec } => {
                let e1 = enc1.forward(stem)?.relu()?;
                let e2 = enc2.forward(&e1.avg_pool2d(2)?)?.relu()?;
                let cat = Tensor::cat(&[&upsample2(&e2)?, &e1], 1)?;
                dec.forward(&cat)?.relu()?
            }
            Body::Bypass { enc1, enc2, dec } => {
                let e1 = enc1.forward(stem)?.relu()?;
                let e2 = enc2.forward(&e1.avg_pool2d(2)?)?.relu()?;
                (dec.forward(&upsample2(&e2)?)? + e1)?.relu()?
            }
            Body::Pyramid { levels, heads } => {
                let l1 = levels[0].forward(stem)?.relu()?;
                let l2 = levels[1].forward(&l1.avg_pool2d(2)?)?.relu()?;
                let l3 = levels[2].forward(&l2.avg_pool2d(2)?)?.relu()?;
                let p1 = heads[0].forward(&l1)?;
                let p2 = upsample2(&heads[1].forward(&l2)?)?;
                let p3 = upsample2(&upsample2(&heads[2].forward(&l3)?)?)?;
                (((p1 + p2)? + p3)? / 3.0)?.relu()?
            }
        };
        self.head.forward(&features, image)
    }
}

/// How 3-channel pretrained first-layer weights are mapped onto 1-channel
/// input.
pub const PRETRAINED_CHANNEL_MODE: &str = "replicate_input_channel";

/// Shared stem, three views and their confidence weights. Not `Clone`:
/// parameters are reference-counted and a copy would alias them.
#[derive(Debug)]
pub struct TripleModel {
    config: ModelConfig,
    dtype: DType,
    stem: Stem,
    views: [View; 3],
    alpha: [f64; 3],
}

pub fn init_triple_model(config: &ModelConfig, seed: u64) -> Result<TripleModel> {
    TripleModel::new(config, seed, DType::F32)
}

impl TripleModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        if config.has_duplicate_architectures() {
            log::warn!("duplicate view architectures requested: {:?}", config.architectures);
        }
        let stem = Stem::new(config.stem_width, &mut seed::rng(seed, &[0x57e]), dtype)?;
        let mut views = Vec::with_capacity(3);
        for id in ViewId::ALL {
            let mut rng = seed::rng(seed.wrapping_add(id.index() as u64), &[0x71e]);
            views.push(View::new(
                id,
                config.architectures[id.index()],
                config.stem_width,
                config.view_width,
                &mut rng,
                dtype,
            )?);
        }
        let views: [View; 3] = views.try_into().expect("three views");
        Ok(Self {
            config: config.clone(),
            dtype,
            stem,
            views,
            alpha: [1.0 / 3.0; 3],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn architecture(&self, view: ViewId) -> ArchitectureTag {
        self.views[view.index()].tag
    }

    /// Raw (unnormalised) confidence weights.
    pub fn alpha(&self) -> [f64; 3] {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: [f64; 3]) -> Result<()> {
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(invalid(format!("alpha values must lie in [0, 1], got {alpha:?}")));
        }
        self.alpha = alpha;
        Ok(())
    }

    pub fn set_view_alpha(&mut self, view: ViewId, value: f64) -> Result<()> {
        let mut a = self.alpha;
        a[view.index()] = value;
        self.set_alpha(a)
    }

    /// Weights normalised to sum to one; fails if all are zero.
    pub fn alpha_normalized(&self) -> Result<[f64; 3]> {
        let s: f64 = self.alpha.iter().sum();
        if s <= 0.0 {
            return Err(Error::ZeroConfidence);
        }
        Ok(self.alpha.map(|a| a / s))
    }

    pub fn stem_vars(&self) -> Vec<Var> {
        self.stem.params.vars()
    }

    /// Stem parameters followed by the view's own parameters.
    pub fn trainable_vars(&self, view: ViewId) -> Vec<Var> {
        let mut v = self.stem.params.vars();
        v.extend(self.views[view.index()].params.vars());
        v
    }

    /// Number of scalars owned by the view itself, excluding the stem.
    pub fn view_parameter_count(&self, view: ViewId) -> usize {
        self.views[view.index()].params.count()
    }

    pub fn stem_parameter_count(&self) -> usize {
        self.stem.params.count()
    }

    /// The view's own parameters flattened in declaration order.
    pub fn view_parameters(&self, view: ViewId) -> Result<Vec<f64>> {
        flatten(&self.views[view.index()].params)
    }

    pub fn stem_parameters(&self) -> Result<Vec<f64>> {
        flatten(&self.stem.params)
    }

    /// `(N, 1, H, W)` image tensor in the model's precision.
    pub fn image_tensor(&self, images: &[&ImageGrid]) -> Result<Tensor> {
        grids_tensor(images.iter().map(|i| i.pixels()), images.first().map(|i| i.dims()), self.dtype)
    }

    pub fn mask_tensor(&self, masks: &[&MaskGrid]) -> Result<Tensor> {
        grids_tensor(masks.iter().map(|m| m.pixels()), masks.first().map(|m| m.dims()), self.dtype)
    }

    fn check_size(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(invalid(format!(
                "model input must be (N, 1, H, W) with H and W multiples of 16, got {:?}",
                x.dims()
            )));
        }
        Ok(())
    }

    pub fn stem_forward(&self, images: &Tensor) -> Result<Tensor> {
        self.check_size(images)?;
        self.stem.forward(images)
    }

    /// Probability map `(N, 1, H, W)` of one view given precomputed stem features.
    pub fn view_forward(&self, view: ViewId, stem: &Tensor, images: &Tensor) -> Result<Tensor> {
        self.views[view.index()].forward(stem, images)
    }

    /// Differentiable forward of one view on a batch.
    pub fn forward_tensor(&self, view: ViewId, images: &Tensor) -> Result<Tensor> {
        let stem = self.stem_forward(images)?;
        self.view_forward(view, &stem, images)
    }

    pub fn forward_view(&self, view: ViewId, image: &ImageGrid) -> Result<MaskGrid> {
        let x = self.image_tensor(&[image])?;
        Ok(tensor_to_masks(&self.forward_tensor(view, &x)?.detach())?.remove(0))
    }

    /// Soft outputs of all three views for a list of images, evaluated in
    /// batches of `batch` with the stem shared between views.
    pub fn predict_all(&self, images: &[&ImageGrid], batch: usize) -> Result<[Vec<MaskGrid>; 3]> {
        let mut out: [Vec<MaskGrid>; 3] = Default::default();
        for chunk in images.chunks(batch.max(1)) {
            let x = self.image_tensor(chunk)?;
            let stem = self.stem_forward(&x)?.detach();
            for id in ViewId::ALL {
                out[id.index()].extend(tensor_to_masks(&self.view_forward(id, &stem, &x)?.detach())?);
            }
        }
        Ok(out)
    }

    /// Soft outputs of a subset of views; views not listed stay empty.
    pub fn predict_views(
        &self,
        views: &[ViewId],
        images: &[&ImageGrid],
        batch: usize,
    ) -> Result<[Vec<MaskGrid>; 3]> {
        let mut out: [Vec<MaskGrid>; 3] = Default::default();
        for chunk in images.chunks(batch.max(1)) {
            let x = self.image_tensor(chunk)?;
            let stem = self.stem_forward(&x)?.detach();
            for &id in views {
                out[id.index()].extend(tensor_to_masks(&self.view_forward(id, &stem, &x)?.detach())?);
            }
        }
        Ok(out)
    }

    /// Confidence-weighted combination of the three views.
    pub fn ensemble_predict(&self, image: &ImageGrid) -> Result<MaskGrid> {
        let alpha = self.alpha_normalized()?;
        let preds = self.predict_all(&[image], 1)?;
        combine(&[&preds[0][0], &preds[1][0], &preds[2][0]], &alpha)
    }

    /// Ensemble over many images, batched.
    pub fn ensemble_predict_all(&self, images: &[&ImageGrid], batch: usize) -> Result<Vec<MaskGrid>> {
        let alpha = self.alpha_normalized()?;
        let active: Vec<ViewId> = ViewId::ALL.into_iter().filter(|v| alpha[v.index()] > 0.0).collect();
        let preds = self.predict_views(&active, images, batch)?;
        (0..images.len())
            .map(|i| {
                let (maps, weights): (Vec<&MaskGrid>, Vec<f64>) =
                    active.iter().map(|v| (&preds[v.index()][i], alpha[v.index()])).unzip();
                combine(&maps, &weights)
            })
            .collect()
    }

    /// Writes every parameter plus alpha to a safetensors archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map: HashMap<String, Tensor> = HashMap::new();
        for (name, var) in self.all_params() {
            map.insert(name.clone(), var.as_tensor().clone());
        }
        map.insert("alpha".into(), Tensor::new(&self.alpha, &Device::Cpu)?);
        candle_core::safetensors::save(&map, path).map_err(|e| file_error(path, e))
    }

    /// Restores parameters and alpha saved by [`TripleModel::save`] into a
    /// model built with the same config.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| file_error(path, e))?;
        for (name, var) in self.all_params() {
            let t = map
                .get(name)
                .ok_or_else(|| file_error(path, format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(file_error(path, format!("tensor {name} has shape {:?}", t.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        let alpha = map
            .get("alpha")
            .ok_or_else(|| file_error(path, "missing alpha"))?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        self.set_alpha([alpha[0], alpha[1], alpha[2]])
    }

    /// Loads pretrained stem weights. A first-layer kernel with three input
    /// channels is summed over channels, which equals feeding the grey image
    /// replicated into RGB.
    pub fn load_pretrained_stem(&mut self, path: &Path) -> Result<&'static str> {
        let map = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| file_error(path, e))?;
        for (name, var) in &self.stem.params.params {
            let Some(t) = map.get(name) else {
                return Err(file_error(path, format!("missing tensor {name}")));
            };
            let mut t = t.to_dtype(self.dtype)?;
            if t.rank() == 4 && t.dim(1)? == 3 && var.dim(1)? == 1 {
                t = t.sum_keepdim(1)?;
            }
            if t.dims() != var.dims() {
                return Err(file_error(path, format!("tensor {name} has shape {:?}", t.dims())));
            }
            var.set(&t)?;
        }
        Ok(PRETRAINED_CHANNEL_MODE)
    }

    fn all_params(&self) -> impl Iterator<Item = &(String, Var)> {
        self.stem
            .params
            .params
            .iter()
            .chain(self.views.iter().flat_map(|v| v.params.params.iter()))
    }
}

fn flatten(p: &ParamSet) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(p.count());
    for (_, v) in &p.params {
        out.extend(v.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

fn grids_tensor<'a>(
    grids: impl Iterator<Item = &'a [f64]>,
    dims: Option<(usize, usize)>,
    dtype: DType,
) -> Result<Tensor> {
    let (h, w) = dims.ok_or_else(|| invalid("empty batch"))?;
    let mut data = Vec::new();
    let mut n = 0;
    for g in grids {
        if g.len() != h * w {
            return Err(invalid("batch members differ in size"));
        }
        data.extend_from_slice(g);
        n += 1;
    }
    Ok(Tensor::from_vec(data, (n, 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits an `(N, 1, H, W)` probability tensor into soft masks.
pub fn tensor_to_masks(t: &Tensor) -> Result<Vec<MaskGrid>> {
    let (n, _, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(flat
        .chunks(h * w)
        .take(n)
        .map(|c| {
            let clipped = c.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            MaskGrid::from_grid_unchecked(
                crate::data::Grid::new(h, w, clipped).expect("chunk size"),
                MaskKind::Soft,
            )
        })
        .collect())
}

/// Pixelwise weighted combination of soft maps. Weights are normalised to sum
/// to one; all-zero weights are an error.
pub fn combine(maps: &[&MaskGrid], weights: &[f64]) -> Result<MaskGrid> {
    if maps.is_empty() || maps.len() != weights.len() {
        return Err(invalid("combine needs one weight per map"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::ZeroConfidence);
    }
    let (h, w) = maps[0].dims();
    if maps.iter().any(|m| m.dims() != (h, w)) {
        return Err(Error::ShapeMismatch {
            expected: (h, w),
            actual: maps.iter().map(|m| m.dims()).find(|d| *d != (h, w)).unwrap(),
        });
    }
    let mut out = vec![0.0; h * w];
    for (m, wt) in maps.iter().zip(weights) {
        let wt = wt / total;
        for (o, v) in out.iter_mut().zip(m.pixels()) {
            *o += wt * v;
        }
    }
    // Rounding can push a convex combination a hair outside the donor range.
    for (i, o) in out.iter_mut().enumerate() {
        let (lo, hi) = maps
            .iter()
            .map(|m| m.pixels()[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        *o = o.clamp(lo, hi);
    }
    MaskGrid::soft(h, w, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::Optimizer;

    fn image(seed: u64, size: usize) -> ImageGrid {
        crate::data::generate_synthetic(1, (size, size), seed).unwrap().remove(0).image
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            stem_width: 2,
            view_width: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn views_differ_and_counts_are_distinct() {
        let m = init_triple_model(&ModelConfig::default(), 0).unwrap();
        let a = m.view_parameters(ViewId::A).unwrap();
        let c = m.view_parameters(ViewId::C).unwrap();
        let counts: Vec<usize> = ViewId::ALL.iter().map(|&v| m.view_parameter_count(v)).collect();
        assert!(counts[0] != counts[1] && counts[1] != counts[2] && counts[0] != counts[2]);
        assert!(a.iter().zip(&c).any(|(x, y)| x != y));
    }

    #[test]
    fn a_times_three_uses_different_seeds() {
        let cfg = ModelConfig {
            architectures: [ArchitectureTag::SkipConnection; 3],
            ..ModelConfig::default()
        };
        let m = init_triple_model(&cfg, 0).unwrap();
        let a = m.view_parameters(ViewId::A).unwrap();
        let b = m.view_parameters(ViewId::B).unwrap();
        assert_eq!(a.len(), b.len());
        let linf = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(linf > 0.0);
    }

    #[test]
    fn forward_shape_range_and_determinism() {
        let m = init_triple_model(&ModelConfig::default(), 1).unwrap();
        let img = image(3, 64);
        for v in ViewId::ALL {
            let p = m.forward_view(v, &img).unwrap();
            assert_eq!(p.dims(), (64, 64));
            assert!(p.pixels().iter().all(|x| (0.0..=1.0).contains(x)));
            assert_eq!(p, m.forward_view(v, &img).unwrap());
        }
    }

    #[test]
    fn rejects_bad_size() {
        let m = init_triple_model(&tiny(), 1).unwrap();
        assert!(m.forward_view(ViewId::A, &image(0, 24)).is_err());
    }

    #[test]
    fn alpha_degenerate_weights() {
        let mut m = init_triple_model(&tiny(), 2).unwrap();
        let img = image(5, 32);
        m.set_alpha([1.0, 0.0, 0.0]).unwrap();
        let e = m.ensemble_predict(&img).unwrap();
        assert_eq!(e, m.forward_view(ViewId::A, &img).unwrap());
        m.set_alpha([0.0; 3]).unwrap();
        assert!(matches!(m.ensemble_predict(&img), Err(Error::ZeroConfidence)));
    }

    #[test]
    fn stem_is_shared_between_views() {
        let m = init_triple_model(&ModelConfig::default(), 0).unwrap();
        let n = m.stem_vars().len();
        let a = m.trainable_vars(ViewId::A);
        let b = m.trainable_vars(ViewId::B);
        for i in 0..n {
            assert_eq!(a[i].as_tensor().id(), b[i].as_tensor().id());
        }
        let img = image(1, 64);
        let x = m.image_tensor(&[&img]).unwrap();
        let before_b = m.forward_tensor(ViewId::B, &x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let stem_before = m.stem_parameters().unwrap();
        let mut opt = candle_nn::SGD::new(a, 0.5).unwrap();
        let loss = m.forward_tensor(ViewId::A, &x).unwrap().mean_all().unwrap();
        opt.backward_step(&loss).unwrap();
        assert!(stem_before != m.stem_parameters().unwrap(), "stem unchanged");
        let after_b = m.forward_tensor(ViewId::B, &x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(before_b != after_b, "view B did not see the stem update");
    }

    #[test]
    fn stem_gradient_matches_finite_difference() {
        let m = TripleModel::new(&tiny(), 4, DType::F64).unwrap();
        let img = image(9, 32);
        let x = m.image_tensor(&[&img]).unwrap();
        for view in ViewId::ALL {
            let loss = m.forward_tensor(view, &x).unwrap().mean_all().unwrap();
            let grads = loss.backward().unwrap();
            let w = &m.stem_vars()[0];
            let g = grads.get(w).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = w.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let (idx, _) = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .unwrap();
            assert!(g[idx].abs() > 0.0, "view {view}: zero stem gradient");
            let h = 1e-6;
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[idx] += delta;
                w.set(&Tensor::from_vec(v, w.dims(), &Device::Cpu).unwrap()).unwrap();
                m.forward_tensor(view, &x).unwrap().mean_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            eval(0.0);
            assert!((fd - g[idx]).abs() <= 1e-4 * g[idx].abs().max(1e-8), "view {view}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut a = init_triple_model(&tiny(), 7).unwrap();
        a.set_alpha([0.5, 0.25, 0.125]).unwrap();
        a.save(&path).unwrap();
        let mut b = init_triple_model(&tiny(), 8).unwrap();
        b.load(&path).unwrap();
        assert_eq!(a.alpha(), b.alpha());
        for v in ViewId::ALL {
            assert_eq!(a.view_parameters(v).unwrap(), b.view_parameters(v).unwrap());
        }
    }

    #[test]
    fn pretrained_rgb_stem_is_summed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stem.safetensors");
        let mut map = HashMap::new();
        map.insert("stem.conv1.weight".to_string(), Tensor::ones((2, 3, 3, 3), DType::F32, &Device::Cpu).unwrap());
        map.insert("stem.conv1.bias".to_string(), Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap());
        map.insert("stem.conv2.weight".to_string(), Tensor::zeros((2, 2, 3, 3), DType::F32, &Device::Cpu).unwrap());
        map.insert("stem.conv2.bias".to_string(), Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap());
        candle_core::safetensors::save(&map, &path).unwrap();
        let mut m = init_triple_model(&tiny(), 0).unwrap();
        assert_eq!(m.load_pretrained_stem(&path).unwrap(), PRETRAINED_CHANNEL_MODE);
        assert!(m.stem_parameters().unwrap()[..18].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn donors_are_cyclic_neighbours() {
        assert_eq!(ViewId::A.donors(), (ViewId::C, ViewId::B));
        assert_eq!(ViewId::B.donors(), (ViewId::A, ViewId::C));
        assert_eq!(ViewId::C.donors(), (ViewId::B, ViewId::A));
    }
}
