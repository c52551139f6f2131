//! Whole-volume inter-slice super-resolution.
//!
//! The output grid keeps every acquired slice verbatim and fills the gaps by
//! querying a [`SliceInterpolator`] between each pair of neighbouring slices.
//! Large planes are processed in overlapping tiles whose halo covers the
//! interpolator's receptive field, so tiling does not change the result
//! beyond rounding.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, Axis as NdAxis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{lerp_planes, Patchable};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::volume::{Axis, Frame, Volume};

/// Predicts planes at fractions `t` between two bounding planes.
pub trait SliceInterpolator: Send + Sync {
    fn name(&self) -> &'static str;

    /// Pixels beyond which a prediction cannot see; used as the tiling halo.
    fn receptive_radius(&self) -> usize;

    fn interpolate_many(&self, left: &Frame, right: &Frame, ts: &[f64]) -> Result<Vec<Frame>>;
}

/// Straight-line blend along the slice axis.
pub struct LinearInterpolator;

impl SliceInterpolator for LinearInterpolator {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn receptive_radius(&self) -> usize {
        0
    }

    fn interpolate_many(&self, left: &Frame, right: &Frame, ts: &[f64]) -> Result<Vec<Frame>> {
        ts.iter().map(|&t| lerp_planes(left, right, t)).collect()
    }
}

/// The learned interpolator; encodes each bounding plane once per pair.
pub struct ModelInterpolator {
    params: Arc<ModelParams>,
}

impl ModelInterpolator {
    pub fn new(params: Arc<ModelParams>) -> Self {
        Self { params }
    }
}

impl SliceInterpolator for ModelInterpolator {
    fn name(&self) -> &'static str {
        "model"
    }

    fn receptive_radius(&self) -> usize {
        self.params.config().receptive_radius()
    }

    fn interpolate_many(&self, left: &Frame, right: &Frame, ts: &[f64]) -> Result<Vec<Frame>> {
        if left.dim() != right.dim() {
            return Err(Error::Shape(format!("bounding planes differ: {:?} vs {:?}", left.dim(), right.dim())));
        }
        let fl = self.params.encode(left);
        let fr = self.params.encode(right);
        ts.iter().map(|&t| self.params.decode(&fl, &fr, t)).collect()
    }
}

type Factory = fn(Option<Arc<ModelParams>>) -> Result<Box<dyn SliceInterpolator>>;

/// Name -> constructor table for interpolation methods.
pub struct InterpolatorRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

impl Default for InterpolatorRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("linear", |_| Ok(Box::new(LinearInterpolator)));
        r.register("model", |p| {
            let p = p.ok_or_else(|| Error::InvalidArgument("the model interpolator needs parameters".into()))?;
            Ok(Box::new(ModelInterpolator::new(p)))
        });
        r
    }
}

impl InterpolatorRegistry {
    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn build(&self, name: &str, params: Option<Arc<ModelParams>>) -> Result<Box<dyn SliceInterpolator>> {
        let f = self.factories.get(name).ok_or_else(|| Error::UnknownStrategy {
            kind: "interpolator",
            name: name.into(),
            available: self.names().join(", "),
        })?;
        f(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileOptions {
    /// Largest in-plane tile edge; planes within this size are processed whole.
    pub tile: usize,
    pub overlap: usize,
}

impl Default for TileOptions {
    fn default() -> Self {
        Self { tile: 256, overlap: 16 }
    }
}

impl TileOptions {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || self.overlap >= self.tile {
            return Err(Error::InvalidArgument(format!(
                "tile {} must be positive and larger than overlap {}",
                self.tile, self.overlap
            )));
        }
        Ok(())
    }
}

/// Tile starts covering `[0, extent)` with tiles of `tile` and at least `overlap` shared.
fn tile_starts(extent: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < extent).collect();
    starts.push(extent - tile);
    starts
}

/// Ramp weights that fall off linearly over `overlap` pixels at interior edges.
fn ramp(len: usize, overlap: usize, lo_edge: bool, hi_edge: bool) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let mut w: f64 = 1.0;
            if !lo_edge && overlap > 0 {
                w = w.min((i + 1) as f64 / (overlap + 1) as f64);
            }
            if !hi_edge && overlap > 0 {
                w = w.min((len - i) as f64 / (overlap + 1) as f64);
            }
            w
        })
        .collect()
}

/// Runs `interp` tile by tile and blends the overlapping predictions.
pub fn interpolate_tiled(
    interp: &dyn SliceInterpolator,
    left: &Frame,
    right: &Frame,
    ts: &[f64],
    opts: TileOptions,
) -> Result<Vec<Frame>> {
    opts.validate()?;
    let (h, w) = left.dim();
    if right.dim() != (h, w) {
        return Err(Error::Shape(format!("bounding planes differ: {:?} vs {:?}", left.dim(), right.dim())));
    }
    if h <= opts.tile && w <= opts.tile {
        return interp.interpolate_many(left, right, ts);
    }
    let halo = interp.receptive_radius();
    let rows = tile_starts(h, opts.tile, opts.overlap);
    let cols = tile_starts(w, opts.tile, opts.overlap);
    let mut acc = vec![Array2::<f64>::zeros((h, w)); ts.len()];
    let mut weight = Array2::<f64>::zeros((h, w));
    for &r0 in &rows {
        for &c0 in &cols {
            let th = opts.tile.min(h);
            let tw = opts.tile.min(w);
            // grow by the halo, clipped to the plane
            let (hr0, hc0) = (r0.saturating_sub(halo), c0.saturating_sub(halo));
            let hr1 = (r0 + th + halo).min(h);
            let hc1 = (c0 + tw + halo).min(w);
            let size = [hr1 - hr0, hc1 - hc0];
            let l = left.crop_at([hr0, hc0], size)?;
            let r = right.crop_at([hr0, hc0], size)?;
            let preds = interp.interpolate_many(&l, &r, ts)?;
            let wr = ramp(th, opts.overlap, r0 == 0, r0 + th == h);
            let wc = ramp(tw, opts.overlap, c0 == 0, c0 + tw == w);
            let (or, oc) = (r0 - hr0, c0 - hc0);
            for (a, p) in acc.iter_mut().zip(&preds) {
                let p = p.pixels();
                for i in 0..th {
                    for j in 0..tw {
                        a[[r0 + i, c0 + j]] += wr[i] * wc[j] * p[[or + i, oc + j]] as f64;
                    }
                }
            }
            for i in 0..th {
                for j in 0..tw {
                    weight[[r0 + i, c0 + j]] += wr[i] * wc[j];
                }
            }
        }
    }
    acc.into_iter()
        .map(|a| Frame::new((&a / &weight).mapv(|v| v as f32)))
        .collect()
}

/// Where each output slice comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlicePlan {
    Copy(usize),
    Between { left: usize, t: f64 },
}

/// Output plan for an integer factor: copies at `j n`, `t = k / n` between.
pub fn integer_plan(z: usize, n: usize) -> Result<Vec<SlicePlan>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("factor must be at least 2, got {n}")));
    }
    check_z(z)?;
    let mut plan = Vec::with_capacity(n * (z - 1) + 1);
    for j in 0..z - 1 {
        plan.push(SlicePlan::Copy(j));
        for k in 1..n {
            plan.push(SlicePlan::Between {
                left: j,
                t: k as f64 / n as f64,
            });
        }
    }
    plan.push(SlicePlan::Copy(z - 1));
    Ok(plan)
}

const GRID_EPS: f64 = 1e-9;

/// Output plan for a uniform grid at `target` mm over slices `spacing` mm apart.
pub fn continuous_plan(z: usize, spacing: f64, target: f64) -> Result<Vec<SlicePlan>> {
    check_z(z)?;
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::InvalidArgument(format!("target spacing must be positive, got {target}")));
    }
    if target > spacing * (1.0 + GRID_EPS) {
        return Err(Error::InvalidArgument(format!(
            "target spacing {target} mm is coarser than the input spacing {spacing} mm"
        )));
    }
    let span = (z - 1) as f64;
    let step = target / spacing;
    let count = (span / step + GRID_EPS).floor() as usize + 1;
    let mut plan = Vec::with_capacity(count);
    for m in 0..count {
        let p = (m as f64 * step).min(span);
        let j = (p + GRID_EPS).floor();
        let t = p - j;
        let j = j as usize;
        if t.abs() <= GRID_EPS || j >= z - 1 {
            plan.push(SlicePlan::Copy(j.min(z - 1)));
        } else if 1.0 - t <= GRID_EPS {
            plan.push(SlicePlan::Copy(j + 1));
        } else {
            plan.push(SlicePlan::Between { left: j, t });
        }
    }
    Ok(plan)
}

fn check_z(z: usize) -> Result<()> {
    if z < 2 {
        return Err(Error::VolumeTooSmall {
            extents: [0, 0, z],
            required: [1, 1, 2],
        });
    }
    Ok(())
}

/// Assembles the volume described by `plan`, clamping predictions to `[0, 1]`.
pub fn assemble(
    lr: &Volume,
    plan: &[SlicePlan],
    out_spacing_z: f64,
    interp: &dyn SliceInterpolator,
    opts: TileOptions,
) -> Result<Volume> {
    let [nx, ny, nz] = lr.dim();
    check_z(nz).map_err(|_| Error::VolumeTooSmall {
        extents: [nx, ny, nz],
        required: [1, 1, 2],
    })?;
    // group intermediate positions by gap so each pair is encoded once
    let mut gaps: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    for (i, p) in plan.iter().enumerate() {
        if let SlicePlan::Between { left, t } = *p {
            if left + 1 >= nz {
                return Err(Error::Bounds {
                    axis: 'z',
                    index: left + 1,
                    extent: nz,
                });
            }
            gaps.entry(left).or_default().push((i, t));
        }
    }
    let gaps: Vec<_> = gaps.into_iter().collect();
    let predicted: Vec<Vec<(usize, Frame)>> = gaps
        .par_iter()
        .map(|(j, items)| {
            let left = lr.slice(Axis::Z, *j)?;
            let right = lr.slice(Axis::Z, j + 1)?;
            let ts: Vec<f64> = items.iter().map(|x| x.1).collect();
            let frames = interpolate_tiled(interp, &left, &right, &ts, opts)?;
            Ok(items.iter().map(|x| x.0).zip(frames).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = Array3::<f32>::zeros((nx, ny, plan.len()));
    for (i, p) in plan.iter().enumerate() {
        if let SlicePlan::Copy(j) = *p {
            out.index_axis_mut(NdAxis(2), i).assign(&lr.voxels().index_axis(NdAxis(2), j));
        }
    }
    for (i, f) in predicted.into_iter().flatten() {
        let mut dst = out.slice_mut(s![.., .., i]);
        dst.assign(&f.pixels().mapv(|v| v.clamp(0.0, 1.0)));
    }
    let [sx, sy, _] = lr.spacing();
    Volume::new(out, [sx, sy, out_spacing_z], lr.subject_id())
}

/// Integer-factor upsampling along z with any interpolator.
pub fn resolve_with(lr: &Volume, interp: &dyn SliceInterpolator, n: usize, opts: TileOptions) -> Result<Volume> {
    let plan = integer_plan(lr.extent(Axis::Z), n)?;
    assemble(lr, &plan, lr.spacing()[2] / n as f64, interp, opts)
}

/// Arbitrary-spacing upsampling along z with any interpolator.
pub fn resolve_continuous_with(
    lr: &Volume,
    interp: &dyn SliceInterpolator,
    target_spacing: f64,
    opts: TileOptions,
) -> Result<Volume> {
    let plan = continuous_plan(lr.extent(Axis::Z), lr.spacing()[2], target_spacing)?;
    assemble(lr, &plan, target_spacing, interp, opts)
}

/// Learned upsampling by factor `n` along z.
pub fn super_resolve(lr: &Volume, params: &ModelParams, n: usize) -> Result<Volume> {
    let interp = ModelInterpolator::new(Arc::new(params.clone()));
    resolve_with(lr, &interp, n, TileOptions::default())
}

/// Learned upsampling to `target_spacing` mm along z.
pub fn super_resolve_continuous(lr: &Volume, params: &ModelParams, target_spacing: f64) -> Result<Volume> {
    let interp = ModelInterpolator::new(Arc::new(params.clone()));
    resolve_continuous_with(lr, &interp, target_spacing, TileOptions::default())
}

/// The classical baseline: linear interpolation along z only.
pub fn trilinear_upsample(lr: &Volume, n: usize) -> Result<Volume> {
    resolve_with(lr, &LinearInterpolator, n, TileOptions::default())
}
