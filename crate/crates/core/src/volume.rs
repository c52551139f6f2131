//! Volumes, frames and the coordinates that tie them together.
//!
//! Arrays are indexed `(x, y, z)` with `z` the slice-stacking axis. Every
//! type here is immutable once built and validated on construction.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Array2, Array3, ArrayView2, Axis as NdAxis, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three volume axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Axis::X => 'x',
            Axis::Y => 'y',
            Axis::Z => 'z',
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::InvalidArgument(format!("unknown axis '{other}'"))),
        }
    }
}

/// Min-max rescale to `[0, 1]`. Constant arrays map to zeros.
pub fn normalize_intensities<D: Dimension>(raw: &Array<f32, D>) -> Result<Array<f32, D>> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("cannot normalize an empty array".into()));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for (i, &v) in raw.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("value {v} at flat index {i}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Ok(Array::zeros(raw.raw_dim()));
    }
    let range = f64::from(hi) - f64::from(lo);
    let lo = f64::from(lo);
    Ok(raw.mapv(|v| ((f64::from(v) - lo) / range) as f32))
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f32>) -> Result<()> {
    for (i, &v) in values.into_iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("value {v} at flat index {i}")));
        }
    }
    Ok(())
}

/// A 2D grayscale image: a video frame or a volume cross-section.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Array2<f32>,
}

impl Frame {
    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("frame must be at least 1x1, got {h}x{w}")));
        }
        check_finite(pixels.iter())?;
        Ok(Self { pixels })
    }

    /// Builds a frame after min-max normalizing `raw`.
    pub fn normalized(raw: Array2<f32>) -> Result<Self> {
        Self::new(normalize_intensities(&raw)?)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn pixels(&self) -> ArrayView2<'_, f32> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array2<f32> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub(crate) fn ensure_same_dim(&self, other: &Frame, what: &str) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.dim(),
                other.dim()
            )));
        }
        Ok(())
    }
}

/// Temporally ordered frames of identical size.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    source_id: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, source_id: impl Into<String>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::SequenceTooShort {
                len: frames.len(),
                required: 2,
            });
        }
        let dim = frames[0].dim();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dim() != dim) {
            return Err(Error::Shape(format!(
                "frame {i} is {:?}, expected {:?}",
                f.dim(),
                dim
            )));
        }
        Ok(Self {
            frames,
            source_id: source_id.into(),
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn frame_dim(&self) -> (usize, usize) {
        self.frames[0].dim()
    }
}

/// A 3D scalar grid with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    voxels: Array3<f32>,
    spacing: [f64; 3],
    subject_id: String,
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3], subject_id: impl Into<String>) -> Result<Self> {
        if voxels.is_empty() {
            return Err(Error::Shape(format!("volume must be non-empty, got {:?}", voxels.dim())));
        }
        if let Some(s) = spacing.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing components must be positive, got {s} in {spacing:?}"
            )));
        }
        check_finite(voxels.iter())?;
        Ok(Self {
            voxels,
            spacing,
            subject_id: subject_id.into(),
        })
    }

    pub fn normalized(raw: Array3<f32>, spacing: [f64; 3], subject_id: impl Into<String>) -> Result<Self> {
        Self::new(normalize_intensities(&raw)?, spacing, subject_id)
    }

    /// Stacks equally sized frames along `axis`.
    pub fn from_slices(
        frames: &[Frame],
        axis: Axis,
        spacing: [f64; 3],
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot stack zero slices".into()))?;
        let (a, b) = first.dim();
        let dim = match axis {
            Axis::X => (frames.len(), a, b),
            Axis::Y => (a, frames.len(), b),
            Axis::Z => (a, b, frames.len()),
        };
        let mut voxels = Array3::zeros(dim);
        for (i, f) in frames.iter().enumerate() {
            first.ensure_same_dim(f, "stacked slices differ")?;
            voxels
                .index_axis_mut(NdAxis(axis.index()), i)
                .assign(&f.pixels());
        }
        Self::new(voxels, spacing, subject_id)
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn into_voxels(self) -> Array3<f32> {
        self.voxels
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn dim(&self) -> [usize; 3] {
        let (x, y, z) = self.voxels.dim();
        [x, y, z]
    }

    pub fn extent(&self, axis: Axis) -> usize {
        self.dim()[axis.index()]
    }

    /// True when the slice spacing exceeds both in-plane spacings.
    pub fn is_lr_along_z(&self) -> bool {
        let [sx, sy, sz] = self.spacing;
        sz > sx && sz > sy
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        let v = std::mem::take(&mut self.voxels);
        Self::new(v, spacing, self.subject_id)
    }

    pub fn with_subject_id(mut self, subject_id: impl Into<String>) -> Self {
        self.subject_id = subject_id.into();
        self
    }

    /// The 2D cross-section at `index` along `axis`.
    ///
    /// Rows and columns follow the remaining axes in order, so an `x` slice
    /// is indexed `(y, z)` and a `z` slice `(x, y)`.
    pub fn slice(&self, axis: Axis, index: usize) -> Result<Frame> {
        let extent = self.extent(axis);
        if index >= extent {
            return Err(Error::Bounds {
                axis: axis.letter(),
                index,
                extent,
            });
        }
        Frame::new(
            self.voxels
                .index_axis(NdAxis(axis.index()), index)
                .to_owned(),
        )
    }
}

/// Free-function form of [`Volume::slice`].
pub fn extract_slice(volume: &Volume, axis: Axis, index: usize) -> Result<Frame> {
    volume.slice(axis, index)
}

/// Normalized position of an intermediate frame between two bounding ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetCoordinate {
    t: f64,
    k: f64,
    n: usize,
}

impl TargetCoordinate {
    /// Offset `k` within a gap of `n` steps; `t = k / n`.
    pub fn new(k: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!("factor n must be >= 2, got {n}")));
        }
        if !(k.is_finite() && (0.0..=n as f64).contains(&k)) {
            return Err(Error::InvalidArgument(format!("offset k={k} outside [0, {n}]")));
        }
        Ok(Self {
            t: k / n as f64,
            k,
            n,
        })
    }

    /// A coordinate given directly by its fraction, with `n` fixed to 2
    /// unless the caller knows better.
    pub fn from_fraction(t: f64) -> Result<Self> {
        if !(t.is_finite() && (0.0..=1.0).contains(&t)) {
            return Err(Error::InvalidArgument(format!("fraction t={t} outside [0, 1]")));
        }
        Ok(Self { t, k: 2.0 * t, n: 2 })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Bounding pair, target coordinate and (during training) the true frame.
#[derive(Debug, Clone)]
pub struct InterpolationSample {
    pub left: Frame,
    pub right: Frame,
    pub coord: TargetCoordinate,
    pub target: Option<Frame>,
}

impl InterpolationSample {
    pub fn new(left: Frame, right: Frame, coord: TargetCoordinate, target: Option<Frame>) -> Result<Self> {
        left.ensure_same_dim(&right, "bounding frames differ")?;
        if let Some(t) = &target {
            left.ensure_same_dim(t, "target differs from bounding frames")?;
        }
        Ok(Self {
            left,
            right,
            coord,
            target,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.left.dim()
    }
}
