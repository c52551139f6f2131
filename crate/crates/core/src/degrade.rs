//! Manufacturing training pairs: video sub-sequence decimation, slice-axis
//! LR simulation for volumes, and in-plane downsampling for self-supervision.

use ndarray::{s, Array3, ArrayViewMut1, Axis as NdAxis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Axis, Frame, FrameSequence, Volume};

/// Number of kept frames in a sampled video window (the window spans
/// `KEPT_PER_WINDOW - 1` gaps of `n` frames).
pub const KEPT_PER_WINDOW: usize = 16;

/// Length of a sub-sequence window for factor `n`: `15n + 1`.
pub fn window_len(n: usize) -> usize {
    (KEPT_PER_WINDOW - 1) * n + 1
}

/// A window position inside a sequence, without copying frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub n: usize,
}

impl Window {
    /// Sequence index of the frame at `offset` within the window.
    pub fn frame_index(&self, offset: usize) -> usize {
        self.start + offset
    }

    /// Indices of `(left, right, target)` for gap `gap` and offset `k`.
    pub fn triple(&self, gap: usize, k: usize) -> (usize, usize, usize) {
        let base = self.start + gap * self.n;
        (base, base + self.n, base + k)
    }
}

/// Draws a uniformly random window of length `15n + 1` from a sequence of
/// `len` frames.
pub fn draw_window<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Result<Window> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("factor n must be >= 2, got {n}")));
    }
    let required = window_len(n);
    if len < required {
        return Err(Error::SequenceTooShort { len, required });
    }
    Ok(Window {
        start: rng.random_range(0..=len - required),
        n,
    })
}

/// A held-out intermediate frame and where it sits.
#[derive(Debug, Clone)]
pub struct GroundTruthFrame {
    /// Which gap between kept frames (0..15).
    pub gap: usize,
    /// Offset inside the gap, `1 <= k < n`.
    pub k: usize,
    pub frame: Frame,
}

#[derive(Debug, Clone)]
pub struct SubsequenceSample {
    pub kept: Vec<Frame>,
    pub groundtruth: Vec<GroundTruthFrame>,
    pub n: usize,
    pub window_start: usize,
}

/// Picks a random `15n + 1` window, keeps every `n`-th frame and tags the
/// rest as ground truth with their `(gap, k)`.
pub fn sample_subsequence<R: Rng + ?Sized>(seq: &FrameSequence, n: usize, rng: &mut R) -> Result<SubsequenceSample> {
    let window = draw_window(seq.len(), n, rng)?;
    let frames = seq.frames();
    let mut kept = Vec::with_capacity(KEPT_PER_WINDOW);
    let mut groundtruth = Vec::with_capacity((KEPT_PER_WINDOW - 1) * (n - 1));
    for offset in 0..window_len(n) {
        let frame = frames[window.frame_index(offset)].clone();
        if offset % n == 0 {
            kept.push(frame);
        } else {
            groundtruth.push(GroundTruthFrame {
                gap: offset / n,
                k: offset % n,
                frame,
            });
        }
    }
    Ok(SubsequenceSample {
        kept,
        groundtruth,
        n,
        window_start: window.start,
    })
}

/// Through-plane blur applied before decimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SliceProfile {
    #[default]
    None,
    /// Gaussian with the given full width at half maximum in millimeters.
    Gaussian { fwhm_mm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub axis: Axis,
    pub factor: usize,
    #[serde(default)]
    pub slice_profile: SliceProfile,
}

impl DegradeSpec {
    pub fn new(axis: Axis, factor: usize, slice_profile: SliceProfile) -> Result<Self> {
        let spec = Self {
            axis,
            factor,
            slice_profile,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Pure decimation, no slice profile.
    pub fn decimation(axis: Axis, factor: usize) -> Result<Self> {
        Self::new(axis, factor, SliceProfile::None)
    }

    /// Gaussian slice profile whose FWHM equals the decimated spacing.
    pub fn simulated_acquisition(axis: Axis, factor: usize, spacing: [f64; 3]) -> Result<Self> {
        Self::new(
            axis,
            factor,
            SliceProfile::Gaussian {
                fwhm_mm: spacing[axis.index()] * factor as f64,
            },
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor < 2 {
            return Err(Error::InvalidArgument(format!(
                "downsampling factor must be >= 2, got {}",
                self.factor
            )));
        }
        if let SliceProfile::Gaussian { fwhm_mm } = self.slice_profile {
            if !(fwhm_mm.is_finite() && fwhm_mm > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "gaussian slice profile needs fwhm > 0, got {fwhm_mm}"
                )));
            }
        }
        Ok(())
    }
}

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn convolve_line(line: ArrayViewMut1<f32>, kernel: &[f64], scratch: &mut Vec<f64>) {
    let n = line.len();
    let radius = (kernel.len() / 2) as isize;
    scratch.clear();
    scratch.extend(line.iter().map(|&v| v as f64));
    let mut line = line;
    for i in 0..n {
        let acc: f64 = kernel
            .iter()
            .enumerate()
            .map(|(j, w)| w * scratch[reflect(i as isize + j as isize - radius, n)])
            .sum();
        line[i] = acc as f32;
    }
}

/// Gaussian blur along one axis with reflective boundaries; `fwhm_mm` is
/// converted to voxels with the volume spacing on that axis.
pub fn slice_profile_blur(volume: &Volume, axis: Axis, fwhm_mm: f64) -> Result<Volume> {
    if !(fwhm_mm.is_finite() && fwhm_mm > 0.0) {
        return Err(Error::InvalidArgument(format!("fwhm must be > 0, got {fwhm_mm}")));
    }
    let sigma = fwhm_mm / volume.spacing()[axis.index()] / FWHM_PER_SIGMA;
    let kernel = gaussian_kernel(sigma);
    let mut voxels = volume.voxels().clone();
    let mut scratch = Vec::new();
    for lane in voxels.lanes_mut(NdAxis(axis.index())) {
        convolve_line(lane, &kernel, &mut scratch);
    }
    Volume::new(voxels, volume.spacing(), volume.subject_id())
}

/// Keeps every `n`-th plane along the axis (after the optional slice profile)
/// and multiplies that axis' spacing by `n`.
pub fn decimate(volume: &Volume, spec: &DegradeSpec) -> Result<Volume> {
    spec.validate()?;
    let ax = spec.axis.index();
    let n = spec.factor;
    let extent = volume.dim()[ax];
    if extent < n + 1 {
        return Err(Error::VolumeTooSmall {
            extents: volume.dim(),
            required: {
                let mut r = [1; 3];
                r[ax] = n + 1;
                r
            },
        });
    }
    let blurred;
    let source = match spec.slice_profile {
        SliceProfile::None => volume,
        SliceProfile::Gaussian { fwhm_mm } => {
            blurred = slice_profile_blur(volume, spec.axis, fwhm_mm)?;
            &blurred
        }
    };
    let voxels = source
        .voxels()
        .slice_axis(NdAxis(ax), ndarray::Slice::new(0, None, n as isize))
        .to_owned();
    let mut spacing = volume.spacing();
    spacing[ax] *= n as f64;
    Volume::new(voxels, spacing, volume.subject_id())
}

/// `reference` is the subject's own LR volume, `input` the same volume
/// further decimated along an in-plane axis.
#[derive(Debug, Clone)]
pub struct SelfSupervisedPair {
    pub input: Volume,
    pub reference: Volume,
    pub axis: Axis,
    pub factor: usize,
    /// Set when the subject is not anisotropic along z; the pair is still usable.
    pub warning: Option<String>,
}

pub fn build_selfsup_pair(
    lr: &Volume,
    n: usize,
    axis: Axis,
    profile: SliceProfile,
) -> Result<SelfSupervisedPair> {
    if axis == Axis::Z {
        return Err(Error::InvalidArgument(
            "self-supervised pairs are built along x or y, not the slice axis".into(),
        ));
    }
    let warning = (!lr.is_lr_along_z()).then(|| {
        let msg = format!(
            "subject {} is not anisotropic along z (spacing {:?})",
            lr.subject_id(),
            lr.spacing()
        );
        log::warn!("{msg}");
        msg
    });
    let input = decimate(lr, &DegradeSpec::new(axis, n, profile)?)?;
    Ok(SelfSupervisedPair {
        input,
        reference: lr.clone(),
        axis,
        factor: n,
        warning,
    })
}

/// Things that can be cut into axis-aligned sub-blocks.
pub trait Patchable: Sized {
    type Extent: Copy + AsRef<[usize]> + std::fmt::Debug;

    fn extent(&self) -> Self::Extent;

    fn crop_at(&self, origin: Self::Extent, size: Self::Extent) -> Result<Self>;
}

impl Patchable for Frame {
    type Extent = [usize; 2];

    fn extent(&self) -> [usize; 2] {
        let (h, w) = self.dim();
        [h, w]
    }

    fn crop_at(&self, origin: [usize; 2], size: [usize; 2]) -> Result<Frame> {
        check_window(&Patchable::extent(self), &origin, &size)?;
        Frame::new(
            self.pixels()
                .slice(s![origin[0]..origin[0] + size[0], origin[1]..origin[1] + size[1]])
                .to_owned(),
        )
    }
}

impl Patchable for Volume {
    type Extent = [usize; 3];

    fn extent(&self) -> [usize; 3] {
        self.dim()
    }

    fn crop_at(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        check_window(&Patchable::extent(self), &origin, &size)?;
        let v = self
            .voxels()
            .slice(s![
                origin[0]..origin[0] + size[0],
                origin[1]..origin[1] + size[1],
                origin[2]..origin[2] + size[2]
            ])
            .to_owned();
        Volume::new(v, self.spacing(), self.subject_id())
    }
}

fn check_window(extent: &[usize], origin: &[usize], size: &[usize]) -> Result<()> {
    let fits = extent
        .iter()
        .zip(origin)
        .zip(size)
        .all(|((&e, &o), &s)| s >= 1 && o + s <= e);
    if fits {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "patch of size {size:?} at {origin:?} does not fit extent {extent:?}"
        )))
    }
}

/// Uniformly random corner for a patch of `size` inside `extent`.
pub fn random_origin<R: Rng + ?Sized, const D: usize>(
    extent: [usize; D],
    size: [usize; D],
    rng: &mut R,
) -> Result<[usize; D]> {
    let mut origin = [0; D];
    for d in 0..D {
        if size[d] == 0 || size[d] > extent[d] {
            return Err(Error::Shape(format!(
                "patch size {size:?} exceeds extent {extent:?}"
            )));
        }
        origin[d] = rng.random_range(0..=extent[d] - size[d]);
    }
    Ok(origin)
}

/// Random crop of a frame or volume.
pub fn crop_patch<P, R, const D: usize>(item: &P, size: [usize; D], rng: &mut R) -> Result<P>
where
    P: Patchable<Extent = [usize; D]>,
    R: Rng + ?Sized,
{
    let origin = random_origin(Patchable::extent(item), size, rng)?;
    item.crop_at(origin, size)
}

/// Mean intensity, accumulated in f64.
pub fn mean_intensity(voxels: &Array3<f32>) -> f64 {
    voxels.iter().map(|&v| v as f64).sum::<f64>() / voxels.len() as f64
}

/// Linear interpolation between two equally sized planes, computed in f64.
pub fn lerp_planes(a: &Frame, b: &Frame, t: f64) -> Result<Frame> {
    a.ensure_same_dim(b, "interpolated planes differ")?;
    let mut out = a.pixels().to_owned();
    Zip::from(&mut out)
        .and(&b.pixels())
        .for_each(|o, &r| *o = ((1.0 - t) * *o as f64 + t * r as f64) as f32);
    Frame::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(len: usize) -> FrameSequence {
        let frames = (0..len)
            .map(|i| Frame::filled(2, 3, i as f32 / len as f32).unwrap())
            .collect();
        FrameSequence::new(frames, "seq").unwrap()
    }

    fn ramp_volume(dim: (usize, usize, usize), spacing: [f64; 3]) -> Volume {
        let v = Array3::from_shape_fn(dim, |(x, y, z)| ((x * 7 + y * 3 + z) % 17) as f32 / 16.0);
        Volume::new(v, spacing, "ramp").unwrap()
    }

    #[test]
    fn window_arithmetic_for_n4() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_subsequence(&seq(100), 4, &mut rng).unwrap();
        assert_eq!(window_len(4), 61);
        assert_eq!(s.kept.len(), 16);
        assert_eq!(s.groundtruth.len(), 45);
    }

    #[test]
    fn only_one_window_fits() {
        let sq = seq(31);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = sample_subsequence(&sq, 2, &mut rng).unwrap();
        assert_eq!(s.window_start, 0);
        for (j, f) in s.kept.iter().enumerate() {
            assert_eq!(f, &sq.frames()[2 * j]);
        }
    }

    #[test]
    fn too_short_names_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_subsequence(&seq(60), 4, &mut rng).unwrap_err();
        assert!(matches!(err, Error::SequenceTooShort { len: 60, required: 61 }));
    }

    #[test]
    fn groundtruth_tags_are_in_gap() {
        let sq = seq(200);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let s = sample_subsequence(&sq, 4, &mut rng).unwrap();
            for g in &s.groundtruth {
                assert!((1..=3).contains(&g.k));
                assert!(g.gap < 15);
                assert_eq!(g.frame, sq.frames()[s.window_start + 4 * g.gap + g.k]);
            }
        }
    }

    #[test]
    fn pure_decimation_keeps_every_nth_plane() {
        let v = ramp_volume((4, 5, 64), [1.0, 1.0, 1.0]);
        let d = decimate(&v, &DegradeSpec::decimation(Axis::Z, 4).unwrap()).unwrap();
        assert_eq!(d.dim(), [4, 5, 16]);
        for j in 0..16 {
            assert_eq!(d.slice(Axis::Z, j).unwrap(), v.slice(Axis::Z, 4 * j).unwrap());
        }
    }

    #[test]
    fn decimation_scales_spacing() {
        let v = ramp_volume((2, 2, 16), [0.3646, 0.3646, 0.7]);
        let d = decimate(&v, &DegradeSpec::decimation(Axis::Z, 4).unwrap()).unwrap();
        let s = d.spacing();
        assert_eq!(s[0], 0.3646);
        assert!((s[2] - 2.8).abs() < 1e-12);
    }

    #[test]
    fn decimation_needs_n_plus_one_planes() {
        let v = ramp_volume((2, 2, 4), [1.0; 3]);
        assert!(decimate(&v, &DegradeSpec::decimation(Axis::Z, 4).unwrap()).is_err());
        let v = ramp_volume((2, 2, 5), [1.0; 3]);
        assert_eq!(decimate(&v, &DegradeSpec::decimation(Axis::Z, 4).unwrap()).unwrap().dim()[2], 2);
    }

    #[test]
    fn gaussian_of_constant_is_constant() {
        let v = Volume::new(Array3::from_elem((3, 3, 20), 0.37), [1.0, 1.0, 1.0], "c").unwrap();
        let spec = DegradeSpec::simulated_acquisition(Axis::Z, 4, v.spacing()).unwrap();
        let d = decimate(&v, &spec).unwrap();
        assert!(d.voxels().iter().all(|&x| (x - 0.37).abs() < 1e-6));
    }

    #[test]
    fn gaussian_requires_positive_fwhm() {
        assert!(DegradeSpec::new(Axis::Z, 2, SliceProfile::Gaussian { fwhm_mm: 0.0 }).is_err());
    }

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let got: Vec<_> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn selfsup_pair_spacing() {
        let lr = ramp_volume((16, 16, 8), [0.4, 0.4, 4.0]);
        let p = build_selfsup_pair(&lr, 4, Axis::X, SliceProfile::None).unwrap();
        let s = p.input.spacing();
        assert!((s[0] - 1.6).abs() < 1e-12 && s[1] == 0.4 && s[2] == 4.0);
        assert_eq!(p.reference, lr);
        assert!(p.warning.is_none());
        let p = build_selfsup_pair(&lr, 4, Axis::Y, SliceProfile::None).unwrap();
        let s = p.input.spacing();
        assert!(s[0] == 0.4 && (s[1] - 1.6).abs() < 1e-12 && s[2] == 4.0);
    }

    #[test]
    fn selfsup_pair_flags_isotropic_subject() {
        let v = ramp_volume((16, 16, 8), [1.0; 3]);
        let p = build_selfsup_pair(&v, 4, Axis::X, SliceProfile::None).unwrap();
        assert!(p.warning.is_some());
        assert!(build_selfsup_pair(&v, 4, Axis::Z, SliceProfile::None).is_err());
    }

    #[test]
    fn crops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Frame::filled(90, 160, 0.5).unwrap();
        assert_eq!(crop_patch(&f, [64, 64], &mut rng).unwrap().dim(), (64, 64));
        let n = 4;
        let v = ramp_volume((70, 80, 100), [1.0; 3]);
        assert_eq!(crop_patch(&v, [64, 64, 16 * n], &mut rng).unwrap().dim(), [64, 64, 64]);
        let full = crop_patch(&v, v.dim(), &mut rng).unwrap();
        assert_eq!(full, v);
        assert!(crop_patch(&f, [91, 10], &mut rng).is_err());
    }

    proptest::proptest! {
        #[test]
        fn decimation_composes(a in 2usize..4, b in 2usize..4, extra in 1usize..8) {
            let z = a * b + extra;
            let v = ramp_volume((2, 3, z), [1.0; 3]);
            let ab = decimate(&v, &DegradeSpec::decimation(Axis::Z, a * b).unwrap()).unwrap();
            let first = decimate(&v, &DegradeSpec::decimation(Axis::Z, a).unwrap()).unwrap();
            if first.dim()[2] > b {
                let twice = decimate(&first, &DegradeSpec::decimation(Axis::Z, b).unwrap()).unwrap();
                proptest::prop_assert_eq!(twice.voxels(), ab.voxels());
            }
        }

        #[test]
        fn gaussian_preserves_mean(z in 5usize..40, fwhm in 0.5f64..12.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Array3::from_shape_fn((3, 2, z), |_| rng.random::<f32>());
            let vol = Volume::new(v, [1.0, 1.0, 1.0], "m").unwrap();
            let b = slice_profile_blur(&vol, Axis::Z, fwhm).unwrap();
            proptest::prop_assert!((mean_intensity(b.voxels()) - mean_intensity(vol.voxels())).abs() < 1e-5);
        }

        #[test]
        fn window_reconstructs(seed in 0u64..500, n in 2usize..5) {
            let sq = seq(15 * n + 1 + 7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample_subsequence(&sq, n, &mut rng).unwrap();
            let mut rebuilt: Vec<Option<Frame>> = vec![None; window_len(n)];
            for (j, f) in s.kept.iter().enumerate() {
                rebuilt[j * n] = Some(f.clone());
            }
            for g in &s.groundtruth {
                rebuilt[g.gap * n + g.k] = Some(g.frame.clone());
            }
            for (o, f) in rebuilt.into_iter().enumerate() {
                proptest::prop_assert_eq!(f.unwrap(), sq.frames()[s.window_start + o].clone());
            }
        }
    }
}
