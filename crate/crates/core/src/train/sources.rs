//! Per-stage training sample generators.

use ndarray::s;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::degrade::{
    build_selfsup_pair, draw_window, random_origin, slice_profile_blur, Patchable, SliceProfile, KEPT_PER_WINDOW,
};
use crate::error::{Error, Result};
use crate::volume::{Axis, Frame, FrameSequence, InterpolationSample, TargetCoordinate, Volume};

/// Produces mini-batches for one stage. Randomness comes only from the
/// per-epoch generator handed in, so an epoch replays exactly.
pub trait SampleSource {
    /// Iterations making up one epoch.
    fn epoch_len(&self) -> usize;

    fn begin_epoch(&mut self, _rng: &mut ChaCha8Rng) {}

    fn batch(&mut self, iteration: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<InterpolationSample>>;
}

fn uniform_k(n: usize, rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..n)
}

fn crop_frame(f: &Frame, origin: [usize; 2], size: [usize; 2]) -> Result<Frame> {
    f.crop_at(origin, size)
}

/// Video pre-training: a random `15n + 1` window, a shared crop, and one
/// `(left, right, target)` triple drawn from the window's gaps.
pub struct VideoSampler<'a> {
    seqs: &'a [FrameSequence],
    n: usize,
    patch: [usize; 2],
    iterations: usize,
}

impl<'a> VideoSampler<'a> {
    pub fn new(seqs: &'a [FrameSequence], n: usize, patch: [usize; 2], iterations: Option<usize>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("no training sequences".into()));
        }
        let required = crate::degrade::window_len(n);
        for s in seqs {
            if s.len() < required {
                return Err(Error::SequenceTooShort { len: s.len(), required });
            }
            let (h, w) = s.frame_dim();
            if h < patch[0] || w < patch[1] {
                return Err(Error::Shape(format!(
                    "sequence {} has {h}x{w} frames, smaller than the {}x{} patch",
                    s.source_id(),
                    patch[0],
                    patch[1]
                )));
            }
        }
        Ok(Self {
            seqs,
            n,
            patch,
            iterations: iterations.unwrap_or(seqs.len()),
        })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<InterpolationSample> {
        let seq = &self.seqs[rng.random_range(0..self.seqs.len())];
        let window = draw_window(seq.len(), self.n, rng)?;
        let gap = rng.random_range(0..KEPT_PER_WINDOW - 1);
        let k = uniform_k(self.n, rng);
        let (h, w) = seq.frame_dim();
        let origin = random_origin([h, w], self.patch, rng)?;
        let (l, r, t) = window.triple(gap, k);
        let f = seq.frames();
        InterpolationSample::new(
            crop_frame(&f[l], origin, self.patch)?,
            crop_frame(&f[r], origin, self.patch)?,
            TargetCoordinate::new(k as f64, self.n)?,
            Some(crop_frame(&f[t], origin, self.patch)?),
        )
    }
}

impl SampleSource for VideoSampler<'_> {
    fn epoch_len(&self) -> usize {
        self.iterations
    }

    fn batch(&mut self, _it: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<InterpolationSample>> {
        (0..batch_size).map(|_| self.draw(rng)).collect()
    }
}

/// Low-resolution simulation shared by the MR stages.
pub fn lr_profile(simulate: bool, factor: usize, spacing: f64) -> SliceProfile {
    if simulate {
        SliceProfile::Gaussian {
            fwhm_mm: factor as f64 * spacing,
        }
    } else {
        SliceProfile::None
    }
}

/// Supervised MR fine-tuning: a high-resolution crop spanning `c * n`
/// slices, its simulated low-resolution slices, and one removed slice.
pub struct VolumeSampler<'a> {
    hr: &'a [Volume],
    /// Slice-profile-blurred copies; decimating them gives the LR slices.
    blurred: Vec<Volume>,
    n: usize,
    patch: [usize; 3],
    iterations: usize,
}

impl<'a> VolumeSampler<'a> {
    pub fn new(
        hr: &'a [Volume],
        n: usize,
        patch: [usize; 3],
        simulate_profile: bool,
        iterations: Option<usize>,
    ) -> Result<Self> {
        if hr.is_empty() {
            return Err(Error::InvalidArgument("no training volumes".into()));
        }
        let required = [patch[0], patch[1], patch[2] * n];
        for v in hr {
            let d = v.dim();
            if (0..3).any(|a| d[a] < required[a]) {
                return Err(Error::VolumeTooSmall { extents: d, required });
            }
        }
        let blurred = hr
            .iter()
            .map(|v| match lr_profile(simulate_profile, n, v.spacing()[2]) {
                SliceProfile::Gaussian { fwhm_mm } => slice_profile_blur(v, Axis::Z, fwhm_mm),
                SliceProfile::None => Ok(v.clone()),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            hr,
            blurred,
            n,
            patch,
            iterations: iterations.unwrap_or(hr.len()),
        })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<InterpolationSample> {
        let vi = rng.random_range(0..self.hr.len());
        let (hr, lr) = (&self.hr[vi], &self.blurred[vi]);
        let [a, b, c] = self.patch;
        let o = random_origin(hr.dim(), [a, b, c * self.n], rng)?;
        // LR slice j of the patch is HR slice j*n of the patch
        let j = rng.random_range(0..c - 1);
        let k = uniform_k(self.n, rng);
        let plane = |v: &Volume, z: usize| -> Result<Frame> {
            Frame::new(v.voxels().slice(s![o[0]..o[0] + a, o[1]..o[1] + b, o[2] + z]).to_owned())
        };
        InterpolationSample::new(
            plane(lr, j * self.n)?,
            plane(lr, (j + 1) * self.n)?,
            TargetCoordinate::new(k as f64, self.n)?,
            Some(plane(hr, j * self.n + k)?),
        )
    }
}

impl SampleSource for VolumeSampler<'_> {
    fn epoch_len(&self) -> usize {
        self.iterations
    }

    fn batch(&mut self, _it: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<InterpolationSample>> {
        (0..batch_size).map(|_| self.draw(rng)).collect()
    }
}

/// One self-supervised patch: a block of the further-decimated subject and
/// the matching block of the subject itself.
#[derive(Debug, Clone)]
pub struct SelfsupPatch {
    /// `c` planes taken perpendicular to the decimated axis.
    pub input: Vec<Frame>,
    /// `(c - 1) * n + 1` planes of the subject over the same span.
    pub reference: Vec<Frame>,
}

/// Subject-specific fine-tuning: a fixed set of patches, each contributing
/// one random `(gap, k)` sample per epoch.
pub struct SelfsupSampler {
    patches: Vec<SelfsupPatch>,
    n: usize,
    batch_size: usize,
    order: Vec<usize>,
    pub warning: Option<String>,
}

impl SelfsupSampler {
    /// Extracts `count` random patches of `patch = [a, b, c]`: `a x b` planes
    /// over (other in-plane axis, z), `c` planes along `axis` after decimation.
    pub fn new(
        subject: &Volume,
        n: usize,
        axis: Axis,
        patch: [usize; 3],
        count: usize,
        simulate_profile: bool,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let [a, b, c] = patch;
        let mut required = [0; 3];
        required[axis.index()] = (c - 1) * n + 1;
        let other = if axis == Axis::X { Axis::Y } else { Axis::X };
        required[other.index()] = a;
        required[2] = b;
        let d = subject.dim();
        if (0..3).any(|i| d[i] < required[i]) {
            return Err(Error::VolumeTooSmall { extents: d, required });
        }
        let profile = lr_profile(simulate_profile, n, subject.spacing()[axis.index()]);
        let pair = build_selfsup_pair(subject, n, axis, profile)?;
        let in_len = pair.input.extent(axis);
        let mut patches = Vec::with_capacity(count);
        for _ in 0..count {
            let q = rng.random_range(0..=in_len - c);
            let oa = rng.random_range(0..=d[other.index()] - a);
            let oz = rng.random_range(0..=d[2] - b);
            let crop = |v: &Volume, idx: usize| -> Result<Frame> {
                v.slice(axis, idx)?.crop_at([oa, oz], [a, b])
            };
            let input = (q..q + c).map(|i| crop(&pair.input, i)).collect::<Result<_>>()?;
            let reference = (q * n..=(q + c - 1) * n).map(|i| crop(&pair.reference, i)).collect::<Result<_>>()?;
            patches.push(SelfsupPatch { input, reference });
        }
        Ok(Self {
            order: (0..patches.len()).collect(),
            patches,
            n,
            batch_size,
            warning: pair.warning,
        })
    }

    pub fn patches(&self) -> &[SelfsupPatch] {
        &self.patches
    }

    fn sample(&self, p: &SelfsupPatch, rng: &mut ChaCha8Rng) -> Result<InterpolationSample> {
        let gap = rng.random_range(0..p.input.len() - 1);
        let k = uniform_k(self.n, rng);
        InterpolationSample::new(
            p.input[gap].clone(),
            p.input[gap + 1].clone(),
            TargetCoordinate::new(k as f64, self.n)?,
            Some(p.reference[gap * self.n + k].clone()),
        )
    }
}

impl SampleSource for SelfsupSampler {
    fn epoch_len(&self) -> usize {
        self.patches.len().div_ceil(self.batch_size)
    }

    fn begin_epoch(&mut self, rng: &mut ChaCha8Rng) {
        self.order.shuffle(rng);
    }

    fn batch(&mut self, it: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<InterpolationSample>> {
        let lo = it * batch_size;
        let hi = (lo + batch_size).min(self.order.len());
        self.order[lo..hi]
            .iter()
            .map(|&i| self.sample(&self.patches[i], rng))
            .collect()
    }
}

/// Repeats a fixed list of samples; useful for overfitting checks.
pub struct FixedSource {
    pub samples: Vec<InterpolationSample>,
    pub iterations: usize,
}

impl SampleSource for FixedSource {
    fn epoch_len(&self) -> usize {
        self.iterations
    }

    fn batch(&mut self, _it: usize, batch_size: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<InterpolationSample>> {
        Ok(self.samples.iter().cycle().take(batch_size).cloned().collect())
    }
}
