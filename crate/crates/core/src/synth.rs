//! Procedural videos and phantom volumes with closed-form ground truth.
//!
//! Every generator is a continuous field: videos are functions of
//! `(frame, row, col)` with fractional frame allowed, phantoms are functions of
//! physical position in millimeters. Sampling a field on a grid produces the
//! core types, and the same field answers "what lies between two samples".

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{Frame, FrameSequence, Volume};

/// A moving 2D scene. `frame` may be fractional.
pub trait VideoScene: Send + Sync {
    fn intensity(&self, frame: f64, row: f64, col: f64) -> f64;
}

pub trait VideoGenerator: Send + Sync {
    fn name(&self) -> &'static str;
    fn scene(&self, seed: u64, size: (usize, usize)) -> Box<dyn VideoScene>;
}

/// A static 3D intensity field over millimeter coordinates `[x, y, z]`.
pub trait PhantomField: Send + Sync {
    fn value(&self, p: [f64; 3]) -> f64;
}

pub trait PhantomGenerator: Send + Sync {
    fn name(&self) -> &'static str;
    /// `extent_mm` is the physical size of the grid the field will be sampled on.
    fn field(&self, seed: u64, extent_mm: [f64; 3]) -> Box<dyn PhantomField>;
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn unit_direction(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let a = rng.random_range(0.0..2.0 * PI);
    (a.cos(), a.sin())
}

// ---------------------------------------------------------------- videos

/// A sinusoidal grating drifting at constant velocity.
pub struct TranslatingGradient;

struct Grating {
    k: (f64, f64),
    phase: f64,
    velocity: (f64, f64),
}

impl VideoScene for Grating {
    fn intensity(&self, f: f64, r: f64, c: f64) -> f64 {
        let y = r - self.velocity.0 * f;
        let x = c - self.velocity.1 * f;
        0.5 + 0.4 * (self.k.0 * y + self.k.1 * x + self.phase).sin()
    }
}

impl VideoGenerator for TranslatingGradient {
    fn name(&self) -> &'static str {
        "translating_gradient"
    }

    fn scene(&self, seed: u64, _size: (usize, usize)) -> Box<dyn VideoScene> {
        let mut rng = rng_for(seed, 1);
        let period = rng.random_range(24.0..48.0);
        let (dy, dx) = unit_direction(&mut rng);
        let k = 2.0 * PI / period;
        let speed = rng.random_range(0.25..0.6);
        // velocity along the wave normal, so the grating visibly moves
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Box::new(Grating {
            k: (k * dy, k * dx),
            phase: rng.random_range(0.0..2.0 * PI),
            velocity: (sign * speed * dy, sign * speed * dx),
        })
    }
}

/// Gaussian blobs on a dark background, bouncing off the borders.
pub struct MovingBlob;

struct Blob {
    start: (f64, f64),
    velocity: (f64, f64),
    sigma: f64,
    amplitude: f64,
}

struct Blobs {
    blobs: Vec<Blob>,
    size: (f64, f64),
}

/// Position on a segment `[0, len]` after reflecting at both ends.
fn bounce(p: f64, len: f64) -> f64 {
    let period = 2.0 * len;
    let m = p.rem_euclid(period);
    if m > len {
        period - m
    } else {
        m
    }
}

impl VideoScene for Blobs {
    fn intensity(&self, f: f64, r: f64, c: f64) -> f64 {
        let mut v = 0.1;
        for b in &self.blobs {
            let cy = bounce(b.start.0 + b.velocity.0 * f, self.size.0);
            let cx = bounce(b.start.1 + b.velocity.1 * f, self.size.1);
            let d2 = (r - cy).powi(2) + (c - cx).powi(2);
            v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        v.min(1.0)
    }
}

impl VideoGenerator for MovingBlob {
    fn name(&self) -> &'static str {
        "moving_blob"
    }

    fn scene(&self, seed: u64, size: (usize, usize)) -> Box<dyn VideoScene> {
        let mut rng = rng_for(seed, 2);
        let (h, w) = ((size.0.max(2) - 1) as f64, (size.1.max(2) - 1) as f64);
        let count = rng.random_range(2..=4);
        let blobs = (0..count)
            .map(|_| {
                let (vy, vx) = unit_direction(&mut rng);
                let speed = rng.random_range(0.2..0.5);
                Blob {
                    start: (rng.random_range(0.0..h), rng.random_range(0.0..w)),
                    velocity: (speed * vy, speed * vx),
                    sigma: rng.random_range(4.0..9.0),
                    amplitude: rng.random_range(0.3..0.6),
                }
            })
            .collect();
        Box::new(Blobs { blobs, size: (h, w) })
    }
}

/// A bar grating rotating slowly about the frame center.
pub struct RotatingBars;

struct Bars {
    center: (f64, f64),
    k: f64,
    angle0: f64,
    omega: f64,
    phase: f64,
}

impl VideoScene for Bars {
    fn intensity(&self, f: f64, r: f64, c: f64) -> f64 {
        let a = self.angle0 + self.omega * f;
        let u = (r - self.center.0) * a.sin() + (c - self.center.1) * a.cos();
        0.5 + 0.4 * (self.k * u + self.phase).sin()
    }
}

impl VideoGenerator for RotatingBars {
    fn name(&self) -> &'static str {
        "rotating_bars"
    }

    fn scene(&self, seed: u64, size: (usize, usize)) -> Box<dyn VideoScene> {
        let mut rng = rng_for(seed, 3);
        let center = (size.0 as f64 / 2.0, size.1 as f64 / 2.0);
        let radius = center.0.hypot(center.1).max(1.0);
        let period = rng.random_range(12.0..24.0);
        // keep the fastest-moving corner under ~0.4 px per frame
        let omega = rng.random_range(0.15..0.4) / radius * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Box::new(Bars {
            center,
            k: 2.0 * PI / period,
            angle0: rng.random_range(0.0..PI),
            omega,
            phase: rng.random_range(0.0..2.0 * PI),
        })
    }
}

/// Samples `scene` at integer frame `f` on an `h x w` grid.
pub fn render_frame(scene: &dyn VideoScene, f: f64, size: (usize, usize)) -> Result<Frame> {
    let pixels = Array2::from_shape_fn(size, |(r, c)| scene.intensity(f, r as f64, c as f64).clamp(0.0, 1.0) as f32);
    Frame::new(pixels)
}

// --------------------------------------------------------------- phantoms

/// `0.5 + A sin(2 pi z / P + phi(x, y))`: a per-pixel sinusoid along z whose
/// phase varies smoothly in-plane.
#[derive(Debug, Clone)]
pub struct SinusoidZ {
    pub period_mm: (f64, f64),
    pub amplitude: f64,
}

impl Default for SinusoidZ {
    fn default() -> Self {
        // Periods above 4n mm at 1 mm spacing for n = 4: band-limited after decimation.
        Self {
            period_mm: (20.0, 28.0),
            amplitude: 0.4,
        }
    }
}

pub struct SinusoidField {
    pub amplitude: f64,
    pub omega: f64,
    k_plane: (f64, f64),
    wobble: f64,
    wobble_k: f64,
    phase: f64,
}

impl SinusoidField {
    pub fn phase_at(&self, x: f64, y: f64) -> f64 {
        self.k_plane.0 * x + self.k_plane.1 * y + self.wobble * (self.wobble_k * y).sin() + self.phase
    }
}

impl PhantomField for SinusoidField {
    fn value(&self, p: [f64; 3]) -> f64 {
        0.5 + self.amplitude * (self.omega * p[2] + self.phase_at(p[0], p[1])).sin()
    }
}

impl SinusoidZ {
    pub fn sinusoid(&self, seed: u64) -> SinusoidField {
        let mut rng = rng_for(seed, 11);
        let period = if self.period_mm.1 > self.period_mm.0 {
            rng.random_range(self.period_mm.0..self.period_mm.1)
        } else {
            self.period_mm.0
        };
        let (dx, dy) = unit_direction(&mut rng);
        let q = rng.random_range(24.0..48.0);
        SinusoidField {
            amplitude: self.amplitude.clamp(0.0, 0.5),
            omega: 2.0 * PI / period,
            k_plane: (2.0 * PI / q * dx, 2.0 * PI / q * dy),
            wobble: rng.random_range(0.3..0.9),
            wobble_k: 2.0 * PI / rng.random_range(20.0..40.0),
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }
}

impl PhantomGenerator for SinusoidZ {
    fn name(&self) -> &'static str {
        "sinusoid_z"
    }

    fn field(&self, seed: u64, _extent_mm: [f64; 3]) -> Box<dyn PhantomField> {
        Box::new(self.sinusoid(seed))
    }
}

/// Nested smooth spherical shells around a random center.
#[derive(Debug, Clone, Default)]
pub struct SphereShells;

struct Shells {
    center: [f64; 3],
    k: f64,
    phase: f64,
    falloff: f64,
}

impl PhantomField for Shells {
    fn value(&self, p: [f64; 3]) -> f64 {
        let r = ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2) + (p[2] - self.center[2]).powi(2))
            .sqrt();
        let envelope = 1.0 / (1.0 + (r / self.falloff).powi(2));
        0.15 + 0.7 * envelope * (0.5 + 0.5 * (self.k * r + self.phase).cos())
    }
}

impl PhantomGenerator for SphereShells {
    fn name(&self) -> &'static str {
        "sphere_shells"
    }

    fn field(&self, seed: u64, extent_mm: [f64; 3]) -> Box<dyn PhantomField> {
        let mut rng = rng_for(seed, 12);
        let center = extent_mm.map(|e| rng.random_range(0.3..0.7) * e);
        let longest = extent_mm.iter().cloned().fold(1.0, f64::max);
        Box::new(Shells {
            center,
            k: 2.0 * PI / rng.random_range(16.0..28.0),
            phase: rng.random_range(0.0..2.0 * PI),
            falloff: longest * rng.random_range(0.5..1.0),
        })
    }
}

/// Oblique smooth-edged layers with distinct intensities, gently curved.
#[derive(Debug, Clone)]
pub struct LayeredTissue {
    /// Range of the angle between the layer normal and the z axis, in radians.
    pub tilt: (f64, f64),
    pub thickness_mm: (f64, f64),
    pub edge_mm: f64,
}

impl Default for LayeredTissue {
    fn default() -> Self {
        Self {
            tilt: (0.35, 1.2),
            thickness_mm: (6.0, 12.0),
            edge_mm: 1.5,
        }
    }
}

struct Layers {
    normal: [f64; 3],
    curvature: f64,
    curve_k: f64,
    boundaries: Vec<f64>,
    levels: Vec<f64>,
    edge: f64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PhantomField for Layers {
    fn value(&self, p: [f64; 3]) -> f64 {
        let d = self.normal[0] * p[0]
            + self.normal[1] * p[1]
            + self.normal[2] * p[2]
            + self.curvature * (self.curve_k * p[1]).sin();
        let mut v = self.levels[0];
        for (i, b) in self.boundaries.iter().enumerate() {
            v += (self.levels[i + 1] - self.levels[i]) * logistic((d - b) / self.edge);
        }
        v.clamp(0.0, 1.0)
    }
}

impl PhantomGenerator for LayeredTissue {
    fn name(&self) -> &'static str {
        "layered_tissue"
    }

    fn field(&self, seed: u64, extent_mm: [f64; 3]) -> Box<dyn PhantomField> {
        let mut rng = rng_for(seed, 13);
        let tilt = rng.random_range(self.tilt.0..=self.tilt.1);
        let azimuth = rng.random_range(0.0..2.0 * PI);
        let normal = [tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), tilt.cos()];
        let reach = extent_mm.iter().map(|e| e.abs()).sum::<f64>() + 20.0;
        let mut boundaries = Vec::new();
        let mut d = -reach + rng.random_range(0.0..self.thickness_mm.1);
        while d < reach {
            boundaries.push(d);
            d += rng.random_range(self.thickness_mm.0..self.thickness_mm.1);
        }
        let mut levels = vec![rng.random_range(0.1..0.9)];
        for _ in 0..boundaries.len() {
            // neighbouring layers always differ by a visible step
            let prev = *levels.last().unwrap();
            let mut next: f64 = rng.random_range(0.1..0.9);
            if (next - prev).abs() < 0.15 {
                next = if prev > 0.5 { prev - 0.3 } else { prev + 0.3 };
            }
            levels.push(next);
        }
        Box::new(Layers {
            normal,
            curvature: rng.random_range(1.0..4.0),
            curve_k: 2.0 * PI / rng.random_range(30.0..60.0),
            boundaries,
            levels,
            edge: self.edge_mm,
        })
    }
}

/// Samples `field` at voxel centers `i * spacing`.
pub fn sample_field(
    field: &dyn PhantomField,
    size: [usize; 3],
    spacing: [f64; 3],
    subject_id: impl Into<String>,
) -> Result<Volume> {
    let voxels = Array3::from_shape_fn((size[0], size[1], size[2]), |(i, j, k)| {
        field.value([i as f64 * spacing[0], j as f64 * spacing[1], k as f64 * spacing[2]]) as f32
    });
    Volume::new(voxels, spacing, subject_id)
}

/// `1 - v`: the same anatomy with inverted contrast.
pub fn invert_contrast(volume: &Volume) -> Result<Volume> {
    Volume::new(volume.voxels().mapv(|v| 1.0 - v), volume.spacing(), volume.subject_id())
}

// --------------------------------------------------------------- registry

/// Name -> generator tables for videos and phantoms.
pub struct SynthRegistry {
    videos: BTreeMap<&'static str, Box<dyn VideoGenerator>>,
    phantoms: BTreeMap<&'static str, Box<dyn PhantomGenerator>>,
}

impl Default for SynthRegistry {
    fn default() -> Self {
        let mut r = Self {
            videos: BTreeMap::new(),
            phantoms: BTreeMap::new(),
        };
        r.register_video(Box::new(TranslatingGradient));
        r.register_video(Box::new(MovingBlob));
        r.register_video(Box::new(RotatingBars));
        r.register_phantom(Box::new(SphereShells));
        r.register_phantom(Box::new(SinusoidZ::default()));
        r.register_phantom(Box::new(LayeredTissue::default()));
        r
    }
}

impl SynthRegistry {
    pub fn register_video(&mut self, g: Box<dyn VideoGenerator>) {
        self.videos.insert(g.name(), g);
    }

    pub fn register_phantom(&mut self, g: Box<dyn PhantomGenerator>) {
        self.phantoms.insert(g.name(), g);
    }

    pub fn video_names(&self) -> Vec<&'static str> {
        self.videos.keys().copied().collect()
    }

    pub fn phantom_names(&self) -> Vec<&'static str> {
        self.phantoms.keys().copied().collect()
    }

    pub fn video(&self, name: &str) -> Result<&dyn VideoGenerator> {
        self.videos.get(name).map(|g| g.as_ref()).ok_or_else(|| Error::UnknownStrategy {
            kind: "video generator",
            name: name.into(),
            available: self.video_names().join(", "),
        })
    }

    pub fn phantom(&self, name: &str) -> Result<&dyn PhantomGenerator> {
        self.phantoms.get(name).map(|g| g.as_ref()).ok_or_else(|| Error::UnknownStrategy {
            kind: "phantom generator",
            name: name.into(),
            available: self.phantom_names().join(", "),
        })
    }

    pub fn make_video(&self, kind: &str, frames: usize, size: (usize, usize), seed: u64) -> Result<FrameSequence> {
        let scene = self.video(kind)?.scene(seed, size);
        let frames = (0..frames)
            .map(|f| render_frame(scene.as_ref(), f as f64, size))
            .collect::<Result<Vec<_>>>()?;
        FrameSequence::new(frames, format!("{kind}-{seed}"))
    }

    pub fn make_phantom_volume(&self, kind: &str, size: [usize; 3], spacing: [f64; 3], seed: u64) -> Result<Volume> {
        let extent = [0, 1, 2].map(|a| size[a] as f64 * spacing[a]);
        let field = self.phantom(kind)?.field(seed, extent);
        sample_field(field.as_ref(), size, spacing, format!("{kind}-{seed}"))
    }
}

/// Renders a video with the default registry.
pub fn make_video(kind: &str, frames: usize, size: (usize, usize), seed: u64) -> Result<FrameSequence> {
    SynthRegistry::default().make_video(kind, frames, size, seed)
}

/// Samples a phantom with the default registry.
pub fn make_phantom_volume(kind: &str, size: [usize; 3], spacing: [f64; 3], seed: u64) -> Result<Volume> {
    SynthRegistry::default().make_phantom_volume(kind, size, spacing, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::{decimate, DegradeSpec};
    use crate::model::archive::sha256_hex;
    use crate::volume::Axis;

    fn max_and_mean_step(seq: &FrameSequence) -> (f32, f32) {
        let mut max = 0f32;
        let mut mean = 0f32;
        for w in seq.frames().windows(2) {
            let d = &w[1].pixels() - &w[0].pixels();
            max = max.max(d.iter().fold(0f32, |m, v| m.max(v.abs())));
            mean = mean.max(d.mapv(f32::abs).mean().unwrap());
        }
        (max, mean)
    }

    #[test]
    fn every_video_kind_moves_smoothly() {
        let reg = SynthRegistry::default();
        for kind in reg.video_names() {
            for seed in 0..5 {
                let seq = reg.make_video(kind, 61, (64, 64), seed).unwrap();
                assert_eq!(seq.len(), 61);
                let (max, mean) = max_and_mean_step(&seq);
                assert!(max < 0.2, "{kind}/{seed}: {max}");
                assert!(mean > 0.0, "{kind}/{seed} is static");
                if kind == "translating_gradient" {
                    assert!(mean < 0.05, "{kind}/{seed}: {mean}");
                }
                assert!(seq.frames().iter().all(|f| f.pixels().iter().all(|v| (0.0..=1.0).contains(v))));
            }
        }
    }

    #[test]
    fn videos_are_seeded() {
        let a = make_video("moving_blob", 61, (64, 64), 9).unwrap();
        assert_eq!(a, make_video("moving_blob", 61, (64, 64), 9).unwrap());
        assert_ne!(a, make_video("moving_blob", 61, (64, 64), 10).unwrap());
    }

    #[test]
    fn unknown_kind_lists_choices() {
        let err = make_video("zoom", 4, (8, 8), 0).unwrap_err().to_string();
        assert!(err.contains("moving_blob, rotating_bars, translating_gradient"), "{err}");
        assert!(make_phantom_volume("brain", [4, 4, 4], [1.0; 3], 0).is_err());
    }

    #[test]
    fn sinusoid_matches_closed_form() {
        let gen = SinusoidZ::default();
        let f = gen.sinusoid(4);
        let v = sample_field(&f, [6, 5, 8], [1.0, 1.0, 1.5], "s").unwrap();
        for ((i, j, k), &got) in v.voxels().indexed_iter() {
            let (x, y, z) = (i as f64, j as f64, k as f64 * 1.5);
            let want = 0.5 + f.amplitude * (f.omega * z + f.phase_at(x, y)).sin();
            assert!((got as f64 - want).abs() < 1e-6);
        }
        let w = make_phantom_volume("sinusoid_z", [6, 5, 8], [1.0, 1.0, 1.5], 4).unwrap();
        assert_eq!(v.voxels(), w.voxels());
    }

    #[test]
    fn decimation_removes_known_slices() {
        let f = SinusoidZ::default().sinusoid(1);
        let hr = sample_field(&f, [4, 4, 17], [1.0; 3], "s").unwrap();
        let lr = decimate(&hr, &DegradeSpec::decimation(Axis::Z, 4).unwrap()).unwrap();
        assert_eq!(lr.extent(Axis::Z), 5);
        // removed slice 4j + k is the field evaluated at z = 4j + k
        for j in 0..4 {
            for k in 1..4 {
                let z = (4 * j + k) as f64;
                let want = f.value([2.0, 3.0, z]) as f32;
                assert_eq!(hr.voxels()[[2, 3, 4 * j + k]], want);
            }
        }
    }

    #[test]
    fn phantoms_are_valid_and_reproducible() {
        let reg = SynthRegistry::default();
        for kind in reg.phantom_names() {
            let a = reg.make_phantom_volume(kind, [16, 16, 16], [1.0, 1.0, 1.0], 3).unwrap();
            let b = reg.make_phantom_volume(kind, [16, 16, 16], [1.0, 1.0, 1.0], 3).unwrap();
            assert_eq!(a, b);
            assert!(a.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
            let lo = a.voxels().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = a.voxels().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert!(hi - lo > 0.1, "{kind} has no contrast");
        }
    }

    #[test]
    fn layered_tissue_hash_is_stable() {
        let v = make_phantom_volume("layered_tissue", [12, 12, 12], [1.0, 1.0, 2.0], 42).unwrap();
        let bytes: Vec<u8> = v.voxels().iter().flat_map(|x| x.to_le_bytes()).collect();
        let again: Vec<u8> = make_phantom_volume("layered_tissue", [12, 12, 12], [1.0, 1.0, 2.0], 42)
            .unwrap()
            .voxels()
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect();
        assert_eq!(sha256_hex(&bytes), sha256_hex(&again));
    }

    #[test]
    fn inverted_contrast() {
        let v = make_phantom_volume("sphere_shells", [4, 4, 4], [1.0; 3], 0).unwrap();
        let inv = invert_contrast(&v).unwrap();
        assert!(v.voxels().iter().zip(inv.voxels()).all(|(a, b)| (a + b - 1.0).abs() < 1e-6));
    }

    #[test]
    fn bounce_reflects() {
        assert_eq!(bounce(3.0, 10.0), 3.0);
        assert_eq!(bounce(12.0, 10.0), 8.0);
        assert_eq!(bounce(-2.0, 10.0), 2.0);
    }
}
