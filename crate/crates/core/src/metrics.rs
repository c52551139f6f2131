//! PSNR, SSIM, error maps and per-dataset summaries.

use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView, ArrayView2, Axis as NdAxis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Axis, Frame, Volume};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<A, D: Dimension>(a: &ArrayView<A, D>, b: &ArrayView<A, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty arrays".into()));
    }
    Ok(())
}

/// Mean squared difference over f32 or f64 arrays. The sum is compensated
/// so a uniform difference gives the same MSE as a single pixel.
pub fn mse<A: Copy + Into<f64>, D: Dimension>(a: ArrayView<A, D>, b: ArrayView<A, D>) -> Result<f64> {
    same_shape(&a, &b)?;
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        let d = x.into() - y.into();
        let term = d * d;
        let t = sum + term;
        comp += if sum.abs() >= term { (sum - t) + term } else { (term - t) + sum };
        sum = t;
    });
    Ok((sum + comp) / a.len() as f64)
}

/// `10 log10(1 / MSE)` for peak 1.0; `+inf` when the inputs are identical.
pub fn psnr<A: Copy + Into<f64>, D: Dimension>(reference: ArrayView<A, D>, test: ArrayView<A, D>) -> Result<f64> {
    let m = mse(reference, test)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(img: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = win.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        for c in 0..ow {
            rows[[r, c]] = (0..k).map(|j| win[j] * img[[r, c + j]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..oh {
        for c in 0..ow {
            out[[r, c]] = (0..k).map(|j| win[j] * rows[[r + j, c]]).sum();
        }
    }
    out
}

/// Mean SSIM over every fully contained 11x11 Gaussian window
/// (sigma 1.5, K1 0.01, K2 0.03, dynamic range 1).
pub fn ssim(reference: ArrayView2<f32>, test: ArrayView2<f32>) -> Result<f64> {
    same_shape(&reference, &test)?;
    let (h, w) = reference.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let a = reference.mapv(f64::from);
    let b = test.mapv(f64::from);
    let mu_a = filter_valid(&a, &win);
    let mu_b = filter_valid(&b, &win);
    let aa = filter_valid(&(&a * &a), &win);
    let bb = filter_valid(&(&b * &b), &win);
    let ab = filter_valid(&(&a * &b), &win);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    Zip::from(&mu_a)
        .and(&mu_b)
        .and(&aa)
        .and(&bb)
        .and(&ab)
        .for_each(|&ma, &mb, &saa, &sbb, &sab| {
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        });
    Ok(total / mu_a.len() as f64)
}

/// SSIM of each z-slice, averaged.
pub fn ssim_volume(reference: &Volume, test: &Volume) -> Result<f64> {
    if reference.dim() != test.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", reference.dim(), test.dim())));
    }
    let nz = reference.extent(Axis::Z);
    let mut acc = 0.0;
    for z in 0..nz {
        acc += ssim(
            reference.voxels().index_axis(NdAxis(2), z),
            test.voxels().index_axis(NdAxis(2), z),
        )?;
    }
    Ok(acc / nz as f64)
}

pub fn psnr_volume(reference: &Volume, test: &Volume) -> Result<f64> {
    psnr(reference.voxels().view(), test.voxels().view())
}

/// Rescales both volumes with the reference's min-max range.
pub fn normalize_jointly(reference: &Volume, test: &Volume) -> Result<(Volume, Volume)> {
    if reference.dim() != test.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", reference.dim(), test.dim())));
    }
    let lo = reference.voxels().iter().cloned().fold(f32::INFINITY, f32::min) as f64;
    let hi = reference.voxels().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    if hi <= lo {
        return Ok((reference.clone(), test.clone()));
    }
    let scale = |v: &Volume| {
        Volume::new(
            v.voxels().mapv(|x| ((x as f64 - lo) / (hi - lo)) as f32),
            v.spacing(),
            v.subject_id(),
        )
    };
    Ok((scale(reference)?, scale(test)?))
}

/// Per-voxel absolute difference.
pub fn error_map(reference: &Volume, test: &Volume) -> Result<Array3<f32>> {
    if reference.dim() != test.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", reference.dim(), test.dim())));
    }
    Ok(Zip::from(reference.voxels())
        .and(test.voxels())
        .map_collect(|&a, &b| (a - b).abs()))
}

// Sampled from a perceptually ordered black-red-yellow-white ramp.
const RAMP: [[f32; 3]; 6] = [
    [0.0, 0.0, 0.0],
    [0.25, 0.04, 0.40],
    [0.65, 0.13, 0.38],
    [0.93, 0.40, 0.13],
    [0.98, 0.78, 0.20],
    [1.0, 1.0, 0.85],
];

pub fn colormap(v: f32) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f32;
    let i = (v.floor() as usize).min(RAMP.len() - 2);
    let f = v - i as f32;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = ((RAMP[i][c] * (1.0 - f) + RAMP[i + 1][c] * f) * 255.0).round() as u8;
    }
    out
}

/// Color-mapped rendering of a difference image, saturating at `vmax`.
pub fn render_error_map(diff: ArrayView2<f32>, vmax: f32) -> RgbImage {
    let (h, w) = diff.dim();
    RgbImage::from_fn(w as u32, h as u32, |c, r| {
        Rgb(colormap(diff[[r as usize, c as usize]] / vmax.max(f32::EPSILON)))
    })
}

pub fn render_gray(frame: ArrayView2<f32>) -> RgbImage {
    let (h, w) = frame.dim();
    RgbImage::from_fn(w as u32, h as u32, |c, r| {
        let v = (frame[[r as usize, c as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    })
}

/// Writes one PNG per requested z-slice of the error map into `dir`.
pub fn save_error_maps(map: &Array3<f32>, slices: &[usize], vmax: f32, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let nz = map.dim().2;
    let mut out = Vec::new();
    for &z in slices {
        if z >= nz {
            return Err(Error::Bounds {
                axis: 'z',
                index: z,
                extent: nz,
            });
        }
        let p = dir.join(format!("error_z{z:04}.png"));
        render_error_map(map.index_axis(NdAxis(2), z), vmax).save(&p)?;
        out.push(p);
    }
    Ok(out)
}

/// JSON has no infinity: non-finite values travel as "inf", "-inf" or "nan".
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    #[serde(with = "lenient_f64")]
    pub psnr_db: f64,
    #[serde(with = "lenient_f64")]
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "lenient_f64")]
    pub mean: f64,
    #[serde(with = "lenient_f64")]
    pub sd: f64,
}

impl Summary {
    /// Mean and sample (N-1) standard deviation; SD is 0 for a single value.
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Summary { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: Summary,
    pub ssim: Summary,
    pub n: usize,
    /// Fewer than two valid rows: SD is reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<SubjectMetrics>,
    /// Subjects that could not be scored, with the reason.
    pub failures: Vec<(String, String)>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<SubjectMetrics>, failures: Vec<(String, String)>) -> Self {
        let p: Vec<f64> = rows.iter().map(|r| r.psnr_db).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
        let aggregate = Aggregate {
            psnr: Summary::of(&p),
            ssim: Summary::of(&s),
            n: rows.len(),
            degenerate: rows.len() < 2,
        };
        Self {
            rows,
            failures,
            aggregate,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::io("csv", std::io::Error::other(e));
        wr.write_record(["subject_id", "psnr_db", "ssim"]).map_err(io)?;
        for r in &self.rows {
            wr.write_record([r.subject_id.clone(), fmt_metric(r.psnr_db), fmt_metric(r.ssim)])
                .map_err(io)?;
        }
        wr.flush().map_err(|e| Error::io("csv", e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Re-reads per-subject rows; aggregates are recomputed.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(|e| Error::format("metrics csv", e.to_string()))?;
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::format("metrics csv", e.to_string()))?;
            if rec.len() != 3 {
                return Err(Error::format("metrics csv", format!("expected 3 columns, got {}", rec.len())));
            }
            rows.push(SubjectMetrics {
                subject_id: rec[0].to_string(),
                psnr_db: parse_metric(&rec[1])?,
                ssim: parse_metric(&rec[2])?,
            });
        }
        Ok(Self::from_rows(rows, Vec::new()))
    }

    /// A one-row-per-subject Markdown table plus mean/SD footer.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Subject | PSNR (dB) | SSIM |\n|---|---:|---:|\n");
        for r in &self.rows {
            s += &format!("| {} | {} | {} |\n", r.subject_id, fmt_fixed(r.psnr_db, 2), fmt_fixed(r.ssim, 4));
        }
        let a = &self.aggregate;
        s += &format!(
            "| **Mean ± SD** | {} ± {} | {} ± {} |\n",
            fmt_fixed(a.psnr.mean, 2),
            fmt_fixed(a.psnr.sd, 2),
            fmt_fixed(a.ssim.mean, 4),
            fmt_fixed(a.ssim.sd, 4)
        );
        if a.degenerate {
            s += "\nSD is reported as 0: fewer than two subjects.\n";
        }
        for (id, why) in &self.failures {
            s += &format!("\nSkipped {id}: {why}\n");
        }
        s
    }
}

pub fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn fmt_fixed(v: f64, digits: usize) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.digits$}")
    }
}

fn parse_metric(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" => Ok(f64::INFINITY),
        t => t
            .parse()
            .map_err(|_| Error::format("metrics csv", format!("not a number: '{t}'"))),
    }
}

/// Scores `(reference, test)` pairs after joint normalization against the
/// reference range. Mismatched pairs are recorded as failures, not fatal.
pub fn evaluate_dataset(pairs: &[(Volume, Volume)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    use rayon::prelude::*;
    let scored: Vec<std::result::Result<SubjectMetrics, (String, String)>> = pairs
        .par_iter()
        .map(|(r, t)| {
            let id = r.subject_id().to_string();
            let go = || -> Result<SubjectMetrics> {
                let (r, t) = normalize_jointly(r, t)?;
                Ok(SubjectMetrics {
                    subject_id: id.clone(),
                    psnr_db: psnr_volume(&r, &t)?,
                    ssim: ssim_volume(&r, &t)?,
                })
            };
            go().map_err(|e| (id.clone(), e.to_string()))
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for s in scored {
        match s {
            Ok(r) => rows.push(r),
            Err(f) => {
                log::warn!("skipping subject {}: {}", f.0, f.1);
                failures.push(f);
            }
        }
    }
    Ok(MetricReport::from_rows(rows, failures))
}

/// A reference-plus-methods panel: the top row shows the z-slice of each
/// volume, the bottom row the absolute error against the reference.
pub fn comparison_grid(reference: &Volume, tests: &[&Volume], z: usize, vmax: f32) -> Result<RgbImage> {
    let [nx, ny, nz] = reference.dim();
    if z >= nz {
        return Err(Error::Bounds { axis: 'z', index: z, extent: nz });
    }
    let gap = 4u32;
    let cols = tests.len() as u32 + 1;
    let (w, h) = (ny as u32, nx as u32);
    let mut img = RgbImage::from_pixel(cols * w + (cols - 1) * gap, 2 * h + gap, Rgb([255, 255, 255]));
    let place = |img: &mut RgbImage, tile: &RgbImage, col: u32, row: u32| {
        let (ox, oy) = (col * (w + gap), row * (h + gap));
        for (x, y, p) in tile.enumerate_pixels() {
            img.put_pixel(ox + x, oy + y, *p);
        }
    };
    let ref_plane = reference.voxels().index_axis(NdAxis(2), z);
    place(&mut img, &render_gray(ref_plane), 0, 0);
    for (i, t) in tests.iter().enumerate() {
        let map = error_map(reference, t)?;
        let col = i as u32 + 1;
        place(&mut img, &render_gray(t.voxels().index_axis(NdAxis(2), z)), col, 0);
        place(&mut img, &render_error_map(map.index_axis(NdAxis(2), z), vmax), col, 1);
    }
    Ok(img)
}

/// Convenience for 2D comparisons.
pub fn psnr_frame(reference: &Frame, test: &Frame) -> Result<f64> {
    psnr(reference.pixels(), test.pixels())
}
