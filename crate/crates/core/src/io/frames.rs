use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::volume::{normalize_intensities, Frame, FrameSequence};

/// BT.601 luma.
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Loads an 8-bit gray or RGB(A) PNG as luma in `[0, 1]`, indexed `(row, col)`.
pub fn load_gray_png(path: &Path) -> Result<Array2<f32>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let out = match img {
        DynamicImage::ImageLuma8(g) => {
            Array2::from_shape_fn((h, w), |(r, c)| g.get_pixel(c as u32, r as u32)[0] as f32 / 255.0)
        }
        other => {
            let rgb = other.to_rgb8();
            Array2::from_shape_fn((h, w), |(r, c)| {
                let p = rgb.get_pixel(c as u32, r as u32);
                luma(p[0] as f32, p[1] as f32, p[2] as f32) / 255.0
            })
        }
    };
    Ok(out)
}

/// Bilinear resampling with half-pixel centers.
pub fn bilinear_resize(src: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    let sy = sh as f64 / height as f64;
    let sx = sw as f64 / width as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    Array2::from_shape_fn((height, width), |(r, c)| {
        let (y0, y1, fy) = coord(r, sy, sh);
        let (x0, x1, fx) = coord(c, sx, sw);
        let top = src[[y0, x0]] as f64 * (1.0 - fx) + src[[y0, x1]] as f64 * fx;
        let bot = src[[y1, x0]] as f64 * (1.0 - fx) + src[[y1, x1]] as f64 * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a directory of PNG frames (lexicographic = temporal order), converts
/// to gray, resizes to `resize_to` and min-max normalizes the whole sequence.
pub fn load_frame_sequence(dir: &Path, resize_to: (usize, usize)) -> Result<FrameSequence> {
    let (h, w) = resize_to;
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("resize target {h}x{w}")));
    }
    let files = png_files(dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no PNG frames found",
            dir.display()
        )));
    }
    let mut stack = ndarray::Array3::<f32>::zeros((files.len(), h, w));
    for (i, f) in files.iter().enumerate() {
        let gray = load_gray_png(f)?;
        stack
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&bilinear_resize(&gray, h, w));
    }
    let stack = normalize_intensities(&stack)?;
    let frames = stack
        .outer_iter()
        .map(|f| Frame::new(f.to_owned()))
        .collect::<Result<Vec<_>>>()?;
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    FrameSequence::new(frames, id)
}

pub fn save_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = frame.dim();
    let px = frame.pixels();
    let img = GrayImage::from_fn(w as u32, h as u32, |c, r| {
        Luma([(px[[r as usize, c as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Writes `frame_00000.png`, `frame_00001.png`, ... into `dir`.
pub fn save_frame_sequence(dir: &Path, seq: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames().iter().enumerate() {
        save_frame_png(&dir.join(format!("frame_{i:05}.png")), f)?;
    }
    Ok(())
}
