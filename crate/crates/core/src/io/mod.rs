//! On-disk formats: NIfTI-1 and raw volumes, PNG frame directories.

mod frames;
mod nifti;
mod raw;

use std::fs;
use std::path::Path;

pub use frames::{bilinear_resize, load_frame_sequence, load_gray_png, luma, save_frame_png, save_frame_sequence};
pub use nifti::{read_nifti, write_nifti};
pub use raw::{read_raw, write_raw};

use crate::error::{Error, Result};
use crate::volume::{normalize_intensities, Volume};

/// Volume container formats understood by [`load_volume`] / [`save_volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti,
    NiftiGz,
    Raw,
}

impl VolumeFormat {
    /// Picks a format from the file name: `.nii`, `.nii.gz`, anything else is raw.
    pub fn from_path(path: &Path) -> Self {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if name.ends_with(".nii.gz") {
            VolumeFormat::NiftiGz
        } else if name.ends_with(".nii") {
            VolumeFormat::Nifti
        } else {
            VolumeFormat::Raw
        }
    }

    fn sniff(bytes: &[u8]) -> Option<Self> {
        match bytes {
            [0x1f, 0x8b, ..] => Some(VolumeFormat::NiftiGz),
            [b'{', ..] => Some(VolumeFormat::Raw),
            b if b.len() >= 4 => {
                let le = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                let be = i32::from_be_bytes([b[0], b[1], b[2], b[3]]);
                (le == 348 || be == 348).then_some(VolumeFormat::Nifti)
            }
            _ => None,
        }
    }

    pub fn is_volume_file(path: &Path) -> bool {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        name.ends_with(".nii") || name.ends_with(".nii.gz") || name.ends_with(".raw")
    }
}

fn subject_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    for ext in [".nii.gz", ".nii", ".raw"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name
}

/// Reads a volume without touching its intensities.
pub fn load_volume_unnormalized(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = VolumeFormat::sniff(&bytes).ok_or_else(|| {
        Error::format("volume", format!("{}: unrecognized file signature", path.display()))
    })?;
    let (voxels, spacing) = match format {
        VolumeFormat::Nifti => read_nifti(&bytes)?,
        VolumeFormat::NiftiGz => {
            let mut raw = Vec::new();
            std::io::Read::read_to_end(&mut flate2::read::GzDecoder::new(&bytes[..]), &mut raw)
                .map_err(|e| Error::format("nifti", format!("gzip stream: {e}")))?;
            read_nifti(&raw)?
        }
        VolumeFormat::Raw => read_raw(&bytes)?,
    };
    Volume::new(voxels, spacing, subject_from_path(path))
}

/// Reads a volume and brings its intensities into `[0, 1]`.
///
/// Data already inside `[0, 1]` (everything this toolkit writes) is kept
/// verbatim; anything else is min-max rescaled.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let v = load_volume_unnormalized(path)?;
    if v.voxels().iter().all(|x| (0.0..=1.0).contains(x)) {
        return Ok(v);
    }
    let spacing = v.spacing();
    let id = v.subject_id().to_string();
    let voxels = normalize_intensities(v.voxels())?;
    Volume::new(voxels, spacing, id)
}

pub fn save_volume(path: &Path, volume: &Volume) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = match VolumeFormat::from_path(path) {
        VolumeFormat::Nifti => write_nifti(volume),
        VolumeFormat::NiftiGz => {
            let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
            std::io::Write::write_all(&mut enc, &write_nifti(volume)).map_err(|e| Error::io(path, e))?;
            enc.finish().map_err(|e| Error::io(path, e))?
        }
        VolumeFormat::Raw => write_raw(volume),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Volume files in `dir`, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && VolumeFormat::is_volume_file(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
