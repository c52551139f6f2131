//! Minimal single-file NIfTI-1 (`n+1`) support for 3D scalar volumes.

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::volume::Volume;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

fn bad(detail: impl Into<String>) -> Error {
    Error::format("nifti", detail)
}

struct Header<'a, B: ByteOrder> {
    bytes: &'a [u8],
    _order: std::marker::PhantomData<B>,
}

impl<B: ByteOrder> Header<'_, B> {
    fn i16_at(&self, off: usize) -> i16 {
        B::read_i16(&self.bytes[off..])
    }

    fn f32_at(&self, off: usize) -> f32 {
        B::read_f32(&self.bytes[off..])
    }
}

/// Decodes an uncompressed NIfTI-1 image into `(voxels, spacing)`.
pub fn read_nifti(bytes: &[u8]) -> Result<(Array3<f32>, [f64; 3])> {
    if bytes.len() < HEADER_SIZE {
        return Err(bad(format!("file is {} bytes, header needs {HEADER_SIZE}", bytes.len())));
    }
    if LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        decode::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        decode::<BigEndian>(bytes)
    } else {
        Err(bad("sizeof_hdr is not 348"))
    }
}

fn decode<B: ByteOrder>(bytes: &[u8]) -> Result<(Array3<f32>, [f64; 3])> {
    let h = Header::<B> {
        bytes,
        _order: std::marker::PhantomData,
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(bad(format!("unexpected magic {magic:?}")));
    }
    if magic == b"ni1\0" {
        return Err(bad("detached header/image pairs are not supported"));
    }

    let ndim = h.i16_at(40);
    let dims: Vec<i16> = (1..=7).map(|i| h.i16_at(40 + 2 * i)).collect();
    if !(1..=7).contains(&ndim) {
        return Err(bad(format!("dim[0]={ndim}")));
    }
    let used = &dims[..ndim as usize];
    if used.iter().any(|&d| d < 1) {
        return Err(bad(format!("non-positive dimension in {used:?}")));
    }
    let extra: i64 = used.iter().skip(3).map(|&d| d as i64).product();
    if ndim < 3 || extra != 1 {
        return Err(Error::Shape(format!("expected a 3D volume, got dims {used:?}")));
    }
    let shape = [dims[0] as usize, dims[1] as usize, dims[2] as usize];

    let spacing = [1, 2, 3].map(|i| f64::from(h.f32_at(76 + 4 * i)).abs());
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(bad(format!("pixdim {spacing:?} is not strictly positive")));
    }

    let datatype = h.i16_at(70);
    let vox_offset = h.f32_at(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(bad(format!("vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let count = shape.iter().product::<usize>();
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(bad(format!("unsupported datatype code {other}"))),
    };
    let end = offset + count * width;
    if bytes.len() < end {
        return Err(bad(format!(
            "payload truncated: have {} bytes, need {end}",
            bytes.len()
        )));
    }
    let payload = &bytes[offset..end];
    let mut data = vec![0f32; count];
    match datatype {
        DT_UINT8 => data.iter_mut().zip(payload).for_each(|(d, &b)| *d = b as f32),
        DT_INT8 => data.iter_mut().zip(payload).for_each(|(d, &b)| *d = b as i8 as f32),
        DT_INT16 => data
            .iter_mut()
            .zip(payload.chunks_exact(2))
            .for_each(|(d, c)| *d = B::read_i16(c) as f32),
        DT_UINT16 => data
            .iter_mut()
            .zip(payload.chunks_exact(2))
            .for_each(|(d, c)| *d = B::read_u16(c) as f32),
        DT_INT32 => data
            .iter_mut()
            .zip(payload.chunks_exact(4))
            .for_each(|(d, c)| *d = B::read_i32(c) as f32),
        DT_UINT32 => data
            .iter_mut()
            .zip(payload.chunks_exact(4))
            .for_each(|(d, c)| *d = B::read_u32(c) as f32),
        DT_FLOAT32 => B::read_f32_into(payload, &mut data),
        DT_FLOAT64 => data
            .iter_mut()
            .zip(payload.chunks_exact(8))
            .for_each(|(d, c)| *d = B::read_f64(c) as f32),
        _ => unreachable!(),
    }

    let slope = h.f32_at(112);
    let inter = h.f32_at(116);
    if slope.is_finite() && slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }

    // NIfTI stores x fastest.
    let voxels = Array3::from_shape_vec(shape.f(), data)
        .map_err(|e| bad(format!("payload shape: {e}")))?;
    Ok((voxels.as_standard_layout().into_owned(), spacing))
}

/// Encodes a volume as little-endian float32 NIfTI-1 with a scanner-less
/// diagonal affine built from the spacing.
pub fn write_nifti(volume: &Volume) -> Vec<u8> {
    let [nx, ny, nz] = volume.dim();
    let [sx, sy, sz] = volume.spacing();
    let mut out = vec![0u8; VOX_OFFSET + 4 * nx * ny * nz];
    let hdr = &mut out[..VOX_OFFSET];

    LittleEndian::write_i32(&mut hdr[0..], HEADER_SIZE as i32);
    hdr[38] = b'r';
    for (i, d) in [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1].iter().enumerate() {
        LittleEndian::write_i16(&mut hdr[40 + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut hdr[70..], DT_FLOAT32);
    LittleEndian::write_i16(&mut hdr[72..], 32);
    for (i, p) in [1.0f32, sx as f32, sy as f32, sz as f32, 0.0, 0.0, 0.0, 0.0]
        .iter()
        .enumerate()
    {
        LittleEndian::write_f32(&mut hdr[76 + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut hdr[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut hdr[112..], 1.0);
    // xyzt_units: millimeters
    hdr[123] = 2;
    let descrip = b"slicesr";
    hdr[148..148 + descrip.len()].copy_from_slice(descrip);
    // sform_code = scanner-less aligned
    LittleEndian::write_i16(&mut hdr[254..], 2);
    let srows = [[sx, 0.0, 0.0, 0.0], [0.0, sy, 0.0, 0.0], [0.0, 0.0, sz, 0.0]];
    for (r, row) in srows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            LittleEndian::write_f32(&mut hdr[280 + 16 * r + 4 * c..], *v as f32);
        }
    }
    hdr[344..348].copy_from_slice(b"n+1\0");

    let payload = &mut out[VOX_OFFSET..];
    let v = volume.voxels();
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                LittleEndian::write_f32(&mut payload[i..], v[[x, y, z]]);
                i += 4;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_with(datatype: i16, dims: [i16; 4]) -> Vec<u8> {
        let mut b = vec![0u8; VOX_OFFSET];
        LittleEndian::write_i32(&mut b, 348);
        for (i, d) in dims.iter().enumerate() {
            LittleEndian::write_i16(&mut b[40 + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut b[70..], datatype);
        for i in 1..4 {
            LittleEndian::write_f32(&mut b[76 + 4 * i..], 1.0);
        }
        LittleEndian::write_f32(&mut b[108..], VOX_OFFSET as f32);
        b[344..348].copy_from_slice(b"n+1\0");
        b
    }

    #[test]
    fn reads_int16_with_scaling() {
        let mut b = header_with(DT_INT16, [3, 2, 1, 1]);
        LittleEndian::write_f32(&mut b[112..], 0.5);
        LittleEndian::write_f32(&mut b[116..], 1.0);
        b.extend_from_slice(&[4, 0, 8, 0]);
        let (v, _) = read_nifti(&b).unwrap();
        assert_eq!(v.as_slice().unwrap(), &[3.0, 5.0]);
    }

    #[test]
    fn x_is_fastest_axis() {
        let mut b = header_with(DT_UINT8, [3, 2, 2, 1]);
        b.extend_from_slice(&[0, 1, 2, 3]);
        let (v, _) = read_nifti(&b).unwrap();
        assert_eq!(v[[1, 0, 0]], 1.0);
        assert_eq!(v[[0, 1, 0]], 2.0);
    }

    #[test]
    fn four_d_payload_is_shape_error() {
        let mut b = header_with(DT_UINT8, [4, 2, 2, 2]);
        LittleEndian::write_i16(&mut b[48..], 3);
        b.extend_from_slice(&[0; 24]);
        assert!(matches!(read_nifti(&b).unwrap_err(), Error::Shape(_)));
    }

    #[test]
    fn two_d_payload_is_shape_error() {
        let mut b = header_with(DT_UINT8, [2, 2, 2, 0]);
        b.extend_from_slice(&[0; 4]);
        assert!(matches!(read_nifti(&b).unwrap_err(), Error::Shape(_)));
    }

    #[test]
    fn spacing_survives_header() {
        let v = Volume::new(Array3::zeros((2, 3, 4)), [0.4, 0.4, 4.0], "s").unwrap();
        let (back, spacing) = read_nifti(&write_nifti(&v)).unwrap();
        assert_eq!(back.dim(), (2, 3, 4));
        assert_eq!(spacing, [0.4f32 as f64, 0.4f32 as f64, 4.0]);
    }
}
