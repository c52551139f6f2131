//! Raw volume format: one JSON header line, then little-endian float32
//! voxels with x varying fastest.
//!
//! ```text
//! {"shape":[x,y,z],"spacing":[sx,sy,sz]}\n<x*y*z f32 LE>
//! ```

use byteorder::{ByteOrder, LittleEndian};
use ndarray::{Array3, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Debug, Serialize, Deserialize)]
struct RawHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
}

pub fn read_raw(bytes: &[u8]) -> Result<(Array3<f32>, [f64; 3])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("raw volume", "missing header line"))?;
    let header: RawHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format("raw volume", format!("header: {e}")))?;
    let count: usize = header.shape.iter().product();
    if count == 0 {
        return Err(Error::Shape(format!("empty shape {:?}", header.shape)));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != count * 4 {
        return Err(Error::format(
            "raw volume",
            format!("payload is {} bytes, shape {:?} needs {}", payload.len(), header.shape, count * 4),
        ));
    }
    let mut data = vec![0f32; count];
    LittleEndian::read_f32_into(payload, &mut data);
    let voxels = Array3::from_shape_vec(header.shape.f(), data)
        .map_err(|e| Error::format("raw volume", e.to_string()))?;
    Ok((voxels.as_standard_layout().into_owned(), header.spacing))
}

pub fn write_raw(volume: &Volume) -> Vec<u8> {
    let header = RawHeader {
        shape: volume.dim(),
        spacing: volume.spacing(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    let v = volume.voxels();
    // column-major walk: x fastest
    let fortran = v.t();
    let start = out.len();
    out.resize(start + 4 * v.len(), 0);
    for (i, &x) in fortran.iter().enumerate() {
        LittleEndian::write_f32(&mut out[start + 4 * i..], x);
    }
    out
}
