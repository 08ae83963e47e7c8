//! Minimal NIfTI-1 single-file (`.nii`) reader and writer.
//!
//! Only what the pipeline needs: 3D single-channel data, voxel spacing from
//! `pixdim`, and the translation part of the qform/sform. Rotation and shear in
//! the orientation fields are ignored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use ndarray::Array3;

use super::{ImagingError, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

/// On-disk voxel encoding used by [`save_volume_as`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelType {
    Float32,
    Float64,
}

impl VoxelType {
    fn code(self) -> i16 {
        match self {
            VoxelType::Float32 => 16,
            VoxelType::Float64 => 64,
        }
    }

    fn bitpix(self) -> i16 {
        match self {
            VoxelType::Float32 => 32,
            VoxelType::Float64 => 64,
        }
    }
}

struct Header {
    dims: [usize; 3],
    datatype: i16,
    spacing: [f64; 3],
    origin: [f64; 3],
    vox_offset: usize,
    slope: f64,
    inter: f64,
}

fn parse_header<B: ByteOrder>(h: &[u8]) -> Result<Header, ImagingError> {
    let i16_at = |o: usize| B::read_i16(&h[o..o + 2]);
    let f32_at = |o: usize| B::read_f32(&h[o..o + 4]) as f64;

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(ImagingError::Malformed(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = i16_at(42 + 2 * i);
        if v < 1 {
            return Err(ImagingError::Malformed(format!("dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dims[3..].iter().any(|&d| d > 1) {
        return Err(ImagingError::UnsupportedShape(format!(
            "{}D volume with extents {:?}",
            ndim,
            &dims[..ndim as usize]
        )));
    }
    let mut spacing = [1.0; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = f32_at(80 + 4 * a).abs();
        if v > 0.0 {
            *s = v;
        }
    }
    let qform = i16_at(252);
    let sform = i16_at(254);
    let origin = if qform > 0 {
        [f32_at(268), f32_at(272), f32_at(276)]
    } else if sform > 0 {
        [f32_at(292), f32_at(308), f32_at(324)]
    } else {
        [0.0; 3]
    };
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f64) {
        return Err(ImagingError::Malformed(format!("vox_offset = {vox_offset}")));
    }
    Ok(Header {
        dims: [dims[0], dims[1], dims[2]],
        datatype: i16_at(70),
        spacing,
        origin,
        vox_offset: vox_offset as usize,
        slope: f32_at(112),
        inter: f32_at(116),
    })
}

fn decode<B: ByteOrder>(datatype: i16, raw: &[u8], n: usize) -> Result<Vec<f64>, ImagingError> {
    let width = match datatype {
        2 => 1,
        4 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(ImagingError::UnsupportedDatatype(other)),
    };
    if raw.len() < n * width {
        return Err(ImagingError::Malformed(format!(
            "expected {} data bytes, found {}",
            n * width,
            raw.len()
        )));
    }
    let chunks = raw.chunks_exact(width).take(n);
    Ok(match datatype {
        2 => chunks.map(|c| c[0] as f64).collect(),
        4 => chunks.map(|c| B::read_i16(c) as f64).collect(),
        8 => chunks.map(|c| B::read_i32(c) as f64).collect(),
        16 => chunks.map(|c| B::read_f32(c) as f64).collect(),
        _ => chunks.map(B::read_f64).collect(),
    })
}

/// Parses a `.nii` byte stream.
pub fn read_volume<R: Read>(mut reader: R) -> Result<Volume, ImagingError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_SIZE {
        return Err(ImagingError::Malformed("truncated header".into()));
    }
    let (header, little) = if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        (parse_header::<LittleEndian>(&bytes[..HEADER_SIZE])?, true)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        (parse_header::<BigEndian>(&bytes[..HEADER_SIZE])?, false)
    } else {
        return Err(ImagingError::Malformed("sizeof_hdr is not 348".into()));
    };
    if &bytes[344..347] != b"n+1" {
        return Err(ImagingError::Malformed("missing n+1 magic".into()));
    }
    let [nx, ny, nz] = header.dims;
    let n = nx * ny * nz;
    let raw = bytes
        .get(header.vox_offset..)
        .ok_or_else(|| ImagingError::Malformed("data offset past end of file".into()))?;
    let mut values = if little {
        decode::<LittleEndian>(header.datatype, raw, n)?
    } else {
        decode::<BigEndian>(header.datatype, raw, n)?
    };
    if header.slope != 0.0 && (header.slope != 1.0 || header.inter != 0.0) {
        for v in &mut values {
            *v = *v * header.slope + header.inter;
        }
    }
    // NIfTI stores x fastest.
    let mut voxels = Array3::zeros([nx, ny, nz]);
    for (i, v) in values.into_iter().enumerate() {
        let x = i % nx;
        let y = (i / nx) % ny;
        let z = i / (nx * ny);
        voxels[[x, y, z]] = v;
    }
    Volume::new(voxels, header.spacing, header.origin)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, ImagingError> {
    let path = path.as_ref();
    let mut volume = read_volume(BufReader::new(File::open(path)?))?;
    volume.subject_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.trim_end_matches("_preproc").to_string());
    Ok(volume)
}

pub fn write_volume<W: Write>(mut w: W, volume: &Volume, kind: VoxelType) -> Result<(), ImagingError> {
    let shape = volume.shape();
    if shape.iter().any(|&d| d > i16::MAX as usize) {
        return Err(ImagingError::UnsupportedShape(format!("{shape:?} exceeds NIfTI-1 limits")));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let dims: [i16; 8] = [3, shape[0] as i16, shape[1] as i16, shape[2] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..42 + 2 * i], *d);
    }
    LittleEndian::write_i16(&mut h[70..72], kind.code());
    LittleEndian::write_i16(&mut h[72..74], kind.bitpix());
    let sp = volume.spacing();
    let pixdim = [1.0, sp[0], sp[1], sp[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *p as f32);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    h[123] = 2; // mm
    LittleEndian::write_i16(&mut h[252..254], 1);
    let o = volume.origin();
    for a in 0..3 {
        LittleEndian::write_f32(&mut h[268 + 4 * a..272 + 4 * a], o[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    w.write_all(&h)?;
    let [nx, ny, nz] = shape;
    let vox = volume.voxels();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = vox[[x, y, z]];
                match kind {
                    VoxelType::Float32 => w.write_f32::<LittleEndian>(v as f32)?,
                    VoxelType::Float64 => w.write_f64::<LittleEndian>(v)?,
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes a lossless (float64) `.nii` file.
pub fn save_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<(), ImagingError> {
    save_volume_as(path, volume, VoxelType::Float64)
}

pub fn save_volume_as(path: impl AsRef<Path>, volume: &Volume, kind: VoxelType) -> Result<(), ImagingError> {
    write_volume(BufWriter::new(File::create(path)?), volume, kind)
}
