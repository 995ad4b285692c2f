//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer for 3D volumes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::types::{GridError, VolumeGrid};

pub const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sizeof_hdr is {0} in both byte orders, expected 348")]
    HeaderSize(i32),
    #[error("bad magic {0:?}: expected single-file NIfTI-1 \"n+1\\0\"")]
    Magic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    Datatype(i16),
    #[error("dim[{index}] = {value} is not a positive extent")]
    Dim { index: usize, value: i16 },
    #[error("dim[0] = {0}: only volumes with at most 3 spatial axes are supported")]
    Rank(i16),
    #[error("pixdim[{index}] = {value} is not a positive spacing")]
    Pixdim { index: usize, value: f32 },
    #[error("vox_offset {0} points inside the header")]
    VoxOffset(f32),
    #[error("truncated {field}: need {needed} bytes, file has {available}")]
    Truncated { field: &'static str, needed: usize, available: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
            NiftiDatatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            64 => Ok(NiftiDatatype::Float64),
            other => Err(NiftiError::Datatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
            NiftiDatatype::Float64 => 8,
        }
    }
}

/// Header fields this reader interprets.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeaderInfo {
    pub dims: [usize; 3],
    pub datatype: NiftiDatatype,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub endianness: Endianness,
    pub spacing: [f64; 3],
    pub vox_offset: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endianness,
}

impl Reader<'_> {
    fn raw<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[off..off + N]);
        if self.endian == Endianness::Big {
            b.reverse();
        }
        b
    }

    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.raw(off))
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw(off))
    }

    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.raw(off))
    }
}

fn decompress_if_needed(bytes: Vec<u8>) -> Result<Vec<u8>, NiftiError> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeaderInfo, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated { field: "header", needed: HEADER_SIZE, available: bytes.len() });
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let endian = if size_le == HEADER_SIZE as i32 {
        Endianness::Little
    } else if size_be == HEADER_SIZE as i32 {
        Endianness::Big
    } else {
        return Err(NiftiError::HeaderSize(size_le));
    };
    let magic: [u8; 4] = bytes[344..348].try_into().unwrap();
    if &magic != MAGIC_SINGLE {
        return Err(NiftiError::Magic(magic));
    }
    let r = Reader { bytes, endian };
    let rank = r.i16(40);
    if !(1..=7).contains(&rank) {
        return Err(NiftiError::Rank(rank));
    }
    let mut dims = [1usize; 3];
    for i in 1..=rank as usize {
        let value = r.i16(40 + 2 * i);
        if value < 1 {
            return Err(NiftiError::Dim { index: i, value });
        }
        if i <= 3 {
            dims[i - 1] = value as usize;
        } else if value != 1 {
            return Err(NiftiError::Rank(rank));
        }
    }
    let datatype = NiftiDatatype::from_code(r.i16(70))?;
    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        if i < rank as usize {
            let value = r.f32(80 + 4 * i);
            if !(value > 0.0) {
                return Err(NiftiError::Pixdim { index: i + 1, value });
            }
            *s = value as f64;
        }
    }
    let vox = r.f32(108);
    if !(vox >= HEADER_SIZE as f32) {
        return Err(NiftiError::VoxOffset(vox));
    }
    Ok(NiftiHeaderInfo {
        dims,
        datatype,
        scl_slope: r.f32(112),
        scl_inter: r.f32(116),
        endianness: endian,
        spacing,
        vox_offset: vox as usize,
    })
}

/// Decode an in-memory `.nii` or `.nii.gz` image.
pub fn parse_nifti(bytes: Vec<u8>) -> Result<(NiftiHeaderInfo, VolumeGrid), NiftiError> {
    let bytes = decompress_if_needed(bytes)?;
    let header = parse_header(&bytes)?;
    let n: usize = header.dims.iter().product();
    let width = header.datatype.bytes();
    let needed = header.vox_offset + n * width;
    if bytes.len() < needed {
        return Err(NiftiError::Truncated { field: "voxel data", needed, available: bytes.len() });
    }
    // a zero or non-finite slope means "no scaling"
    let slope = if header.scl_slope == 0.0 || !header.scl_slope.is_finite() { 1.0 } else { header.scl_slope as f64 };
    let inter = if header.scl_inter.is_finite() { header.scl_inter as f64 } else { 0.0 };
    let r = Reader { bytes: &bytes, endian: header.endianness };
    let base = header.vox_offset;
    let voxels: Vec<f32> = (0..n)
        .map(|i| {
            let off = base + i * width;
            let stored = match header.datatype {
                NiftiDatatype::Uint8 => bytes[off] as f64,
                NiftiDatatype::Int16 => r.i16(off) as f64,
                NiftiDatatype::Float32 => r.f32(off) as f64,
                NiftiDatatype::Float64 => r.f64(off),
            };
            if slope == 1.0 && inter == 0.0 {
                stored as f32
            } else {
                (stored * slope + inter) as f32
            }
        })
        .collect();
    let grid = VolumeGrid::new(header.dims, header.spacing, voxels)?;
    Ok((header, grid))
}

pub fn read_nifti_volume(path: impl AsRef<Path>) -> Result<VolumeGrid, NiftiError> {
    parse_nifti(fs::read(path)?).map(|(_, grid)| grid)
}

/// Encode a volume as little-endian NIfTI-1 with identity intensity scaling.
/// Integer datatypes round and saturate.
pub fn encode_nifti(grid: &VolumeGrid, datatype: NiftiDatatype) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let dims = grid.dims();
    let spacing = grid.spacing();
    put_i16(&mut h, 40, 3);
    for i in 0..3 {
        put_i16(&mut h, 42 + 2 * i, dims[i] as i16);
    }
    for i in 4..8 {
        put_i16(&mut h, 40 + 2 * i, 1);
    }
    put_i16(&mut h, 70, datatype.code());
    put_i16(&mut h, 72, (datatype.bytes() * 8) as i16);
    put_f32(&mut h, 76, 1.0); // qfac
    for i in 0..3 {
        put_f32(&mut h, 80 + 4 * i, spacing[i] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = 2; // xyzt_units: millimetres
    put_i16(&mut h, 254, 1); // sform_code: scanner
    put_f32(&mut h, 280, spacing[0] as f32);
    put_f32(&mut h, 296 + 4, spacing[1] as f32);
    put_f32(&mut h, 312 + 8, spacing[2] as f32);
    h[344..348].copy_from_slice(MAGIC_SINGLE);

    let mut out = h;
    out.reserve(grid.len() * datatype.bytes());
    for &v in grid.voxels() {
        match datatype {
            NiftiDatatype::Uint8 => out.push(v.round().clamp(0.0, 255.0) as u8),
            NiftiDatatype::Int16 => out.extend_from_slice(&(v.round().clamp(-32768.0, 32767.0) as i16).to_le_bytes()),
            NiftiDatatype::Float32 => out.extend_from_slice(&v.to_le_bytes()),
            NiftiDatatype::Float64 => out.extend_from_slice(&(v as f64).to_le_bytes()),
        }
    }
    out
}

/// Write a volume; a path ending in `.gz` is gzip-compressed (with a zeroed
/// modification time, so output bytes depend only on the volume).
pub fn write_nifti_volume(path: impl AsRef<Path>, grid: &VolumeGrid, datatype: NiftiDatatype) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let bytes = encode_nifti(grid, datatype);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}
