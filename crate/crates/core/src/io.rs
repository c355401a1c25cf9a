//! Volume and mask file IO: uncompressed NIfTI-1 and raw little-endian data
//! with a `key=value` text sidecar.
//!
//! Only the geometry the pipeline needs is honored (dims, pixdim spacing,
//! datatype, vox_offset, scl_slope/scl_inter). Orientation matrices are
//! written as identity-free defaults and ignored on read.

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::{Mask, Volume};

const NIFTI1_HEADER_SIZE: usize = 348;
const NIFTI1_VOX_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti1,
    RawSidecar,
}

impl VolumeFormat {
    /// `.nii` selects NIfTI-1, `.raw` the raw+sidecar format.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => Ok(VolumeFormat::Nifti1),
            Some("raw") => Ok(VolumeFormat::RawSidecar),
            _ => Err(Error::invalid(format!(
                "cannot infer format of {} (expected .nii or .raw)",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    F32,
}

impl DataType {
    fn nifti_code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::F32 => 16,
        }
    }

    fn from_nifti_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(DataType::U8),
            4 => Some(DataType::I16),
            16 => Some(DataType::F32),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::F32 => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            DataType::U8 => "u8",
            DataType::I16 => "i16",
            DataType::F32 => "f32",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "u8" => Some(DataType::U8),
            "i16" => Some(DataType::I16),
            "f32" => Some(DataType::F32),
            _ => None,
        }
    }
}

/// Path of the text sidecar accompanying a `.raw` data file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    match format {
        VolumeFormat::Nifti1 => load_nifti(path),
        VolumeFormat::RawSidecar => load_raw(path),
    }
}

/// Loads a volume, choosing the format from the file extension.
pub fn load_volume_auto(path: &Path) -> Result<Volume> {
    load_volume(path, VolumeFormat::from_path(path)?)
}

pub fn save_volume(v: &Volume, path: &Path, format: VolumeFormat, dtype: DataType) -> Result<()> {
    match format {
        VolumeFormat::Nifti1 => save_nifti(v, path, dtype),
        VolumeFormat::RawSidecar => save_raw(v, path, dtype),
    }
}

pub fn save_volume_auto(v: &Volume, path: &Path, dtype: DataType) -> Result<()> {
    save_volume(v, path, VolumeFormat::from_path(path)?, dtype)
}

/// Loads a mask; any nonzero voxel is foreground.
pub fn load_mask(path: &Path, format: VolumeFormat) -> Result<Mask> {
    let v = load_volume(path, format)?;
    let grid = *v.grid();
    Mask::new(grid, v.data().iter().map(|&x| x != 0.0).collect())
}

pub fn load_mask_auto(path: &Path) -> Result<Mask> {
    load_mask(path, VolumeFormat::from_path(path)?)
}

pub fn save_mask(m: &Mask, path: &Path, format: VolumeFormat) -> Result<()> {
    let v = Volume::new(
        *m.grid(),
        m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    save_volume(&v, path, format, DataType::U8)
}

pub fn save_mask_auto(m: &Mask, path: &Path) -> Result<()> {
    save_mask(m, path, VolumeFormat::from_path(path)?)
}

fn load_err(path: &Path, field: &'static str, message: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        field,
        message: message.into(),
    }
}

fn validated_grid(path: &Path, dims: [i64; 3], spacing: [f64; 3]) -> Result<Grid> {
    if dims.iter().any(|&d| d <= 0) {
        return Err(load_err(path, "dim", format!("nonpositive dimension {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(load_err(path, "pixdim", format!("nonpositive spacing {spacing:?}")));
    }
    Ok(Grid {
        dims: [dims[0] as usize, dims[1] as usize, dims[2] as usize],
        spacing,
    })
}

fn decode<B: ByteOrder>(bytes: &[u8], dtype: DataType, n: usize) -> Vec<f64> {
    match dtype {
        DataType::U8 => bytes[..n].iter().map(|&b| b as f64).collect(),
        DataType::I16 => bytes[..2 * n].chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        DataType::F32 => bytes[..4 * n].chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
    }
}

fn encode(data: &[f64], dtype: DataType) -> Vec<u8> {
    let mut out = vec![0u8; data.len() * dtype.size()];
    match dtype {
        DataType::U8 => {
            for (o, &v) in out.iter_mut().zip(data) {
                *o = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        DataType::I16 => {
            for (c, &v) in out.chunks_exact_mut(2).zip(data) {
                LittleEndian::write_i16(c, v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
            }
        }
        DataType::F32 => {
            for (c, &v) in out.chunks_exact_mut(4).zip(data) {
                LittleEndian::write_f32(c, v as f32);
            }
        }
    }
    out
}

fn load_nifti(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < NIFTI1_HEADER_SIZE {
        return Err(load_err(path, "header", format!("{} bytes, need 348", bytes.len())));
    }
    if LittleEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == NIFTI1_HEADER_SIZE as i32 {
        parse_nifti::<LittleEndian>(path, &bytes)
    } else if BigEndian::read_i32(&bytes[offsets::SIZEOF_HDR..]) == NIFTI1_HEADER_SIZE as i32 {
        parse_nifti::<BigEndian>(path, &bytes)
    } else {
        Err(load_err(path, "sizeof_hdr", "not a NIfTI-1 header"))
    }
}

fn parse_nifti<B: ByteOrder>(path: &Path, bytes: &[u8]) -> Result<Volume> {
    let magic = &bytes[offsets::MAGIC..offsets::MAGIC + 4];
    if magic != b"n+1\0" {
        return Err(load_err(path, "magic", "expected single-file NIfTI-1 (n+1)"));
    }
    let dim_at = |i: usize| B::read_i16(&bytes[offsets::DIM + 2 * i..]) as i64;
    let ndim = dim_at(0);
    if !(1..=7).contains(&ndim) {
        return Err(load_err(path, "dim", format!("dim[0]={ndim} out of range")));
    }
    let dim_or_one = |i: usize| if (i as i64) <= ndim { dim_at(i) } else { 1 };
    for i in 4..=ndim as usize {
        if dim_at(i) > 1 {
            return Err(load_err(path, "dim", "only 3D volumes are supported"));
        }
    }
    let pix_at = |i: usize| f32_to_decimal_f64(B::read_f32(&bytes[offsets::PIXDIM + 4 * i..]));
    let pix_or_one = |i: usize| if (i as i64) <= ndim { pix_at(i) } else { 1.0 };
    let grid = validated_grid(
        path,
        [dim_or_one(1), dim_or_one(2), dim_or_one(3)],
        [pix_or_one(1), pix_or_one(2), pix_or_one(3)],
    )?;

    let code = B::read_i16(&bytes[offsets::DATATYPE..]);
    let dtype = DataType::from_nifti_code(code)
        .ok_or_else(|| load_err(path, "datatype", format!("unsupported code {code}")))?;
    let vox_offset = B::read_f32(&bytes[offsets::VOX_OFFSET..]);
    if !(vox_offset >= NIFTI1_HEADER_SIZE as f32) {
        return Err(load_err(path, "vox_offset", format!("{vox_offset} inside header")));
    }
    let start = vox_offset as usize;
    let n = grid.len();
    let needed = n * dtype.size();
    if bytes.len() < start + needed {
        return Err(load_err(
            path,
            "data",
            format!("truncated: need {needed} bytes after offset {start}, have {}", bytes.len().saturating_sub(start)),
        ));
    }
    let mut data = decode::<B>(&bytes[start..], dtype, n);
    let slope = B::read_f32(&bytes[offsets::SCL_SLOPE..]) as f64;
    let inter = B::read_f32(&bytes[offsets::SCL_INTER..]) as f64;
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Volume::new(grid, data)
}

/// Widens an f32 through its shortest decimal form, so 1.12f32 reads back as 1.12.
fn f32_to_decimal_f64(v: f32) -> f64 {
    v.to_string().parse().unwrap_or(v as f64)
}

fn save_nifti(v: &Volume, path: &Path, dtype: DataType) -> Result<()> {
    let mut header = vec![0u8; NIFTI1_VOX_OFFSET];
    LittleEndian::write_i32(&mut header[offsets::SIZEOF_HDR..], NIFTI1_HEADER_SIZE as i32);
    let [nx, ny, nz] = v.dims();
    for (i, d) in [3, nx, ny, nz, 1, 1, 1, 1].into_iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(Error::invalid(format!("dimension {d} exceeds NIfTI-1 limit")));
        }
        LittleEndian::write_i16(&mut header[offsets::DIM + 2 * i..], d as i16);
    }
    LittleEndian::write_i16(&mut header[offsets::DATATYPE..], dtype.nifti_code());
    LittleEndian::write_i16(&mut header[offsets::BITPIX..], (8 * dtype.size()) as i16);
    let [sx, sy, sz] = v.spacing();
    for (i, p) in [1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0].into_iter().enumerate() {
        LittleEndian::write_f32(&mut header[offsets::PIXDIM + 4 * i..], p as f32);
    }
    LittleEndian::write_f32(&mut header[offsets::VOX_OFFSET..], NIFTI1_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut header[offsets::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut header[offsets::SCL_INTER..], 0.0);
    // NIFTI_UNITS_MM
    header[offsets::XYZT_UNITS] = 2;
    header[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
    header.extend_from_slice(&encode(v.data(), dtype));
    fs::write(path, header).map_err(|e| Error::io(path, e))
}

fn load_raw(path: &Path) -> Result<Volume> {
    let meta_path = sidecar_path(path);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut dims = None;
    let mut spacing = None;
    let mut dtype = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| load_err(&meta_path, "sidecar", format!("line {}: expected key=value", lineno + 1)))?;
        match key.trim() {
            "dims" => dims = Some(parse_triple::<i64>(&meta_path, "dims", value)?),
            "spacing" => spacing = Some(parse_triple::<f64>(&meta_path, "spacing", value)?),
            "dtype" => {
                dtype = Some(DataType::from_name(value.trim()).ok_or_else(|| {
                    load_err(&meta_path, "dtype", format!("unsupported dtype {:?}", value.trim()))
                })?)
            }
            "endianness" => {
                if value.trim() != "little" {
                    return Err(load_err(&meta_path, "endianness", "only little-endian is supported"));
                }
            }
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| load_err(&meta_path, "dims", "missing"))?;
    let spacing = spacing.ok_or_else(|| load_err(&meta_path, "spacing", "missing"))?;
    let dtype = dtype.ok_or_else(|| load_err(&meta_path, "dtype", "missing"))?;
    let grid = validated_grid(&meta_path, dims, spacing)?;

    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let needed = grid.len() * dtype.size();
    if bytes.len() < needed {
        return Err(load_err(path, "data", format!("truncated: need {needed} bytes, have {}", bytes.len())));
    }
    Volume::new(grid, decode::<LittleEndian>(&bytes, dtype, grid.len()))
}

fn parse_triple<T: std::str::FromStr>(path: &Path, field: &'static str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split(',')
        .map(|p| p.trim().parse::<T>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| load_err(path, field, format!("cannot parse {value:?}")))?;
    <[T; 3]>::try_from(parts).map_err(|_| load_err(path, field, "expected three comma-separated values"))
}

fn save_raw(v: &Volume, path: &Path, dtype: DataType) -> Result<()> {
    let [nx, ny, nz] = v.dims();
    let [sx, sy, sz] = v.spacing();
    let meta = format!(
        "dims={nx},{ny},{nz}\nspacing={sx},{sy},{sz}\ndtype={}\nendianness=little\n",
        dtype.name()
    );
    let meta_path = sidecar_path(path);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    fs::write(path, encode(v.data(), dtype)).map_err(|e| Error::io(path, e))
}
