//! Minimal single-file NIfTI-1 reader and writer.
//!
//! Supports 3D scalar float32/float64 volumes (`.nii`, optionally gzipped).
//! Only axis-aligned affines are accepted: the sform (or qform) may scale and
//! translate, possibly with axis flips, but must not rotate or shear.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Grid3, MaskedVolume};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// On-disk sample type for [`write_nifti`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleType {
    #[default]
    Float32,
    Float64,
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl HeaderReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        match self.endian {
            Endian::Little => i16::from_le_bytes(b),
            Endian::Big => i16::from_be_bytes(b),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        match self.endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Rotation part of the qform quaternion (b, c, d), row-major.
fn quaternion_matrix(b: f64, c: f64, d: f64) -> [[f64; 3]; 3] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        ],
    ]
}

fn check_axis_aligned(m: [[f64; 3]; 3], what: &str) -> Result<()> {
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-12);
    for (r, row) in m.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if r != c && v.abs() > 1e-6 * scale {
                return Err(Error::UnsupportedOrientation(format!(
                    "{what} contains rotation or shear (entry [{r}][{c}] = {v})"
                )));
            }
        }
    }
    Ok(())
}

struct ParsedHeader {
    grid: Grid3,
    datatype: i16,
    vox_offset: usize,
    scl_slope: f64,
    scl_inter: f64,
    endian: Endian,
}

fn parse_header(bytes: &[u8]) -> Result<ParsedHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "file has {} bytes, need at least {HEADER_SIZE}",
            bytes.len()
        )));
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let endian = if size_le == HEADER_SIZE as i32 {
        Endian::Little
    } else if size_be == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::MalformedHeader(format!(
            "sizeof_hdr is {size_le}, expected {HEADER_SIZE}"
        )));
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::MalformedHeader(format!(
            "magic {:?} is not single-file NIfTI-1",
            String::from_utf8_lossy(&bytes[344..348])
        )));
    }
    let h = HeaderReader { bytes, endian };

    let ndim = h.i16(40);
    let dim: Vec<i16> = (0..8).map(|i| h.i16(40 + 2 * i)).collect();
    match ndim {
        3 => {}
        4 if dim[4] == 1 => {}
        _ => {
            return Err(Error::MalformedHeader(format!(
                "expected a 3D volume, got dim = {:?}",
                &dim[..=ndim.clamp(0, 7) as usize]
            )))
        }
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        if dim[a + 1] < 1 {
            return Err(Error::MalformedHeader(format!("dim[{}] = {}", a + 1, dim[a + 1])));
        }
        dims[a] = dim[a + 1] as usize;
    }
    let datatype = h.i16(70);
    if datatype != DT_FLOAT32 && datatype != DT_FLOAT64 {
        return Err(Error::UnsupportedDatatype(datatype));
    }
    let mut voxel_size = [0.0; 3];
    for a in 0..3 {
        voxel_size[a] = (h.f32(80 + 4 * a) as f64).abs();
    }

    let qform_code = h.i16(252);
    let sform_code = h.i16(254);
    let origin = if sform_code > 0 {
        let mut m = [[0.0; 3]; 3];
        let mut off = [0.0; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = h.f32(280 + 16 * r + 4 * c) as f64;
            }
            off[r] = h.f32(280 + 16 * r + 12) as f64;
        }
        check_axis_aligned(m, "sform")?;
        off
    } else if qform_code > 0 {
        let q = quaternion_matrix(h.f32(256) as f64, h.f32(260) as f64, h.f32(264) as f64);
        check_axis_aligned(q, "qform")?;
        [h.f32(268) as f64, h.f32(272) as f64, h.f32(276) as f64]
    } else {
        [0.0; 3]
    };

    let vox_offset = h.f32(108);
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::MalformedHeader(format!("vox_offset = {vox_offset}")));
    }
    let grid = Grid3::new(dims, voxel_size, origin)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok(ParsedHeader {
        grid,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: h.f32(112) as f64,
        scl_inter: h.f32(116) as f64,
        endian,
    })
}

fn decode_samples(bytes: &[u8], hdr: &ParsedHeader) -> Result<Vec<f64>> {
    let n = hdr.grid.len();
    let width = if hdr.datatype == DT_FLOAT32 { 4 } else { 8 };
    let start = hdr.vox_offset;
    let end = start + n * width;
    if bytes.len() < end {
        return Err(Error::MalformedHeader(format!(
            "data section truncated: need {end} bytes, file has {}",
            bytes.len()
        )));
    }
    let raw = &bytes[start..end];
    let mut out: Vec<f64> = match (hdr.datatype, hdr.endian) {
        (DT_FLOAT32, Endian::Little) => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        (DT_FLOAT32, Endian::Big) => raw
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        (_, Endian::Little) => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        (_, Endian::Big) => raw
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let (slope, inter) = (hdr.scl_slope, hdr.scl_inter);
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut out {
            *v = *v * slope + inter;
        }
    }
    Ok(out)
}

/// Reads a volume; the mask is every finite, nonzero voxel.
pub fn read_nifti(path: &Path) -> Result<MaskedVolume> {
    let bytes = read_bytes(path)?;
    let hdr = parse_header(&bytes)?;
    let data = decode_samples(&bytes, &hdr)?;
    MaskedVolume::from_data(hdr.grid, data)
}

/// Reads a volume whose mask comes from a separate file (nonzero = inside).
pub fn read_nifti_with_mask(path: &Path, mask_path: &Path) -> Result<MaskedVolume> {
    let vol = read_nifti(path)?;
    let mask = read_nifti(mask_path)?;
    if mask.grid.dims != vol.grid.dims {
        return Err(Error::DimensionMismatch(format!(
            "mask dims {:?} differ from image dims {:?}",
            mask.grid.dims, vol.grid.dims
        )));
    }
    let m: Vec<bool> = mask
        .data
        .iter()
        .zip(&vol.data)
        .map(|(&mv, &v)| mv.is_finite() && mv != 0.0 && v.is_finite())
        .collect();
    MaskedVolume::new(vol.grid, m, vol.data)
}

fn encode_header(grid: &Grid3, sample: SampleType) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, grid.dims[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    let (code, bitpix) = match sample {
        SampleType::Float32 => (DT_FLOAT32, 32),
        SampleType::Float64 => (DT_FLOAT64, 64),
    };
    put_i16(&mut h, 70, code);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0); // qfac
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, grid.voxel_size[a] as f32);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // xyzt_units: mm
    let descrip = b"dualres";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, grid.origin[a] as f32);
        put_f32(&mut h, 280 + 16 * a + 4 * a, grid.voxel_size[a] as f32);
        put_f32(&mut h, 280 + 16 * a + 12, grid.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

/// Writes a volume; unmasked voxels are stored as 0.
///
/// Header fields are float32, so grid metadata round-trips to f32 precision.
/// A path ending in `.gz` is gzip-compressed.
pub fn write_nifti(vol: &MaskedVolume, path: &Path, sample: SampleType) -> Result<()> {
    if vol.grid.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidArgument(format!(
            "grid dims {:?} exceed the NIfTI-1 limit",
            vol.grid.dims
        )));
    }
    for (i, (&m, &v)) in vol.mask.iter().zip(&vol.data).enumerate() {
        if m && !v.is_finite() {
            return Err(Error::NonFiniteData(i));
        }
    }
    let mut bytes = encode_header(&vol.grid, sample);
    let values = vol
        .mask
        .iter()
        .zip(&vol.data)
        .map(|(&m, &v)| if m { v } else { 0.0 });
    match sample {
        SampleType::Float32 => {
            bytes.reserve(4 * vol.data.len());
            values.for_each(|v| bytes.extend_from_slice(&(v as f32).to_le_bytes()));
        }
        SampleType::Float64 => {
            bytes.reserve(8 * vol.data.len());
            values.for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
    }

    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    let res = if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut f = file;
        f.write_all(&bytes)
    };
    res.map_err(|e| Error::io(path, e))
}
