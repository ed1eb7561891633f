//! NIfTI-1 single-file (`.nii` / `.nii.gz`) reading and writing.
//!
//! Only the sform affine is honored; the qform is ignored on read and
//! zeroed on write. Writes also carry a private header extension with the
//! sform in double precision so our own round trips keep the affine to
//! better than 1e-6 mm; other readers skip it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::volume::{Geometry, Grid, LabelMap, Volume};

const HEADER_SIZE: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";
const EXT_TAG: &[u8] = b"nucleiseg:f64-sform\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_UINT16: i16 = 512;

/// Voxel element types that can be written to disk.
pub trait NiftiElement: Copy + Default {
    const DATATYPE: i16;
    const BITPIX: i16;
    fn write_le(v: Self, out: &mut Vec<u8>);
}

impl NiftiElement for f32 {
    const DATATYPE: i16 = DT_FLOAT32;
    const BITPIX: i16 = 32;
    fn write_le(v: Self, out: &mut Vec<u8>) {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl NiftiElement for u8 {
    const DATATYPE: i16 = DT_UINT8;
    const BITPIX: i16 = 8;
    fn write_le(v: Self, out: &mut Vec<u8>) {
        out.push(v);
    }
}

struct Header {
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f64; 3],
    vox_offset: usize,
    slope: f64,
    inter: f64,
    sform_code: i16,
    srow: [[f32; 4]; 3],
    big_endian: bool,
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::with_capacity(raw.len() * 4);
        MultiGzDecoder::new(Cursor::new(raw))
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(path: &Path, b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_SIZE {
        return Err(Error::format(path, format!("file is {} bytes, shorter than the header", b.len())));
    }
    let big_endian = match (LittleEndian::read_i32(&b[0..4]), BigEndian::read_i32(&b[0..4])) {
        (348, _) => false,
        (_, 348) => true,
        (n, _) => return Err(Error::format(path, format!("sizeof_hdr is {n}, expected 348"))),
    };
    if &b[344..348] != MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &b[344..348])));
    }
    let i16_at = |o: usize| if big_endian { BigEndian::read_i16(&b[o..]) } else { LittleEndian::read_i16(&b[o..]) };
    let f32_at = |o: usize| if big_endian { BigEndian::read_f32(&b[o..]) } else { LittleEndian::read_f32(&b[o..]) };

    let ndim = i16_at(40);
    let dim: Vec<i16> = (0..8).map(|n| i16_at(40 + 2 * n)).collect();
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("dim[0] = {ndim}")));
    }
    if ndim > 3 && dim[4..=ndim as usize].iter().any(|&d| d != 1) {
        return Err(Error::Unsupported(format!(
            "{}: only 3D images (or 4D with a trailing singleton) are supported, dim = {:?}",
            path.display(),
            &dim[..=ndim as usize]
        )));
    }
    let mut dims = [1usize; 3];
    for a in 0..(ndim as usize).min(3) {
        let d = dim[a + 1];
        if d < 1 {
            return Err(Error::format(path, format!("dim[{}] = {d}", a + 1)));
        }
        dims[a] = d as usize;
    }
    let pixdim = [f32_at(80) as f64, f32_at(84) as f64, f32_at(88) as f64];
    let vox_offset = f32_at(108);
    if vox_offset.is_nan() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::format(path, format!("vox_offset = {vox_offset}")));
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f32_at(280 + 16 * r + 4 * c);
        }
    }
    Ok(Header {
        dims,
        datatype: i16_at(70),
        pixdim,
        vox_offset: vox_offset as usize,
        slope: f32_at(112) as f64,
        inter: f32_at(116) as f64,
        sform_code: i16_at(254),
        srow,
        big_endian,
    })
}

/// The double-precision sform carried by our private extension, if present.
fn read_f64_sform(b: &[u8], h: &Header) -> Option<[[f64; 4]; 3]> {
    if b.len() < HEADER_SIZE + 4 || b[HEADER_SIZE] == 0 {
        return None;
    }
    let mut pos = HEADER_SIZE + 4;
    while pos + 8 <= h.vox_offset.min(b.len()) {
        let (esize, _ecode) = if h.big_endian {
            (BigEndian::read_i32(&b[pos..]), BigEndian::read_i32(&b[pos + 4..]))
        } else {
            (LittleEndian::read_i32(&b[pos..]), LittleEndian::read_i32(&b[pos + 4..]))
        };
        if esize < 8 || pos + esize as usize > b.len() {
            return None;
        }
        let body = &b[pos + 8..pos + esize as usize];
        if body.len() >= EXT_TAG.len() + 96 && body.starts_with(EXT_TAG) {
            let vals = &body[EXT_TAG.len()..];
            let mut m = [[0f64; 4]; 3];
            for (r, row) in m.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = LittleEndian::read_f64(&vals[8 * (4 * r + c)..]);
                }
            }
            // Ignore it if the file was edited by a tool that rewrote srow.
            let consistent = (0..3).all(|r| (0..4).all(|c| (m[r][c] as f32) == h.srow[r][c]));
            return consistent.then_some(m);
        }
        pos += esize as usize;
    }
    None
}

fn geometry_from_header(path: &Path, b: &[u8], h: &Header) -> Result<Geometry> {
    let spacing = h.pixdim.map(|p| if p > 0.0 && p.is_finite() { p } else { 1.0 });
    let mut m = Matrix4::identity();
    if h.sform_code > 0 {
        let rows = read_f64_sform(b, h)
            .unwrap_or_else(|| h.srow.map(|row| row.map(|v| v as f64)));
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = rows[r][c];
            }
        }
    } else {
        for a in 0..3 {
            m[(a, a)] = spacing[a];
        }
    }
    Geometry::new(h.dims, spacing, m).map_err(|e| Error::format(path, format!("header geometry: {e}")))
}

/// Raw voxel values as f64 after scl_slope / scl_inter.
fn decode_values(path: &Path, b: &[u8], h: &Header, n: usize) -> Result<Vec<f64>> {
    let width = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        other => {
            return Err(Error::Unsupported(format!(
                "{}: NIfTI datatype {other} (supported: uint8, int16, uint16, int32, float32)",
                path.display()
            )))
        }
    };
    let end = h.vox_offset + n * width;
    if b.len() < end {
        return Err(Error::format(path, format!("voxel data truncated: need {end} bytes, have {}", b.len())));
    }
    let data = &b[h.vox_offset..end];
    let be = h.big_endian;
    let raw: Vec<f64> = match h.datatype {
        DT_UINT8 => data.iter().map(|&v| v as f64).collect(),
        DT_INT16 => data
            .chunks_exact(2)
            .map(|c| if be { BigEndian::read_i16(c) } else { LittleEndian::read_i16(c) } as f64)
            .collect(),
        DT_UINT16 => data
            .chunks_exact(2)
            .map(|c| if be { BigEndian::read_u16(c) } else { LittleEndian::read_u16(c) } as f64)
            .collect(),
        DT_INT32 => data
            .chunks_exact(4)
            .map(|c| if be { BigEndian::read_i32(c) } else { LittleEndian::read_i32(c) } as f64)
            .collect(),
        _ => data
            .chunks_exact(4)
            .map(|c| if be { BigEndian::read_f32(c) } else { LittleEndian::read_f32(c) } as f64)
            .collect(),
    };
    // scl_slope == 0 means "no scaling".
    if h.slope != 0.0 && h.slope.is_finite() && (h.slope != 1.0 || h.inter != 0.0) {
        let inter = if h.inter.is_finite() { h.inter } else { 0.0 };
        Ok(raw.into_iter().map(|v| v * h.slope + inter).collect())
    } else {
        Ok(raw)
    }
}

/// Loads a scalar image as 32-bit float intensities.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let b = read_all(path)?;
    let h = parse_header(path, &b)?;
    let geometry = geometry_from_header(path, &b, &h)?;
    let values = decode_values(path, &b, &h, geometry.len())?;
    let data: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
    Volume::new(geometry, data).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a label map; values must be integral codes in 0..=6.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let b = read_all(path)?;
    let h = parse_header(path, &b)?;
    let geometry = geometry_from_header(path, &b, &h)?;
    let values = decode_values(path, &b, &h, geometry.len())?;
    let mut data = Vec::with_capacity(values.len());
    for (n, v) in values.into_iter().enumerate() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Validation(format!(
                "{}: non-integer label value {v} at voxel {:?}",
                path.display(),
                geometry.unravel(n)
            )));
        }
        data.push(v as u8);
    }
    LabelMap::new(geometry, data).map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn encode<T: NiftiElement>(grid: &Grid<T>) -> Vec<u8> {
    let geom = grid.geometry();
    let dims = geom.dims();
    let m = geom.index_to_world();

    let mut ext = Vec::new();
    ext.extend_from_slice(EXT_TAG);
    for r in 0..3 {
        for c in 0..4 {
            ext.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    let esize = (ext.len() + 8).div_ceil(16) * 16;
    ext.resize(esize - 8, 0);
    let vox_offset = HEADER_SIZE + 4 + esize;

    let mut h = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    let dim = [3i16, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1];
    for (n, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * n..], *d);
    }
    LittleEndian::write_i16(&mut h[70..], T::DATATYPE);
    LittleEndian::write_i16(&mut h[72..], T::BITPIX);
    let sp = geom.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 0.0, 0.0, 0.0, 0.0];
    for (n, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * n..], *p);
    }
    LittleEndian::write_f32(&mut h[108..], vox_offset as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_f32(&mut h[116..], 0.0);
    h[123] = 2; // mm
    let descrip = b"nucleiseg";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    LittleEndian::write_i16(&mut h[252..], 0);
    LittleEndian::write_i16(&mut h[254..], 2);
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], m[(r, c)] as f32);
        }
    }
    h[344..348].copy_from_slice(MAGIC);

    let mut out = Vec::with_capacity(vox_offset + grid.data().len() * (T::BITPIX as usize / 8));
    out.extend_from_slice(&h);
    out.extend_from_slice(&[1, 0, 0, 0]);
    out.write_i32::<LittleEndian>(esize as i32).unwrap();
    out.write_i32::<LittleEndian>(0).unwrap();
    out.extend_from_slice(&ext);
    debug_assert_eq!(out.len(), vox_offset);
    for &v in grid.data() {
        T::write_le(v, &mut out);
    }
    out
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Writes a volume (float32) or label map (uint8); `.gz` paths are compressed.
pub fn save_volume<T: NiftiElement>(grid: &Grid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(grid);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = if is_gz(path) {
        let mut enc = GzEncoder::new(w, Compression::fast());
        enc.write_all(&bytes).and_then(|_| enc.finish()).and_then(|mut w| w.flush())
    } else {
        w.write_all(&bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::geometry_equal;

    /// Hand-built header for an int16 image, independent of `encode`.
    fn handmade_int16(dims: [i16; 3], slope: f32, inter: f32, voxels: &[i16]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        LittleEndian::write_i32(&mut h[0..], 348);
        let dim = [3i16, dims[0], dims[1], dims[2], 1, 1, 1, 1];
        for (n, d) in dim.iter().enumerate() {
            LittleEndian::write_i16(&mut h[40 + 2 * n..], *d);
        }
        LittleEndian::write_i16(&mut h[70..], DT_INT16);
        LittleEndian::write_i16(&mut h[72..], 16);
        for (n, p) in [1.0f32, 0.5, 0.5, 0.5].iter().enumerate() {
            LittleEndian::write_f32(&mut h[76 + 4 * n..], *p);
        }
        LittleEndian::write_f32(&mut h[108..], 352.0);
        LittleEndian::write_f32(&mut h[112..], slope);
        LittleEndian::write_f32(&mut h[116..], inter);
        LittleEndian::write_i16(&mut h[254..], 1);
        let srow = [[0.5f32, 0.0, 0.0, -10.0], [0.0, 0.5, 0.0, 4.0], [0.0, 0.0, 0.5, 2.5]];
        for r in 0..3 {
            for c in 0..4 {
                LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], srow[r][c]);
            }
        }
        h[344..348].copy_from_slice(MAGIC);
        for v in voxels {
            h.extend_from_slice(&v.to_le_bytes());
        }
        h
    }

    #[test]
    fn applies_scale_and_intercept() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scaled.nii");
        std::fs::write(&p, handmade_int16([2, 1, 1], 2.0, 1.0, &[5, -3])).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.data(), &[11.0, -5.0]);
        assert_eq!(v.geometry().spacing(), [0.5, 0.5, 0.5]);
        assert_eq!(v.geometry().index_to_world()[(0, 3)], -10.0);
    }

    #[test]
    fn rejects_bad_magic_and_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = handmade_int16([1, 1, 1], 1.0, 0.0, &[1]);
        bytes[345] = b'x';
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));

        let mut bytes = handmade_int16([1, 1, 1], 1.0, 0.0, &[1]);
        LittleEndian::write_i16(&mut bytes[70..], 64); // float64
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn rejects_non_finite_voxels() {
        let dir = tempfile::tempdir().unwrap();
        let geom = Geometry::centered([2, 1, 1], [1.0; 3]).unwrap();
        let v = Volume::new(geom, vec![1.0, 2.0]).unwrap();
        let p = dir.path().join("v.nii");
        save_volume(&v, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn four_d_trailing_singleton_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = handmade_int16([2, 1, 1], 1.0, 0.0, &[1, 2]);
        LittleEndian::write_i16(&mut bytes[40..], 4);
        LittleEndian::write_i16(&mut bytes[48..], 1);
        let p = dir.path().join("4d.nii");
        std::fs::write(&p, &bytes).unwrap();
        assert_eq!(load_volume(&p).unwrap().dims(), [2, 1, 1]);
        LittleEndian::write_i16(&mut bytes[48..], 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn round_trip_oblique_affine_gz() {
        let dir = tempfile::tempdir().unwrap();
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let mut m = Matrix4::identity();
        m[(0, 0)] = 0.5 * c;
        m[(0, 1)] = -0.5 * s;
        m[(1, 0)] = 0.5 * s;
        m[(1, 1)] = 0.5 * c;
        m[(2, 2)] = 0.5;
        m[(0, 3)] = -39.123456789;
        m[(1, 3)] = 17.000000123;
        m[(2, 3)] = 3.3;
        let geom = Geometry::new([3, 4, 5], [0.5; 3], m).unwrap();
        let v = Volume::from_fn(geom, |[i, j, k]| (i * 100 + j * 10 + k) as f32 * 0.37).unwrap();
        let p = dir.path().join("oblique.nii.gz");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.data(), v.data());
        assert!(geometry_equal(back.geometry(), v.geometry(), 1e-6));
    }

    #[test]
    fn labels_round_trip_and_reject_bad_codes() {
        let dir = tempfile::tempdir().unwrap();
        let geom = Geometry::centered([4, 2, 1], [0.5; 3]).unwrap();
        let l = LabelMap::new(geom.clone(), vec![0, 1, 2, 3, 4, 5, 6, 0]).unwrap();
        let p = dir.path().join("l.nii.gz");
        save_volume(&l, &p).unwrap();
        assert_eq!(load_labels(&p).unwrap(), l);

        let bad = Volume::new(geom, vec![0.0, 7.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        save_volume(&bad, &p).unwrap();
        assert!(matches!(load_labels(&p), Err(Error::Validation(_))));
    }
}
