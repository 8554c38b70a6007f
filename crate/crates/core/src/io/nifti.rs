//! Little-endian NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! NIfTI lists axes fastest-first, so an array of shape `[.., y, x]` is
//! stored with `dim[1] = x`. 2D arrays are stored as 3D with one slice.
//! Spacing is mirrored as exact f64 bits in a comment extension because the
//! header's `pixdim` only holds f32.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::volume::{num_voxels, LabelMap, Volume};
use crate::warp::DisplacementField;

const HEADER_LEN: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";
const INTENT_LABEL: i16 = 1002;
const INTENT_VECTOR: i16 = 1007;
const ECODE_COMMENT: i32 = 6;
const SPACING_TAG: &str = "spacing_f64=";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;
const DT_INT64: i16 = 1024;
const DT_UINT64: i16 = 1280;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Decoded header fields this crate uses.
struct Header {
    /// Axis lengths fastest-first, up to 7.
    dims: Vec<usize>,
    pixdim: Vec<f64>,
    datatype: i16,
    vox_offset: usize,
    slope: f64,
    inter: f64,
    intent_code: i16,
    intent_p1: f64,
    exact_spacing: Option<Vec<f64>>,
}

fn bytes_per_voxel(dt: i16) -> Option<usize> {
    Some(match dt {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_INT64 | DT_UINT64 | DT_FLOAT64 => 8,
        _ => return None,
    })
}

fn is_integer_type(dt: i16) -> bool {
    !matches!(dt, DT_FLOAT32 | DT_FLOAT64)
}

fn i16_at(b: &[u8], o: usize) -> i16 {
    i16::from_le_bytes([b[o], b[o + 1]])
}

fn i32_at(b: &[u8], o: usize) -> i32 {
    i32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], o: usize) -> f32 {
    f32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn decompress(path: &Path, raw: Vec<u8>) -> Result<Vec<u8>> {
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| bad(path, format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(path: &Path, b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_LEN + 4 {
        return Err(bad(path, format!("file too short for a header ({} bytes)", b.len())));
    }
    let sizeof_hdr = i32_at(b, 0);
    if sizeof_hdr != HEADER_LEN as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_LEN as i32 {
            return Err(bad(path, "big-endian files are not supported"));
        }
        return Err(bad(path, format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    if &b[344..348] != MAGIC {
        return Err(bad(path, "missing n+1 magic (only single-file NIfTI-1 is supported)"));
    }
    let ndim = i16_at(b, 40);
    if !(1..=7).contains(&ndim) {
        return Err(bad(path, format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = Vec::new();
    for k in 1..=ndim as usize {
        let d = i16_at(b, 40 + 2 * k);
        if d < 1 {
            return Err(bad(path, format!("dim[{k}] = {d}")));
        }
        dims.push(d as usize);
    }
    let pixdim = (1..=ndim as usize)
        .map(|k| f32_at(b, 76 + 4 * k) as f64)
        .collect();
    let datatype = i16_at(b, 70);
    if bytes_per_voxel(datatype).is_none() {
        return Err(bad(path, format!("unsupported datatype code {datatype}")));
    }
    let vox_offset = f32_at(b, 108);
    if !(vox_offset >= (HEADER_LEN + 4) as f32) || vox_offset.fract() != 0.0 {
        return Err(bad(path, format!("invalid vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let exact_spacing = parse_extensions(b, vox_offset);
    Ok(Header {
        dims,
        pixdim,
        datatype,
        vox_offset,
        slope: f32_at(b, 112) as f64,
        inter: f32_at(b, 116) as f64,
        intent_code: i16_at(b, 68),
        intent_p1: f32_at(b, 56) as f64,
        exact_spacing,
    })
}

fn parse_extensions(b: &[u8], vox_offset: usize) -> Option<Vec<f64>> {
    if b[HEADER_LEN] == 0 {
        return None;
    }
    let mut o = HEADER_LEN + 4;
    while o + 8 <= vox_offset.min(b.len()) {
        let esize = i32_at(b, o) as usize;
        let ecode = i32_at(b, o + 4);
        if esize < 8 || o + esize > b.len() {
            return None;
        }
        if ecode == ECODE_COMMENT {
            let text = String::from_utf8_lossy(&b[o + 8..o + esize]);
            if let Some(rest) = text.trim_end_matches('\0').strip_prefix(SPACING_TAG) {
                return rest
                    .split(',')
                    .map(|h| u64::from_str_radix(h.trim(), 16).ok().map(f64::from_bits))
                    .collect();
            }
        }
        o += esize;
    }
    None
}

fn decode_data(path: &Path, b: &[u8], h: &Header, count: usize) -> Result<Vec<f64>> {
    let bpv = bytes_per_voxel(h.datatype).expect("checked in header");
    let need = h.vox_offset + count * bpv;
    if b.len() < need {
        return Err(bad(
            path,
            format!("truncated data: need {need} bytes, file has {}", b.len()),
        ));
    }
    let d = &b[h.vox_offset..need];
    let vals: Vec<f64> = match h.datatype {
        DT_UINT8 => d.iter().map(|&v| v as f64).collect(),
        DT_INT8 => d.iter().map(|&v| v as i8 as f64).collect(),
        DT_INT16 => d.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        DT_UINT16 => d.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        DT_INT32 => d.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DT_UINT32 => d.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DT_INT64 => d.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DT_UINT64 => d.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DT_FLOAT32 => d.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DT_FLOAT64 => d.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        _ => unreachable!("checked in header"),
    };
    // scl_slope = 0 means "no scaling"
    if h.slope != 0.0 && !(h.slope == 1.0 && h.inter == 0.0) {
        return Ok(vals.into_iter().map(|v| v * h.slope + h.inter).collect());
    }
    Ok(vals)
}

/// Spatial shape (row-major) and spacing from the first three NIfTI axes.
fn spatial(path: &Path, h: &Header) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut xyz: Vec<usize> = h.dims.iter().take(3).copied().collect();
    let mut pix: Vec<f64> = h.pixdim.iter().take(3).copied().collect();
    // a unit third axis marks a 2D array
    while xyz.len() > 2 && *xyz.last().unwrap() == 1 {
        xyz.pop();
        pix.pop();
    }
    if xyz.len() < 2 {
        return Err(bad(path, format!("need at least 2 spatial axes, dims {:?}", h.dims)));
    }
    xyz.reverse();
    pix.reverse();
    let spacing = match &h.exact_spacing {
        Some(s) if s.len() == pix.len() && s.iter().zip(&pix).all(|(a, b)| *a as f32 as f64 == *b) => s.clone(),
        _ => pix.iter().map(|&p| if p > 0.0 { p } else { 1.0 }).collect(),
    };
    Ok((xyz, spacing))
}

fn load(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = decompress(path, read_bytes(path)?)?;
    let h = parse_header(path, &bytes)?;
    Ok((h, bytes))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (h, b) = load(path)?;
    if h.dims.iter().skip(3).any(|&d| d != 1) {
        return Err(bad(path, format!("expected a scalar volume, dims {:?}", h.dims)));
    }
    let (shape, spacing) = spatial(path, &h)?;
    let data = decode_data(path, &b, &h, num_voxels(&shape))?;
    Volume::new(shape, spacing, data).map_err(|e| bad(path, e.to_string()))
}

/// Read an integer label map. The label count comes from `intent_p1` when
/// set, otherwise from the largest value present.
pub fn read_labelmap(path: &Path) -> Result<LabelMap> {
    let (h, b) = load(path)?;
    if !is_integer_type(h.datatype) {
        return Err(bad(path, "label maps must use an integer datatype"));
    }
    if h.dims.iter().skip(3).any(|&d| d != 1) {
        return Err(bad(path, format!("expected a scalar label map, dims {:?}", h.dims)));
    }
    let (shape, spacing) = spatial(path, &h)?;
    let vals = decode_data(path, &b, &h, num_voxels(&shape))?;
    if vals.iter().any(|&v| v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64) {
        return Err(bad(path, "label values must be non-negative integers"));
    }
    let labels: Vec<u32> = vals.into_iter().map(|v| v as u32).collect();
    let max = labels.iter().copied().max().unwrap_or(0) as usize;
    let l = if h.intent_code == INTENT_LABEL && h.intent_p1 >= 1.0 {
        h.intent_p1 as usize
    } else {
        max + 1
    };
    LabelMap::new(shape, spacing, l, labels).map_err(|e| bad(path, e.to_string()))
}

/// Read a displacement field stored with a trailing vector axis.
pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let (h, b) = load(path)?;
    if h.intent_code != INTENT_VECTOR || h.dims.len() != 5 || h.dims[3] != 1 {
        return Err(bad(path, "expected a vector field (intent 1007, dims x,y,z,1,D)"));
    }
    let (shape, _) = spatial(path, &h)?;
    let d = h.dims[4];
    if d != shape.len() {
        return Err(bad(path, format!("{d} components for a {}D grid", shape.len())));
    }
    let n = num_voxels(&shape);
    let file = decode_data(path, &b, &h, d * n)?;
    // file components are x-first, ours follow the row-major axis order
    let mut u = Vec::with_capacity(d * n);
    for k in 0..d {
        let c = d - 1 - k;
        u.extend_from_slice(&file[c * n..(c + 1) * n]);
    }
    DisplacementField::new(shape, u).map_err(|e| bad(path, e.to_string()))
}

struct Encoded<'a> {
    shape: &'a [usize],
    spacing: &'a [f64],
    extra_dims: &'a [usize],
    datatype: i16,
    intent_code: i16,
    intent_p1: f64,
    data: Vec<u8>,
}

fn spacing_extension(spacing: &[f64]) -> Vec<u8> {
    let text = format!(
        "{SPACING_TAG}{}",
        spacing
            .iter()
            .map(|s| format!("{:016x}", s.to_bits()))
            .collect::<Vec<_>>()
            .join(",")
    );
    let esize = (8 + text.len()).div_ceil(16) * 16;
    let mut out = Vec::with_capacity(esize);
    out.extend_from_slice(&(esize as i32).to_le_bytes());
    out.extend_from_slice(&ECODE_COMMENT.to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.resize(esize, 0);
    out
}

fn encode(e: Encoded<'_>) -> Vec<u8> {
    let mut dims: Vec<usize> = e.shape.iter().rev().copied().collect();
    let mut pix: Vec<f64> = e.spacing.iter().rev().copied().collect();
    while dims.len() < 3 {
        dims.push(1);
        pix.push(1.0);
    }
    dims.extend_from_slice(e.extra_dims);
    pix.extend(std::iter::repeat_n(1.0, e.extra_dims.len()));
    let ext = spacing_extension(e.spacing);
    let vox_offset = HEADER_LEN + 4 + ext.len();

    let mut h = vec![0u8; HEADER_LEN];
    let put_i16 = |h: &mut [u8], o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_LEN as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, dims.len() as i16);
    for (k, &d) in dims.iter().enumerate() {
        put_i16(&mut h, 42 + 2 * k, d as i16);
    }
    put_f32(&mut h, 56, e.intent_p1 as f32);
    put_i16(&mut h, 68, e.intent_code);
    put_i16(&mut h, 70, e.datatype);
    put_i16(&mut h, 72, (bytes_per_voxel(e.datatype).unwrap() * 8) as i16);
    put_f32(&mut h, 76, 1.0); // qfac
    for (k, &p) in pix.iter().enumerate() {
        put_f32(&mut h, 80 + 4 * k, p as f32);
    }
    put_f32(&mut h, 108, vox_offset as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    let descrip = b"semireg";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    // sform: diagonal spacing, no rotation
    put_i16(&mut h, 254, 2);
    for (row, o) in [280usize, 296, 312].into_iter().enumerate() {
        put_f32(&mut h, o + 4 * row, pix[row] as f32);
    }
    h[344..348].copy_from_slice(MAGIC);

    let mut out = h;
    out.extend_from_slice(&[1, 0, 0, 0]);
    out.extend_from_slice(&ext);
    out.extend_from_slice(&e.data);
    out
}

fn finish(path: &Path, bytes: Vec<u8>) -> Result<()> {
    let name = path.to_string_lossy();
    if name.ends_with(".gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        let gz = enc.finish().map_err(|e| Error::io(path, e))?;
        write_atomic(path, &gz)
    } else {
        write_atomic(path, &bytes)
    }
}

fn check_dims(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&n| n > i16::MAX as usize) {
        return Err(Error::input(format!("axis too long for NIfTI-1: {shape:?}")));
    }
    Ok(())
}

/// Write a volume as float64 (lossless).
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    check_dims(v.shape())?;
    let data = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    finish(
        path,
        encode(Encoded {
            shape: v.shape(),
            spacing: v.spacing(),
            extra_dims: &[],
            datatype: DT_FLOAT64,
            intent_code: 0,
            intent_p1: 0.0,
            data,
        }),
    )
}

/// Write labels as int16 with the label intent and the label count in `intent_p1`.
pub fn write_labelmap(m: &LabelMap, path: &Path) -> Result<()> {
    check_dims(m.shape())?;
    if m.num_labels() > i16::MAX as usize {
        return Err(Error::input("too many labels for int16 storage"));
    }
    let data = m
        .labels()
        .iter()
        .flat_map(|&l| (l as i16).to_le_bytes())
        .collect();
    finish(
        path,
        encode(Encoded {
            shape: m.shape(),
            spacing: m.spacing(),
            extra_dims: &[],
            datatype: DT_INT16,
            intent_code: INTENT_LABEL,
            intent_p1: m.num_labels() as f64,
            data,
        }),
    )
}

/// Write a field with dims `(x, y, z, 1, D)`, components x-first.
pub fn write_field(f: &DisplacementField, path: &Path) -> Result<()> {
    check_dims(f.shape())?;
    let d = f.ndim();
    let mut data = Vec::with_capacity(8 * f.data().len());
    for c in 0..d {
        for x in f.component(d - 1 - c) {
            data.extend_from_slice(&x.to_le_bytes());
        }
    }
    let unit = vec![1.0; d];
    finish(
        path,
        encode(Encoded {
            shape: f.shape(),
            spacing: &unit,
            extra_dims: &[1, d],
            datatype: DT_FLOAT64,
            intent_code: INTENT_VECTOR,
            intent_p1: 0.0,
            data,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::warp_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: &[usize], spacing: &[f64], rng: &mut ChaCha8Rng) -> Volume {
        let data = (0..num_voxels(shape)).map(|_| rng.random_range(-5.0..5.0)).collect();
        Volume::new(shape.to_vec(), spacing.to_vec(), data).unwrap()
    }

    #[test]
    fn volume_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cases: [(&[usize], &[f64]); 3] = [
            (&[8, 8, 8], &[1.0, 1.0, 1.0]),
            (&[5, 7], &[0.7, 1.3]),
            (&[3, 4, 6], &[2.0, 0.1, 1.5]),
        ];
        for (i, (shape, spacing)) in cases.iter().enumerate() {
            let v = random_volume(shape, spacing, &mut rng);
            for ext in ["nii", "nii.gz"] {
                let p = dir.path().join(format!("v{i}.{ext}"));
                write_volume(&v, &p).unwrap();
                let back = read_volume(&p).unwrap();
                assert_eq!(back.shape(), v.shape());
                assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
                assert!(back.spacing().iter().zip(v.spacing()).all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn two_d_is_stored_with_unit_third_axis() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(&[4, 6], &[1.0, 2.0], &mut ChaCha8Rng::seed_from_u64(1));
        let p = dir.path().join("a.nii");
        write_volume(&v, &p).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert_eq!(i16_at(&b, 40), 3);
        assert_eq!((i16_at(&b, 42), i16_at(&b, 44), i16_at(&b, 46)), (6, 4, 1));
        assert_eq!(f32_at(&b, 80), 2.0);
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn truncated_and_malformed_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(&[6, 6], &[1.0, 1.0], &mut ChaCha8Rng::seed_from_u64(2));
        let p = dir.path().join("t.nii");
        write_volume(&v, &p).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 9]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
        let mut bad_magic = full.clone();
        bad_magic[344] = b'x';
        std::fs::write(&p, &bad_magic).unwrap();
        assert!(read_volume(&p).unwrap_err().to_string().contains("magic"));
        let mut big = full.clone();
        big[0..4].copy_from_slice(&348i32.to_be_bytes());
        std::fs::write(&p, &big).unwrap();
        assert!(read_volume(&p).unwrap_err().to_string().contains("big-endian"));
        let mut dt = full;
        dt[70..72].copy_from_slice(&32i16.to_le_bytes());
        std::fs::write(&p, &dt).unwrap();
        assert!(read_volume(&p).unwrap_err().to_string().contains("datatype"));
    }

    #[test]
    fn reads_scaled_float32() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_data(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = dir.path().join("f.nii");
        write_volume(&v, &p).unwrap();
        let mut b = std::fs::read(&p).unwrap();
        // rewrite as float32 with slope 2, offset 1
        let off = f32_at(&b, 108) as usize;
        b.truncate(off);
        for x in [1.0f32, 2.0, 3.0, 4.0] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b[70..72].copy_from_slice(&DT_FLOAT32.to_le_bytes());
        b[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        b[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&p, &b).unwrap();
        assert_eq!(read_volume(&p).unwrap().data(), &[3.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn labelmap_round_trip_keeps_label_count() {
        let dir = tempfile::tempdir().unwrap();
        let m = LabelMap::new(vec![3, 4], vec![1.0, 0.5], 7, (0..12).map(|i| i % 3).collect()).unwrap();
        let p = dir.path().join("l.nii.gz");
        write_labelmap(&m, &p).unwrap();
        assert_eq!(read_labelmap(&p).unwrap(), m);
        let v = Volume::from_data(vec![2, 2], vec![0.5; 4]).unwrap();
        let q = dir.path().join("f.nii");
        write_volume(&v, &q).unwrap();
        assert!(read_labelmap(&q).is_err());
    }

    #[test]
    fn field_round_trip_preserves_warp() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in [vec![6usize, 9], vec![4, 5, 6]] {
            let n = num_voxels(&shape) * shape.len();
            let f = DisplacementField::new(shape.clone(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let p = dir.path().join("u.nii.gz");
            write_field(&f, &p).unwrap();
            let back = read_field(&p).unwrap();
            assert_eq!(back, f);
            let v = random_volume(&shape, &vec![1.0; shape.len()], &mut rng);
            assert_eq!(warp_scalar(&v, &back).unwrap(), warp_scalar(&v, &f).unwrap());
            let b = decompress(&p, std::fs::read(&p).unwrap()).unwrap();
            assert_eq!(i16_at(&b, 68), INTENT_VECTOR);
            assert_eq!(i16_at(&b, 40 + 2 * 5) as usize, shape.len());
        }
    }
}
