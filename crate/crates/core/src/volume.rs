//! The `OCTAVOL1` volume container, normalization and axial padding.
//!
//! On-disk layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `OCTAVOL1`                        |
//! | 8      | 12   | `n_scans`, `n_axial`, `n_lateral` (u32) |
//! | 20     | 1    | dtype code (0 = f32 LE)                 |
//! | 21     | 4    | `meta_len` (u32)                        |
//! | 25     | n    | meta block, UTF-8 JSON object or empty  |
//! | 25 + n | 4·N  | payload, scan-major / axial / lateral   |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

pub const VOLUME_MAGIC: &[u8; 8] = b"OCTAVOL1";
pub const DTYPE_F32_LE: u8 = 0;
/// Byte length of the fixed part of the header (everything before the meta block).
pub const FIXED_HEADER_LEN: usize = 25;
/// Default mutual axial size volumes are padded to.
pub const DEFAULT_AXIAL_TARGET: usize = 480;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("bad magic at offset {offset}: expected \"OCTAVOL1\"")]
    BadMagic { offset: usize },
    #[error("truncated file at offset {offset}: needed {needed} more bytes, found {found}")]
    TruncatedFile {
        offset: usize,
        needed: usize,
        found: usize,
    },
    #[error("unsupported dtype code {code} at offset {offset}")]
    UnsupportedDtype { code: u8, offset: usize },
    #[error("invalid dimensions {dims:?} at offset {offset}: every dimension must be >= 1")]
    BadDims { dims: [u32; 3], offset: usize },
    #[error("malformed meta block at offset {offset}: {reason}")]
    BadMeta { offset: usize, reason: String },
    #[error("{extra} unexpected trailing bytes at offset {offset}")]
    TrailingData { offset: usize, extra: usize },
    #[error("axial size {n_axial} exceeds padding target {target}")]
    AxialTooLarge { n_axial: usize, target: usize },
    #[error("data length {len} does not match dimensions {dims:?}")]
    LengthMismatch { len: usize, dims: [usize; 3] },
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How the normalization maximum is scoped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeScope {
    #[default]
    PerVolume,
    PerBScan,
}

/// A 3-D scalar field indexed `(scan, axial, lateral)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub meta: BTreeMap<String, String>,
}

impl Volume {
    pub fn new(data: Array3<f32>) -> Self {
        Volume {
            data,
            meta: BTreeMap::new(),
        }
    }

    pub fn zeros(n_scans: usize, n_axial: usize, n_lateral: usize) -> Self {
        Volume::new(Array3::zeros((n_scans, n_axial, n_lateral)))
    }

    /// Builds a volume from a flat scan-major buffer.
    pub fn from_vec(dims: [usize; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        let len = data.len();
        Array3::from_shape_vec((dims[0], dims[1], dims[2]), data)
            .map(Volume::new)
            .map_err(|_| VolumeError::LengthMismatch { len, dims })
    }

    pub fn n_scans(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_axial(&self) -> usize {
        self.data.dim().1
    }

    pub fn n_lateral(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> [usize; 3] {
        let (s, a, l) = self.data.dim();
        [s, a, l]
    }

    pub fn bscan(&self, index: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), index)
    }

    pub fn bscan_mut(&mut self, index: usize) -> ArrayViewMut2<'_, f32> {
        self.data.index_axis_mut(Axis(0), index)
    }

    pub fn set_bscan(&mut self, index: usize, scan: ArrayView2<'_, f32>) {
        self.bscan_mut(index).assign(&scan);
    }

    pub fn bscans(&self) -> impl Iterator<Item = ArrayView2<'_, f32>> {
        self.data.outer_iter()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Divides every value by the volume-wide maximum. All-zero (or non-positive)
/// volumes are returned unchanged.
pub fn normalize(v: &Volume) -> Volume {
    normalize_with(v, NormalizeScope::PerVolume)
}

pub fn normalize_with(v: &Volume, scope: NormalizeScope) -> Volume {
    let mut out = v.clone();
    match scope {
        NormalizeScope::PerVolume => scale_by_max(out.data.view_mut()),
        NormalizeScope::PerBScan => {
            for scan in out.data.outer_iter_mut() {
                scale_by_max(scan);
            }
        }
    }
    out
}

/// Normalizes several volumes by their shared maximum.
pub fn normalize_dataset(volumes: &mut [Volume]) {
    let max = volumes.iter().map(Volume::max).fold(0.0f32, f32::max);
    if max > 0.0 {
        for v in volumes {
            v.data.mapv_inplace(|x| x / max);
        }
    }
}

fn scale_by_max<D: ndarray::Dimension>(mut view: ndarray::ArrayViewMut<'_, f32, D>) {
    let max = view.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        view.mapv_inplace(|x| x / max);
    }
}

/// Appends zero rows at the bottom (high axial indices) up to `target`.
pub fn pad_axial(v: &Volume, target: usize) -> Result<Volume, VolumeError> {
    let [s, a, l] = v.dims();
    if a > target {
        return Err(VolumeError::AxialTooLarge {
            n_axial: a,
            target,
        });
    }
    let mut data = Array3::zeros((s, target, l));
    data.slice_mut(ndarray::s![.., ..a, ..]).assign(&v.data);
    Ok(Volume {
        data,
        meta: v.meta.clone(),
    })
}

/// Serializes a volume into its container bytes.
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let meta = if v.meta.is_empty() {
        Vec::new()
    } else {
        serde_json::to_vec(&v.meta).expect("string map serializes")
    };
    let [s, a, l] = v.dims();
    let mut out = Vec::with_capacity(FIXED_HEADER_LEN + meta.len() + 4 * s * a * l);
    out.extend_from_slice(VOLUME_MAGIC);
    for d in [s, a, l] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(DTYPE_F32_LE);
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for x in v.data.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn take(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], VolumeError> {
    let avail = bytes.len().saturating_sub(offset);
    if avail < len {
        return Err(VolumeError::TruncatedFile {
            offset,
            needed: len,
            found: avail,
        });
    }
    Ok(&bytes[offset..offset + len])
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, VolumeError> {
    let b = take(bytes, offset, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses container bytes.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume, VolumeError> {
    let magic = take(bytes, 0, 8)?;
    if magic != VOLUME_MAGIC {
        return Err(VolumeError::BadMagic { offset: 0 });
    }
    let raw_dims = [read_u32(bytes, 8)?, read_u32(bytes, 12)?, read_u32(bytes, 16)?];
    if raw_dims.contains(&0) {
        let bad = raw_dims.iter().position(|&d| d == 0).unwrap_or(0);
        return Err(VolumeError::BadDims {
            dims: raw_dims,
            offset: 8 + 4 * bad,
        });
    }
    let code = take(bytes, 20, 1)?[0];
    if code != DTYPE_F32_LE {
        return Err(VolumeError::UnsupportedDtype { code, offset: 20 });
    }
    let meta_len = read_u32(bytes, 21)? as usize;
    let meta_bytes = take(bytes, FIXED_HEADER_LEN, meta_len)?;
    let meta = if meta_len == 0 {
        BTreeMap::new()
    } else {
        let text = std::str::from_utf8(meta_bytes).map_err(|e| VolumeError::BadMeta {
            offset: FIXED_HEADER_LEN + e.valid_up_to(),
            reason: "invalid UTF-8".into(),
        })?;
        serde_json::from_str(text).map_err(|e| VolumeError::BadMeta {
            offset: FIXED_HEADER_LEN,
            reason: e.to_string(),
        })?
    };

    let dims = raw_dims.map(|d| d as usize);
    let count = dims[0] * dims[1] * dims[2];
    let start = FIXED_HEADER_LEN + meta_len;
    let payload = take(bytes, start, 4 * count)?;
    let end = start + 4 * count;
    if bytes.len() > end {
        return Err(VolumeError::TrailingData {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut v = Volume::from_vec(dims, data)?;
    v.meta = meta;
    Ok(v)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_volume(&bytes)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let path = path.as_ref();
    fs::write(path, encode_volume(v)).map_err(io_err(path))
}

/// Reads a headerless float32-LE file with the given `(scans, axial, lateral)` dims.
pub fn import_raw(path: impl AsRef<Path>, dims: [usize; 3]) -> Result<Volume, VolumeError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    let count = dims[0] * dims[1] * dims[2];
    if dims.contains(&0) {
        return Err(VolumeError::BadDims {
            dims: dims.map(|d| d as u32),
            offset: 0,
        });
    }
    let payload = take(&bytes, 0, 4 * count)?;
    if bytes.len() > 4 * count {
        return Err(VolumeError::TrailingData {
            offset: 4 * count,
            extra: bytes.len() - 4 * count,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::from_vec(dims, data)
}

/// Convenience for building a 2-D field from rows.
pub fn plane_from_rows(rows: &[&[f32]]) -> Array2<f32> {
    let h = rows.len();
    let w = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((h, w), |(r, c)| rows[r][c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_voxel_encoding() {
        let v = Volume::from_vec([1, 1, 1], vec![0.5]).unwrap();
        let bytes = encode_volume(&v);
        assert_eq!(bytes.len(), FIXED_HEADER_LEN + 4);
        assert_eq!(&bytes[..8], b"OCTAVOL1");
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(bytes[20], 0);
        assert_eq!(&bytes[21..25], &[0, 0, 0, 0]);
        assert_eq!(&bytes[25..], &[0x00, 0x00, 0x00, 0x3F]);
    }

    #[test]
    fn zero_volume_payload() {
        let bytes = encode_volume(&Volume::zeros(2, 2, 2));
        assert_eq!(&bytes[FIXED_HEADER_LEN..], &[0u8; 32]);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_volume(&Volume::zeros(1, 1, 1));
        bytes[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(
            decode_volume(&bytes),
            Err(VolumeError::BadMagic { offset: 0 })
        ));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_volume(&Volume::zeros(2, 2, 2));
        bytes.truncate(FIXED_HEADER_LEN + 7 * 4);
        match decode_volume(&bytes) {
            Err(VolumeError::TruncatedFile {
                offset,
                needed,
                found,
            }) => {
                assert_eq!(offset, FIXED_HEADER_LEN);
                assert_eq!(needed, 32);
                assert_eq!(found, 28);
            }
            other => panic!("expected TruncatedFile, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_dtype_and_zero_dims() {
        let mut bytes = encode_volume(&Volume::zeros(1, 1, 1));
        bytes[20] = 3;
        assert!(matches!(
            decode_volume(&bytes),
            Err(VolumeError::UnsupportedDtype { code: 3, offset: 20 })
        ));
        let mut bytes = encode_volume(&Volume::zeros(1, 1, 1));
        bytes[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode_volume(&bytes),
            Err(VolumeError::BadDims { offset: 12, .. })
        ));
    }

    #[test]
    fn meta_survives() {
        let mut v = Volume::zeros(1, 2, 3);
        v.meta.insert("fov".into(), "3mm".into());
        let back = decode_volume(&encode_volume(&v)).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn normalize_examples() {
        let v = Volume::from_vec([1, 1, 3], vec![0.0, 2.0, 4.0]).unwrap();
        let n = normalize(&v);
        assert_eq!(n.data.as_slice().unwrap(), &[0.0, 0.5, 1.0]);
        let z = Volume::zeros(2, 2, 2);
        assert_eq!(normalize(&z), z);
        let one = Volume::from_vec([1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(normalize(&one), one);
    }

    #[test]
    fn per_bscan_scope() {
        let v = Volume::from_vec([2, 1, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let n = normalize_with(&v, NormalizeScope::PerBScan);
        assert_eq!(n.data.as_slice().unwrap(), &[0.5, 1.0, 0.5, 1.0]);
    }

    #[test]
    fn pad_paper_sizes() {
        for (a, zeros) in [(465usize, 15usize), (433, 47)] {
            let v = Volume::new(Array3::from_elem((2, a, 3), 0.25));
            let p = pad_axial(&v, DEFAULT_AXIAL_TARGET).unwrap();
            assert_eq!(p.n_axial(), 480);
            assert!(p.data.slice(ndarray::s![.., a.., ..]).iter().all(|&x| x == 0.0));
            assert_eq!(480 - a, zeros);
            assert_eq!(p.data.slice(ndarray::s![.., ..a, ..]), v.data);
        }
        let v = Volume::new(Array3::from_elem((1, 480, 2), 0.5));
        assert_eq!(pad_axial(&v, 480).unwrap(), v);
        assert!(matches!(
            pad_axial(&Volume::zeros(1, 481, 1), 480),
            Err(VolumeError::AxialTooLarge { .. })
        ));
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (1usize..5, 1usize..6, 1usize..6).prop_flat_map(|(s, a, l)| {
            proptest::collection::vec(any::<f32>(), s * a * l)
                .prop_map(move |d| Volume::from_vec([s, a, l], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(v in arb_volume()) {
            let back = decode_volume(&encode_volume(&v)).unwrap();
            let a: Vec<u32> = v.data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.dims(), v.dims());
        }

        #[test]
        fn normalize_idempotent(d in proptest::collection::vec(0.0f32..100.0, 1..40)) {
            let n = d.len();
            let v = Volume::from_vec([1, 1, n], d).unwrap();
            let once = normalize(&v);
            prop_assert_eq!(normalize(&once), once.clone());
            if v.max() > 0.0 {
                prop_assert!(once.data.iter().any(|&x| x == 1.0));
                prop_assert!(once.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn pad_preserves_sum(d in proptest::collection::vec(0.0f32..1.0, 12), extra in 0usize..5) {
            let v = Volume::from_vec([1, 3, 4], d).unwrap();
            let p = pad_axial(&v, 3 + extra).unwrap();
            let total = |v: &Volume| v.data.iter().map(|&x| x as f64).sum::<f64>();
            prop_assert_eq!(total(&p), total(&v));
        }
    }
}
