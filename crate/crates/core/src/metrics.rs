//! Image and volume similarity metrics and en-face projections.

use std::path::Path;

use ndarray::{Array2, ArrayView, ArrayView2, Dimension};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volume::Volume;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    ImageTooSmall { height: usize, width: usize, window: usize },
    #[error("invalid layer bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid SSIM configuration: {0}")]
    InvalidConfig(String),
    #[error("bounds file {path}: {reason}")]
    BoundsFile { path: String, reason: String },
}

fn same_shape<D: Dimension>(a: &ArrayView<f32, D>, b: &ArrayView<f32, D>) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

pub fn mae<D: Dimension>(a: ArrayView<f32, D>, b: ArrayView<f32, D>) -> Result<f64, MetricsError> {
    same_shape(&a, &b)?;
    let n = a.len().max(1) as f64;
    Ok(a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / n)
}

pub fn mse<D: Dimension>(a: ArrayView<f32, D>, b: ArrayView<f32, D>) -> Result<f64, MetricsError> {
    same_shape(&a, &b)?;
    let n = a.len().max(1) as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(MetricsError::InvalidConfig(format!("window {} must be odd", self.window)));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0 && self.dynamic_range > 0.0) {
            return Err(MetricsError::InvalidConfig("sigma, K1, K2 and L must be positive".into()));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - r;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }
}

/// Valid-region separable filtering of `img` with `k` along both axes.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..n).map(|j| k[j] * img[[y, x + j]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|i| k[i] * rows[[y + i, x]]).sum();
        }
    }
    out
}

/// Local SSIM map over the valid interior.
pub fn ssim_map(a: ArrayView2<f32>, b: ArrayView2<f32>, cfg: &SsimConfig) -> Result<Array2<f64>, MetricsError> {
    cfg.validate()?;
    same_shape(&a, &b)?;
    let (h, w) = a.dim();
    if h < cfg.window || w < cfg.window {
        return Err(MetricsError::ImageTooSmall { height: h, width: w, window: cfg.window });
    }
    let k = cfg.kernel();
    let a = a.mapv(f64::from);
    let b = b.mapv(f64::from);
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let e_aa = filter_valid(&(&a * &a), &k);
    let e_bb = filter_valid(&(&b * &b), &k);
    let e_ab = filter_valid(&(&a * &b), &k);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut map = Array2::<f64>::zeros(mu_a.dim());
    ndarray::Zip::from(&mut map)
        .and(&mu_a)
        .and(&mu_b)
        .and(&e_aa)
        .and(&e_bb)
        .and(&e_ab)
        .for_each(|m, &ma, &mb, &aa, &bb, &ab| {
            let va = aa - ma * ma;
            let vb = bb - mb * mb;
            let cov = ab - ma * mb;
            *m = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        });
    Ok(map)
}

pub fn ssim(a: ArrayView2<f32>, b: ArrayView2<f32>, cfg: &SsimConfig) -> Result<f64, MetricsError> {
    let map = ssim_map(a, b, cfg)?;
    Ok(map.sum() / map.len() as f64)
}

/// Mean of the per-window variance over every valid `size x size` window.
pub fn mean_local_variance(img: ArrayView2<f32>, size: usize) -> Result<f64, MetricsError> {
    let (h, w) = img.dim();
    if size == 0 || h < size || w < size {
        return Err(MetricsError::ImageTooSmall { height: h, width: w, window: size });
    }
    let n = (size * size) as f64;
    let mut total = 0.0;
    for y in 0..=h - size {
        for x in 0..=w - size {
            let win = img.slice(ndarray::s![y..y + size, x..x + size]);
            let mean = win.iter().map(|&v| v as f64).sum::<f64>() / n;
            total += win.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        }
    }
    Ok(total / ((h + 1 - size) * (w + 1 - size)) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mae: f64,
    pub mse: f64,
    pub ssim: f64,
}

impl ImageMetrics {
    pub fn between(a: ArrayView2<f32>, b: ArrayView2<f32>, cfg: &SsimConfig) -> Result<Self, MetricsError> {
        Ok(ImageMetrics {
            mae: mae(a, b)?,
            mse: mse(a, b)?,
            ssim: ssim(a, b, cfg)?,
        })
    }
}

/// Metrics averaged over corresponding B-scans of two volumes.
pub fn bscan_metrics(a: &Volume, b: &Volume, cfg: &SsimConfig) -> Result<ImageMetrics, MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::ShapeMismatch(a.dims().to_vec(), b.dims().to_vec()));
    }
    let per: Vec<ImageMetrics> = (0..a.n_scans())
        .into_par_iter()
        .map(|i| ImageMetrics::between(a.bscan(i), b.bscan(i), cfg))
        .collect::<Result<_, _>>()?;
    let n = per.len().max(1) as f64;
    Ok(ImageMetrics {
        mae: per.iter().map(|m| m.mae).sum::<f64>() / n,
        mse: per.iter().map(|m| m.mse).sum::<f64>() / n,
        ssim: per.iter().map(|m| m.ssim).sum::<f64>() / n,
    })
}

/// Per-column axial range `[upper, lower)`, indexed `(scan, lateral)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerBounds {
    pub upper: Array2<usize>,
    pub lower: Array2<usize>,
}

impl LayerBounds {
    pub fn flat(n_scans: usize, n_lateral: usize, upper: usize, lower: usize) -> Self {
        LayerBounds {
            upper: Array2::from_elem((n_scans, n_lateral), upper),
            lower: Array2::from_elem((n_scans, n_lateral), lower),
        }
    }

    pub fn full(v: &Volume) -> Self {
        Self::flat(v.n_scans(), v.n_lateral(), 0, v.n_axial())
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<(), MetricsError> {
        let [s, a, l] = dims;
        if self.upper.dim() != (s, l) || self.lower.dim() != (s, l) {
            return Err(MetricsError::InvalidBounds(format!(
                "bounds cover {:?}, volume has {s} scans x {l} columns",
                self.upper.dim()
            )));
        }
        for ((idx, &u), &lo) in self.upper.indexed_iter().zip(self.lower.iter()) {
            if u >= lo || lo > a {
                return Err(MetricsError::InvalidBounds(format!(
                    "column {idx:?}: [{u}, {lo}) outside 0..{a} or empty"
                )));
            }
        }
        Ok(())
    }

    pub fn from_file_repr(f: &BoundsFile, n_scans: usize, n_lateral: usize) -> Result<Self, MetricsError> {
        match f {
            BoundsFile::Constant { upper, lower } => Ok(Self::flat(n_scans, n_lateral, *upper, *lower)),
            BoundsFile::PerScan { scans } => {
                if scans.len() != n_scans {
                    return Err(MetricsError::InvalidBounds(format!(
                        "{} scan entries for {n_scans} scans",
                        scans.len()
                    )));
                }
                let mut b = Self::flat(n_scans, n_lateral, 0, 0);
                for (s, cols) in scans.iter().enumerate() {
                    if cols.len() != 1 && cols.len() != n_lateral {
                        return Err(MetricsError::InvalidBounds(format!(
                            "scan {s}: {} pairs, expected 1 or {n_lateral}",
                            cols.len()
                        )));
                    }
                    for l in 0..n_lateral {
                        let [u, lo] = cols[if cols.len() == 1 { 0 } else { l }];
                        b.upper[[s, l]] = u;
                        b.lower[[s, l]] = lo;
                    }
                }
                Ok(b)
            }
        }
    }

    pub fn to_file_repr(&self) -> BoundsFile {
        let scans = self
            .upper
            .outer_iter()
            .zip(self.lower.outer_iter())
            .map(|(u, l)| u.iter().zip(l.iter()).map(|(&u, &l)| [u, l]).collect())
            .collect();
        BoundsFile::PerScan { scans }
    }

    /// Reads a bounds file and checks it against `dims`.
    pub fn load(path: impl AsRef<Path>, dims: [usize; 3]) -> Result<Self, MetricsError> {
        let path = path.as_ref();
        let err = |reason: String| MetricsError::BoundsFile {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let repr: BoundsFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let b = Self::from_file_repr(&repr, dims[0], dims[2])?;
        b.validate(dims)?;
        Ok(b)
    }
}

/// `{"upper": u, "lower": l}` or `{"scans": [[[u, l], ...], ...]}`, where
/// each scan lists one pair per lateral column or a single shared pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundsFile {
    Constant { upper: usize, lower: usize },
    PerScan { scans: Vec<Vec<[usize; 2]>> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionStat {
    #[default]
    Mean,
    Sum,
    Max,
}

/// Un-normalized projection along the axial axis, shape `(n_scans, n_lateral)`.
pub fn enface_projection_raw(
    v: &Volume,
    bounds: Option<&LayerBounds>,
    stat: ProjectionStat,
) -> Result<Array2<f32>, MetricsError> {
    if let Some(b) = bounds {
        b.validate(v.dims())?;
    }
    let [s, a, l] = v.dims();
    let mut out = Array2::<f32>::zeros((s, l));
    for i in 0..s {
        let scan = v.bscan(i);
        for x in 0..l {
            let (u, lo) = bounds.map_or((0, a), |b| (b.upper[[i, x]], b.lower[[i, x]]));
            let col = scan.slice(ndarray::s![u..lo, x]);
            out[[i, x]] = match stat {
                ProjectionStat::Mean => (col.iter().map(|&p| p as f64).sum::<f64>() / (lo - u) as f64) as f32,
                ProjectionStat::Sum => col.iter().map(|&p| p as f64).sum::<f64>() as f32,
                ProjectionStat::Max => col.iter().copied().fold(f32::MIN, f32::max),
            };
        }
    }
    Ok(out)
}

/// Divides by the maximum; an all-zero (or non-positive) image is returned unchanged.
pub fn normalize_by_max(mut img: Array2<f32>) -> Array2<f32> {
    let m = img.iter().copied().fold(f32::MIN, f32::max);
    if m > 0.0 {
        img.mapv_inplace(|v| v / m);
    }
    img
}

/// Mean projection normalized to `[0, 1]` by its maximum.
pub fn enface_projection(v: &Volume, bounds: Option<&LayerBounds>) -> Result<Array2<f32>, MetricsError> {
    enface_projection_with(v, bounds, ProjectionStat::Mean)
}

pub fn enface_projection_with(
    v: &Volume,
    bounds: Option<&LayerBounds>,
    stat: ProjectionStat,
) -> Result<Array2<f32>, MetricsError> {
    enface_projection_raw(v, bounds, stat).map(normalize_by_max)
}

/// B-scan averages plus full and (optionally) segmented projection metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bscans: ImageMetrics,
    pub projection: ImageMetrics,
    pub segmented_projection: Option<ImageMetrics>,
}

pub fn evaluate(
    a: &Volume,
    b: &Volume,
    bounds: Option<&LayerBounds>,
    cfg: &SsimConfig,
) -> Result<EvalReport, MetricsError> {
    let bscans = bscan_metrics(a, b, cfg)?;
    let pa = enface_projection(a, None)?;
    let pb = enface_projection(b, None)?;
    let projection = ImageMetrics::between(pa.view(), pb.view(), cfg)?;
    let segmented_projection = bounds
        .map(|bd| {
            let pa = enface_projection(a, Some(bd))?;
            let pb = enface_projection(b, Some(bd))?;
            ImageMetrics::between(pa.view(), pb.view(), cfg)
        })
        .transpose()?;
    Ok(EvalReport {
        bscans,
        projection,
        segmented_projection,
    })
}

/// 8-bit grayscale encoding of a `[0, 1]` image.
pub fn to_gray8(img: ArrayView2<f32>) -> image::GrayImage {
    let (h, w) = img.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(img[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}
