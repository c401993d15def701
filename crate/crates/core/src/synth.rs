//! Paired OCT/OCTA phantoms with known vessels, layer bounds and defects.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::{BoundsFile, LayerBounds};
use crate::volume::Volume;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid phantom configuration: {0}")]
    InvalidConfig(String),
    #[error("defect index {index} out of range for {n_scans} scans")]
    IndexOutOfRange { index: usize, n_scans: usize },
    #[error("scan {0} listed twice")]
    DuplicateIndex(usize),
    #[error("cannot parse defect list entry {0:?}")]
    BadDefectSpec(String),
}

/// One retinal band below the surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Thickness as a fraction of the axial extent.
    pub thickness: f64,
    pub reflectivity: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    /// `(n_scans, n_axial, n_lateral)`.
    pub dims: [usize; 3],
    /// Mean surface depth as a fraction of the axial extent.
    pub surface_depth: f64,
    /// Peak surface undulation in pixels.
    pub surface_amplitude: f64,
    pub layers: Vec<Layer>,
    /// Vessels live between the surface and the bottom of this layer.
    pub vessel_layer: usize,
    pub vitreous_reflectivity: f32,
    pub deep_reflectivity: f32,
    pub vessel_count: usize,
    pub vessel_radius: [f64; 2],
    pub vessel_reflectivity_boost: f32,
    /// Factor applied to OCT below a vessel.
    pub shadow: f32,
    pub vessel_flow: f32,
    pub tissue_flow: f32,
    /// Multiplicative noise ratio.
    pub speckle: f32,
    /// Additive OCTA noise amplitude.
    pub octa_noise: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let layer = |thickness, reflectivity| Layer { thickness, reflectivity };
        PhantomConfig {
            dims: [64, 96, 128],
            surface_depth: 0.2,
            surface_amplitude: 4.0,
            layers: vec![
                layer(0.06, 0.85),
                layer(0.08, 0.45),
                layer(0.08, 0.65),
                layer(0.06, 0.35),
                layer(0.10, 0.30),
                layer(0.05, 0.95),
            ],
            vessel_layer: 2,
            vitreous_reflectivity: 0.02,
            deep_reflectivity: 0.03,
            vessel_count: 12,
            vessel_radius: [1.0, 2.5],
            vessel_reflectivity_boost: 0.15,
            shadow: 0.5,
            vessel_flow: 0.85,
            tissue_flow: 0.08,
            speckle: 0.3,
            octa_noise: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn with_dims(dims: [usize; 3], seed: u64) -> Self {
        PhantomConfig {
            dims,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let [s, a, l] = self.dims;
        if s < 16 || a < 32 || l < 32 {
            return Err(SynthError::InvalidConfig(format!("dims {:?} below (16, 32, 32)", self.dims)));
        }
        if self.vessel_radius[0] < 1.0 || self.vessel_radius[1] < self.vessel_radius[0] {
            return Err(SynthError::InvalidConfig(format!(
                "vessel radius range {:?} must satisfy 1 <= min <= max",
                self.vessel_radius
            )));
        }
        if self.layers.is_empty() || self.vessel_layer >= self.layers.len() {
            return Err(SynthError::InvalidConfig("vessel layer must index an existing layer".into()));
        }
        let depth = self.surface_depth + self.layers.iter().map(|l| l.thickness).sum::<f64>();
        if self.surface_depth * a as f64 <= self.surface_amplitude + 1.0 || depth * a as f64 + self.surface_amplitude > a as f64 {
            return Err(SynthError::InvalidConfig("layers do not fit in the axial extent".into()));
        }
        if !(0.0..=1.0).contains(&self.speckle) || self.octa_noise < 0.0 {
            return Err(SynthError::InvalidConfig("speckle must be in [0, 1], noise non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefectKind {
    #[default]
    None,
    Blink,
    Motion,
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DefectKind::None => "none",
            DefectKind::Blink => "blink",
            DefectKind::Motion => "motion",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Defect {
    pub index: usize,
    pub kind: DefectKind,
}

/// Parses `"7:blink,12:motion"`. An empty string is an empty list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DefectList(pub Vec<Defect>);

impl FromStr for DefectList {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Vec::new();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let bad = || SynthError::BadDefectSpec(item.to_string());
            let (idx, kind) = item.split_once(':').ok_or_else(bad)?;
            let index = idx.trim().parse().map_err(|_| bad())?;
            let kind = match kind.trim().to_ascii_lowercase().as_str() {
                "blink" => DefectKind::Blink,
                "motion" => DefectKind::Motion,
                _ => return Err(bad()),
            };
            out.push(Defect { index, kind });
        }
        Ok(DefectList(out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomTruth {
    /// 1 inside a vessel, 0 elsewhere.
    pub vessels: Array3<u8>,
    /// Noise-free flow intensity on the OCTA scale.
    pub clean_flow: Volume,
    pub bounds: LayerBounds,
    pub labels: Vec<DefectKind>,
}

impl PhantomTruth {
    pub fn defect_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&k| k != DefectKind::None).collect()
    }

    pub fn defect_indices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != DefectKind::None).collect()
    }

    pub fn to_file(&self) -> TruthFile {
        TruthFile {
            dims: [self.vessels.dim().0, self.vessels.dim().1, self.vessels.dim().2],
            labels: self.labels.clone(),
            bounds: self.bounds.to_file_repr(),
            vessel_voxels: self
                .vessels
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(i, _)| i)
                .collect(),
        }
    }
}

/// JSON form of [`PhantomTruth`] without the clean flow volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub dims: [usize; 3],
    pub labels: Vec<DefectKind>,
    pub bounds: BoundsFile,
    /// Flat `(scan, axial, lateral)` indices of vessel voxels.
    pub vessel_voxels: Vec<usize>,
}

pub struct Phantom {
    pub oct: Volume,
    pub octa: Volume,
    pub truth: PhantomTruth,
}

fn surface(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let [s, a, l] = cfg.dims;
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.2..1.0),
            )
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let base = cfg.surface_depth * a as f64;
    Array2::from_shape_fn((s, l), |(i, x)| {
        let u = i as f64 / s as f64;
        let v = x as f64 / l as f64;
        let h: f64 = waves
            .iter()
            .map(|&(fu, fv, ph, amp)| amp * (std::f64::consts::TAU * (fu * u + fv * v) + ph).sin())
            .sum();
        base + cfg.surface_amplitude * h / norm
    })
}

/// Layer boundaries per column: `edges[k]` is the top of layer `k`, the last
/// entry is the bottom of the deepest layer.
fn layer_edges(cfg: &PhantomConfig, top: f64) -> Vec<usize> {
    let a = cfg.dims[1] as f64;
    let mut edges = vec![top.round() as usize];
    let mut depth = top;
    for layer in &cfg.layers {
        depth += layer.thickness * a;
        edges.push(depth.round() as usize);
    }
    edges
}

struct Tube {
    points: Vec<[f64; 3]>,
    radius: f64,
}

/// Random-walk centerlines in the en-face plane at a slowly varying depth
/// inside the vessel band.
fn vessel_tubes(cfg: &PhantomConfig, top: &Array2<f64>, rng: &mut ChaCha8Rng) -> Vec<Tube> {
    let [s, a, l] = cfg.dims;
    let band_bottom = |i: usize, x: usize| layer_edges(cfg, top[[i, x]])[cfg.vessel_layer + 1] as f64;
    (0..cfg.vessel_count)
        .map(|_| {
            let radius = rng.gen_range(cfg.vessel_radius[0]..=cfg.vessel_radius[1]);
            let mut p = [rng.gen_range(0.0..s as f64), rng.gen_range(0.0..l as f64)];
            let mut theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut frac: f64 = rng.gen_range(0.3..0.7);
            let mut points = Vec::new();
            for _ in 0..4 * (s + l) {
                let (i, x) = (p[0] as usize, p[1] as usize);
                let t = top[[i, x]];
                let b = band_bottom(i, x);
                let lo = t + radius + 0.5;
                let hi = (b - radius - 0.5).max(lo);
                let depth = (t + frac * (b - t)).clamp(lo, hi).min(a as f64 - 1.0);
                points.push([p[0], depth, p[1]]);
                theta += rng.gen_range(-0.15..0.15);
                frac = (frac + rng.gen_range(-0.02..0.02)).clamp(0.2, 0.8);
                p[0] += 0.5 * theta.cos();
                p[1] += 0.5 * theta.sin();
                if p[0] < 0.0 || p[1] < 0.0 || p[0] >= s as f64 || p[1] >= l as f64 {
                    break;
                }
            }
            Tube { points, radius }
        })
        .collect()
}

/// Rasterizes tubes, returning the vessel mask and the normalized distance
/// to the nearest centerline (`0` center, `1` wall) inside vessels.
fn rasterize(dims: [usize; 3], tubes: &[Tube]) -> (Array3<u8>, Array3<f32>) {
    let mut mask = Array3::<u8>::zeros(dims);
    let mut dist = Array3::<f32>::from_elem(dims, f32::INFINITY);
    for tube in tubes {
        let r = tube.radius;
        let reach = r.ceil() as isize;
        for c in &tube.points {
            let ci = c.map(|v| v.round() as isize);
            for di in -reach..=reach {
                for da in -reach..=reach {
                    for dl in -reach..=reach {
                        let q = [ci[0] + di, ci[1] + da, ci[2] + dl];
                        if q.iter().zip(&dims).any(|(&v, &n)| v < 0 || v >= n as isize) {
                            continue;
                        }
                        let d2: f64 = (0..3).map(|k| (q[k] as f64 - c[k]).powi(2)).sum();
                        if d2 <= r * r {
                            let idx = [q[0] as usize, q[1] as usize, q[2] as usize];
                            mask[idx] = 1;
                            let nd = (d2.sqrt() / r) as f32;
                            if nd < dist[idx] {
                                dist[idx] = nd;
                            }
                        }
                    }
                }
            }
        }
    }
    (mask, dist)
}

fn scan_rng(seed: u64, stream: u64, scan: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(scan as u128 * (1 << 40));
    rng
}

fn normalize_max(mut v: Array3<f32>) -> Array3<f32> {
    let m = v.iter().copied().fold(0.0f32, f32::max);
    if m > 0.0 {
        v.mapv_inplace(|x| x / m);
    }
    v
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<Phantom, SynthError> {
    cfg.validate()?;
    let [s, a, l] = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let top = surface(cfg, &mut rng);
    let tubes = vessel_tubes(cfg, &top, &mut rng);
    let (vessels, dist) = rasterize(cfg.dims, &tubes);

    let mut upper = Array2::<usize>::zeros((s, l));
    let mut lower = Array2::<usize>::zeros((s, l));
    let mut oct_clean = Array3::<f32>::zeros((s, a, l));
    let mut flow = Array3::<f32>::zeros((s, a, l));
    for i in 0..s {
        for x in 0..l {
            let edges = layer_edges(cfg, top[[i, x]]);
            upper[[i, x]] = edges[0];
            lower[[i, x]] = edges[cfg.vessel_layer + 1];
            let mut shadowed = false;
            for z in 0..a {
                let mut r = if z < edges[0] {
                    cfg.vitreous_reflectivity
                } else if z >= *edges.last().unwrap() {
                    cfg.deep_reflectivity
                } else {
                    let k = edges.windows(2).position(|w| z >= w[0] && z < w[1]).unwrap();
                    cfg.layers[k].reflectivity
                };
                let in_vessel = vessels[[i, z, x]] != 0;
                if in_vessel {
                    r = (r + cfg.vessel_reflectivity_boost).min(1.0);
                    flow[[i, z, x]] = cfg.vessel_flow * (1.0 - 0.3 * dist[[i, z, x]]);
                } else {
                    if shadowed {
                        r *= cfg.shadow;
                    }
                    if z >= edges[0] {
                        flow[[i, z, x]] = cfg.tissue_flow;
                    }
                }
                if in_vessel {
                    shadowed = true;
                }
                oct_clean[[i, z, x]] = r;
            }
        }
    }

    let mut oct = oct_clean;
    let mut octa = flow.clone();
    let (sp, noise, seed) = (cfg.speckle, cfg.octa_noise, cfg.seed);
    let plane = a * l;
    let oct_s = oct.as_slice_mut().expect("standard layout");
    let octa_s = octa.as_slice_mut().expect("standard layout");
    oct_s
        .par_chunks_mut(plane)
        .zip(octa_s.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(i, (o, f))| {
            let mut rng = scan_rng(seed, 1, i);
            for v in o.iter_mut() {
                *v = (*v * (1.0 + sp * rng.gen_range(-1.0f32..1.0))).clamp(0.0, 1.0);
            }
            for v in f.iter_mut() {
                *v = (*v * (1.0 + sp * rng.gen_range(-1.0f32..1.0)) + noise * rng.gen::<f32>()).clamp(0.0, 1.0);
            }
        });

    Ok(Phantom {
        oct: Volume::new(normalize_max(oct)),
        octa: Volume::new(normalize_max(octa)),
        truth: PhantomTruth {
            vessels,
            clean_flow: Volume::new(flow),
            bounds: LayerBounds { upper, lower },
            labels: vec![DefectKind::None; s],
        },
    })
}

pub const DEFAULT_MOTION_GAIN: f32 = 3.0;

/// Blink zeroes a scan; motion replaces it with uniform noise whose mean is
/// `motion_gain` times the volume's mean scan intensity, clipped to 1.
pub fn inject_defects(
    octa: &Volume,
    truth: &PhantomTruth,
    defects: &[Defect],
    motion_gain: f32,
    seed: u64,
) -> Result<(Volume, PhantomTruth), SynthError> {
    let n = octa.n_scans();
    let mut seen = vec![false; n];
    for d in defects {
        if d.index >= n {
            return Err(SynthError::IndexOutOfRange { index: d.index, n_scans: n });
        }
        if std::mem::replace(&mut seen[d.index], true) {
            return Err(SynthError::DuplicateIndex(d.index));
        }
    }
    let mean = octa.data.iter().map(|&v| v as f64).sum::<f64>() / octa.data.len().max(1) as f64;
    let hi = (2.0 * motion_gain as f64 * mean) as f32;
    let mut out = octa.clone();
    let mut truth = truth.clone();
    if truth.labels.len() != n {
        truth.labels.resize(n, DefectKind::None);
    }
    for d in defects {
        let mut scan = out.bscan_mut(d.index);
        match d.kind {
            DefectKind::Blink => scan.fill(0.0),
            DefectKind::Motion => {
                let mut rng = scan_rng(seed, 2, d.index);
                scan.mapv_inplace(|_| (rng.gen::<f32>() * hi).min(1.0));
            }
            DefectKind::None => {}
        }
        truth.labels[d.index] = d.kind;
    }
    Ok((out, truth))
}

/// Picks `n_blink + n_motion` distinct scans at least `min_gap` apart,
/// shuffled between kinds.
pub fn random_defects(
    n_scans: usize,
    n_blink: usize,
    n_motion: usize,
    min_gap: usize,
    seed: u64,
) -> Result<Vec<Defect>, SynthError> {
    let total = n_blink + n_motion;
    if total > 0 && (total - 1) * min_gap.max(1) >= n_scans {
        return Err(SynthError::InvalidConfig(format!(
            "{total} defects {min_gap} apart do not fit in {n_scans} scans"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // spread the slack randomly over the gaps
    let slack = n_scans - 1 - total.saturating_sub(1) * min_gap.max(1);
    let mut cuts: Vec<usize> = (0..total).map(|_| rng.gen_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut kinds: Vec<DefectKind> = std::iter::repeat_n(DefectKind::Blink, n_blink)
        .chain(std::iter::repeat_n(DefectKind::Motion, n_motion))
        .collect();
    rand::seq::SliceRandom::shuffle(kinds.as_mut_slice(), &mut rng);
    Ok(cuts
        .into_iter()
        .enumerate()
        .zip(kinds)
        .map(|((k, c), kind)| Defect {
            index: c + k * min_gap.max(1),
            kind,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::flow_sums;

    fn small(seed: u64) -> PhantomConfig {
        PhantomConfig::with_dims([16, 48, 40], seed)
    }

    #[test]
    fn deterministic() {
        let a = generate_phantom(&small(3)).unwrap();
        let b = generate_phantom(&small(3)).unwrap();
        assert_eq!(a.oct, b.oct);
        assert_eq!(a.octa, b.octa);
        assert_eq!(a.truth, b.truth);
        let c = generate_phantom(&small(4)).unwrap();
        assert_ne!(a.octa, c.octa);
    }

    #[test]
    fn values_in_unit_range() {
        let p = generate_phantom(&small(1)).unwrap();
        for v in [&p.oct, &p.octa] {
            assert!(v.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
            assert_eq!(v.max(), 1.0);
        }
        p.truth.bounds.validate(p.octa.dims()).unwrap();
    }

    #[test]
    fn noiseless_bands_are_piecewise_constant() {
        let cfg = PhantomConfig {
            speckle: 0.0,
            vessel_count: 0,
            ..small(2)
        };
        let p = generate_phantom(&cfg).unwrap();
        let levels: std::collections::BTreeSet<u32> = p.oct.data.iter().map(|v| v.to_bits()).collect();
        assert!(levels.len() <= cfg.layers.len() + 2, "{} distinct levels", levels.len());
    }

    #[test]
    fn vessels_are_brighter_in_octa() {
        let p = generate_phantom(&small(5)).unwrap();
        let (mut inside, mut ni, mut tissue, mut nt) = (0.0, 0, 0.0, 0);
        for (((i, z, x), &m), &v) in p.truth.vessels.indexed_iter().zip(p.octa.data.iter()) {
            if m != 0 {
                inside += v as f64;
                ni += 1;
            } else if z >= p.truth.bounds.upper[[i, x]] && z < p.truth.bounds.lower[[i, x]] {
                tissue += v as f64;
                nt += 1;
            }
        }
        assert!(ni > 0);
        assert!(inside / ni as f64 > 3.0 * tissue / nt as f64);
    }

    #[test]
    fn blink_and_motion_injection() {
        let p = generate_phantom(&small(6)).unwrap();
        let list: DefectList = "7:blink, 3:motion".parse().unwrap();
        let (v, t) = inject_defects(&p.octa, &p.truth, &list.0, DEFAULT_MOTION_GAIN, 9).unwrap();
        let s = flow_sums(&v);
        assert_eq!(s[7], 0.0);
        let mut sorted = flow_sums(&p.octa);
        sorted.sort_by(f64::total_cmp);
        assert!(s[3] >= 2.0 * sorted[sorted.len() / 2]);
        assert_eq!(t.labels[7], DefectKind::Blink);
        assert_eq!(t.labels[3], DefectKind::Motion);
        assert_eq!(t.defect_indices(), vec![3, 7]);
        for i in (0..16).filter(|i| ![3, 7].contains(i)) {
            assert_eq!(v.bscan(i), p.octa.bscan(i));
        }
        let (same, _) = inject_defects(&p.octa, &p.truth, &[], DEFAULT_MOTION_GAIN, 9).unwrap();
        assert_eq!(same, p.octa);
    }

    #[test]
    fn injection_errors() {
        let p = generate_phantom(&small(6)).unwrap();
        let d = |index| Defect { index, kind: DefectKind::Blink };
        assert!(matches!(
            inject_defects(&p.octa, &p.truth, &[d(16)], 3.0, 0),
            Err(SynthError::IndexOutOfRange { index: 16, .. })
        ));
        assert!(matches!(
            inject_defects(&p.octa, &p.truth, &[d(2), d(2)], 3.0, 0),
            Err(SynthError::DuplicateIndex(2))
        ));
        assert!("4:smudge".parse::<DefectList>().is_err());
        assert_eq!("".parse::<DefectList>().unwrap(), DefectList::default());
    }

    #[test]
    fn random_defects_respect_gap() {
        for seed in 0..20 {
            let d = random_defects(128, 5, 5, 6, seed).unwrap();
            assert_eq!(d.len(), 10);
            assert!(d.windows(2).all(|w| w[1].index >= w[0].index + 6));
            assert!(d.last().unwrap().index < 128);
            assert_eq!(d.iter().filter(|x| x.kind == DefectKind::Blink).count(), 5);
        }
        assert!(random_defects(10, 3, 3, 5, 0).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_phantom(&PhantomConfig::with_dims([8, 48, 40], 0)).is_err());
        let cfg = PhantomConfig {
            vessel_radius: [0.5, 2.0],
            ..small(0)
        };
        assert!(matches!(generate_phantom(&cfg), Err(SynthError::InvalidConfig(_))));
    }
}
