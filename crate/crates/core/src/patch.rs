//! Lateral patching of B-scans: training-pair sampling, margin rejection,
//! overlapping inference plans and stitching.

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PatchError {
    #[error("scan width {width} is narrower than patch width {patch}")]
    ScanTooNarrow { width: usize, patch: usize },
    #[error("scan shapes differ: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("{0}")]
    InsufficientOverlap(String),
    #[error("patches do not match the stitch plan: {0}")]
    PlanMismatch(String),
}

/// A 2-D crop `(axial, lateral)` of a B-scan starting at lateral column `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub pixels: Array2<f32>,
    pub origin: usize,
    pub scan_index: usize,
}

impl Patch {
    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

pub fn crop(scan: ArrayView2<'_, f32>, origin: usize, width: usize, scan_index: usize) -> Patch {
    Patch {
        pixels: scan.slice(s![.., origin..origin + width]).to_owned(),
        origin,
        scan_index,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Pairs drawn per B-scan pair.
    pub count: usize,
    pub width: usize,
    /// Intensity above which a margin pixel counts as depicted tissue.
    pub tissue_threshold: f32,
    /// Rows of real image data before axial zero padding; `None` uses all rows.
    pub valid_rows: Option<usize>,
    /// Draw attempts allowed per requested pair.
    pub retry_factor: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            count: 100,
            width: 128,
            tissue_threshold: 0.1,
            valid_rows: None,
            retry_factor: 10,
        }
    }
}

/// True if the patch's top row or the last unpadded row holds tissue above
/// `tissue_threshold`, i.e. the retina was cut off by the image margin.
pub fn reject_margin_cropped(p: &Patch, tissue_threshold: f32, valid_rows: Option<usize>) -> bool {
    let h = p.height();
    if h == 0 {
        return false;
    }
    let bottom = valid_rows.unwrap_or(h).clamp(1, h) - 1;
    let over = |row: usize| p.pixels.row(row).iter().any(|&x| x > tissue_threshold);
    over(0) || over(bottom)
}

/// Draws up to `cfg.count` co-located (OCT, OCTA) patch pairs with uniformly
/// random origins, skipping pairs whose OCT patch is margin-cropped.
pub fn sample_training_patches(
    oct: ArrayView2<'_, f32>,
    octa: ArrayView2<'_, f32>,
    cfg: &SamplerConfig,
    scan_index: usize,
    seed: u64,
) -> Result<Vec<(Patch, Patch)>, PatchError> {
    if oct.dim() != octa.dim() {
        return Err(PatchError::ShapeMismatch {
            a: oct.dim(),
            b: octa.dim(),
        });
    }
    let width = oct.ncols();
    if width < cfg.width {
        return Err(PatchError::ScanTooNarrow {
            width,
            patch: cfg.width,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_origin = width - cfg.width;
    let mut pairs = Vec::with_capacity(cfg.count);
    let mut attempts = 0;
    while pairs.len() < cfg.count && attempts < cfg.retry_factor * cfg.count {
        attempts += 1;
        let origin = rng.gen_range(0..=max_origin);
        let x = crop(oct, origin, cfg.width, scan_index);
        if reject_margin_cropped(&x, cfg.tissue_threshold, cfg.valid_rows) {
            continue;
        }
        pairs.push((x, crop(octa, origin, cfg.width, scan_index)));
    }
    Ok(pairs)
}

/// Placement of `k` overlapping patches across a B-scan and the column
/// ownership used to compose their outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StitchPlan {
    pub width: usize,
    pub patch_width: usize,
    pub trim: usize,
    pub starts: Vec<usize>,
    /// Index of the contributing patch for every output column.
    pub owner: Vec<usize>,
}

impl StitchPlan {
    pub fn count(&self) -> usize {
        self.starts.len()
    }

    /// Inclusive column range owned by each patch.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut ranges: Vec<(usize, usize)> = Vec::new();
        for (col, &p) in self.owner.iter().enumerate() {
            match ranges.get_mut(p) {
                Some(r) => r.1 = col,
                None => {
                    while ranges.len() < p {
                        // patch owning nothing; mark as empty
                        ranges.push((usize::MAX, usize::MAX));
                    }
                    ranges.push((col, col));
                }
            }
        }
        ranges
    }

    /// Adjacent `(last column of patch i, first column of patch i+1)` pairs.
    pub fn boundaries(&self) -> Vec<(usize, usize)> {
        self.owner
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0] != w[1])
            .map(|(c, _)| (c, c + 1))
            .collect()
    }

    pub fn centers(&self) -> Vec<usize> {
        self.starts.iter().map(|s| s + self.patch_width / 2).collect()
    }

    /// Cuts the plan's patches from a full-width scan.
    pub fn extract(&self, scan: ArrayView2<'_, f32>, scan_index: usize) -> Result<Vec<Patch>, PatchError> {
        if scan.ncols() != self.width {
            return Err(PatchError::PlanMismatch(format!(
                "scan width {} but plan width {}",
                scan.ncols(),
                self.width
            )));
        }
        Ok(self
            .starts
            .iter()
            .map(|&o| crop(scan, o, self.patch_width, scan_index))
            .collect())
    }
}

/// Plans `k` patches of width `w` over `width` columns with `trim` columns
/// discarded at interior patch edges.
pub fn plan_stitch(width: usize, w: usize, k: usize, trim: usize) -> Result<StitchPlan, PatchError> {
    if k < 2 {
        return Err(PatchError::InsufficientOverlap(format!(
            "need at least 2 patches, got {k}"
        )));
    }
    if width < w {
        return Err(PatchError::ScanTooNarrow { width, patch: w });
    }
    let span = width - w;
    let stride = span.div_ceil(k - 1);
    if w < stride + 2 * trim {
        return Err(PatchError::InsufficientOverlap(format!(
            "overlap {} of {k} patches (width {w}) over {width} columns is below twice the trim {trim}",
            w as isize - stride as isize
        )));
    }
    // round(i * span / (k - 1)), halves rounded up
    let starts: Vec<usize> = (0..k)
        .map(|i| (2 * i * span + (k - 1)) / (2 * (k - 1)))
        .collect();
    let centers: Vec<usize> = starts.iter().map(|s| s + w / 2).collect();
    let owner: Vec<usize> = (0..width)
        .map(|col| {
            let mut best = 0;
            for (i, &c) in centers.iter().enumerate() {
                if col.abs_diff(c) < col.abs_diff(centers[best]) {
                    best = i;
                }
            }
            best
        })
        .collect();
    for (col, &p) in owner.iter().enumerate() {
        let start = starts[p];
        let edge = (col < trim || col >= width - trim) && (p == 0 || p == k - 1);
        let inside = col >= start + trim && col < start + w - trim;
        if !(inside || edge) {
            return Err(PatchError::InsufficientOverlap(format!(
                "column {col} would come from trimmed margin of patch {p}"
            )));
        }
    }
    Ok(StitchPlan {
        width,
        patch_width: w,
        trim,
        starts,
        owner,
    })
}

/// Composes patch outputs into one scan by copying each column from its owner.
pub fn stitch(outputs: &[Patch], plan: &StitchPlan) -> Result<Array2<f32>, PatchError> {
    if outputs.len() != plan.count() {
        return Err(PatchError::PlanMismatch(format!(
            "{} patches for a plan of {}",
            outputs.len(),
            plan.count()
        )));
    }
    let h = outputs.first().map_or(0, Patch::height);
    for (i, p) in outputs.iter().enumerate() {
        if p.height() != h || p.width() != plan.patch_width || p.origin != plan.starts[i] {
            return Err(PatchError::PlanMismatch(format!(
                "patch {i} is {}x{} at origin {}, expected {h}x{} at {}",
                p.height(),
                p.width(),
                p.origin,
                plan.patch_width,
                plan.starts[i]
            )));
        }
    }
    let mut out = Array2::zeros((h, plan.width));
    for (col, &p) in plan.owner.iter().enumerate() {
        let src = &outputs[p];
        out.column_mut(col).assign(&src.pixels.column(col - src.origin));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_plan_starts_and_ownership() {
        let plan = plan_stitch(500, 128, 5, 8).unwrap();
        assert_eq!(plan.starts, vec![0, 93, 186, 279, 372]);
        assert_eq!(plan.centers(), vec![64, 157, 250, 343, 436]);
        assert_eq!(
            plan.ranges(),
            vec![(0, 110), (111, 203), (204, 296), (297, 389), (390, 499)]
        );
        assert_eq!(plan.boundaries(), vec![(110, 111), (203, 204), (296, 297), (389, 390)]);
        // every owned column sits inside the untrimmed span of its patch
        for (p, (lo, hi)) in plan.ranges().into_iter().enumerate() {
            let s = plan.starts[p];
            let lo_ok = if p == 0 { 0 } else { s + 8 };
            let hi_ok = if p == 4 { 499 } else { s + 128 - 8 - 1 };
            assert!(lo >= lo_ok && hi <= hi_ok, "patch {p}: {lo}-{hi}");
        }
    }

    #[test]
    fn degenerate_plan() {
        let plan = plan_stitch(64, 64, 2, 8).unwrap();
        assert_eq!(plan.starts, vec![0, 0]);
        assert!(plan.owner.iter().all(|&o| o == 0));
        assert!(matches!(plan_stitch(10, 10, 2, 6), Err(PatchError::InsufficientOverlap(_))));
    }

    #[test]
    fn insufficient_overlap() {
        assert!(matches!(plan_stitch(500, 128, 4, 8), Err(PatchError::InsufficientOverlap(_))));
        assert!(matches!(plan_stitch(500, 128, 1, 8), Err(PatchError::InsufficientOverlap(_))));
        assert!(matches!(plan_stitch(100, 128, 5, 8), Err(PatchError::ScanTooNarrow { .. })));
    }

    #[test]
    fn margin_rejection() {
        let mut p = Patch {
            pixels: Array2::zeros((10, 6)),
            origin: 0,
            scan_index: 0,
        };
        assert!(!reject_margin_cropped(&p, 0.1, None));
        p.pixels[[0, 3]] = 0.5;
        assert!(reject_margin_cropped(&p, 0.1, None));
        p.pixels[[0, 3]] = 0.09;
        p.pixels[[9, 1]] = 0.09;
        assert!(!reject_margin_cropped(&p, 0.1, None));
        // bottom of the unpadded region
        p.pixels[[6, 2]] = 0.8;
        assert!(reject_margin_cropped(&p, 0.1, Some(7)));
        assert!(!reject_margin_cropped(&p, 0.1, Some(8)));
    }

    #[test]
    fn sampling_is_seeded() {
        let oct = Array2::from_shape_fn((8, 40), |(r, c)| {
            if r == 0 || r == 7 {
                0.0
            } else {
                (c as f32) / 40.0
            }
        });
        let octa = oct.mapv(|x| x * 0.5);
        let cfg = SamplerConfig {
            count: 100,
            width: 16,
            ..Default::default()
        };
        let a = sample_training_patches(oct.view(), octa.view(), &cfg, 3, 7).unwrap();
        let b = sample_training_patches(oct.view(), octa.view(), &cfg, 3, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        for (x, y) in &a {
            assert_eq!(x.origin, y.origin);
            assert!(x.origin <= 24);
            assert_eq!(y.pixels, octa.slice(s![.., x.origin..x.origin + 16]));
        }
    }

    #[test]
    fn full_width_sampling_origin_zero() {
        let oct = Array2::zeros((8, 16));
        let cfg = SamplerConfig {
            count: 5,
            width: 16,
            ..Default::default()
        };
        let pairs = sample_training_patches(oct.view(), oct.view(), &cfg, 0, 1).unwrap();
        assert!(pairs.iter().all(|(p, _)| p.origin == 0));
        let narrow = SamplerConfig { width: 17, ..cfg };
        assert!(matches!(
            sample_training_patches(oct.view(), oct.view(), &narrow, 0, 1),
            Err(PatchError::ScanTooNarrow { .. })
        ));
    }

    #[test]
    fn cropped_retina_yields_nothing() {
        let oct = Array2::from_elem((8, 32), 0.6f32);
        let cfg = SamplerConfig {
            count: 10,
            width: 8,
            ..Default::default()
        };
        assert!(sample_training_patches(oct.view(), oct.view(), &cfg, 0, 1)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn piecewise_constant_stitch() {
        let plan = plan_stitch(500, 128, 5, 8).unwrap();
        let outputs: Vec<Patch> = plan
            .starts
            .iter()
            .enumerate()
            .map(|(i, &o)| Patch {
                pixels: Array2::from_elem((3, 128), i as f32),
                origin: o,
                scan_index: 0,
            })
            .collect();
        let out = stitch(&outputs, &plan).unwrap();
        for (p, (lo, hi)) in plan.ranges().into_iter().enumerate() {
            assert!(out.slice(s![.., lo..=hi]).iter().all(|&x| x == p as f32));
        }
        let bad = &outputs[..4];
        assert!(matches!(stitch(bad, &plan), Err(PatchError::PlanMismatch(_))));
    }

    proptest! {
        #[test]
        fn stitch_round_trip(
            (w_idx, data) in (0usize..3).prop_flat_map(|i| {
                let width = [500usize, 256, 192][i];
                (Just(i), proptest::collection::vec(0.0f32..1.0, 4 * width))
            })
        ) {
            let (width, pw, trim) = [(500, 128, 8), (256, 64, 4), (192, 48, 3)][w_idx];
            let scan = Array2::from_shape_vec((4, width), data).unwrap();
            let plan = plan_stitch(width, pw, 5, trim).unwrap();
            let patches = plan.extract(scan.view(), 0).unwrap();
            prop_assert_eq!(stitch(&patches, &plan).unwrap(), scan);
        }

        #[test]
        fn ownership_partitions_columns(width in 64usize..400, k in 2usize..8) {
            if let Ok(plan) = plan_stitch(width, 64, k, 4) {
                prop_assert_eq!(plan.owner.len(), width);
                prop_assert!(plan.owner.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(plan.starts[0], 0);
                prop_assert_eq!(*plan.starts.last().unwrap(), width - 64);
                for i in 1..k.saturating_sub(1) {
                    let s = plan.starts[i];
                    for (col, &o) in plan.owner.iter().enumerate() {
                        if o == i {
                            prop_assert!(col >= s + 4 && col < s + 60);
                        }
                    }
                }
            }
        }
    }
}
