//! Detect defective OCTA scans, regenerate them from OCT and merge.

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{detect_defects, DetectError, DetectorConfig, Label, ScanLabel};
use crate::metrics::{enface_projection, LayerBounds, MetricsError};
use crate::model::{infer_bscan, ModelError, ModelParams};
use crate::patch::StitchPlan;
use crate::volume::Volume;

pub const BAND_ROWS: usize = 4;
pub const DEFECT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
pub const INTACT_COLOR: Rgb<u8> = Rgb([0, 255, 0]);

#[derive(Debug, thiserror::Error)]
pub enum RepairError {
    #[error("OCT {oct:?} and OCTA {octa:?} dimensions differ")]
    DimMismatch { oct: [usize; 3], octa: [usize; 3] },
    #[error("{labels} labels for {scans} scans")]
    LabelCount { labels: usize, scans: usize },
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Which detector labels trigger replacement.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RepairMode {
    Low,
    High,
    #[default]
    Both,
}

impl RepairMode {
    pub fn selects(self, label: Label) -> bool {
        matches!(
            (self, label),
            (RepairMode::Low | RepairMode::Both, Label::LowDefect) | (RepairMode::High | RepairMode::Both, Label::HighDefect)
        )
    }
}

#[derive(Debug, Clone)]
pub struct RepairOutput {
    pub repaired: Volume,
    pub labels: Vec<ScanLabel>,
    pub replaced: Vec<usize>,
}

impl RepairOutput {
    pub fn replaced_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.labels.len()];
        for &i in &self.replaced {
            m[i] = true;
        }
        m
    }
}

/// Replaces every scan selected by `mode` with the network's translation of
/// the matching OCT scan. Other scans are copied unchanged.
pub fn repair_volume(
    oct: &Volume,
    octa: &Volume,
    params: &ModelParams,
    dcfg: &DetectorConfig,
    plan: &StitchPlan,
    mode: RepairMode,
) -> Result<RepairOutput, RepairError> {
    if oct.dims() != octa.dims() {
        return Err(RepairError::DimMismatch {
            oct: oct.dims(),
            octa: octa.dims(),
        });
    }
    let labels = detect_defects(octa, dcfg)?;
    let replaced: Vec<usize> = labels
        .iter()
        .filter(|l| mode.selects(l.label))
        .map(|l| l.index)
        .collect();
    let generated = replaced
        .par_iter()
        .map(|&i| infer_bscan(params, oct.bscan(i), plan))
        .collect::<Result<Vec<_>, _>>()?;
    let mut repaired = octa.clone();
    for (&i, scan) in replaced.iter().zip(&generated) {
        repaired.set_bscan(i, scan.view());
    }
    Ok(RepairOutput {
        repaired,
        labels,
        replaced,
    })
}

/// Grayscale en-face projection with scans along the horizontal axis and a
/// marker band on top: red where `marked[s]`, green elsewhere. The image is
/// `n_scans` wide and `n_lateral + 4` tall.
pub fn annotated_projection_marked(
    v: &Volume,
    marked: &[bool],
    bounds: Option<&LayerBounds>,
) -> Result<RgbImage, RepairError> {
    if marked.len() != v.n_scans() {
        return Err(RepairError::LabelCount {
            labels: marked.len(),
            scans: v.n_scans(),
        });
    }
    let proj = enface_projection(v, bounds)?;
    let (s, l) = proj.dim();
    Ok(RgbImage::from_fn(s as u32, (l + BAND_ROWS) as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if y < BAND_ROWS {
            if marked[x] {
                DEFECT_COLOR
            } else {
                INTACT_COLOR
            }
        } else {
            let g = (proj[[x, y - BAND_ROWS]].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([g, g, g])
        }
    }))
}

/// As [`annotated_projection_marked`], marking scans whose label `mode` selects.
pub fn annotated_projection(
    v: &Volume,
    labels: &[ScanLabel],
    bounds: Option<&LayerBounds>,
    mode: RepairMode,
) -> Result<RgbImage, RepairError> {
    let marked: Vec<bool> = labels.iter().map(|l| mode.selects(l.label)).collect();
    annotated_projection_marked(v, &marked, bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_params, UNetConfig};
    use crate::patch::plan_stitch;
    use ndarray::Array3;

    fn smooth_volume() -> Volume {
        Volume::new(Array3::from_shape_fn((20, 8, 16), |(_, a, l)| {
            0.5 + 0.01 * ((a + l) % 5) as f32
        }))
    }

    #[test]
    fn no_defects_is_identity() {
        let v = smooth_volume();
        let params = build_params(&UNetConfig::tiny(2, 2), 0).unwrap();
        let plan = plan_stitch(16, 8, 3, 1).unwrap();
        let out = repair_volume(&v, &v, &params, &DetectorConfig::phantom_calibrated(), &plan, RepairMode::Both).unwrap();
        assert!(out.replaced.is_empty());
        assert_eq!(out.repaired, v);
    }

    #[test]
    fn blink_replaced_and_rest_untouched() {
        let oct = smooth_volume();
        let mut octa = smooth_volume();
        octa.bscan_mut(9).fill(0.0);
        let params = build_params(&UNetConfig::tiny(2, 2), 0).unwrap();
        let plan = plan_stitch(16, 8, 3, 1).unwrap();
        let out = repair_volume(&oct, &octa, &params, &DetectorConfig::phantom_calibrated(), &plan, RepairMode::Low).unwrap();
        assert_eq!(out.replaced, vec![9]);
        for i in 0..20 {
            if i == 9 {
                assert_ne!(out.repaired.bscan(i), octa.bscan(i));
            } else {
                assert_eq!(out.repaired.bscan(i), octa.bscan(i));
            }
        }
    }

    #[test]
    fn dims_must_match() {
        let params = build_params(&UNetConfig::tiny(2, 2), 0).unwrap();
        let plan = plan_stitch(16, 8, 3, 1).unwrap();
        let r = repair_volume(&smooth_volume(), &Volume::zeros(20, 8, 12), &params, &DetectorConfig::default(), &plan, RepairMode::Both);
        assert!(matches!(r, Err(RepairError::DimMismatch { .. })));
    }

    #[test]
    fn band_layout() {
        let v = smooth_volume();
        let mut marked = vec![false; 20];
        let img = annotated_projection_marked(&v, &marked, None).unwrap();
        assert_eq!((img.width(), img.height()), (20, 16 + 4));
        for x in 0..20 {
            for y in 0..4 {
                assert_eq!(*img.get_pixel(x, y), INTACT_COLOR);
            }
            assert_ne!(*img.get_pixel(x, 4), INTACT_COLOR);
        }
        marked[0] = true;
        marked[19] = true;
        let img = annotated_projection_marked(&v, &marked, None).unwrap();
        assert_eq!(*img.get_pixel(0, 3), DEFECT_COLOR);
        assert_eq!(*img.get_pixel(19, 0), DEFECT_COLOR);
        assert_eq!(*img.get_pixel(10, 0), INTACT_COLOR);
        assert!(annotated_projection_marked(&v, &marked[..5], None).is_err());
    }

    #[test]
    fn mode_selection() {
        assert!(RepairMode::Low.selects(Label::LowDefect));
        assert!(!RepairMode::Low.selects(Label::HighDefect));
        assert!(RepairMode::High.selects(Label::HighDefect));
        assert!(RepairMode::Both.selects(Label::HighDefect) && RepairMode::Both.selects(Label::LowDefect));
        assert!(!RepairMode::Both.selects(Label::Intact));
    }
}
