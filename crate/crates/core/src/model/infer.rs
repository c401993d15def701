use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use super::net::predict;
use super::params::ModelParams;
use super::tensor::Tensor;
use super::ModelError;
use crate::patch::{stitch, Patch, StitchPlan};
use crate::volume::Volume;

/// Translates one normalized, padded OCT B-scan: one Eval-mode forward call
/// per planned patch, outputs stitched by column ownership.
pub fn infer_bscan(
    params: &ModelParams,
    oct_scan: ArrayView2<'_, f32>,
    plan: &StitchPlan,
) -> Result<Array2<f32>, ModelError> {
    let patches = plan.extract(oct_scan, 0)?;
    let outputs = patches
        .into_iter()
        .map(|p| {
            let x = Tensor::<f32>::from_images(&[p.pixels.view()]);
            let y = predict(params, &x)?;
            Ok(Patch {
                pixels: y.image(0),
                ..p
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(stitch(&outputs, plan)?)
}

/// Generates a full angiographic volume from a structural one.
pub fn infer_volume(params: &ModelParams, oct: &Volume, plan: &StitchPlan) -> Result<Volume, ModelError> {
    let scans = (0..oct.n_scans())
        .into_par_iter()
        .map(|i| infer_bscan(params, oct.bscan(i), plan))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = Volume::zeros(oct.n_scans(), oct.n_axial(), oct.n_lateral());
    for (i, s) in scans.iter().enumerate() {
        out.set_bscan(i, s.view());
    }
    out.meta = oct.meta.clone();
    Ok(out)
}
