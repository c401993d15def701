//! Scores a noisy phantom OCTA volume and its median-filtered version
//! against the clean flow truth, per B-scan and on projections.
//!
//!     cargo run --release --example evaluate

use octa_restore::metrics::{evaluate, SsimConfig};
use octa_restore::model::median_filter_3;
use octa_restore::synth::{generate_phantom, PhantomConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = generate_phantom(&PhantomConfig::with_dims([32, 64, 64], 1))?;
    let smoothed = median_filter_3(&p.octa);
    let cfg = SsimConfig::default();
    for (name, v) in [("speckled", &p.octa), ("median 3x3x3", &smoothed)] {
        let r = evaluate(v, &p.truth.clean_flow, Some(&p.truth.bounds), &cfg)?;
        println!("{name}:");
        println!("  B-scans             MAE {:.4} MSE {:.4} SSIM {:.3}", r.bscans.mae, r.bscans.mse, r.bscans.ssim);
        println!("  projection          MAE {:.4} MSE {:.4} SSIM {:.3}", r.projection.mae, r.projection.mse, r.projection.ssim);
        if let Some(s) = r.segmented_projection {
            println!("  layer projection    MAE {:.4} MSE {:.4} SSIM {:.3}", s.mae, s.mse, s.ssim);
        }
    }
    Ok(())
}
