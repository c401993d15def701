//! Injects blink and motion scans into a phantom and prints what the
//! detector flags, with the thresholds that decided each flagged scan.
//!
//!     cargo run --example detect_defects -- [seed]

use octa_restore::detect::{detect_defects, DetectionScore, DetectorConfig};
use octa_restore::synth::{generate_phantom, inject_defects, DefectList, PhantomConfig, DEFAULT_MOTION_GAIN};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let p = generate_phantom(&PhantomConfig::with_dims([64, 48, 48], seed))?;
    let defects: DefectList = "10:blink,25:motion,40:blink,52:motion".parse()?;
    let (octa, truth) = inject_defects(&p.octa, &p.truth, &defects.0, DEFAULT_MOTION_GAIN, seed)?;

    for (name, cfg) in [("calibrated", DetectorConfig::phantom_calibrated()), ("default", DetectorConfig::default())] {
        let labels = detect_defects(&octa, &cfg)?;
        println!("{name} (tau_l {}, tau_u {}):", cfg.tau_l, cfg.tau_u);
        for l in labels.iter().filter(|l| l.label.is_defect()) {
            println!(
                "  scan {:>2} {:?}: s={:.1} theta_l={:.1} theta_u={:.1} truth={}",
                l.index, l.label, l.s, l.theta_l, l.theta_u, truth.labels[l.index]
            );
        }
        let score = DetectionScore::from_labels(&labels, &truth.defect_mask());
        println!("  recall {:.2} precision {:.2}", score.recall(), score.precision());
    }
    Ok(())
}
