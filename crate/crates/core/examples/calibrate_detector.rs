//! Grid search for detector coefficients on seeded phantoms with injected
//! blink and motion scans. Prints the best pair and its score.
//!
//!     cargo run --release --example calibrate_detector -- [n_volumes]

use octa_restore::detect::{calibrate_taus, classify_sums, flow_sums, DetectionScore, DetectorConfig};
use octa_restore::synth::{generate_phantom, inject_defects, random_defects, PhantomConfig, DEFAULT_MOTION_GAIN};

const DIMS: [usize; 3] = [128, 48, 48];
const MIN_GAP: usize = 5;

fn corpus(n: u64, first_seed: u64) -> Vec<(Vec<f64>, Vec<bool>)> {
    (first_seed..first_seed + n)
        .map(|seed| {
            let p = generate_phantom(&PhantomConfig::with_dims(DIMS, seed)).unwrap();
            let defects = random_defects(DIMS[0], 5, 5, MIN_GAP, seed).unwrap();
            let (octa, truth) = inject_defects(&p.octa, &p.truth, &defects, DEFAULT_MOTION_GAIN, seed).unwrap();
            (flow_sums(&octa), truth.defect_mask())
        })
        .collect()
}

fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step).round() as usize;
    (0..=n).map(|k| lo + k as f64 * step).collect()
}

fn main() {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    // calibrate on seeds disjoint from the ones used for evaluation
    let train = corpus(n, 1000);
    let (best, score) = calibrate_taus(
        &train,
        &DetectorConfig::default(),
        &grid(0.5, 3.5, 0.05),
        &grid(0.5, 2.0, 0.05),
    )
    .unwrap();
    println!(
        "calibrated tau_l={:.2} tau_u={:.2}: recall {:.3} precision {:.3} ({:?})",
        best.tau_l,
        best.tau_u,
        score.recall(),
        score.precision(),
        score
    );

    let held_out = corpus(20, 0);
    for (name, cfg) in [("calibrated", best), ("shipped", DetectorConfig::phantom_calibrated()), ("default", DetectorConfig::default())] {
        let s = held_out.iter().fold(DetectionScore::default(), |acc, (sums, truth)| {
            acc.merge(DetectionScore::from_labels(&classify_sums(sums, &cfg).unwrap(), truth))
        });
        println!("{name:>10} on held-out seeds 0..20: recall {:.3} precision {:.3}", s.recall(), s.precision());
    }
}
