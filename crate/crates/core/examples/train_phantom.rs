//! Trains the tiny network on phantom patches and compares the generated
//! en-face projection of a held-out phantom with its clean flow projection.
//!
//!     cargo run --release --example train_phantom -- [epochs] [out.ckpt]

use octa_restore::metrics::{enface_projection, mean_local_variance, ssim, SsimConfig};
use octa_restore::model::{infer_volume, save_checkpoint, train_with_progress, TrainConfig, TrainingSet, UNetConfig};
use octa_restore::patch::{plan_stitch, SamplerConfig};
use octa_restore::synth::{generate_phantom, inject_defects, random_defects, PhantomConfig, DEFAULT_MOTION_GAIN};

const DIMS: [usize; 3] = [32, 64, 64];

fn main() {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(30);
    let out = args.next();

    let sampler = SamplerConfig { count: 4, width: 32, ..Default::default() };
    let mut data = TrainingSet::default();
    for seed in 0..2 {
        let p = generate_phantom(&PhantomConfig::with_dims(DIMS, 100 + seed)).unwrap();
        let set = TrainingSet::from_volumes(&p.oct, &p.octa, None, &sampler, true, seed).unwrap();
        data.samples.extend(set.samples);
    }
    data.truncate(200);
    println!("{} training pairs of 64x32", data.len());

    let ucfg = UNetConfig::tiny(4, 4);
    let tcfg = TrainConfig { epochs, seed: 7, ..Default::default() };
    let t = std::time::Instant::now();
    let report = train_with_progress(&data, &ucfg, &tcfg, |e| println!("epoch {:>2} loss {:.5}", e.epoch, e.mean_loss)).unwrap();
    println!("trained in {:.1?}", t.elapsed());
    let losses = report.losses();
    println!("last/first loss ratio {:.3}", losses[losses.len() - 1] / losses[0]);

    let held = generate_phantom(&PhantomConfig::with_dims(DIMS, 999)).unwrap();
    let defects = random_defects(DIMS[0], 2, 2, 5, 999).unwrap();
    let (corrupted, _) = inject_defects(&held.octa, &held.truth, &defects, DEFAULT_MOTION_GAIN, 999).unwrap();
    let plan = plan_stitch(DIMS[2], 32, 3, 2).unwrap();
    let generated = infer_volume(&report.params, &held.oct, &plan).unwrap();

    let b = Some(&held.truth.bounds);
    let clean = enface_projection(&held.truth.clean_flow, b).unwrap();
    let cfg = SsimConfig::default();
    let gen_p = enface_projection(&generated, b).unwrap();
    let cor_p = enface_projection(&corrupted, b).unwrap();
    let raw_p = enface_projection(&held.octa, b).unwrap();
    println!("SSIM vs clean projection: generated {:.3}, corrupted {:.3}, uncorrupted noisy {:.3}",
        ssim(gen_p.view(), clean.view(), &cfg).unwrap(),
        ssim(cor_p.view(), clean.view(), &cfg).unwrap(),
        ssim(raw_p.view(), clean.view(), &cfg).unwrap());
    let lv = |v: &octa_restore::volume::Volume| {
        (0..v.n_scans()).map(|i| mean_local_variance(v.bscan(i), 5).unwrap()).sum::<f64>() / v.n_scans() as f64
    };
    println!("mean 5x5 local variance: generated {:.5}, target {:.5}", lv(&generated), lv(&held.octa));

    if let Some(path) = out {
        save_checkpoint(&report.params, &path).unwrap();
        println!("saved {path}");
    }
}
