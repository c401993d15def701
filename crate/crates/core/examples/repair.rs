//! Full pipeline on phantoms: train a small network, corrupt a held-out
//! volume with blinks, repair it and write the annotated projection.
//!
//!     cargo run --release --example repair -- [out.png] [model.ckpt]

use octa_restore::detect::DetectorConfig;
use octa_restore::model::{load_checkpoint, train, TrainConfig, TrainingSet, UNetConfig};
use octa_restore::patch::{plan_stitch, SamplerConfig};
use octa_restore::repair::{annotated_projection_marked, repair_volume, RepairMode};
use octa_restore::synth::{generate_phantom, inject_defects, DefectList, PhantomConfig, DEFAULT_MOTION_GAIN};

const DIMS: [usize; 3] = [32, 64, 64];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let png = args.next().map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("repaired.png"));
    let params = match args.next() {
        Some(ckpt) => load_checkpoint(ckpt)?,
        None => {
            let sampler = SamplerConfig { count: 4, width: 32, ..Default::default() };
            let mut data = TrainingSet::default();
            for seed in 0..2 {
                let p = generate_phantom(&PhantomConfig::with_dims(DIMS, 100 + seed))?;
                data.samples.extend(TrainingSet::from_volumes(&p.oct, &p.octa, None, &sampler, true, seed)?.samples);
            }
            data.truncate(200);
            train(&data, &UNetConfig::tiny(4, 4), &TrainConfig { seed: 7, ..Default::default() })?.params
        }
    };

    let p = generate_phantom(&PhantomConfig::with_dims(DIMS, 2024))?;
    let blinks: DefectList = "6:blink,14:blink,25:blink".parse()?;
    let (octa, _) = inject_defects(&p.octa, &p.truth, &blinks.0, DEFAULT_MOTION_GAIN, 0)?;
    let plan = plan_stitch(DIMS[2], 32, 3, 2)?;
    let out = repair_volume(&p.oct, &octa, &params, &DetectorConfig::phantom_calibrated(), &plan, RepairMode::Low)?;
    println!("replaced scans {:?}", out.replaced);
    annotated_projection_marked(&out.repaired, &out.replaced_mask(), Some(&p.truth.bounds))?.save(&png)?;
    println!("wrote {}", png.display());
    Ok(())
}
