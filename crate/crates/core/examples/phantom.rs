//! Generates a phantom pair and writes the volumes plus en-face projections
//! of the OCT, the OCTA and the clean flow truth as PNG files.
//!
//!     cargo run --release --example phantom -- [dir] [seed]

use octa_restore::metrics::{enface_projection, to_gray8};
use octa_restore::synth::{generate_phantom, PhantomConfig};
use octa_restore::volume::write_volume;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let dir = args.next().map(Into::into).unwrap_or_else(std::env::temp_dir);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = PhantomConfig { seed, ..Default::default() };
    let p = generate_phantom(&cfg)?;
    write_volume(&p.oct, dir.join("phantom.oct.vol"))?;
    write_volume(&p.octa, dir.join("phantom.octa.vol"))?;

    let bounds = Some(&p.truth.bounds);
    for (name, v) in [("oct", &p.oct), ("octa", &p.octa), ("flow", &p.truth.clean_flow)] {
        let path = dir.join(format!("phantom_{name}.png"));
        to_gray8(enface_projection(v, bounds)?.view()).save(&path)?;
        println!("wrote {}", path.display());
    }
    let vessel_voxels = p.truth.vessels.iter().filter(|&&m| m != 0).count();
    println!("dims {:?}, {} vessel voxels", cfg.dims, vessel_voxels);
    Ok(())
}
