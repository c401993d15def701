//! Writes a volume with metadata, reads it back, then imports the same
//! samples from a headerless float32 file.
//!
//!     cargo run --example volume_io -- [dir]

use std::collections::BTreeMap;

use ndarray::Array3;
use octa_restore::volume::{import_raw, normalize, pad_axial, read_volume, write_volume, Volume, DEFAULT_AXIAL_TARGET};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(std::env::temp_dir);
    let mut v = Volume::new(Array3::from_shape_fn((4, 300, 64), |(s, a, l)| (s + a + l) as f32));
    v.meta = BTreeMap::from([("eye".into(), "OS".into())]);

    let path = dir.join("example.vol");
    write_volume(&v, &path)?;
    let back = read_volume(&path)?;
    println!("{}: dims {:?}, meta {:?}, identical {}", path.display(), back.dims(), back.meta, back == v);

    let raw = dir.join("example.raw");
    let bytes: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(&raw, bytes)?;
    let imported = import_raw(&raw, v.dims())?;
    println!("raw import matches payload: {}", imported.data == v.data);

    let ready = pad_axial(&normalize(&v), DEFAULT_AXIAL_TARGET)?;
    println!("normalized max {}, padded dims {:?}", ready.max(), ready.dims());
    Ok(())
}
