//! Prints the channel plan and parameter tensors of a network config, then
//! saves and reloads a checkpoint.
//!
//!     cargo run --example network -- [unet.json]

use octa_restore::model::{build_params, load_checkpoint, save_checkpoint, ChannelPlan, UNetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg: UNetConfig = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => UNetConfig::default(),
    };
    let plan = ChannelPlan::derive(&cfg);
    println!("dense traces {:?}, transitions {:?}", plan.dense_trace, plan.transition);
    println!("decoder (in, out) {:?}, head input {}", plan.decoder, plan.head_in);

    let params = build_params(&cfg, 0)?;
    for t in &params.tensors {
        println!("  {:<32} {:?}{}", t.name, t.shape, if t.learnable { "" } else { "  (buffer)" });
    }
    println!("{} learnable values", params.num_learnable());

    let path = std::env::temp_dir().join("network_example.ckpt");
    save_checkpoint(&params, &path)?;
    println!("checkpoint round trip identical: {}", load_checkpoint(&path)? == params);
    Ok(())
}
