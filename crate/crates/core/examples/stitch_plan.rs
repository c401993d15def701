//! Shows how a 500-column B-scan is covered by five 128-column patches and
//! which columns each patch contributes after trimming.
//!
//!     cargo run --example stitch_plan -- [width] [patch] [count] [trim]

use ndarray::Array2;
use octa_restore::patch::{plan_stitch, stitch};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let get = |i: usize, d: usize| args.get(i).copied().unwrap_or(d);
    let (width, w, k, trim) = (get(0, 500), get(1, 128), get(2, 5), get(3, 8));
    let plan = plan_stitch(width, w, k, trim)?;
    println!("width {width}, {k} patches of {w}, trim {trim}");
    for (i, (start, (lo, hi))) in plan.starts.iter().zip(plan.ranges()).enumerate() {
        println!("  patch {i}: columns {start}..{} owns {lo}..={hi}", start + w - 1);
    }
    println!("boundaries {:?}", plan.boundaries());

    let scan = Array2::from_shape_fn((8, width), |(r, c)| (r * width + c) as f32);
    let back = stitch(&plan.extract(scan.view(), 0)?, &plan)?;
    println!("extract then stitch restores the scan: {}", back == scan);
    Ok(())
}
