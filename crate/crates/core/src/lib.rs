//! Detection of defective OCT-angiography B-scans and their replacement with
//! angiographic scans generated from a single structural OCT B-scan.

pub mod cli;
pub mod detect;
pub mod metrics;
pub mod model;
pub mod patch;
pub mod repair;
pub mod synth;
pub mod volume;
