//! Rough per-step training cost on the default desk-scale configuration.

use std::time::Instant;

use pairgen_core::data::{PairedDataset, SyntheticSpec};
use pairgen_core::denoiser::DenoiserConfig;
use pairgen_core::paired::{train_guider, ModelRole, TrainConfig};
use pairgen_core::tensor::parallel;

fn main() {
    let threads: usize = std::env::args()
        .nth(1)
        .and_then(|v| v.parse().ok())
        .unwrap_or(1);
    let steps: usize = std::env::args()
        .nth(2)
        .and_then(|v| v.parse().ok())
        .unwrap_or(30);
    let batch: usize = std::env::args()
        .nth(3)
        .and_then(|v| v.parse().ok())
        .unwrap_or(8);
    parallel::set_threads(threads);

    let spec = SyntheticSpec {
        count: 256,
        ..SyntheticSpec::default_16()
    };
    let data = PairedDataset::generate_in_memory(&spec).unwrap();
    let net = DenoiserConfig::for_image_size(16, 1024);
    let mut cfg = TrainConfig::new(ModelRole::Guider, steps, 7);
    cfg.batch_size = batch;

    let start = Instant::now();
    let out = train_guider(&data, net, &cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    println!(
        "threads={threads} batch={batch} steps={steps}: {:.3}s total, {:.1}ms/step, loss {} -> {}",
        elapsed,
        1000.0 * elapsed / steps as f64,
        out.losses.first().unwrap(),
        out.losses.last().unwrap()
    );
}
