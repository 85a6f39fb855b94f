//! Trains a 3x3 orthogonal filter bank on the bundled test images and prints the
//! objective trace.

use std::path::Path;

use caol::ingest::load_dataset;
use caol::{caol_train, OffsetPattern, TrainConfig};

fn main() -> caol::Result<()> {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/natural/manifest.json");
    let data = load_dataset(&manifest)?;
    let pattern = OffsetPattern::window(3, 3)?;
    let config = TrainConfig {
        max_iters: 200,
        ..TrainConfig::default()
    };
    let out = caol_train(&data.signals, &pattern, 9, &config, None)?;
    for s in out.trace.stats.iter().step_by(25) {
        println!("iter {:4}  F = {:.6e}  nonzero = {:.3}", s.iteration, s.objective, s.sparsity);
    }
    println!("converged: {}", out.trace.converged);
    println!("filters (columns):\n{}", out.filters.matrix());
    Ok(())
}
