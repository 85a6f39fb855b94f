//! Tracks the normalized mismatch correlation chi_bar along a training run, using
//! the converged filters as reference.

use std::path::Path;

use caol::ingest::load_dataset;
use caol::{build_lifts, caol_train, chi_track, OffsetPattern, TrainConfig};

fn main() -> caol::Result<()> {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/natural/manifest.json");
    let data = load_dataset(&manifest)?;
    let pattern = OffsetPattern::window(3, 3)?;
    let config = TrainConfig {
        max_iters: 300,
        ..TrainConfig::default()
    };
    let out = caol_train(&data.signals, &pattern, 9, &config, None)?;
    let lifts = build_lifts(&data.signals, &pattern)?;
    for row in chi_track(&out.trace, &lifts, out.filters.matrix(), 50)? {
        println!("iteration {:4}: chi_bar = {:.4e}", row.iteration, row.chi_bar);
    }
    Ok(())
}
