//! Writes a small image and tensor to a temporary directory, builds a checksummed
//! manifest over them, and loads it back with preprocessing and patches.

use caol::ingest::{
    load_dataset, write_pgm, write_raw_tensor, DatasetManifest, PatchSpec, PreprocessStep,
};
use caol::Signal;

fn main() -> caol::Result<()> {
    let dir = std::env::temp_dir().join(format!("caol-dataset-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| caol::CaolError::io("creating temp dir", e))?;

    let img = Signal::grid(8, 8, (0..64).map(|i| ((i * 37) % 256) as f64).collect())?;
    write_pgm(&dir.join("a.pgm"), &img, 255)?;
    let tensor = Signal::grid(8, 8, (0..64).map(|i| (i as f64 * 0.3).sin()).collect())?;
    write_raw_tensor(&dir.join("b.tnsr"), &tensor)?;

    let steps = [PreprocessStep::MeanSubtract, PreprocessStep::Standardize];
    let mut manifest = DatasetManifest::from_files(&dir, &["a.pgm".into(), "b.tnsr".into()], "example", &steps)?;
    manifest.patches = Some(PatchSpec { h: 4, w: 4, stride: 4 });
    manifest.write(&dir.join("manifest.json"))?;

    let data = load_dataset(&dir.join("manifest.json"))?;
    println!("{} patches of {}", data.signals.len(), data.signals[0].geometry());
    for e in &data.manifest.entries {
        println!("{}  {}", e.sha256, e.path.display());
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
