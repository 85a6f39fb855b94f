//! Draws synthetic instances with known filters and compares the filter-update error
//! with the deterministic bound.

use caol::synth::{verify_det_bound, MismatchModel, SynthSpec};

fn main() -> caol::Result<()> {
    let spec = SynthSpec::new(128, 6, 8, 16)
        .mismatch(MismatchModel::IidGaussian { std: 0.2 })
        .trials(20)
        .seed(1);
    let report = verify_det_bound(&spec)?;
    for t in report.trials.iter().take(5) {
        println!("trial {:2}: error {:.3e}  bound {:.3e}  ratio {:.3}", t.trial, t.error, t.bound, t.ratio);
    }
    println!("max(error - bound) = {:.3e}, all hold: {}", report.max_violation, report.passed);
    Ok(())
}
