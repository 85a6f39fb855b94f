//! rho^2 against the number of samples for Gaussian signals, with the fitted
//! log-log slope.

use caol::synth::{loglog_slope, rho_scan, synth_instance, SynthSpec};
use caol::OffsetPattern;

fn main() -> caol::Result<()> {
    let signals = synth_instance(&SynthSpec::new(256, 8, 8, 128).seed(3))?.signals;
    let grid = [1, 2, 4, 8, 16, 32, 64, 128];
    let rows = rho_scan(&signals, &OffsetPattern::line(8)?, &grid, 20, 0)?;
    println!("L,rho_sq,rho_sq_std");
    for r in &rows {
        println!("{},{:.6e},{:.3e}", r.l, r.rho_sq_mean, r.rho_sq_std);
    }
    println!("log-log slope: {:.3}", loglog_slope(&rows));
    Ok(())
}
