//! Monte Carlo mean error against the expected bound `5 sigma_bar^2 rho^2` for
//! impulse signals, where `rho^2 = R/L`.

use caol::synth::{monte_carlo_expected, MismatchModel, SignalModel, SynthSpec};

fn main() -> caol::Result<()> {
    for l in [8, 32, 128] {
        let spec = SynthSpec::new(32, 4, 4, l)
            .signals(SignalModel::Impulse)
            .mismatch(MismatchModel::IidGaussian { std: 0.5 })
            .trials(200);
        let r = monte_carlo_expected(&spec)?;
        println!(
            "L = {l:3}: mean error {:.4} +- {:.4}, bound {:.4}",
            r.mean_error,
            r.std_error,
            r.expected_bound.unwrap()
        );
    }
    Ok(())
}
