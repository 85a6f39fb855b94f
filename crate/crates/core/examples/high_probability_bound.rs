//! Coverage of the high-probability bound for a bounded mismatch model, and the
//! admissible range of `delta`.

use caol::synth::{monte_carlo_hp, population_stats, MismatchModel, SignalModel, SynthSpec};

fn main() -> caol::Result<()> {
    let spec = SynthSpec::new(8, 4, 4, 2000)
        .signals(SignalModel::Impulse)
        .mismatch(MismatchModel::BoundedBall { radius: 0.5 })
        .trials(100);
    let upper = population_stats(&spec)?.delta_upper()?;
    println!("delta must lie in (0, {upper})");
    let report = monte_carlo_hp(&spec, 0.1)?;
    let hp = report.hp.unwrap();
    println!(
        "bound {:.4}, probability {:.4} (vacuous: {}), coverage {:.3}",
        hp.bound.bound, hp.bound.prob, hp.bound.vacuous, hp.coverage
    );
    Ok(())
}
