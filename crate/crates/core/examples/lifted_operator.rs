//! Lifts a short signal into its matrix of cyclic shifts and checks that
//! `Psi d` is the convolution of the signal with `d`.

use caol::{build_lift, convolve, OffsetPattern, Signal};

fn main() -> caol::Result<()> {
    let x = Signal::line(vec![1.0, 2.0, 3.0, 4.0])?;
    let pattern = OffsetPattern::line(2)?;
    let lift = build_lift(&x, &pattern)?;
    println!("Psi =\n{}", lift.matrix());
    println!("Psi^T Psi =\n{}", lift.gram());

    let d = [1.0, 1.0];
    let y = convolve(&x, &d, &pattern)?;
    println!("x conv [1, 1] = {:?}", y.values());

    let img = Signal::grid(3, 3, (0..9).map(f64::from).collect())?;
    let window = OffsetPattern::window(2, 2)?;
    let lift = build_lift(&img, &window)?;
    println!("3x3 image, 2x2 window: Psi is {}x{}", lift.n(), lift.r());
    Ok(())
}
