//! Lifted convolution operators.
//!
//! A signal `x` of length N and an offset pattern of size R give the N x R matrix
//! `Psi` whose column r is `x` cyclically shifted by offset r. Filtering `x` with a
//! length-R filter `d` is then the product `Psi d`; no kernel flip is applied.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{CaolError, Result};
use crate::signal::{Geometry, Offset, OffsetPattern, Signal};

/// Cyclically shifts `x` so that entry i of the result is entry `i + offset` of `x`,
/// wrapping per axis.
///
/// Line offsets are reduced modulo N. Grid offsets must lie inside the axis lengths.
pub fn cyclic_shift(x: &Signal, offset: Offset) -> Result<Signal> {
    let src = x.values();
    let values = match (x.geometry(), offset) {
        (Geometry::Line { n }, Offset::Line(r)) => {
            let r = r % n;
            let mut out = Vec::with_capacity(n);
            out.extend_from_slice(&src[r..]);
            out.extend_from_slice(&src[..r]);
            out
        }
        (Geometry::Grid { h, w }, Offset::Grid { dy, dx }) if dy < h && dx < w => {
            let mut out = Vec::with_capacity(h * w);
            for i in 0..h {
                let row = &src[((i + dy) % h) * w..][..w];
                out.extend_from_slice(&row[dx..]);
                out.extend_from_slice(&row[..dx]);
            }
            out
        }
        (geometry, offset) => {
            return Err(CaolError::InvalidOffset {
                offset: offset.to_string(),
                geometry: geometry.to_string(),
            })
        }
    };
    x.with_values(values)
}

/// The N x R matrix of shifted copies of one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedOperator {
    matrix: DMatrix<f64>,
    geometry: Geometry,
    pattern: OffsetPattern,
}

impl LiftedOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn pattern(&self) -> &OffsetPattern {
        &self.pattern
    }

    /// Signal length N.
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    /// Filter size R.
    pub fn r(&self) -> usize {
        self.matrix.ncols()
    }

    /// Euclidean norm of the source signal (every column has this norm).
    pub fn signal_norm(&self) -> f64 {
        self.matrix.column(0).norm()
    }

    /// `Psi^T Psi`.
    pub fn gram(&self) -> DMatrix<f64> {
        self.matrix.tr_mul(&self.matrix)
    }

    /// `Psi D` for an R x K matrix `D`.
    pub fn apply(&self, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if d.nrows() != self.r() {
            return Err(CaolError::dims("lift apply", self.r(), d.nrows()));
        }
        Ok(&self.matrix * d)
    }
}

pub fn build_lift(x: &Signal, pattern: &OffsetPattern) -> Result<LiftedOperator> {
    let geometry = x.geometry();
    pattern.validate_for(geometry)?;
    let n = x.len();
    let mut matrix = DMatrix::zeros(n, pattern.len());
    for (r, &offset) in pattern.offsets().iter().enumerate() {
        let shifted = cyclic_shift(x, offset)?;
        matrix.column_mut(r).copy_from_slice(shifted.values());
    }
    Ok(LiftedOperator {
        matrix,
        geometry,
        pattern: pattern.clone(),
    })
}

/// Lifts every signal with the same pattern.
pub fn build_lifts(signals: &[Signal], pattern: &OffsetPattern) -> Result<Vec<LiftedOperator>> {
    signals.par_iter().map(|x| build_lift(x, pattern)).collect()
}

/// `Psi d`, the filtering of `x` by `d` over the pattern's support.
pub fn convolve(x: &Signal, d: &[f64], pattern: &OffsetPattern) -> Result<Signal> {
    if d.len() != pattern.len() {
        return Err(CaolError::dims("convolve", pattern.len(), d.len()));
    }
    let lift = build_lift(x, pattern)?;
    let out = &lift.matrix * nalgebra::DVector::from_column_slice(d);
    x.with_values(out.as_slice().to_vec())
}

fn check_shared(lifts: &[LiftedOperator], context: &'static str) -> Result<(usize, usize)> {
    let first = lifts.first().ok_or(CaolError::EmptyDataset(context))?;
    let (n, r) = (first.n(), first.r());
    for lift in lifts {
        if lift.r() != r {
            return Err(CaolError::dims(context, format!("R = {r}"), format!("R = {}", lift.r())));
        }
        if lift.geometry != first.geometry {
            return Err(CaolError::dims(context, first.geometry, lift.geometry));
        }
    }
    Ok((n, r))
}

/// `sum_l Psi_l^T Psi_l`.
///
/// Per-sample Grams are formed in parallel and summed in sample order, so the result
/// does not depend on the thread count.
pub fn gram_accumulate(lifts: &[LiftedOperator]) -> Result<DMatrix<f64>> {
    let (_, r) = check_shared(lifts, "gram_accumulate")?;
    let grams: Vec<DMatrix<f64>> = lifts.par_iter().map(LiftedOperator::gram).collect();
    Ok(grams.into_iter().fold(DMatrix::zeros(r, r), |acc, g| acc + g))
}

/// `Psi^T M` for an N x K matrix `M`.
pub fn adjoint_apply(lift: &LiftedOperator, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != lift.n() {
        return Err(CaolError::dims("adjoint_apply", lift.n(), m.nrows()));
    }
    Ok(lift.matrix.tr_mul(m))
}

/// `sum_l Psi_l^T M_l`, summed in sample order.
pub fn cross_accumulate(lifts: &[LiftedOperator], mats: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let (_, r) = check_shared(lifts, "cross_accumulate")?;
    if mats.len() != lifts.len() {
        return Err(CaolError::dims("cross_accumulate", lifts.len(), mats.len()));
    }
    let k = mats[0].ncols();
    if let Some(m) = mats.iter().find(|m| m.ncols() != k) {
        return Err(CaolError::dims("cross_accumulate", format!("K = {k}"), format!("K = {}", m.ncols())));
    }
    let parts: Vec<DMatrix<f64>> = lifts
        .par_iter()
        .zip(mats.par_iter())
        .map(|(lift, m)| adjoint_apply(lift, m))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().fold(DMatrix::zeros(r, k), |acc, p| acc + p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn x4() -> Signal {
        Signal::line(vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn shift_examples() {
        let x = x4();
        assert_eq!(cyclic_shift(&x, Offset::Line(1)).unwrap().values(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(cyclic_shift(&x, Offset::Line(0)).unwrap().values(), x.values());
        assert_eq!(cyclic_shift(&x, Offset::Line(4)).unwrap().values(), x.values());
    }

    #[test]
    fn grid_shift_out_of_range() {
        let x = Signal::grid(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            cyclic_shift(&x, Offset::Grid { dy: 2, dx: 0 }),
            Err(CaolError::InvalidOffset { .. })
        ));
        assert!(matches!(cyclic_shift(&x, Offset::Line(1)), Err(CaolError::InvalidOffset { .. })));
    }

    #[test]
    fn lift_columns_are_shifts() {
        let lift = build_lift(&x4(), &OffsetPattern::line(2).unwrap()).unwrap();
        assert_eq!(lift.matrix().column(0).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(lift.matrix().column(1).as_slice(), &[2.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn impulse_lift_hits_first_and_last_rows() {
        // Pi e1 has its single one in entry N (row 3 zero-based).
        let lift = build_lift(&Signal::impulse(4, 0).unwrap(), &OffsetPattern::line(2).unwrap()).unwrap();
        assert_eq!(lift.matrix().column(0).as_slice(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(lift.matrix().column(1).as_slice(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn grid_lift_shifts_columns_cyclically() {
        let x = Signal::grid(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = OffsetPattern::new(vec![Offset::Grid { dy: 0, dx: 0 }, Offset::Grid { dy: 0, dx: 1 }]).unwrap();
        let lift = build_lift(&x, &p).unwrap();
        // Per-axis oracle: y[i][j] = x[i][(j + 1) % 2].
        let rows = [[1.0, 2.0], [3.0, 4.0]];
        let mut expected = Vec::new();
        for i in 0..2 {
            for j in 0..2 {
                expected.push(rows[i][(j + 1) % 2]);
            }
        }
        assert_eq!(lift.matrix().column(0).as_slice(), x.values());
        assert_eq!(lift.matrix().column(1).as_slice(), expected.as_slice());
    }

    #[test]
    fn convolve_examples() {
        let p = OffsetPattern::line(2).unwrap();
        assert_eq!(convolve(&x4(), &[1.0, 0.0], &p).unwrap().values(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(convolve(&x4(), &[0.0, 1.0], &p).unwrap().values(), &[2.0, 3.0, 4.0, 1.0]);
        // Direct sum over shifted copies: y_i = x_i + x_{i+1 mod 4}.
        let x = x4();
        let v = x.values();
        let oracle: Vec<f64> = (0..4).map(|i| v[i] + v[(i + 1) % 4]).collect();
        assert_eq!(oracle, vec![3.0, 5.0, 7.0, 5.0]);
        assert_eq!(convolve(&x, &[1.0, 1.0], &p).unwrap().values(), oracle.as_slice());
        assert!(matches!(convolve(&x, &[1.0], &p), Err(CaolError::DimensionMismatch { .. })));
    }

    #[test]
    fn gram_examples() {
        let p = OffsetPattern::line(3).unwrap();
        let lifts: Vec<_> = (0..5).map(|_| build_lift(&Signal::impulse(7, 0).unwrap(), &p).unwrap()).collect();
        assert_eq!(gram_accumulate(&lifts).unwrap(), DMatrix::identity(3, 3) * 5.0);

        // <x, x> = 30 and <x, Pi x> = 1*2 + 2*3 + 3*4 + 4*1 = 24.
        let single = [build_lift(&x4(), &OffsetPattern::line(2).unwrap()).unwrap()];
        let g = gram_accumulate(&single).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[30.0, 24.0, 24.0, 30.0]));

        let doubled = [single[0].clone(), single[0].clone()];
        assert_eq!(gram_accumulate(&doubled).unwrap(), g * 2.0);
    }

    #[test]
    fn gram_errors() {
        assert!(matches!(gram_accumulate(&[]), Err(CaolError::EmptyDataset(_))));
        let a = build_lift(&x4(), &OffsetPattern::line(2).unwrap()).unwrap();
        let b = build_lift(&x4(), &OffsetPattern::line(3).unwrap()).unwrap();
        assert!(matches!(gram_accumulate(&[a, b]), Err(CaolError::DimensionMismatch { .. })));
    }

    #[test]
    fn adjoint_examples() {
        let lift = build_lift(&Signal::impulse(4, 0).unwrap(), &OffsetPattern::line(2).unwrap()).unwrap();
        assert_eq!(adjoint_apply(&lift, &DMatrix::zeros(4, 3)).unwrap(), DMatrix::zeros(2, 3));

        let m = DMatrix::from_fn(4, 3, |i, j| (10 * i + j) as f64);
        let out = adjoint_apply(&lift, &m).unwrap();
        // Columns of Psi are e1 and e4: rows 0 and 3 of M.
        assert_eq!(out.row(0), m.row(0));
        assert_eq!(out.row(1), m.row(3));
        let oracle = lift.matrix().transpose() * &m;
        assert_eq!(out, oracle);

        assert_eq!(
            adjoint_apply(&lift, lift.matrix()).unwrap(),
            gram_accumulate(&[lift.clone()]).unwrap()
        );
        assert!(adjoint_apply(&lift, &DMatrix::zeros(3, 1)).is_err());
    }

    fn line_signal() -> impl Strategy<Value = Signal> {
        prop::collection::vec(-10.0f64..10.0, 1..40).prop_map(|v| Signal::line(v).unwrap())
    }

    proptest! {
        #[test]
        fn shift_is_invertible(x in line_signal(), r in 0usize..64) {
            let n = x.len();
            let r = r % n;
            let back = cyclic_shift(&cyclic_shift(&x, Offset::Line(r)).unwrap(), Offset::Line(n - r)).unwrap();
            prop_assert_eq!(back.values(), x.values());
        }

        #[test]
        fn shift_preserves_norm(x in line_signal(), r in 0usize..64) {
            let y = cyclic_shift(&x, Offset::Line(r)).unwrap();
            let nx = x.norm();
            prop_assert!((y.norm() - nx).abs() <= 1e-12 * nx.max(1.0));
        }

        #[test]
        fn convolve_matches_lift_product(x in line_signal(), d in prop::collection::vec(-2.0f64..2.0, 1..6)) {
            prop_assume!(d.len() <= x.len());
            let p = OffsetPattern::line(d.len()).unwrap();
            let y = convolve(&x, &d, &p).unwrap();
            let lift = build_lift(&x, &p).unwrap();
            let oracle = lift.matrix() * nalgebra::DVector::from_column_slice(&d);
            for (a, b) in y.values().iter().zip(oracle.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn gram_is_psd_and_lift_norm_exact(xs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 12), 1..5), r in 1usize..6) {
            let p = OffsetPattern::line(r).unwrap();
            let lifts: Vec<_> = xs.into_iter().map(|v| build_lift(&Signal::line(v).unwrap(), &p).unwrap()).collect();
            let g = gram_accumulate(&lifts).unwrap();
            let eig = g.clone().symmetric_eigen().eigenvalues;
            let max = eig.max();
            prop_assert!(eig.min() >= -1e-10 * max.abs().max(1e-300));
            for lift in &lifts {
                let expected = (r as f64).sqrt() * lift.signal_norm();
                assert_abs_diff_eq!(lift.matrix().norm(), expected, epsilon = 1e-10 * expected.max(1.0));
            }
        }
    }
}
