use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference formula used per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h^2).
    #[default]
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, truncation error
    /// O(h^4). Allows a larger `h`, which keeps round-off in the loss value
    /// from swamping coordinates with near-zero gradient.
    FivePoint,
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates whose step had to shrink so that every stencil point stays
    /// on the same side of each ReLU, top-k choice and clamp as the base point.
    pub reduced_steps: usize,
    /// Coordinates where even the smallest step crossed a kink. They still
    /// count towards `max_rel_error`.
    pub kinked: usize,
}

/// Each retry divides the step by this factor.
const STEP_SHRINK: f64 = 4.0;
const MAX_SHRINKS: usize = 6;

/// Relative error with the denominator floored at 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the reverse-mode gradient of a scalar function against central
/// differences, one coordinate at a time.
///
/// `f` receives a fresh tape with every input registered as a leaf, in order.
pub fn finite_diff_check<F>(f: F, point: &[Array], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(f, point, eps, Stencil::ThreePoint)
}

/// [`finite_diff_check`] with an explicit stencil.
pub fn finite_diff_check_with<F>(f: F, point: &[Array], eps: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |inputs: &[Array]| -> Result<(f64, Vec<usize>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok((tape.value(root).data()[0], tape.branch_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|a| tape.leaf(a.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let base_pattern = tape.branch_pattern();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        reduced_steps: 0,
        kinked: 0,
    };
    let mut work: Vec<Array> = point.to_vec();
    for (which, &var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, var);
        for flat in 0..point[which].len() {
            let original = point[which].data()[flat];
            let offsets: &[f64] = match stencil {
                Stencil::ThreePoint => &[1.0, -1.0],
                Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
            };
            let mut h = eps;
            let mut shrinks = 0;
            let numeric = loop {
                let mut values = Vec::with_capacity(offsets.len());
                let mut smooth = true;
                for &o in offsets {
                    work[which].data_mut()[flat] = original + o * h;
                    let (v, pattern) = eval(&work)?;
                    smooth &= pattern == base_pattern;
                    values.push(v);
                }
                work[which].data_mut()[flat] = original;
                if smooth || shrinks == MAX_SHRINKS {
                    if !smooth {
                        report.kinked += 1;
                    }
                    break match stencil {
                        Stencil::ThreePoint => (values[0] - values[1]) / (2.0 * h),
                        Stencil::FivePoint => (8.0 * (values[0] - values[1]) - (values[2] - values[3])) / (12.0 * h),
                    };
                }
                h /= STEP_SHRINK;
                shrinks += 1;
            };
            if shrinks > 0 {
                report.reduced_steps += 1;
            }
            let a = analytic.data()[flat];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = err;
                report.worst = (which, flat);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Array::new(vec![3], vec![0.5, -2.0, 4.0]).unwrap();
        let x = Array::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = finite_diff_check(
            |tape, v| {
                let p = tape.mul(v[0], v[1])?;
                Ok(tape.sum(p))
            },
            &[w, x],
            DEFAULT_EPS,
        )
        .unwrap();
        // Bilinear, so each coordinate is linear and central differences are exact.
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.coordinates, 6);
    }

    #[test]
    fn five_point_is_exact_for_quartics() {
        // x^4 has a vanishing fifth derivative, so the O(h^4) stencil is exact
        // up to round-off while the three-point one is off by h^2 * 4x.
        let x = Array::scalar(1.5);
        let quartic = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            let q = t.mul(sq, sq)?;
            Ok(t.sum(q))
        };
        let five = finite_diff_check_with(quartic, std::slice::from_ref(&x), 1e-2, Stencil::FivePoint).unwrap();
        let three = finite_diff_check_with(quartic, &[x], 1e-2, Stencil::ThreePoint).unwrap();
        assert!(five.max_rel_error < 1e-12, "{five:?}");
        assert!((three.numeric - three.analytic - 4.0 * 1.5 * 1e-4).abs() < 1e-10, "{three:?}");
    }

    #[test]
    fn step_shrinks_instead_of_straddling_a_kink() {
        // relu(x) at x = 1e-4 with h = 1e-3 would average both slopes.
        let x = Array::scalar(1e-4);
        let r = finite_diff_check(|t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        }, &[x], 1e-3)
        .unwrap();
        assert_eq!(r.reduced_steps, 1);
        assert_eq!(r.kinked, 0);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Array::scalar(1.0);
        assert!(finite_diff_check(|t, v| Ok(t.sum(v[0])), &[x], 0.0).is_err());
    }
}
