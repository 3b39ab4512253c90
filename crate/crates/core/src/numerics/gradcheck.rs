//! Central-difference gradient verification.

use super::{Float, NumericsError, Tape, Tensor, Var};

/// Maximum relative error accepted by gradient checks at the build's precision.
#[cfg(not(feature = "f32"))]
pub const GRAD_CHECK_TOLERANCE: Float = 1e-5;
#[cfg(feature = "f32")]
pub const GRAD_CHECK_TOLERANCE: Float = 1e-2;

/// Worst coordinate found by [`finite_difference_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: Float,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: Float,
    pub numeric: Float,
}

/// Compares reverse-mode gradients of `f` at `point` against central differences.
///
/// Returns the maximum over every coordinate of
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
/// `f` must be deterministic. `point` is restored before returning.
pub fn finite_difference_check<E, F>(point: &mut [Tensor], eps: Float, f: F) -> Result<Float, E>
where
    E: From<NumericsError>,
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var, E>,
{
    finite_difference_report(point, eps, f).map(|r| r.max_relative_error)
}

/// Same as [`finite_difference_check`], also locating the worst coordinate.
pub fn finite_difference_report<E, F>(point: &mut [Tensor], eps: Float, f: F) -> Result<GradCheckReport, E>
where
    E: From<NumericsError>,
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var, E>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("step {eps} must be positive"),
        }
        .into());
    }
    for t in point.iter_mut() {
        t.set_requires_grad(true);
    }
    let analytic: Vec<Vec<Float>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.input(t)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(point.iter())
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[Float]>::to_vec))
            .collect()
    };

    let evaluate = |point: &[Tensor]| -> Result<Float, E> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = point.iter().map(|t| tape.input(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss)[0])
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..point.len() {
        for j in 0..point[i].numel() {
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = orig + eps;
            let up = evaluate(point)?;
            point[i].data_mut()[j] = orig - eps;
            let down = evaluate(point)?;
            point[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            if err > report.max_relative_error {
                report = GradCheckReport {
                    max_relative_error: err,
                    worst: (i, j),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
