//! Finite-difference validation of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::numeric::param::Parameter;

/// Entries above which a parameter is checked on a random subsample.
const SUBSAMPLE_THRESHOLD: usize = 1000;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen across all checked entries.
    pub max_rel_err: f64,
    /// Parameter name and flat entry index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    pub tol: f64,
    /// `max_rel_err < tol`; strict, so `tol = 0` always fails.
    pub passed: bool,
}

/// Compares analytic gradients against central finite differences.
///
/// `compute_grads` must run a full forward/backward pass, leaving the
/// analytic gradient in each parameter's `grad` slot. `loss` must be a
/// pure evaluation of the same objective. Every parameter entry is
/// perturbed by `±h` (or a seeded subsample of 1000 entries for
/// parameters larger than that) and the relative error
/// `|a - n| / max(|a|, |n|, 1e-6)` is recorded.
///
/// Fails with a contract error when two evaluations of `loss` disagree,
/// since finite differences are meaningless for a non-deterministic
/// objective.
pub fn grad_check<S>(
    state: &mut S,
    loss: impl Fn(&S) -> Result<f64>,
    compute_grads: impl Fn(&mut S) -> Result<f64>,
    params_of: impl Fn(&mut S) -> Vec<&mut Parameter>,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if h <= 0.0 {
        return Err(Error::Parameter(format!("step h must be positive, got {h}")));
    }
    let l1 = loss(state)?;
    let l2 = loss(state)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::Contract(format!(
            "loss is not deterministic: {l1} vs {l2}"
        )));
    }

    for p in params_of(state) {
        p.zero_grad();
    }
    compute_grads(state)?;
    let analytic: Vec<(String, Vec<f64>)> = params_of(state)
        .iter()
        .map(|p| (p.name.clone(), p.grad.as_slice().to_vec()))
        .collect();
    for p in params_of(state) {
        p.zero_grad();
    }

    let mut rng = ChaCha12Rng::seed_from_u64(0x67726164);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
        tol,
        passed: false,
    };

    for (pi, (name, grads)) in analytic.iter().enumerate() {
        let n = grads.len();
        let indices: Vec<usize> = if n > SUBSAMPLE_THRESHOLD {
            rand::seq::index::sample(&mut rng, n, SUBSAMPLE_THRESHOLD).into_vec()
        } else {
            (0..n).collect()
        };
        for idx in indices {
            let orig = {
                let mut ps = params_of(state);
                let v = ps[pi].value.as_slice()[idx];
                ps[pi].value.as_mut_slice()[idx] = v + h;
                v
            };
            let f_plus = loss(state)?;
            {
                let mut ps = params_of(state);
                ps[pi].value.as_mut_slice()[idx] = orig - h;
            }
            let f_minus = loss(state)?;
            {
                let mut ps = params_of(state);
                ps[pi].value.as_mut_slice()[idx] = orig;
            }
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = grads[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::matrix::Matrix;
    use crate::numeric::tape::Tape;

    struct Lin {
        w: Parameter,
        x: Matrix,
    }

    fn linear_loss(s: &Lin) -> Result<f64> {
        Ok(s.w
            .value
            .as_slice()
            .iter()
            .zip(s.x.as_slice())
            .map(|(w, x)| w * x)
            .sum())
    }

    fn linear_grads(s: &mut Lin) -> Result<f64> {
        let tape = Tape::new();
        let w = tape.leaf(s.w.value.clone());
        let x = tape.constant(s.x.clone());
        let loss = tape.sum(tape.mul(w, x));
        tape.backward(loss);
        s.w.accumulate_grad(&tape.grad(w));
        Ok(tape.scalar(loss))
    }

    #[test]
    fn linear_loss_matches_to_machine_precision() {
        let mut s = Lin {
            w: Parameter::new("w", Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap()),
            x: Matrix::from_rows(&[vec![1.5, 0.25, -0.75]]).unwrap(),
        };
        let report = grad_check(&mut s, linear_loss, linear_grads, |s| vec![&mut s.w], 1e-5, 1e-4)
            .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
        assert_eq!(report.entries_checked, 3);
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let mut s = Lin {
            w: Parameter::new("w", Matrix::from_rows(&[vec![0.5]]).unwrap()),
            x: Matrix::from_rows(&[vec![2.0]]).unwrap(),
        };
        let report = grad_check(&mut s, linear_loss, linear_grads, |s| vec![&mut s.w], 1e-5, 0.0)
            .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_deterministic_loss_is_a_contract_error() {
        use std::cell::Cell;
        struct Noisy {
            w: Parameter,
            calls: Cell<u64>,
        }
        let mut s = Noisy {
            w: Parameter::new("w", Matrix::zeros(1, 1)),
            calls: Cell::new(0),
        };
        let err = grad_check(
            &mut s,
            |s| {
                s.calls.set(s.calls.get() + 1);
                Ok(s.calls.get() as f64)
            },
            |_| Ok(0.0),
            |s| vec![&mut s.w],
            1e-5,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut s = Lin {
            w: Parameter::new("w", Matrix::from_rows(&[vec![0.7]]).unwrap()),
            x: Matrix::from_rows(&[vec![2.0]]).unwrap(),
        };
        let wrong = |s: &mut Lin| -> Result<f64> {
            s.w.grad = Matrix::from_rows(&[vec![5.0]]).unwrap(); // true grad is 2.0
            Ok(0.0)
        };
        let report =
            grad_check(&mut s, linear_loss, wrong, |s| vec![&mut s.w], 1e-5, 1e-4).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_err > 0.5);
    }
}
