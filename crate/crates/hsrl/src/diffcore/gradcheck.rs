//! Finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::diffcore::tape::{Bindings, Grads, Tape};
use crate::diffcore::ParamSet;
use crate::{HsrlError, Result};

/// Gradients keyed by parameter name for one evaluation of a scalar loss.
pub type GradMap = BTreeMap<String, Vec<f64>>;

pub fn collect_grad_map(bindings: &Bindings, grads: &Grads, tape: &Tape) -> GradMap {
    bindings.grad_map(grads, tape)
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compare the analytic gradient of `run` against central finite differences
/// over every coordinate of every parameter in `model`.
///
/// `run` must be deterministic: it evaluates the scalar loss at the model's
/// current parameter values and returns the analytic gradient map alongside.
/// The error reported per coordinate is
/// |analytic - central| / max(1, |central|); the maximum is returned.
pub fn finite_difference_check<M, F>(model: &mut M, step: f64, run: F) -> Result<FdReport>
where
    M: ParamSet,
    F: Fn(&M) -> Result<(f64, GradMap)>,
{
    if step <= 0.0 {
        return Err(HsrlError::Config(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (loss0, analytic) = run(model)?;
    if !loss0.is_finite() {
        return Err(HsrlError::Numeric(format!("non-finite loss {loss0}")));
    }

    let names = model.param_names();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };

    for name in &names {
        let len = param_len(model, name);
        let zero = vec![0.0; len];
        for idx in 0..len {
            let orig = perturb(model, name, idx, step);
            let up = run(model)?.0;
            set_coord(model, name, idx, orig - step);
            let down = run(model)?.0;
            set_coord(model, name, idx, orig);
            if !up.is_finite() || !down.is_finite() {
                return Err(HsrlError::Numeric(format!(
                    "non-finite loss while perturbing {name}[{idx}]"
                )));
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.get(name).unwrap_or(&zero)[idx];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

fn param_len<M: ParamSet>(model: &M, name: &str) -> usize {
    let mut len = 0;
    model.visit_params(&mut |p| {
        if p.name == name {
            len = p.data.len();
        }
    });
    len
}

/// Add `delta` to one coordinate, returning its original value.
fn perturb<M: ParamSet>(model: &mut M, name: &str, idx: usize, delta: f64) -> f64 {
    let mut orig = 0.0;
    model.visit_params_mut(&mut |p| {
        if p.name == name {
            orig = p.data.values()[idx];
            p.data.values_mut()[idx] = orig + delta;
        }
    });
    orig
}

fn set_coord<M: ParamSet>(model: &mut M, name: &str, idx: usize, value: f64) {
    model.visit_params_mut(&mut |p| {
        if p.name == name {
            p.data.values_mut()[idx] = value;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{NumArray, Parameter, SeededRng};

    #[test]
    fn constant_function_reports_near_zero_error() {
        // sum(softmax(z)) is identically 1; both analytic and numeric
        // gradients must vanish.
        let mut rng = SeededRng::new(2);
        let mut params = vec![Parameter::uniform("z", &[5], &mut rng)];
        let run = |ps: &Vec<Parameter>| {
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let z = bindings.bind(&mut tape, &ps[0]);
            let s = tape.softmax(z)?;
            let loss = tape.sum(s);
            let grads = tape.backward(loss)?;
            Ok((
                tape.scalar_value(loss),
                collect_grad_map(&bindings, &grads, &tape),
            ))
        };
        let report = finite_difference_check(&mut params, 1e-5, run).unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = SeededRng::new(3);
        let mut params = vec![Parameter::uniform("z", &[4], &mut rng)];
        let run = |ps: &Vec<Parameter>| {
            let mut tape = Tape::new();
            let mut bindings = Bindings::new();
            let z = bindings.bind(&mut tape, &ps[0]);
            let t = tape.tanh(z);
            let loss = tape.sum(t);
            let grads = tape.backward(loss)?;
            let mut map = collect_grad_map(&bindings, &grads, &tape);
            // Corrupt one coordinate; the check must flag it.
            map.get_mut("z").unwrap()[1] += 0.5;
            Ok((tape.scalar_value(loss), map))
        };
        let report = finite_difference_check(&mut params, 1e-5, run).unwrap();
        assert!(report.max_rel_err > 0.1, "{report:?}");
        assert_eq!(report.worst_param, "z");
        assert_eq!(report.worst_index, 1);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let mut params = vec![Parameter::zeros("z", &[2])];
        let run = |_: &Vec<Parameter>| Ok((f64::NAN, GradMap::new()));
        assert!(finite_difference_check(&mut params, 0.0, run).is_err());
        assert!(finite_difference_check(&mut params, 1e-5, run).is_err());
        let _ = NumArray::scalar(0.0);
    }
}
