//! Central-difference gradient oracle.
//!
//! The oracle only ever evaluates forward passes: for a parameter element
//! θ it estimates dL/dθ as (L(θ+h) − L(θ−h)) / 2h and compares that
//! against whatever the reverse pass produced. It is therefore an
//! independent check of the tape's backward rules.
//!
//! Errors are measured as |a − b| / max(1, |a|, |b|): relative for large
//! gradients, absolute below magnitude one, so finite-difference noise on
//! near-zero gradients does not drown the signal.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::{ParamSet, Tape, TensorId};

/// Step used by every finite-difference check in the crate.
pub const FD_STEP: f64 = 1e-5;

/// Acceptance tolerance for gradient agreement.
pub const GRAD_TOL: f64 = 1e-5;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of scalar parameter entries compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks every trainable parameter of `params` against central finite
/// differences of the loss produced by `forward`.
///
/// `forward` must be a pure function of the parameter values: it records
/// a fresh forward pass on the given tape and returns the scalar loss
/// node. The analytic gradients come from one `backward` call; the
/// finite-difference probes never invoke `backward`.
pub fn check_loss_gradients(
    params: &mut ParamSet,
    forward: impl Fn(&ParamSet, &mut Tape) -> Result<TensorId>,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let mut tape = Tape::new();
    let loss = forward(params, &mut tape)?;
    tape.backward(loss)?;
    params.zero_grads();
    tape.accumulate_param_grads(params);
    let analytic: BTreeMap<String, Vec<f64>> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| {
            let g = p
                .value
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            (p.name.clone(), g)
        })
        .collect();
    params.zero_grads();

    let eval = |params: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = forward(params, &mut tape)?;
        Ok(tape.value(loss).data()[0])
    };

    let names: Vec<String> = analytic.keys().cloned().collect();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    for name in names {
        let n = params.expect(&name).value.numel();
        for i in 0..n {
            let original = params.expect(&name).value.data()[i];
            params.get_mut(&name).unwrap().value.data_mut()[i] = original + FD_STEP;
            let up = eval(params)?;
            params.get_mut(&name).unwrap().value.data_mut()[i] = original - FD_STEP;
            let down = eval(params)?;
            params.get_mut(&name).unwrap().value.data_mut()[i] = original;

            let fd = (up - down) / (2.0 * FD_STEP);
            let an = analytic[&name][i];
            let err = relative_error(fd, an);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
