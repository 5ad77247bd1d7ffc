//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it validates.

use crate::array::Array;
use crate::error::AutodiffError;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward-pass gradients of a scalar function of `params` against
/// central differences with step `h`.
///
/// At most `max_per_param` evenly spaced entries of each array are probed.
pub fn check<F>(
    params: &ParamStore,
    f: F,
    h: f64,
    floor: f64,
    max_per_param: usize,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();

    let eval = |p: &ParamStore| -> Result<f64, AutodiffError> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (name, value) in params.iter() {
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Array::zeros(value.shape()));
        let n = value.len();
        let stride = n.div_ceil(max_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = value.data()[i];
            probe.get_mut(name).expect("present").data_mut()[i] = orig + h;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig - h;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = rel_err(analytic.data()[i], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
