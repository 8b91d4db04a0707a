//! Central finite-difference verification of analytic gradients,
//! intended for the `f64` instantiation of the tape.

use std::collections::BTreeMap;

use super::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Coordinates whose probe interval straddled a rectifier kink at
    /// the requested step and was re-probed at a smaller one.
    pub kink_reprobes: usize,
}

/// Compare `analytic` gradients against central differences of `eval`.
///
/// `eval` must be a pure forward pass returning the scalar loss and the
/// tape's [activation signature](super::Graph::activation_signature)
/// for the current parameter values. A central difference only
/// estimates the derivative when both evaluations sit on the same
/// smooth piece, so probes whose signatures differ shrink the step
/// tenfold (up to four times) until the interval is kink-free.
///
/// The error metric per element is `|a - n| / max(1, |a|, |n|)`, a
/// relative error with a unit floor so that near-zero gradients are
/// compared absolutely (central differences at step `h` carry O(h^2)
/// truncation noise).
pub fn check_gradients<F>(
    store: &mut ParamStore<f64>,
    analytic: &BTreeMap<String, Vec<f64>>,
    h: f64,
    mut eval: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(f64, u64)>,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        kink_reprobes: 0,
    };
    let names: Vec<String> = analytic.keys().cloned().collect();
    for name in names {
        let len = store.param(&name)?.value.len();
        for i in 0..len {
            let orig = store.param(&name)?.value[i];
            let mut step = h;
            let mut numeric = None;
            for attempt in 0..5 {
                store.param_mut(&name)?.value[i] = orig + step;
                let (plus, sig_plus) = eval(store)?;
                store.param_mut(&name)?.value[i] = orig - step;
                let (minus, sig_minus) = eval(store)?;
                store.param_mut(&name)?.value[i] = orig;
                if sig_plus == sig_minus {
                    if attempt > 0 {
                        report.kink_reprobes += 1;
                    }
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            let numeric = numeric.ok_or_else(|| {
                Error::State(format!(
                    "probe for {name}[{i}] straddles an activation kink even at step {step:e}"
                ))
            })?;
            let a = analytic[&name][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
