//! Central finite-difference gradient verification.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// The denominator floor turns the relative tolerance into an absolute
/// one for near-zero gradients. Central differences at step h carry
/// cancellation noise ~eps*|f|/h and truncation error ~h^2, so entries
/// whose true gradient is far below the floor cannot meet a purely
/// relative bound and are held to |a - n| <= tol * floor instead.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Compares `analytic` gradients against central differences of `f` over
/// every entry of every parameter in `store`. `f` must be deterministic:
/// two evaluations at the base point are required to agree bitwise.
pub fn grad_check<F>(
    store: &mut ParamStore,
    analytic: &IndexMap<String, Vec<f64>>,
    mut f: F,
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let base1 = f(store)?;
    let base2 = f(store)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let names: Vec<String> = store.entries.keys().cloned().collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    for name in &names {
        let len = store.get(name)?.data.len();
        let zeros;
        let grads = match analytic.get(name) {
            Some(g) => g.clone(),
            None => {
                // absent gradient means "unreached": expect zero slope
                zeros = vec![0.0; len];
                zeros
            }
        };
        if grads.len() != len {
            return Err(Error::invalid(format!(
                "grad_check: gradient length mismatch for {name}"
            )));
        }
        for idx in 0..len {
            let orig = store.get(name)?.data[idx];
            store.get_mut(name)?.data[idx] = orig + step;
            let plus = f(store)?;
            store.get_mut(name)?.data[idx] = orig - step;
            let minus = f(store)?;
            store.get_mut(name)?.data[idx] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = rel_err(grads[idx], fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.worst_analytic = grads[idx];
                report.worst_numeric = fd;
            }
        }
    }
    Ok(report)
}
