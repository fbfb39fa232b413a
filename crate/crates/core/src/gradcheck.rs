//! Central finite-difference checks of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Absolute floor on the relative-error denominator; keeps near-zero
/// gradients from turning round-off into large relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many entries per parameter tensor (sampled with `seed`).
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            max_entries_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_scalar<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let out = f(&mut tape)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            reason: format!("function returned shape {:?}", tape.shape(out)),
        });
    }
    Ok(tape.item(out))
}

/// Compares tape gradients of the scalar `f` with central differences for
/// every parameter in `store`.
///
/// `f` receives a tape bound to (a possibly perturbed copy of) `store` and
/// must read parameters through [`Tape::param`].
pub fn grad_check<F>(store: &ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.h) {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            reason: format!("step h = {} outside [1e-6, 1e-4]", opts.h),
        });
    }

    let analytic = {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        if tape.value(out).len() != 1 {
            return Err(Error::InvalidArgument {
                op: "grad_check",
                reason: format!("function returned shape {:?}", tape.shape(out)),
            });
        }
        let grads = tape.backward(out);
        store
            .ids()
            .map(|id| grads.param(id).map(<[f64]>::to_vec))
            .collect::<Vec<_>>()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut entries = Vec::new();

    for (id, param) in store.iter() {
        let n = param.value.len();
        let indices: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => {
                let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for index in indices {
            let orig = param.value.data()[index];
            work.value_mut(id).data_mut()[index] = orig + opts.h;
            let plus = eval_scalar(&work, &f)?;
            work.value_mut(id).data_mut()[index] = orig - opts.h;
            let minus = eval_scalar(&work, &f)?;
            work.value_mut(id).data_mut()[index] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check: f at perturbed parameter `{}` index {index}", param.name),
                });
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[index]);
            entries.push(GradCheckEntry {
                param: param.name.clone(),
                index,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }

    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err <= opts.tol,
        max_rel_err,
        tol: opts.tol,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", ParamGroup::Head, Tensor::scalar(3.0));
        let report = grad_check(
            &store,
            |tape| {
                let v = tape.param(x);
                tape.mul(v, v)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        let e = &report.entries[0];
        assert_eq!(e.analytic, 6.0);
        assert!((e.numeric - 6.0).abs() < 1e-8);
        assert!(e.rel_err < 1e-8);
        assert!(report.passed);
    }

    #[test]
    fn rejects_step_outside_range() {
        let store = ParamStore::new();
        let opts = GradCheckOptions {
            h: 1e-2,
            ..Default::default()
        };
        assert!(grad_check(&store, |t| Ok(t.constant(Tensor::scalar(0.0))), opts).is_err());
    }

    #[test]
    fn non_finite_perturbation_names_index() {
        let mut store = ParamStore::new();
        // exp overflows just above this value
        let x = store.add("x", ParamGroup::Head, Tensor::row_vector(vec![1.0, 709.782712893384]));
        let err = grad_check(
            &store,
            |tape| {
                let v = tape.param(x);
                let e = tape.exp(v);
                Ok(tape.sum(e))
            },
            GradCheckOptions::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("index 1"), "{msg}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides part of the dependence from the tape, so FD disagrees
        let mut store = ParamStore::new();
        let x = store.add("x", ParamGroup::Head, Tensor::scalar(2.0));
        let report = grad_check(
            &store,
            |tape| {
                let v = tape.param(x);
                let d = tape.detach(v);
                tape.mul(v, d)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed);
    }
}
