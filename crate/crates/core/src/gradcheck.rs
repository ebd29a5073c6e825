//! Central finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Check at most this many entries per parameter, chosen with `seed`.
    /// `None` checks every entry.
    pub max_entries: Option<usize>,
    /// When a `±step` evaluation puts some ReLU or abs input on the other
    /// side of zero, difference that entry again with every such op held on
    /// its side at the unperturbed point.
    pub freeze_kinks: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
            max_entries: None,
            freeze_kinks: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Entries differenced on the frozen-kink function.
    pub frozen_kinks: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn frozen_kinks(&self) -> usize {
        self.params.iter().map(|p| p.frozen_kinks).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn evaluate<F>(store: &ParamStore, f: &F, mut g: Graph) -> Result<(f64, Vec<i8>)>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    let loss = f(store, &mut g)?;
    Ok((g.value(loss).item()?, g.kink_pattern()))
}

/// Compares the reverse-mode gradient of the scalar built by `f` with
/// central differences, for every learnable entry of `store`. Frozen
/// entries are left out of the report.
pub fn grad_check<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    if !(opts.step > 0.0 && opts.step <= 1e-3) {
        return Err(Error::invalid(format!("step {} outside (0, 1e-3]", opts.step)));
    }
    let mut g = Graph::new();
    let loss = f(store, &mut g)?;
    let first = g.value(loss).item()?;
    let pattern = g.kink_pattern();
    let (second, _) = evaluate(store, &f, Graph::new())?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let analytic = g.backward(loss)?.for_params(store);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::new();
    for (name, grad) in &analytic {
        let n = grad.len();
        let indices: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let mut v = index::sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: indices.len(),
            frozen_kinks: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in indices {
            let orig = store.get(name)?.data()[i];
            let mut diff = |g: &dyn Fn() -> Graph| -> Result<(f64, bool)> {
                work.get_mut(name)?.data_mut()[i] = orig + opts.step;
                let (plus, pat_plus) = evaluate(&work, &f, g())?;
                work.get_mut(name)?.data_mut()[i] = orig - opts.step;
                let (minus, pat_minus) = evaluate(&work, &f, g())?;
                work.get_mut(name)?.data_mut()[i] = orig;
                let kinked = pat_plus != pattern || pat_minus != pattern;
                Ok(((plus - minus) / (2.0 * opts.step), kinked))
            };
            let (mut numeric, kinked) = diff(&Graph::new)?;
            if kinked && opts.freeze_kinks {
                numeric = diff(&|| Graph::with_frozen_kinks(pattern.clone()))?.0;
                check.frozen_kinks += 1;
            }
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if err >= check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = i;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tol: opts.tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::cell::Cell;

    #[test]
    fn quadratic_matches_closed_form() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_fn(&[6], |i| 0.3 * i as f64 - 0.7));
        let report = grad_check(
            &store,
            |s, g| {
                let x = g.param(s, "x")?;
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &GradCheckOptions {
                tol: 1e-9,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn frozen_params_excluded() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[3]));
        store.insert_frozen("backbone", Tensor::full(&[3], 2.0));
        let report = grad_check(
            &store,
            |s, g| {
                let w = g.param(s, "w")?;
                let b = g.param(s, "backbone")?;
                let m = g.mul(w, b)?;
                g.sum(m)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        let names: Vec<_> = report.params.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["w"]);
    }

    #[test]
    fn detects_nondeterminism() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::ones(&[1]));
        let calls = Cell::new(0.0);
        let r = grad_check(
            &store,
            |s, g| {
                calls.set(calls.get() + 1.0);
                let x = g.param(s, "x")?;
                g.affine(x, 1.0, calls.get())
            },
            &GradCheckOptions::default(),
        );
        assert!(matches!(r, Err(Error::NonDeterministic { .. })));
    }

    #[test]
    fn kinked_entries_use_the_frozen_piece() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![2], vec![3e-6, 0.5]).unwrap());
        let f = |s: &ParamStore, g: &mut Graph| {
            let x = g.param(s, "x")?;
            let a = g.abs(x)?;
            g.sum(a)
        };
        let report = grad_check(&store, f, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!((report.checked(), report.frozen_kinks()), (2, 1));

        let naive = GradCheckOptions {
            freeze_kinks: false,
            ..Default::default()
        };
        let report = grad_check(&store, f, &naive).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().worst_index, 0);
    }

    #[test]
    fn rejects_large_step() {
        let store = ParamStore::new();
        let r = grad_check(&store, |_, g| g.input(Tensor::scalar(0.0)), &GradCheckOptions {
            step: 0.1,
            ..Default::default()
        });
        assert!(r.is_err());
    }
}
