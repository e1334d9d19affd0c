//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter; parameters smaller than this are checked exhaustively.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            samples_per_param: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub per_param: Vec<ParamReport>,
    pub failures: Vec<FdFailure>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn coordinates(&self) -> usize {
        self.per_param.iter().map(|p| p.checked).sum()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares backward gradients of `f` against central differences for every
/// parameter of `store` that requires grad.
///
/// Discrete choices recorded by the first forward pass are replayed during the
/// perturbed passes. `store` is restored before returning.
pub fn finite_diff_check<F>(store: &mut ParamStore, f: F, opts: &FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let choices = g.recorded_choices().to_vec();
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, gr) in grads.params() {
        analytic[id.index()] = Some(gr.to_vec());
    }
    drop(g);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::replaying(choices.clone());
        let l = f(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let mut rng = Rng::new(opts.seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        per_param: Vec::new(),
        failures: Vec::new(),
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.get(id).requires_grad {
            continue;
        }
        let n = store.get(id).numel();
        let coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(opts.samples_per_param);
            all
        };
        let zeros = vec![0.0; n];
        let an = analytic[id.index()].as_deref().unwrap_or(&zeros).to_vec();
        let mut pr = ParamReport {
            name: store.name(id).to_string(),
            checked: 0,
            max_rel_err: 0.0,
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let e = rel_err(an[i], numeric);
            pr.checked += 1;
            pr.max_rel_err = pr.max_rel_err.max(e);
            if !(e <= opts.tolerance) {
                report.failures.push(FdFailure {
                    param: pr.name.clone(),
                    index: i,
                    analytic: an[i],
                    numeric,
                    rel_err: e,
                });
            }
        }
        report.max_rel_err = report.max_rel_err.max(pr.max_rel_err);
        report.per_param.push(pr);
    }
    Ok(report)
}
