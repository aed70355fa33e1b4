//! Central finite-difference check of reverse-mode gradients (64-bit).

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Settings for [`GradCheck::run`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so that exactly-zero
    /// gradients compare by absolute difference.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly spread).
    pub max_per_input: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-7, max_per_input: None }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±step evaluation flipped a relu/abs branch.
    pub skipped_kinks: usize,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

impl GradCheck {
    fn coordinates(&self, len: usize) -> Vec<usize> {
        match self.max_per_input {
            Some(k) if k < len => (0..k).map(|i| (i * len + len / (2 * k)) / k).collect(),
            _ => (0..len).collect(),
        }
    }

    /// Compare gradients of the scalar `f(inputs)` with central differences.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> GradCheckReport
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
    {
        self.run_with_params(&ParamStore::new(), inputs, |p, v| f(p.graph(), v))
    }

    /// Like [`GradCheck::run`], additionally checking every parameter of
    /// `store`. Parameters are reported as inputs `inputs.len()..`.
    pub fn run_with_params<F>(&self, store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> GradCheckReport
    where
        F: for<'g, 's> Fn(&Bound<'g, 's, f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
    {
        let eval = |store: &ParamStore<f64>, xs: &[Tensor<f64>]| -> (f64, Option<Vec<bool>>) {
            let g = Graph::new();
            g.trace_kinks();
            let p = Bound::frozen(&g, store);
            let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
            let y = f(&p, &vars);
            (y.item(), g.kink_trace())
        };

        let g = Graph::new();
        g.trace_kinks();
        let bound = Bound::trainable(&g, store);
        let vars: Vec<_> = inputs.iter().map(|x| g.variable(x.clone())).collect();
        let y = f(&bound, &vars);
        let base_trace = g.kink_trace();
        let grads = g.backward(y);
        let mut analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
        analytic.extend(bound.collect_grads(&grads));
        drop(bound);

        let mut report = GradCheckReport::default();
        let mut xs = inputs.to_vec();
        let mut ps = store.clone();
        let ids: Vec<_> = store.ids().collect();
        for k in 0..analytic.len() {
            let len = analytic[k].len();
            for idx in self.coordinates(len) {
                let n_in = inputs.len();
                let orig = if k < n_in { inputs[k].data()[idx] } else { store.get(ids[k - n_in]).data()[idx] };
                let set = |xs: &mut Vec<Tensor<f64>>, ps: &mut ParamStore<f64>, v: f64| {
                    if k < n_in {
                        xs[k].data_mut()[idx] = v;
                    } else {
                        ps.get_mut(ids[k - n_in]).data_mut()[idx] = v;
                    }
                };
                set(&mut xs, &mut ps, orig + self.step);
                let (fp, tp) = eval(&ps, &xs);
                set(&mut xs, &mut ps, orig - self.step);
                let (fm, tm) = eval(&ps, &xs);
                set(&mut xs, &mut ps, orig);
                if tp != base_trace || tm != base_trace {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * self.step);
                let a = analytic[k].data()[idx];
                let err = relative_error(a, numeric, self.floor);
                report.checked += 1;
                if err >= report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = err;
                    report.worst = Some((k, idx, a, numeric));
                }
            }
        }
        report
    }
}
