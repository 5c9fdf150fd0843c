//! Central finite-difference gradient checking.

use crate::dd::Dd;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Step for [`check_params_reference`]. Truncation error scales with its
/// square, and double-double roundoff leaves room for a much smaller step
/// than `f64` allows.
pub const REFERENCE_EPS: f64 = 1e-8;

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn observe(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        if err > self.max_relative_error || self.coordinates == 0 {
            self.max_relative_error = err;
            self.worst_index = index;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
        self.coordinates += 1;
    }
}

/// Check the gradient of a scalar function of one tensor.
///
/// `f` records its computation on the supplied graph, starting from the leaf
/// it is handed, and returns the scalar output.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut graph = Graph::new();
    let leaf = graph.variable(x.clone());
    let out = f(&mut graph, leaf)?;
    graph.backward(out)?;
    let analytic = graph
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(t.clone());
        let out = f(&mut g, leaf)?;
        Ok(g.value(out).item().as_f64())
    };

    let mut report = GradCheckReport::default();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(eps);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - T::of(eps);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        report.observe(i, analytic.data()[i].as_f64(), numeric);
    }
    Ok(report)
}

/// Compare accumulated store gradients against central differences of `loss`
/// for the listed parameters. `loss` must be a pure function of the store.
///
/// Returns one report per parameter, in the order given.
pub fn check_params<T, F>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    eps: f64,
    mut loss: F,
) -> Result<Vec<(String, GradCheckReport)>>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<f64>,
{
    let mut reports = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic = store.grad(id).clone();
        let mut report = GradCheckReport::default();
        for i in 0..analytic.numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + T::of(eps);
            let plus = loss(store)?;
            store.value_mut(id).data_mut()[i] = orig - T::of(eps);
            let minus = loss(store)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            report.observe(i, analytic.data()[i].as_f64(), numeric);
        }
        reports.push((store.get(id).name.clone(), report));
    }
    Ok(reports)
}

/// Like [`check_params`], but the central differences are taken in
/// double-double precision on a copy of the store.
///
/// With `f64` differences the loss roundoff (about one ulp of the loss)
/// divided by `2·eps` exceeds the tolerance on coordinates whose gradient is
/// close to the `1e-8` floor. Evaluating the loss in [`Dd`] removes that
/// noise so only the analytic gradient is under test.
pub fn check_params_reference<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    eps: f64,
    mut loss: F,
) -> Result<Vec<(String, GradCheckReport)>>
where
    F: FnMut(&ParamStore<Dd>) -> Result<Dd>,
{
    let mut probe: ParamStore<Dd> = store.cast();
    let h = Dd::from(eps);
    let mut reports = Vec::with_capacity(ids.len());
    for &id in ids {
        let analytic = store.grad(id);
        let mut report = GradCheckReport::default();
        for i in 0..analytic.numel() {
            let orig = probe.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let plus = loss(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - h;
            let minus = loss(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;
            let numeric = ((plus - minus) / (h + h)).as_f64();
            report.observe(i, analytic.data()[i], numeric);
        }
        reports.push((store.get(id).name.clone(), report));
    }
    Ok(reports)
}
