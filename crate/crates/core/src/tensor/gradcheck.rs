use super::{Graph, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Denominator floor for relative errors, so coordinates whose true gradient
/// is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-4;

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coordinates: usize,
    pub tol: f64,
    /// `(coordinate, analytic, numeric)` for every coordinate above `tol`.
    pub failures: Vec<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn new(tol: f64) -> Self {
        Self {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            coordinates: 0,
            tol,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, coord: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.coordinates += 1;
        if rel > self.tol || !rel.is_finite() {
            self.failures.push((coord, analytic, numeric));
        }
    }
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Checks the gradient of `f` at `point` against `(f(x+eps) - f(x-eps)) / 2eps`
/// for every coordinate.
pub fn grad_check<F, E>(f: F, point: &Tensor, eps: f64, tol: f64) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, Var) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |x: &Tensor| -> std::result::Result<f64, E> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let out = f(&mut tape, v)?;
        Ok(scalar_of(&tape, out)?)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let out = f(&mut tape, x)?;
    scalar_of(&tape, out)?;
    if tape.requires_grad(out) {
        tape.backward(out)?;
    }
    let analytic = tape.grad(x).unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut report = GradCheckReport::new(tol);
    let mut probe = point.clone();
    for k in 0..point.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[k] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[k] = orig;
        report.record(k, analytic.data()[k], (up - down) / (2.0 * eps));
    }
    Ok(report)
}

/// Same check with respect to every scalar of every parameter in `store`.
///
/// Coordinates are numbered consecutively across parameters in store order.
pub fn grad_check_params<F, E>(store: &ParamStore, f: F, eps: f64, tol: f64) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |s: &ParamStore| -> std::result::Result<f64, E> {
        let mut g = Graph::new(s);
        let out = f(&mut g)?;
        Ok(scalar_of(&g, out)?)
    };

    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    scalar_of(&g, out)?;
    if g.requires_grad(out) {
        g.backward(out)?;
    }
    let grads = g.gradients();

    let mut report = GradCheckReport::new(tol);
    let mut probe = store.clone();
    let mut coord = 0;
    for id in store.ids() {
        let n = store.get(id).numel();
        for k in 0..n {
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
            let orig = probe.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            report.record(coord, analytic, (up - down) / (2.0 * eps));
            coord += 1;
        }
    }
    Ok(report)
}
