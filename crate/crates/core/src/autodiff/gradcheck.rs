//! Central finite-difference check of analytic gradients.

use super::{AutodiffError, ParamStore, Tape, Var};

/// Denominator floor for [`relative_error`]. Below this magnitude the error is
/// effectively absolute, so near-zero gradients do not blow up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-2;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }

    /// Parameters whose worst coordinate exceeds the tolerance.
    pub fn offenders(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_error > self.tolerance)
            .collect()
    }
}

/// Compares backward-pass gradients of every trainable parameter against
/// `(f(p + h) - f(p - h)) / 2h`, one coordinate at a time.
pub fn finite_diff_check<F, E>(
    store: &mut ParamStore,
    loss: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    finite_diff_check_where(store, loss, h, tol, |_| true)
}

/// Like [`finite_diff_check`], restricted to parameters whose name passes
/// `select`.
pub fn finite_diff_check_where<F, E>(
    store: &mut ParamStore,
    mut loss: F,
    h: f64,
    tol: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    store.zero_grads();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    tape.backward(out, store)?;

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut tape = Tape::new();
        let out = loss(&mut tape, store)?;
        Ok(tape.value(out).item())
    };

    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.requires_grad && select(&p.name))
        .map(|(id, _)| id)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        tolerance: tol,
        coordinates: 0,
        params: Vec::with_capacity(ids.len()),
    };
    for id in ids {
        let n = store.value(id).numel();
        let analytic: Vec<f64> = match store.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; n],
        };
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..n {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[k], numeric);
            if err > check.max_rel_error || k == 0 {
                check.max_rel_error = err;
                check.worst_index = k;
                check.analytic = analytic[k];
                check.numeric = numeric;
            }
        }
        report.coordinates += n;
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    store.zero_grads();
    Ok(report)
}
