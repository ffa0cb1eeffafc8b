use super::param::ParamStore;
use super::tape::{Tape, Var};
use super::TensorError;

/// Worst-case agreement between analytic and central-difference gradients
/// for one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_error < tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Magnitude below which gradient differences are judged absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Compares backward against central differences `(f(θ+h) − f(θ−h)) / 2h`
/// for every entry of every parameter in `store`.
///
/// `loss` must build a scalar on the tape it is handed; it is invoked once
/// for the analytic pass and twice per perturbed entry.
pub fn check_gradients<E, F>(
    store: &ParamStore<f64>,
    step: f64,
    loss: F,
) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Tape<'_, f64>) -> Result<Var, E>,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let l = loss(&mut tape)?;
        tape.backward(l)?.into_param_grads()
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut tape = Tape::with_params(s);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (id, param) in store.iter() {
        let mut check = ParamCheck {
            name: param.name.clone(),
            elements: param.value.len(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
        };
        for j in 0..param.value.len() {
            let original = param.value.data()[j];
            work.get_mut(id).value.data_mut()[j] = original + step;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = original - step;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[j]);
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(REL_FLOOR);
            check.max_abs_error = check.max_abs_error.max(abs);
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        report.params.push(check);
    }
    Ok(report)
}
