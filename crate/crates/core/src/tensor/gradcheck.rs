//! Central finite-difference verification of tape gradients.

use crate::error::Result;

use super::{Bound, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Denominator floor for the relative error, so that near-zero
    /// derivatives are compared on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-4, floor: 1e-3 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }
}

/// Compares the analytic gradient of `loss_fn` with central differences for
/// every element of the parameters named in `names` (all when `None`).
pub fn check_gradients<L>(
    store: &mut ParamStore<f64>,
    names: Option<&[&str]>,
    cfg: GradCheckConfig,
    mut loss_fn: L,
) -> Result<GradCheckReport>
where
    L: FnMut(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let loss = loss_fn(&mut tape, &bound)?;
    tape.backward(loss)?;
    let grads = store.gradients(&tape, &bound);
    drop(tape);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let loss = loss_fn(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };

    let selected: Vec<(usize, String)> = store
        .names()
        .enumerate()
        .filter(|(_, n)| names.is_none_or(|list| list.contains(n)))
        .map(|(i, n)| (i, n.to_string()))
        .collect();
    let mut report = GradCheckReport::default();
    for (pi, name) in selected {
        let numel = store.get(&name).unwrap().numel();
        for j in 0..numel {
            let original = store.get(&name).unwrap().data()[j];
            store.get_mut(&name).unwrap().data_mut()[j] = original + cfg.step;
            let plus = eval(store)?;
            store.get_mut(&name).unwrap().data_mut()[j] = original - cfg.step;
            let minus = eval(store)?;
            store.get_mut(&name).unwrap().data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let analytic = grads[pi].as_ref().map_or(0.0, |g| g[j]);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if report.checked == 1 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = j;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
