use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest elementwise relative error over all checked entries.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose ±h probes changed a ReLU activation pattern even after
    /// shrinking the step; central differences are meaningless there.
    pub skipped_kinks: usize,
}

const KINK_RETRIES: usize = 3;

/// Compares the analytic gradient of the scalar built by `f` with central
/// differences `(f(x+h) − f(x−h)) / 2h` for every entry of `params`.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, 1e-3·G)` where
/// `G` is the largest analytic gradient magnitude; entries far below the
/// gradient's own scale are thus compared at that scale. An all-zero
/// gradient reports an error of 0.
///
/// When a probe flips a ReLU the step is shrunk tenfold (up to three times)
/// before the entry is counted in `skipped_kinks`.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Contract(format!("step h={h} outside (0, 1e-3]")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| match grads.param(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; store.value(id).numel()],
        })
        .collect();
    let scale = analytic.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let v = f(&mut t, store)?;
        let value = t.value(v).item()?;
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite loss during gradient check".into()));
        }
        Ok((value, t.kink_signature()))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for (pi, &id) in params.iter().enumerate() {
        for e in 0..store.value(id).numel() {
            let orig = store.value(id).data()[e];
            let mut step = h;
            let mut numeric = None;
            for _ in 0..=KINK_RETRIES {
                store.value_mut(id).data_mut()[e] = orig + step;
                let (plus, sp) = eval(store)?;
                store.value_mut(id).data_mut()[e] = orig - step;
                let (minus, sm) = eval(store)?;
                store.value_mut(id).data_mut()[e] = orig;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            let Some(n) = numeric else {
                report.skipped_kinks += 1;
                continue;
            };
            let a = analytic[pi][e];
            let denom = a.abs().max(n.abs()).max(1e-3 * scale);
            let err = if denom == 0.0 { 0.0 } else { (a - n).abs() / denom };
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
