use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries: usize,
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares reverse-mode gradients against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` for every entry of every parameter.
///
/// `loss_fn` builds the scalar loss on the tape it is handed and must be a
/// pure function of the parameters. Parameter values are restored and stored
/// gradients are left untouched.
pub fn grad_check<F>(params: &mut ParamStore, h: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("grad_check step {h} outside [1e-7, 1e-3]")));
    }
    let mut eval = |params: &ParamStore, with_grad: bool| -> Result<(f64, Option<Vec<_>>)> {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape)?;
        let value = tape.scalar(loss);
        if !with_grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        let dense = params
            .ids()
            .map(|id| {
                grads
                    .get(id)
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; params.value(id).len()])
            })
            .collect();
        Ok((value, Some(dense)))
    };

    let (first, analytic) = eval(params, true)?;
    let (second, _) = eval(params, false)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let analytic = analytic.expect("requested gradients");

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for (p, id) in ids.into_iter().enumerate() {
        for k in 0..params.value(id).len() {
            let original = params.value(id).data()[k];
            params.value_mut(id).data_mut()[k] = original + h;
            let plus = eval(params, false).map(|r| r.0);
            params.value_mut(id).data_mut()[k] = original - h;
            let minus = eval(params, false).map(|r| r.0);
            params.value_mut(id).data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = relative_error(analytic[p][k], numeric);
            report.entries += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.leaf(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
