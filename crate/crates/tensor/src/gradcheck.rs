//! Central finite-difference checks of tape gradients.

use std::collections::BTreeSet;

use crate::{ParamStore, Tape, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation half-width `h` in `(f(w+h) - f(w-h)) / 2h`.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error, so entries
    /// whose true gradient is ~0 are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Compare analytic gradients of a scalar loss with central differences.
///
/// Every entry of `params` is registered on a fresh tape before `loss` runs,
/// taking gradients iff its name is in `trainable`; `loss` should look
/// parameters up with [`Tape::param`] (which returns the registered node)
/// and return the scalar loss node. Frozen parameters never appear in the
/// report.
pub fn finite_diff_check<F, E>(
    params: &ParamStore<f64>,
    trainable: &BTreeSet<String>,
    config: GradCheckConfig,
    mut loss: F,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(config.step > 0.0) {
        return Err(TensorError::Invalid {
            op: "finite_diff_check",
            message: format!("step must be positive, got {}", config.step),
        }
        .into());
    }
    let mut eval = |store: &ParamStore<f64>, want_grad: bool| -> Result<(f64, Option<ParamStore<f64>>), E> {
        let mut tape = Tape::<f64>::new();
        for (name, t) in store.iter() {
            tape.param(name, t, want_grad && trainable.contains(name));
        }
        let out = loss(&mut tape, store)?;
        let value = tape.value(out).item();
        if !value.is_finite() {
            return Err(TensorError::NonFinite("loss under finite-difference check".into()).into());
        }
        let grads = if want_grad {
            Some(tape.backward(out)?.named(&tape))
        } else {
            None
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.unwrap_or_default();
    let mut work = params.clone();
    let mut report = Vec::new();
    for name in trainable {
        let Some(grad) = analytic.get(name) else {
            return Err(TensorError::UnknownLeaf(name.clone()).into());
        };
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..grad.numel() {
            let original = work.get(name).expect("cloned store").data()[i];
            work.get_mut(name).expect("cloned store").data_mut()[i] = original + config.step;
            let (plus, _) = eval(&work, false)?;
            work.get_mut(name).expect("cloned store").data_mut()[i] = original - config.step;
            let (minus, _) = eval(&work, false)?;
            work.get_mut(name).expect("cloned store").data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(config.floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        report.push(ParamCheck {
            name: name.clone(),
            numel: grad.numel(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport {
        tolerance: config.tolerance,
        params: report,
    })
}
