//! Central-difference gradient verification (run in `f64`).

use super::{ParameterRegistry, Tape, Tensor, TensorError, Var};

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences with step `eps`. `f` must reduce to a scalar.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let mut empty = ParameterRegistry::new();
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let loss = f(&mut tape, xv)?;
    let analytic = tape
        .backward(loss, &mut empty)?
        .of(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let v = t.input(point);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same check over every trainable parameter in `registry`; `f` builds the
/// scalar loss from the registry on a fresh tape.
pub fn grad_check_params<F>(
    f: F,
    registry: &ParameterRegistry<f64>,
    eps: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &ParameterRegistry<f64>) -> Result<Var, TensorError>,
{
    let mut reg = registry.clone();
    reg.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &reg)?;
    tape.backward(loss, &mut reg)?;

    let eval = |r: &ParameterRegistry<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let out = f(&mut t, r)?;
        Ok(t.value(out).item())
    };

    let mut probe = registry.clone();
    let mut worst: f64 = 0.0;
    let ids: alloc::vec::Vec<_> = registry
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        for i in 0..registry.get(id).value.len() {
            let orig = registry.get(id).value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(reg.get(id).grad.data()[i], numeric));
        }
    }
    Ok(worst)
}
