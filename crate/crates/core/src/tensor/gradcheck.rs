use super::{Tape, Tensor, TensorError, Var};

/// Largest relative disagreement between the tape gradient of a scalar
/// function and its central finite difference with step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |pt: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let v = tape.constant(pt.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - central).abs() / (a.abs() + central.abs() + 1e-12));
    }
    Ok(worst)
}
