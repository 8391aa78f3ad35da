use super::{Tape, Tensor, TensorError, Var};

/// Denominator floor for the per-coordinate relative error, so coordinates
/// whose true gradient is ~0 are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because `x ± eps·e_i` straddles a kink.
    pub excluded: Vec<usize>,
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps`.
///
/// A coordinate is excluded when the two perturbed evaluations take different
/// branches (relu sign or layer-norm variance floor), which is exactly the
/// case where the central difference straddles a nondifferentiable point.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::InvalidArgument(format!("eps {eps} outside (0, 1e-2]")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad(true));
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::NotScalar(tape.shape(out).to_vec()));
    }
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let eval = |data: Vec<f64>| -> Result<(f64, u64), TensorError> {
        let mut t = Tape::new();
        let v = t.constant(&Tensor::new(x.shape().to_vec(), data)?);
        let o = f(&mut t, v)?;
        Ok((t.value(o)[0], t.branch_signature()))
    };

    let mut max_rel_error: f64 = 0.0;
    let mut excluded = Vec::new();
    let mut checked = 0;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let (fp, sp) = eval(plus)?;
        let (fm, sm) = eval(minus)?;
        if sp != sm {
            excluded.push(i);
            continue;
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        max_rel_error = max_rel_error.max((a - numeric).abs() / denom);
        checked += 1;
    }
    Ok(GradCheck { max_rel_error, checked, excluded })
}
