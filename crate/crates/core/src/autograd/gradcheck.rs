use super::{Graph, Var};
use crate::tensor::{with_precision, Precision, Result, Tensor, TensorError};

/// Largest relative disagreement between the reverse-mode gradient of `f`
/// at `x` and a central difference with step `eps`, over all coordinates.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Always evaluated in 64-bit mode.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TensorError::Invalid(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    with_precision(Precision::F64, || {
        let x = Tensor::new(x.shape().to_vec(), x.data().to_vec())?;
        let eval = |t: Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let v = g.constant(t);
            let y = f(&mut g, v)?;
            scalar_of(&g, y)
        };

        let mut g = Graph::new();
        let xv = g.leaf(x.clone().with_grad(true));
        let y = f(&mut g, xv)?;
        scalar_of(&g, y)?;
        g.backward(y)?;
        let analytic = g
            .grad(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()]);

        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut plus = x.data().to_vec();
            let mut minus = plus.clone();
            plus[i] += eps;
            minus[i] -= eps;
            let fp = eval(Tensor::new(x.shape().to_vec(), plus)?)?;
            let fm = eval(Tensor::new(x.shape().to_vec(), minus)?)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        Ok(worst)
    })
}

fn scalar_of(g: &Graph, y: Var) -> Result<f64> {
    let v = g.value(y);
    if v.len() != 1 {
        return Err(TensorError::Invalid(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}
