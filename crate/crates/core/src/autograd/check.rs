use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step `eps`.
///
/// Returns `maxᵢ |autodiff_i − fd_i| / (|fd_i| + 1e−12)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    let analytic = g.backward(out)?.wrt(xv);

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(point);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
