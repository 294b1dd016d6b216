//! Finite-difference verification of analytic gradients.

use super::{DType, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar-valued graph function
/// against central finite differences, coordinate by coordinate.
///
/// Returns `max_i |analytic_i − central_i| / max(|analytic_i|, |central_i|, 1e-12)`.
/// `f` must be deterministic; `x` must be full `f64` precision.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Var,
{
    if x.dtype() == DType::F32 {
        return Err(Error::Dtype(
            "grad_check requires f64 input; f32 has insufficient precision".into(),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::arg("grad_check eps must be positive"));
    }

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().requires_grad(true));
    let out = f(&mut g, xv);
    if !g.value(out).is_scalar() {
        return Err(Error::Graph(
            "grad_check function must produce a scalar".into(),
        ));
    }
    g.backward(out)?;
    let analytic = g.grad(xv).expect("leaf gradient").clone();

    let eval = |probe: &Tensor| -> f64 {
        let mut g = Graph::new();
        let v = g.leaf(probe.clone().requires_grad(false));
        let out = f(&mut g, v);
        g.value(out).scalar_value()
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe);
        probe.data_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
