//! Input gradients and central-difference gradient checking.

use super::{DiffError, Graph, Tensor, Var};

/// Gradient of a scalar function at `point`.
pub fn grad_wrt_input<F>(f: F, point: &Tensor) -> Result<Tensor, DiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&mut g, x)?;
    let grads = g.grad(y, &[x])?;
    Ok(g.value(grads[0]).clone())
}

/// Max relative error `|analytic - numeric| / (|analytic| + 1e-8)` over all
/// coordinates of a single input.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, DiffError>,
{
    finite_diff_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(point), eps)
}

/// Central-difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, error `O(h^2)`.
    ThreePoint,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, error `O(h^4)`.
    ///
    /// Permits a larger `h`, which keeps rounding noise well under the
    /// `1e-8` floor of the relative error at exactly-zero gradients.
    FivePoint,
}

/// [`finite_diff_check`] over several input tensors at once.
pub fn finite_diff_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    finite_diff_check_with(f, points, eps, Stencil::ThreePoint)
}

pub fn finite_diff_check_with<F>(f: F, points: &[Tensor], eps: f64, stencil: Stencil) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, DiffError>,
{
    let eval = |pts: &[Tensor]| -> Result<f64, DiffError> {
        let mut g = Graph::new();
        let xs: Vec<Var> = pts.iter().map(|p| g.leaf(p.clone())).collect();
        let y = f(&mut g, &xs)?;
        g.value(y).item()
    };

    let mut g = Graph::new();
    let xs: Vec<Var> = points.iter().map(|p| g.leaf(p.clone())).collect();
    let y = f(&mut g, &xs)?;
    let grads = g.grad(y, &xs)?;
    let analytic: Vec<Tensor> = grads.iter().map(|&v| g.value(v).clone()).collect();

    let mut pts = points.to_vec();
    let mut worst = 0.0f64;
    for t in 0..pts.len() {
        for i in 0..pts[t].len() {
            let orig = pts[t].data()[i];
            let mut at = |step: f64| -> Result<f64, DiffError> {
                pts[t].data_mut()[i] = orig + step;
                let v = eval(&pts);
                pts[t].data_mut()[i] = orig;
                v
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(eps)? - at(-eps)?) / (2.0 * eps),
                Stencil::FivePoint => {
                    let near = at(eps)? - at(-eps)?;
                    let far = at(2.0 * eps)? - at(-2.0 * eps)?;
                    (8.0 * near - far) / (12.0 * eps)
                }
            };
            let a = analytic[t].data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
    }
    Ok(worst)
}
