use crate::error::{Error, Result};
use crate::numcore::{Graph, Scalar, Tensor, Var};

/// Denominator floor of the relative error, so near-zero gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Largest relative error between the reverse-mode gradient of `f` at `points` and central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, over every coordinate of every input.
///
/// `f` receives an evaluation-mode graph and one trainable leaf per point and must return a
/// scalar node.
pub fn grad_check<T, F>(f: F, points: &[Tensor<T>], h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item().as_f64())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::shape("grad_check", "function is not scalar"));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut pts = points.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..pts[pi].numel() {
            let orig = pts[pi].data()[j];
            pts[pi].data_mut()[j] = orig + T::lit(h);
            let up = eval(&pts)?;
            pts[pi].data_mut()[j] = orig - T::lit(h);
            let down = eval(&pts)?;
            pts[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j].as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::from_f64(&[1], &[3.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
