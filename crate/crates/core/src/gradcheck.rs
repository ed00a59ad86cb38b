//! Finite-difference verification of [`Graph`] gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` and returns the largest
/// discrepancy relative to the gradient's scale:
///
/// ```text
/// maxᵢ |aᵢ − nᵢ| / maxᵢ max(|aᵢ|, |nᵢ|)
/// ```
///
/// The error is measured against the largest component because the graph
/// evaluates in `f32`; a per-component ratio would be dominated by rounding
/// noise on components that are near zero. Returns 0 when both gradients
/// vanish.
pub fn grad_check<F>(f: F, x: &Tensor, h: f32) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Argument(format!("step size must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |p: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(p.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item() as f64)
    };

    let mut max_diff = 0.0f64;
    let mut scale = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // The actual perturbation differs from h after f32 rounding.
        let span = ((orig + h) as f64) - ((orig - h) as f64);
        let numeric = (plus - minus) / span;
        let a = analytic[i] as f64;
        max_diff = max_diff.max((a - numeric).abs());
        scale = scale.max(a.abs()).max(numeric.abs());
    }
    Ok(if scale == 0.0 { 0.0 } else { (max_diff / scale) as f32 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(n: usize) -> Tensor {
        let data = (0..n).map(|i| ((i * 37 % 11) as f32 / 11.0) * 2.0 - 1.0).collect();
        Tensor::new(vec![n], data).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &input(8),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function() {
        let err = grad_check(
            |g, _x| Ok(g.constant(Tensor::scalar(3.0))),
            &input(4),
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(grad_check(|g, x| Ok(g.sum(x)), &input(2), 0.0).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(x) reported through a graph whose forward is 2·sum(x): the
        // autodiff and the finite differences disagree by a factor of two.
        let err = grad_check(
            |g, x| {
                let s = g.sum(x);
                if g.value(x).requires_grad() {
                    Ok(s)
                } else {
                    g.add(s, s)
                }
            },
            &input(3),
            1e-3,
        )
        .unwrap();
        assert!(err > 0.4, "{err}");
    }
}
