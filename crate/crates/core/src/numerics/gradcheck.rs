//! Central finite-difference oracle for analytic gradients.

use super::array::Array;
use crate::error::Result;

/// Compares the analytic gradient returned by `f` against central
/// differences with step `h`, element by element. Returns the worst relative
/// error, using `max(|a|, |b|, 1e-8)` as the denominator.
///
/// `f` maps a parameter list to `(loss, gradients)`; gradients must follow
/// the parameter order.
pub fn finite_diff_check<F>(f: F, params: &[Array<f64>], h: f64) -> Result<f64>
where
    F: Fn(&[Array<f64>]) -> Result<(f64, Vec<Array<f64>>)>,
{
    let (_, analytic) = f(params)?;
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, g) in analytic.iter().enumerate() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + h;
            let (up, _) = f(&probe)?;
            probe[pi].data_mut()[ei] = orig - h;
            let (down, _) = f(&probe)?;
            probe[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_tight() {
        let err = finite_diff_check(
            |ps| {
                let p = ps[0].data()[0];
                Ok((p * p, vec![Array::scalar(2.0 * p)]))
            },
            &[Array::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_is_exact() {
        let err = finite_diff_check(
            |ps| Ok((4.0, vec![Array::zeros(ps[0].shape())])),
            &[Array::from_vec(vec![1.0, -2.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn detects_wrong_gradient() {
        let err = finite_diff_check(
            |ps| {
                let p = ps[0].data()[0];
                Ok((p * p, vec![Array::scalar(3.0 * p)]))
            },
            &[Array::scalar(1.5)],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
