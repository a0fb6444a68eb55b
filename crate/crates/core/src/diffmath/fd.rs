//! Central finite differences, the independent gradient oracle.

use super::array::NdArray;

/// Entrywise central-difference estimate of `d loss / d leaf` around
/// `base`: `(f(x + h e_k) - f(x - h e_k)) / 2h`. Slow by design; only
/// test code should call it.
pub fn finite_difference_oracle(
    base: &NdArray,
    h: f64,
    mut loss_fn: impl FnMut(&NdArray) -> f64,
) -> NdArray {
    assert!(h > 0.0, "step must be positive");
    let mut grad = NdArray::zeros(base.shape());
    let mut probe = base.clone();
    for k in 0..base.len() {
        let x = base.data()[k];
        probe.data_mut()[k] = x + h;
        let up = loss_fn(&probe);
        probe.data_mut()[k] = x - h;
        let down = loss_fn(&probe);
        probe.data_mut()[k] = x;
        grad.data_mut()[k] = (up - down) / (2.0 * h);
    }
    grad
}

/// Central-difference estimate for a handful of coordinates only.
pub fn finite_difference_at(
    base: &NdArray,
    coords: &[usize],
    h: f64,
    mut loss_fn: impl FnMut(&NdArray) -> f64,
) -> Vec<f64> {
    assert!(h > 0.0, "step must be positive");
    let mut probe = base.clone();
    coords
        .iter()
        .map(|&k| {
            let x = base.data()[k];
            probe.data_mut()[k] = x + h;
            let up = loss_fn(&probe);
            probe.data_mut()[k] = x - h;
            let down = loss_fn(&probe);
            probe.data_mut()[k] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative error between an analytic and a finite-difference value,
/// floored so that near-zero coordinates compare absolutely.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three_differentiates_to_six() {
        let base = NdArray::scalar(3.0);
        let g = finite_difference_oracle(&base, 1e-3, |x| x.data()[0] * x.data()[0]);
        assert!((g.data()[0] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let base = NdArray::full(&[2, 3], 0.7);
        let g = finite_difference_oracle(&base, 1e-3, |_| 42.0);
        assert_eq!(g, NdArray::zeros(&[2, 3]));
    }
}
