use super::Tensor;

/// Elementwise closeness criterion `|a - n| <= atol + rtol * |n|`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Tolerance {
    pub const DOUBLE: Tolerance = Tolerance {
        rtol: 1e-5,
        atol: 1e-7,
    };
    pub const SINGLE: Tolerance = Tolerance {
        rtol: 1e-3,
        atol: 1e-5,
    };
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// `f` must be deterministic. Evaluation happens in double precision; a
/// single-precision function can be checked by wrapping it in casts.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

pub fn allclose(analytic: &[f64], numeric: &[f64], tol: Tolerance) -> bool {
    analytic.len() == numeric.len()
        && analytic
            .iter()
            .zip(numeric)
            .all(|(a, n)| (a - n).abs() <= tol.atol + tol.rtol * n.abs())
}

/// Largest error relative to the numeric value, with `|n|` floored at
/// `atol / rtol` so near-zero entries are judged absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], tol: Tolerance) -> f64 {
    let floor = tol.atol / tol.rtol;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.0);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-4);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn closeness_helpers() {
        assert!(allclose(&[1.0, 0.0], &[1.000_001, 5e-8], Tolerance::DOUBLE));
        assert!(!allclose(&[1.0], &[1.001], Tolerance::DOUBLE));
        assert!(max_rel_error(&[1.0], &[1.001], Tolerance::DOUBLE) > 1e-5);
    }
}
