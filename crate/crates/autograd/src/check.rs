//! Central finite-difference gradient checking.

use ndarray::ArrayD;

/// Numerical gradient of `f` w.r.t. every element of `inputs[which]`,
/// by central differences in f64.
pub fn numerical_grad<F>(f: &F, inputs: &[ArrayD<f64>], which: usize, eps: f64) -> ArrayD<f64>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut grad = ArrayD::zeros(inputs[which].raw_dim());
    let len = inputs[which].len();
    for i in 0..len {
        let orig = work[which].as_slice().unwrap()[i];
        let h = eps * orig.abs().max(1.0);
        work[which].as_slice_mut().unwrap()[i] = orig + h;
        let fp = f(&work);
        work[which].as_slice_mut().unwrap()[i] = orig - h;
        let fm = f(&work);
        work[which].as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative error between analytic and numerical gradients.
/// Elements where both magnitudes fall below `floor` are ignored.
pub fn max_rel_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        if a.abs() < floor && n.abs() < floor {
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs());
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Check all requested inputs of a scalar function at tolerance `tol`.
/// `f` must be a pure function of its inputs. Panics with a description of
/// the offending input on failure.
pub fn assert_gradients<F, G>(f_scalar: F, analytic: G, inputs: &[ArrayD<f64>], tol: f64)
where
    F: Fn(&[ArrayD<f64>]) -> f64,
    G: Fn(&[ArrayD<f64>]) -> Vec<ArrayD<f64>>,
{
    let grads = analytic(inputs);
    assert_eq!(grads.len(), inputs.len(), "one gradient per input");
    for which in 0..inputs.len() {
        let num = numerical_grad(&f_scalar, inputs, which, 1e-5);
        let err = max_rel_error(&grads[which], &num, 1e-7);
        assert!(
            err < tol,
            "gradient check failed for input {} (rel err {:.3e} >= {:.1e})",
            which,
            err,
            tol
        );
    }
}
