use super::Tensor;

/// Gradients smaller than this are compared in absolute terms. The forward
/// pass runs in `f32`, so a central difference with `h = 1e-3` carries
/// roughly `1e-4` of rounding noise; relative error on tiny gradients would
/// only measure that noise.
pub const REL_ERR_FLOOR: f64 = 1.0;

/// Central-difference gradient of a scalar function of `x`.
///
/// `x` is perturbed in place one coordinate at a time and restored, so the
/// closure may ignore its argument and read `x` through some other handle
/// (e.g. a parameter inside a model). The step actually taken is recomputed
/// from the rounded `f32` values to keep the quotient honest.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Vec<f64> {
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_grad_at(f, x, h, &all)
}

/// Like [`finite_diff_grad`] but only for the listed coordinates.
pub fn finite_diff_grad_at(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Vec<f64> {
    assert!(h > 0.0, "finite difference step must be positive");
    coords
        .iter()
        .map(|&i| {
            let orig = x.data()[i];
            let plus = (orig as f64 + h) as f32;
            let minus = (orig as f64 - h) as f32;
            x.data_mut()[i] = plus;
            let fp = f(x);
            x.data_mut()[i] = minus;
            let fm = f(x);
            x.data_mut()[i] = orig;
            (fp - fm) / (plus as f64 - minus as f64)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a as f64, n))
        .fold(0.0, f64::max)
}
