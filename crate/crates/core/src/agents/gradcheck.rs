//! Central finite-difference checks for analytic gradients.

use crate::Table;

/// Largest `|analytic - fd| / max(1, |fd|)` over every parameter, where `fd`
/// is the central difference of `loss` with step `h`.
pub fn gradient_check<F: FnMut(&Table) -> f64>(mut loss: F, params: &Table, analytic: &Table, h: f64) -> f64 {
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        for j in 0..p[i].len() {
            let orig = p[i][j];
            p[i][j] = orig + h;
            let up = loss(&p);
            p[i][j] = orig - h;
            let down = loss(&p);
            p[i][j] = orig;
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((analytic[i][j] - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

/// Scalar version of [`gradient_check`].
pub fn gradient_check_scalar<F: FnMut(f64) -> f64>(mut loss: F, x: f64, analytic: f64, h: f64) -> f64 {
    let fd = (loss(x + h) - loss(x - h)) / (2.0 * h);
    (analytic - fd).abs() / fd.abs().max(1.0)
}
