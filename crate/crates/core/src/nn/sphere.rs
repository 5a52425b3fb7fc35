use ndarray::{Array1, Array2, Axis};

/// Stabiliser added to norms below this value.
pub const SPHERE_EPS: f64 = 1e-8;

fn denom(r: f64) -> f64 {
    if r < SPHERE_EPS {
        r + SPHERE_EPS
    } else {
        r
    }
}

/// Row-wise `x / ‖x‖`. Rows with norm below [`SPHERE_EPS`] are divided by
/// `‖x‖ + SPHERE_EPS` instead. Returns the outputs and the row norms.
pub fn normalize_sphere(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut y = x.clone();
    for (mut row, &r) in y.rows_mut().into_iter().zip(&norms) {
        let d = denom(r);
        row.mapv_inplace(|v| v / d);
    }
    (y, norms)
}

/// Vector-Jacobian product of [`normalize_sphere`]. For unit-scaled rows this
/// is the tangent projection `(g - y (y·g)) / ‖x‖`.
pub fn normalize_sphere_backward(
    x: &Array2<f64>,
    norms: &Array1<f64>,
    grad_y: &Array2<f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let (xr, g, r) = (x.row(i), grad_y.row(i), norms[i]);
        let d = denom(r);
        let xg = xr.dot(&g);
        // d/dx [x / d(r)] = I/d - x xᵀ d'(r) / (r d²), with d' = 1
        let coef = if r > 0.0 { xg / (r * d * d) } else { 0.0 };
        for j in 0..x.ncols() {
            out[[i, j]] = g[j] / d - xr[j] * coef;
        }
    }
    out
}
