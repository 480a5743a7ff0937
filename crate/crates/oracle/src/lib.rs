//! Reference computations for tests: classical RK4, adaptive Simpson
//! quadrature and central-difference gradients.
//!
//! Nothing here depends on the solver crates. Inputs are plain closures over
//! `&[f64]` so that a bug in the code under test cannot leak into its oracle.

/// Value with a claimed absolute error bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub value: Vec<f64>,
    pub error_bound: f64,
}

fn rk4(f: &dyn Fn(&[f64], f64) -> Vec<f64>, z0: &[f64], t0: f64, t1: f64, steps: usize) -> Vec<f64> {
    let h = (t1 - t0) / steps as f64;
    let mut z = z0.to_vec();
    let axpy =
        |z: &[f64], a: f64, k: &[f64]| -> Vec<f64> { z.iter().zip(k).map(|(z, k)| z + a * k).collect() };
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = f(&z, t);
        let k2 = f(&axpy(&z, h / 2.0, &k1), t + h / 2.0);
        let k3 = f(&axpy(&z, h / 2.0, &k2), t + h / 2.0);
        let k4 = f(&axpy(&z, h, &k3), t + h);
        for j in 0..z.len() {
            z[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        assert!(z.iter().all(|x| x.is_finite()), "rk4 reference diverged at t={t}");
    }
    z
}

/// Classical fourth-order Runge-Kutta from `t0` to `t1`.
///
/// The error bound is the Richardson estimate `|y(2n) - y(n)| / 15` from a
/// second run at twice the step count; the returned value is the finer run.
///
/// # Panics
/// If `steps < 10_000` or the integration produces non-finite values.
pub fn rk4_reference(
    f: impl Fn(&[f64], f64) -> Vec<f64>,
    z0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
) -> ReferenceSolution {
    assert!(steps >= 10_000, "reference integration needs at least 1e4 steps");
    let coarse = rk4(&f, z0, t0, t1, steps);
    let fine = rk4(&f, z0, t0, t1, 2 * steps);
    let diff = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ReferenceSolution {
        value: fine,
        error_bound: (diff / 15.0).max(f64::EPSILON * max_abs(&coarse)),
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0)
}

/// Forward Euler with many steps; first-order, only for validating other oracles.
pub fn euler_reference(
    f: impl Fn(&[f64], f64) -> Vec<f64>,
    z0: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
) -> Vec<f64> {
    let h = (t1 - t0) / steps as f64;
    let mut z = z0.to_vec();
    for i in 0..steps {
        let v = f(&z, t0 + i as f64 * h);
        for (z, v) in z.iter_mut().zip(&v) {
            *z += h * v;
        }
    }
    z
}

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> ReferenceSolution {
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            (left + right + delta / 15.0, delta.abs() / 15.0)
        } else {
            let (l, el) = recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1);
            let (r, er) = recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1);
            (l + r, el + er)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let (value, err) = recurse(&f, a, b, fa, fm, fb, whole, tol, 48);
    ReferenceSolution {
        value: vec![value],
        error_bound: err.max(f64::EPSILON * value.abs()),
    }
}

/// Central-difference gradient of `loss` at `params`.
///
/// # Panics
/// If `epsilon` is outside `[1e-7, 1e-3]`.
pub fn fd_gradient(mut loss: impl FnMut(&[f64]) -> f64, params: &[f64], epsilon: f64) -> Vec<f64> {
    assert!(
        (1e-7..=1e-3).contains(&epsilon),
        "epsilon {epsilon} outside [1e-7, 1e-3]"
    );
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + epsilon;
            let up = loss(&p);
            p[i] = orig - epsilon;
            let down = loss(&p);
            p[i] = orig;
            (up - down) / (2.0 * epsilon)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
