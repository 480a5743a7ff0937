//! Velocity fields `v(Z, t, condition)` and analytic fields with closed-form flows.

use crate::error::{ensure, Error, Result};
use crate::tensorio::Tensor;

/// How far past `t = 1` a field must accept evaluations. Derivative probes
/// step forward from grid points, so the last inversion step probes beyond 1.
pub const TIME_SLACK: f64 = 0.25;

/// Opaque conditioning context (stands in for a text prompt).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConditionId(pub u32);

pub trait VelocityField {
    fn name(&self) -> String;

    /// Per-sample state dimension.
    fn dim(&self) -> usize;

    /// Whether a state of this shape can be evaluated. The default accepts any
    /// batch of rows whose trailing axis is `dim()`.
    fn accepts(&self, shape: &[usize]) -> bool {
        shape.last() == Some(&self.dim())
    }

    /// Raw velocity; callers should normally go through [`VelocityField::evaluate`].
    fn velocity(&self, state: &Tensor, t: f64, condition: Option<ConditionId>) -> Result<Tensor>;

    /// Checked evaluation: validates shape and time, rejects non-finite output.
    fn evaluate(&self, state: &Tensor, t: f64, condition: Option<ConditionId>) -> Result<Tensor> {
        check_inputs(self, state, t)?;
        let v = self.velocity(state, t, condition)?;
        check_output(self, state, &v, t)?;
        Ok(v)
    }
}

pub(crate) fn check_inputs<F: VelocityField + ?Sized>(field: &F, state: &Tensor, t: f64) -> Result<()> {
    ensure!(
        field.accepts(state.shape()),
        "state shape {:?} does not match field {} (dim {})",
        state.shape(),
        field.name(),
        field.dim()
    );
    ensure!(
        (0.0..=1.0 + TIME_SLACK).contains(&t),
        "time {t} outside [0, {}]",
        1.0 + TIME_SLACK
    );
    Ok(())
}

pub(crate) fn check_output<F: VelocityField + ?Sized>(
    field: &F,
    state: &Tensor,
    v: &Tensor,
    t: f64,
) -> Result<()> {
    assert_eq!(
        v.shape(),
        state.shape(),
        "{} changed the state shape",
        field.name()
    );
    if !v.is_finite() {
        return Err(Error::FieldDivergence {
            field: field.name(),
            t,
        });
    }
    Ok(())
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn name(&self) -> String {
        (**self).name()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn accepts(&self, shape: &[usize]) -> bool {
        (**self).accepts(shape)
    }
    fn velocity(&self, state: &Tensor, t: f64, condition: Option<ConditionId>) -> Result<Tensor> {
        (**self).velocity(state, t, condition)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticKind {
    /// `v = c`
    Constant(Vec<f64>),
    /// `v = a z`
    LinearState { a: f64 },
    /// `v = t` in every coordinate.
    LinearTime,
    /// `v = t^2` in every coordinate.
    QuadraticTime,
    /// `v = omega J z` with `J` the 90-degree rotation; 2-D only.
    Rotation { omega: f64 },
    /// Marginal velocity of the straight interpolation `X_t = t X1 + (1-t) X0`
    /// with independent `X0 ~ N(mu0, diag(sigma0^2))`, `X1 ~ N(mu1, I)`.
    ///
    /// Per coordinate, `X_t ~ N(m(t), s(t)^2)` with `m = (1-t) mu0 + t mu1`,
    /// `s^2 = (1-t)^2 sigma0^2 + t^2`, and the flow is `m(t) + s(t) xi` for a
    /// fixed standardized `xi`, so `v = m' + (s'/s)(z - m)`.
    GaussianPairOt {
        mu0: Vec<f64>,
        sigma0: Vec<f64>,
        mu1: Vec<f64>,
    },
}

/// Velocity field with a known exact flow map.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticField {
    kind: AnalyticKind,
    dim: usize,
}

impl AnalyticField {
    pub fn constant(c: Vec<f64>) -> Result<Self> {
        ensure!(!c.is_empty(), "constant field needs at least one component");
        ensure!(c.iter().all(|x| x.is_finite()), "constant field must be finite");
        let dim = c.len();
        Ok(Self {
            kind: AnalyticKind::Constant(c),
            dim,
        })
    }

    pub fn linear_state(a: f64, dim: usize) -> Result<Self> {
        ensure!(a.is_finite(), "linear-state rate must be finite");
        Self::with_dim(AnalyticKind::LinearState { a }, dim)
    }

    pub fn linear_time(dim: usize) -> Result<Self> {
        Self::with_dim(AnalyticKind::LinearTime, dim)
    }

    pub fn quadratic_time(dim: usize) -> Result<Self> {
        Self::with_dim(AnalyticKind::QuadraticTime, dim)
    }

    pub fn rotation(omega: f64) -> Result<Self> {
        ensure!(omega.is_finite(), "rotation rate must be finite");
        Self::with_dim(AnalyticKind::Rotation { omega }, 2)
    }

    pub fn gaussian_pair_ot(mu0: Vec<f64>, sigma0: Vec<f64>, mu1: Vec<f64>) -> Result<Self> {
        let dim = mu0.len();
        ensure!(dim > 0, "gaussian pair needs at least one dimension");
        ensure!(
            sigma0.len() == dim && mu1.len() == dim,
            "mu0, sigma0, mu1 must have equal length"
        );
        ensure!(
            sigma0.iter().all(|&s| s > 0.0 && s.is_finite()),
            "sigma0 entries must be positive"
        );
        ensure!(
            mu0.iter().chain(&mu1).all(|x| x.is_finite()),
            "gaussian means must be finite"
        );
        Ok(Self {
            kind: AnalyticKind::GaussianPairOt { mu0, sigma0, mu1 },
            dim,
        })
    }

    fn with_dim(kind: AnalyticKind, dim: usize) -> Result<Self> {
        ensure!(dim > 0, "field dimension must be positive");
        Ok(Self { kind, dim })
    }

    pub fn kind(&self) -> &AnalyticKind {
        &self.kind
    }

    /// Exact flow map: the solution at `t_end` of the ODE started from
    /// `z_start` at `t_start`.
    pub fn exact_solution(&self, z_start: &Tensor, t_start: f64, t_end: f64) -> Result<Tensor> {
        ensure!(
            self.accepts(z_start.shape()),
            "state shape {:?} does not match field dim {}",
            z_start.shape(),
            self.dim
        );
        if t_start == t_end {
            return Ok(z_start.clone());
        }
        let dt = t_end - t_start;
        let out = match &self.kind {
            AnalyticKind::Constant(c) => self.rowwise(z_start, |i, z| z + c[i] * dt),
            AnalyticKind::LinearState { a } => {
                let g = (a * dt).exp();
                z_start.map(|z| z * g)
            }
            AnalyticKind::LinearTime => {
                let shift = 0.5 * (t_end * t_end - t_start * t_start);
                z_start.map(|z| z + shift)
            }
            AnalyticKind::QuadraticTime => {
                let shift = (t_end.powi(3) - t_start.powi(3)) / 3.0;
                z_start.map(|z| z + shift)
            }
            AnalyticKind::Rotation { omega } => {
                let (s, c) = (omega * dt).sin_cos();
                let mut out = z_start.clone();
                for row in out.data_mut().chunks_exact_mut(2) {
                    let (x, y) = (row[0], row[1]);
                    row[0] = c * x - s * y;
                    row[1] = s * x + c * y;
                }
                out
            }
            AnalyticKind::GaussianPairOt { mu0, sigma0, mu1 } => self.rowwise(z_start, |i, z| {
                let g = GaussianCoord::new(mu0[i], sigma0[i], mu1[i]);
                g.mean(t_end) + g.std(t_end) / g.std(t_start) * (z - g.mean(t_start))
            }),
        };
        Ok(out)
    }

    /// Total time derivative `dv/dt = dv/dt|_z + (dv/dz) v` along the flow.
    pub fn total_time_derivative(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        ensure!(
            self.accepts(z.shape()),
            "state shape {:?} does not match field dim {}",
            z.shape(),
            self.dim
        );
        let out = match &self.kind {
            AnalyticKind::Constant(_) => z.map(|_| 0.0),
            AnalyticKind::LinearState { a } => z.map(|x| a * a * x),
            AnalyticKind::LinearTime => z.map(|_| 1.0),
            AnalyticKind::QuadraticTime => z.map(|_| 2.0 * t),
            AnalyticKind::Rotation { omega } => z.map(|x| -omega * omega * x),
            AnalyticKind::GaussianPairOt { mu0, sigma0, mu1 } => self.rowwise(z, |i, x| {
                let g = GaussianCoord::new(mu0[i], sigma0[i], mu1[i]);
                g.std_second_derivative(t) / g.std(t) * (x - g.mean(t))
            }),
        };
        Ok(out)
    }

    fn rowwise(&self, z: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let mut out = z.clone();
        for row in out.data_mut().chunks_exact_mut(self.dim) {
            for (i, x) in row.iter_mut().enumerate() {
                *x = f(i, *x);
            }
        }
        out
    }

    fn slug(&self) -> &'static str {
        match self.kind {
            AnalyticKind::Constant(_) => "constant",
            AnalyticKind::LinearState { .. } => "linear-state",
            AnalyticKind::LinearTime => "linear-time",
            AnalyticKind::QuadraticTime => "quadratic-time",
            AnalyticKind::Rotation { .. } => "rotation",
            AnalyticKind::GaussianPairOt { .. } => "gaussian-ot",
        }
    }
}

impl VelocityField for AnalyticField {
    fn name(&self) -> String {
        self.slug().to_string()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, state: &Tensor, t: f64, _condition: Option<ConditionId>) -> Result<Tensor> {
        let v = match &self.kind {
            AnalyticKind::Constant(c) => self.rowwise(state, |i, _| c[i]),
            AnalyticKind::LinearState { a } => state.map(|z| a * z),
            AnalyticKind::LinearTime => state.map(|_| t),
            AnalyticKind::QuadraticTime => state.map(|_| t * t),
            AnalyticKind::Rotation { omega } => {
                let mut v = state.clone();
                for row in v.data_mut().chunks_exact_mut(2) {
                    let (x, y) = (row[0], row[1]);
                    row[0] = -omega * y;
                    row[1] = omega * x;
                }
                v
            }
            AnalyticKind::GaussianPairOt { mu0, sigma0, mu1 } => self.rowwise(state, |i, z| {
                let g = GaussianCoord::new(mu0[i], sigma0[i], mu1[i]);
                let s = g.std(t);
                (g.mu1 - g.mu0) + g.std_derivative(t) / s * (z - g.mean(t))
            }),
        };
        Ok(v)
    }
}

/// One coordinate of the Gaussian interpolation marginal.
#[derive(Clone, Copy)]
struct GaussianCoord {
    mu0: f64,
    var0: f64,
    mu1: f64,
}

impl GaussianCoord {
    fn new(mu0: f64, sigma0: f64, mu1: f64) -> Self {
        Self {
            mu0,
            var0: sigma0 * sigma0,
            mu1,
        }
    }

    fn mean(&self, t: f64) -> f64 {
        (1.0 - t) * self.mu0 + t * self.mu1
    }

    fn variance(&self, t: f64) -> f64 {
        (1.0 - t).powi(2) * self.var0 + t * t
    }

    fn std(&self, t: f64) -> f64 {
        self.variance(t).sqrt()
    }

    fn std_derivative(&self, t: f64) -> f64 {
        (t - (1.0 - t) * self.var0) / self.std(t)
    }

    fn std_second_derivative(&self, t: f64) -> f64 {
        // s = sqrt(q): s'' = q''/(2s) - q'^2/(4 s^3)
        let s = self.std(t);
        let dq = 2.0 * (t - (1.0 - t) * self.var0);
        let ddq = 2.0 * (self.var0 + 1.0);
        ddq / (2.0 * s) - dq * dq / (4.0 * s * s * s)
    }
}
