//! Taylor-expansion solvers for the rectified-flow ODE and their inversion form.
//!
//! Over one interval `[t_i, t_next]` with `h = t_next - t_i` the flow satisfies
//!
//! ```text
//! Z(t_next) = Z(t_i) + sum_{k<n} h^{k+1}/(k+1)! * d^k v/dt^k (Z(t_i), t_i) + O(h^{n+1})
//! ```
//!
//! Order 1 is Euler. Orders 2 and 3 estimate the total time derivatives of `v`
//! by finite differences along forward-Euler probes at `t_i + delta_t` (and
//! `t_i + 2 delta_t`). Probes always step towards increasing `t`, in both
//! sampling and inversion.

use crate::error::{ensure, Error, Result};
use crate::field::{ConditionId, VelocityField};
use crate::tensorio::Tensor;

pub const DEFAULT_DELTA_T: f64 = 0.01;
/// Largest accepted probe step; order 3 probes reach `t + 2 delta_t`.
pub const MAX_DELTA_T: f64 = 0.1;

/// Discrete schedule `t_N > ... > t_0` with `t_N = 1` and `t_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    /// Stored as `[t_N, ..., t_0]`.
    times: Vec<f64>,
}

impl TimeGrid {
    /// `N` equal intervals on `[0, 1]`.
    pub fn uniform(steps: usize) -> Result<Self> {
        ensure!(steps >= 1, "time grid needs at least one interval");
        let n = steps as f64;
        let times = (0..=steps).rev().map(|j| j as f64 / n).collect();
        Ok(Self { times })
    }

    /// Validates an explicit schedule given as `[t_N, ..., t_0]`.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        ensure!(times.len() >= 2, "time grid needs at least one interval");
        ensure!(
            times[0] == 1.0 && *times.last().unwrap() == 0.0,
            "time grid must run from exactly 1.0 down to exactly 0.0"
        );
        ensure!(
            times.windows(2).all(|w| w[0] > w[1]),
            "time grid must be strictly decreasing"
        );
        Ok(Self { times })
    }

    /// Number of intervals `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `t_i` for `i` in `0..=N`.
    pub fn t(&self, i: usize) -> f64 {
        self.times[self.steps() - i]
    }

    /// `[t_N, ..., t_0]`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Sampling, `t: 1 -> 0`.
    Denoise,
    /// Inversion, `t: 0 -> 1`.
    Invert,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Denoise => "denoise",
            Direction::Invert => "invert",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    order: usize,
    delta_t: f64,
    direction: Direction,
}

impl SolverConfig {
    pub fn new(order: usize, delta_t: f64, direction: Direction) -> Result<Self> {
        ensure!(
            (1..=3).contains(&order),
            "solver order must be 1, 2 or 3, got {order}"
        );
        ensure!(
            delta_t > 0.0 && delta_t <= MAX_DELTA_T,
            "delta_t must be in (0, {MAX_DELTA_T}], got {delta_t}"
        );
        Ok(Self {
            order,
            delta_t,
            direction,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_t
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn with_direction(self, direction: Direction) -> Self {
        Self { direction, ..self }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            order: 2,
            delta_t: DEFAULT_DELTA_T,
            direction: Direction::Denoise,
        }
    }
}

/// Which evaluation inside a step: the expansion point or a derivative probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pass {
    Main,
    Probe,
    SecondProbe,
}

impl Pass {
    pub fn as_str(self) -> &'static str {
        match self {
            Pass::Main => "main",
            Pass::Probe => "probe",
            Pass::SecondProbe => "probe2",
        }
    }
}

/// Where a velocity evaluation happens inside a trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    /// Upper grid index `k` of the interval `[t_{k-1}, t_k]` being stepped.
    /// Inversion over `t_{k-1} -> t_k` and sampling over `t_k -> t_{k-1}`
    /// share the same `k`.
    pub interval: usize,
    pub pass: Pass,
    pub t: f64,
}

/// Source of velocities for the stepping loop. Plain fields are wrapped in
/// [`FieldEvaluator`]; feature-sharing pipelines hook in here.
pub trait Evaluator {
    fn evaluate(&mut self, at: EvalPoint, state: &Tensor) -> Result<Tensor>;
}

pub struct FieldEvaluator<'a, F: ?Sized> {
    pub field: &'a F,
    pub condition: Option<ConditionId>,
}

impl<'a, F: VelocityField + ?Sized> FieldEvaluator<'a, F> {
    pub fn new(field: &'a F, condition: Option<ConditionId>) -> Self {
        Self { field, condition }
    }
}

impl<F: VelocityField + ?Sized> Evaluator for FieldEvaluator<'_, F> {
    fn evaluate(&mut self, at: EvalPoint, state: &Tensor) -> Result<Tensor> {
        self.field.evaluate(state, at.t, self.condition)
    }
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub t_from: f64,
    pub t_to: f64,
    pub state_out: Tensor,
    /// `v(Z_{t_i}, t_i)`.
    pub velocity: Tensor,
    /// Estimated `d^k v/dt^k` for `k = 1..order`.
    pub derivative_estimates: Vec<Tensor>,
    pub nfe: usize,
}

#[derive(Debug, Clone)]
pub struct DerivativeEstimate {
    pub velocity: Tensor,
    pub derivative: Tensor,
    pub probe_state: Tensor,
}

/// Forward-difference estimate of the total time derivative of `v` along the
/// flow: `(v(Z + dt v, t + dt) - v(Z, t)) / dt`. Two evaluations.
pub fn estimate_derivative<F: VelocityField + ?Sized>(
    field: &F,
    state: &Tensor,
    t_i: f64,
    delta_t: f64,
    condition: Option<ConditionId>,
) -> Result<DerivativeEstimate> {
    ensure!(delta_t > 0.0, "delta_t must be positive, got {delta_t}");
    let velocity = field.evaluate(state, t_i, condition)?;
    let probe_state = state.add_scaled(delta_t, &velocity);
    let probe_velocity = field.evaluate(&probe_state, t_i + delta_t, condition)?;
    let derivative = probe_velocity.sub_div(&velocity, delta_t);
    Ok(DerivativeEstimate {
        velocity,
        derivative,
        probe_state,
    })
}

/// `Z_next = Z + h v(Z, t_i)`.
pub fn euler_step<F: VelocityField + ?Sized>(
    field: &F,
    state: &Tensor,
    t_i: f64,
    t_next: f64,
    condition: Option<ConditionId>,
) -> Result<StepReport> {
    let mut eval = FieldEvaluator::new(field, condition);
    taylor_step(&mut eval, 0, state, t_i, t_next, 1, DEFAULT_DELTA_T)
}

/// `Z_next = Z + h v + h^2/2 v'`, with `v'` from [`estimate_derivative`].
pub fn rf_solver2_step<F: VelocityField + ?Sized>(
    field: &F,
    state: &Tensor,
    t_i: f64,
    t_next: f64,
    delta_t: f64,
    condition: Option<ConditionId>,
) -> Result<StepReport> {
    let mut eval = FieldEvaluator::new(field, condition);
    taylor_step(&mut eval, 0, state, t_i, t_next, 2, delta_t)
}

/// Adds `h^3/6 v''` to the second-order step, with
/// `v'' ~ (v(Z2, t+2dt) - 2 v(Z1, t+dt) + v(Z, t)) / dt^2` along the
/// forward-Euler continuation `Z1 = Z + dt v(Z, t)`, `Z2 = Z1 + dt v(Z1, t+dt)`.
pub fn rf_solver3_step<F: VelocityField + ?Sized>(
    field: &F,
    state: &Tensor,
    t_i: f64,
    t_next: f64,
    delta_t: f64,
    condition: Option<ConditionId>,
) -> Result<StepReport> {
    let mut eval = FieldEvaluator::new(field, condition);
    taylor_step(&mut eval, 0, state, t_i, t_next, 3, delta_t)
}

/// One Taylor step of the given order through an arbitrary evaluator.
/// Consumes exactly `order` evaluations.
pub fn taylor_step<E: Evaluator + ?Sized>(
    eval: &mut E,
    interval: usize,
    state: &Tensor,
    t_i: f64,
    t_next: f64,
    order: usize,
    delta_t: f64,
) -> Result<StepReport> {
    ensure!(t_next != t_i, "step endpoints coincide at t={t_i}");
    ensure!(
        (1..=3).contains(&order),
        "solver order must be 1, 2 or 3, got {order}"
    );
    ensure!(delta_t > 0.0, "delta_t must be positive, got {delta_t}");
    let h = t_next - t_i;
    let at = |pass, t| EvalPoint { interval, pass, t };

    let velocity = eval.evaluate(at(Pass::Main, t_i), state)?;
    let mut derivative_estimates = Vec::with_capacity(order - 1);
    if order >= 2 {
        let probe = state.add_scaled(delta_t, &velocity);
        let probe_velocity = eval.evaluate(at(Pass::Probe, t_i + delta_t), &probe)?;
        derivative_estimates.push(probe_velocity.sub_div(&velocity, delta_t));
        if order == 3 {
            let probe2 = probe.add_scaled(delta_t, &probe_velocity);
            let probe2_velocity = eval.evaluate(at(Pass::SecondProbe, t_i + 2.0 * delta_t), &probe2)?;
            let second: Vec<f64> = velocity
                .data()
                .iter()
                .zip(probe_velocity.data())
                .zip(probe2_velocity.data())
                .map(|((v0, v1), v2)| (v2 - 2.0 * v1 + v0) / (delta_t * delta_t))
                .collect();
            derivative_estimates.push(Tensor::new(state.shape().to_vec(), second)?);
        }
    }

    let mut state_out = state.clone();
    let out = state_out.data_mut();
    let v = velocity.data();
    match derivative_estimates.as_slice() {
        [] => {
            for (z, v) in out.iter_mut().zip(v) {
                *z += h * v;
            }
        }
        [d1] => {
            let c2 = 0.5 * h * h;
            for ((z, v), d1) in out.iter_mut().zip(v).zip(d1.data()) {
                *z += h * v + c2 * d1;
            }
        }
        [d1, d2] => {
            let c2 = 0.5 * h * h;
            let c3 = h * h * h / 6.0;
            for (((z, v), d1), d2) in out.iter_mut().zip(v).zip(d1.data()).zip(d2.data()) {
                *z += h * v + c2 * d1 + c3 * d2;
            }
        }
        _ => unreachable!(),
    }

    Ok(StepReport {
        t_from: t_i,
        t_to: t_next,
        state_out,
        velocity,
        derivative_estimates,
        nfe: order,
    })
}

/// States and velocities visited by one trajectory, in trajectory order.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub grid: TimeGrid,
    pub direction: Direction,
    /// `N + 1` states; `states[0]` is the starting state.
    pub states: Vec<Tensor>,
    /// `N` velocities, one per step at the expansion point.
    pub velocities: Vec<Tensor>,
}

impl TrajectoryRecord {
    /// State recorded at grid time `t_i`, independent of direction.
    pub fn state_at(&self, grid_index: usize) -> &Tensor {
        match self.direction {
            Direction::Invert => &self.states[grid_index],
            Direction::Denoise => &self.states[self.grid.steps() - grid_index],
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryOutput {
    pub final_state: Tensor,
    pub nfe: usize,
    pub record: Option<TrajectoryRecord>,
}

/// Integrates across the whole grid. Denoising steps `t_N -> ... -> t_0`,
/// inversion steps `t_0 -> ... -> t_N`; both use the same Taylor step.
pub fn run_trajectory_with<E: Evaluator + ?Sized>(
    eval: &mut E,
    z_init: &Tensor,
    grid: &TimeGrid,
    config: &SolverConfig,
    record: bool,
) -> Result<TrajectoryOutput> {
    let n = grid.steps();
    let mut rec = record.then(|| TrajectoryRecord {
        grid: grid.clone(),
        direction: config.direction,
        states: vec![z_init.clone()],
        velocities: Vec::with_capacity(n),
    });
    let mut state = z_init.clone();
    let mut nfe = 0;
    for step in 0..n {
        let (from, to, interval) = match config.direction {
            Direction::Denoise => (n - step, n - step - 1, n - step),
            Direction::Invert => (step, step + 1, step + 1),
        };
        let report = taylor_step(
            eval,
            interval,
            &state,
            grid.t(from),
            grid.t(to),
            config.order,
            config.delta_t,
        )?;
        nfe += report.nfe;
        if !report.state_out.is_finite() {
            return Err(Error::NonFiniteState { step, t: grid.t(to) });
        }
        state = report.state_out;
        if let Some(rec) = rec.as_mut() {
            rec.states.push(state.clone());
            rec.velocities.push(report.velocity);
        }
    }
    Ok(TrajectoryOutput {
        final_state: state,
        nfe,
        record: rec,
    })
}

pub fn run_trajectory<F: VelocityField + ?Sized>(
    field: &F,
    z_init: &Tensor,
    grid: &TimeGrid,
    config: &SolverConfig,
    condition: Option<ConditionId>,
    record: bool,
) -> Result<TrajectoryOutput> {
    ensure!(
        field.accepts(z_init.shape()),
        "initial state shape {:?} does not match field {}",
        z_init.shape(),
        field.name()
    );
    let mut eval = FieldEvaluator::new(field, condition);
    run_trajectory_with(&mut eval, z_init, grid, config, record)
}
