//! Experiment drivers: inversion/reconstruction error curves, convergence
//! order fits, fixed-budget order ablations and feature-sharing sweeps.

use std::path::Path;

use crate::attnfield::{self, AttentionField, ShareConfig};
use crate::error::{ensure, Result};
use crate::field::{AnalyticField, ConditionId, VelocityField};
use crate::solver::{run_trajectory, Direction, SolverConfig, TimeGrid};
use crate::tensorio::{distance, mse, write_csv_with_metadata, Tensor};

pub use crate::solver::TrajectoryRecord;

/// Errors below this are treated as exact when fitting convergence slopes.
pub const EXACT_TOLERANCE: f64 = 1e-12;

/// Inversion followed by denoising under one condition.
#[derive(Debug, Clone)]
pub struct RoundTrip {
    pub noise: Tensor,
    pub reconstruction: Tensor,
    pub inversion: TrajectoryRecord,
    pub denoising: TrajectoryRecord,
    pub nfe: usize,
}

impl RoundTrip {
    /// `MSE(Z~_{t_i}, Z_{t_i})` for `i = 0..=N`, paired by grid index.
    pub fn per_timestep_mse(&self) -> Vec<f64> {
        (0..=self.inversion.grid.steps())
            .map(|i| mse(self.inversion.state_at(i), self.denoising.state_at(i)))
            .collect()
    }
}

pub fn roundtrip<F: VelocityField + ?Sized>(
    field: &F,
    z0: &Tensor,
    grid: &TimeGrid,
    order: usize,
    delta_t: f64,
    condition: Option<ConditionId>,
) -> Result<RoundTrip> {
    let invert = SolverConfig::new(order, delta_t, Direction::Invert)?;
    let inv = run_trajectory(field, z0, grid, &invert, condition, true)?;
    let den = run_trajectory(
        field,
        &inv.final_state,
        grid,
        &invert.with_direction(Direction::Denoise),
        condition,
        true,
    )?;
    Ok(RoundTrip {
        noise: inv.final_state,
        reconstruction: den.final_state,
        inversion: inv.record.expect("recorded"),
        denoising: den.record.expect("recorded"),
        nfe: inv.nfe + den.nfe,
    })
}

/// Per-timestep inversion/reconstruction MSE for one solver order.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub order: usize,
    /// Steps the solver actually took.
    pub steps: usize,
    pub field: String,
    /// Grid times the curve is reported at, ascending (`t_0` first).
    pub times: Vec<f64>,
    pub mse: Vec<f64>,
    /// `MSE(z0, reconstruction)`.
    pub terminal_mse: f64,
}

impl ErrorCurve {
    pub fn value_at(&self, t: f64) -> Option<f64> {
        self.times.iter().position(|&s| s == t).map(|i| self.mse[i])
    }
}

/// Runs the inversion/reconstruction protocol for each order.
///
/// With `nfe_matched`, order `k` takes `2N/k` steps so every order spends the
/// same number of evaluations as order 2 at `N` steps, and all curves are
/// reported on the times shared by every grid. Otherwise each order takes `N`
/// steps.
pub fn fig2_study<F: VelocityField + ?Sized>(
    field: &F,
    z0: &Tensor,
    steps: usize,
    orders: &[usize],
    condition: Option<ConditionId>,
    delta_t: f64,
    nfe_matched: bool,
) -> Result<Vec<ErrorCurve>> {
    ensure!(!orders.is_empty(), "at least one solver order is required");
    let mut runs = Vec::with_capacity(orders.len());
    for &order in orders {
        let n = if nfe_matched {
            ensure!(
                (1..=3).contains(&order) && (2 * steps).is_multiple_of(order),
                "NFE matching needs 2N divisible by the order (N={steps}, order={order})"
            );
            2 * steps / order
        } else {
            steps
        };
        let grid = TimeGrid::uniform(n)?;
        let rt = roundtrip(field, z0, &grid, order, delta_t, condition)?;
        runs.push((order, grid, rt));
    }

    // Times present in every grid, ascending.
    let (_, first_grid, _) = &runs[0];
    let shared: Vec<f64> = (0..=first_grid.steps())
        .map(|i| first_grid.t(i))
        .filter(|t| runs.iter().all(|(_, g, _)| g.times().contains(t)))
        .collect();

    Ok(runs
        .into_iter()
        .map(|(order, grid, rt)| {
            let full = rt.per_timestep_mse();
            let values = shared
                .iter()
                .map(|t| {
                    let i = (0..=grid.steps()).find(|&i| grid.t(i) == *t).unwrap();
                    full[i]
                })
                .collect();
            ErrorCurve {
                order,
                steps: grid.steps(),
                field: field.name(),
                times: shared.clone(),
                mse: values,
                terminal_mse: mse(z0, &rt.reconstruction),
            }
        })
        .collect())
}

/// Checks `candidate <= factor * reference + floor` at every time both curves
/// report. Returns the first violating time.
pub fn curve_below(
    candidate: &ErrorCurve,
    reference: &ErrorCurve,
    factor: f64,
    floor: f64,
) -> Result<(), f64> {
    for (t, c) in candidate.times.iter().zip(&candidate.mse) {
        if let Some(r) = reference.value_at(*t) {
            if *c > factor * r + floor {
                return Err(*t);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub field: String,
    pub order: usize,
    pub direction: Direction,
    pub step_counts: Vec<usize>,
    /// Terminal Euclidean error against the exact flow.
    pub errors: Vec<f64>,
    /// Least-squares slope of `log error` against `log h`; `None` when every
    /// error is below [`EXACT_TOLERANCE`].
    pub slope: Option<f64>,
}

impl ConvergenceReport {
    pub fn is_exact(&self) -> bool {
        self.slope.is_none()
    }
}

pub fn convergence_study(
    field: &AnalyticField,
    z0: &Tensor,
    direction: Direction,
    order: usize,
    delta_t: f64,
    step_counts: &[usize],
) -> Result<ConvergenceReport> {
    ensure!(
        step_counts.len() >= 4,
        "convergence study needs at least 4 resolutions"
    );
    let (t_start, t_end) = match direction {
        Direction::Denoise => (1.0, 0.0),
        Direction::Invert => (0.0, 1.0),
    };
    let exact = field.exact_solution(z0, t_start, t_end)?;
    let config = SolverConfig::new(order, delta_t, direction)?;
    let mut errors = Vec::with_capacity(step_counts.len());
    for &n in step_counts {
        let grid = TimeGrid::uniform(n)?;
        let out = run_trajectory(field, z0, &grid, &config, None, false)?;
        errors.push(distance(&out.final_state, &exact));
    }
    let slope = if errors.iter().all(|&e| e < EXACT_TOLERANCE) {
        None
    } else {
        let points: Vec<(f64, f64)> = step_counts
            .iter()
            .zip(&errors)
            .filter(|(_, &e)| e > 0.0)
            .map(|(&n, &e)| ((1.0 / n as f64).ln(), e.ln()))
            .collect();
        ensure!(points.len() >= 2, "too few non-zero errors to fit a slope");
        Some(least_squares_slope(&points))
    };
    Ok(ConvergenceReport {
        field: field.name(),
        order,
        direction,
        step_counts: step_counts.to_vec(),
        errors,
        slope,
    })
}

/// Slope of the least-squares line through `(x, y)` points.
pub fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub order: usize,
    pub steps: usize,
    /// Evaluations per direction actually spent (`steps * order`).
    pub nfe: usize,
    pub terminal_mse: f64,
}

/// Round-trip error per order under a fixed per-direction evaluation budget.
/// Order `k` takes `floor(total_nfe / k)` steps.
pub fn nfe_ablation<F: VelocityField + ?Sized>(
    field: &F,
    z0: &Tensor,
    total_nfe: usize,
    orders: &[usize],
    condition: Option<ConditionId>,
    delta_t: f64,
) -> Result<Vec<AblationRow>> {
    ensure!(total_nfe >= 3, "total NFE must be at least 3, got {total_nfe}");
    orders
        .iter()
        .map(|&order| {
            ensure!(
                (1..=3).contains(&order),
                "solver order must be 1, 2 or 3, got {order}"
            );
            let steps = total_nfe / order;
            let grid = TimeGrid::uniform(steps)?;
            let rt = roundtrip(field, z0, &grid, order, delta_t, condition)?;
            Ok(AblationRow {
                order,
                steps,
                nfe: steps * order,
                terminal_mse: mse(z0, &rt.reconstruction),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EditRow {
    pub n_share: usize,
    /// Against the unshared reconstruction under the source condition.
    pub mse_to_reconstruction: f64,
    /// Against the unshared (`n_share = 0`) edit under the target condition.
    pub mse_to_free_edit: f64,
}

/// Sweeps the number of sharing steps for a source -> target edit.
#[allow(clippy::too_many_arguments)]
pub fn edit_study(
    field: &AttentionField,
    z0: &Tensor,
    grid: &TimeGrid,
    config: &SolverConfig,
    source: ConditionId,
    target: ConditionId,
    m_share: usize,
    n_share_sweep: &[usize],
) -> Result<Vec<EditRow>> {
    let plain = |cond| {
        attnfield::edit(
            field,
            z0,
            grid,
            config,
            Some(source),
            Some(cond),
            ShareConfig::disabled(),
        )
    };
    let reconstruction = plain(source)?.edited;
    let free_edit = plain(target)?.edited;
    n_share_sweep
        .iter()
        .map(|&n| {
            let share = if n == 0 {
                ShareConfig::disabled()
            } else {
                ShareConfig::new(n, m_share)
            };
            let out = attnfield::edit(field, z0, grid, config, Some(source), Some(target), share)?;
            Ok(EditRow {
                n_share: n,
                mse_to_reconstruction: mse(&out.edited, &reconstruction),
                mse_to_free_edit: mse(&out.edited, &free_edit),
            })
        })
        .collect()
}

/// Metadata lines written ahead of every study CSV.
pub type Metadata = Vec<(String, String)>;

pub fn write_curves_csv(curves: &[ErrorCurve], mut meta: Metadata, path: impl AsRef<Path>) -> Result<()> {
    let Some(first) = curves.first() else {
        return write_csv_with_metadata(&meta, &[], path);
    };
    meta.push(("field".into(), first.field.clone()));
    for c in curves {
        meta.push((format!("order{}.steps", c.order), c.steps.to_string()));
        meta.push((
            format!("order{}.terminal_mse", c.order),
            crate::tensorio::format_f64(c.terminal_mse),
        ));
    }
    let mut rows = vec![("t".to_string(), first.times.clone())];
    rows.extend(
        curves
            .iter()
            .map(|c| (format!("mse_order{}", c.order), c.mse.clone())),
    );
    write_csv_with_metadata(&meta, &rows, path)
}

pub fn write_convergence_csv(
    report: &ConvergenceReport,
    mut meta: Metadata,
    path: impl AsRef<Path>,
) -> Result<()> {
    meta.push(("field".into(), report.field.clone()));
    meta.push(("order".into(), report.order.to_string()));
    meta.push(("direction".into(), report.direction.as_str().into()));
    meta.push((
        "slope".into(),
        report
            .slope
            .map_or_else(|| "exact".to_string(), crate::tensorio::format_f64),
    ));
    let rows = vec![
        (
            "steps".to_string(),
            report.step_counts.iter().map(|&n| n as f64).collect(),
        ),
        ("error".to_string(), report.errors.clone()),
    ];
    write_csv_with_metadata(&meta, &rows, path)
}

pub fn write_ablation_csv(rows: &[AblationRow], meta: Metadata, path: impl AsRef<Path>) -> Result<()> {
    let rows: Vec<_> = rows
        .iter()
        .map(|r| {
            (
                format!("order{}", r.order),
                vec![r.steps as f64, r.nfe as f64, r.terminal_mse],
            )
        })
        .collect();
    write_csv_with_metadata(&meta, &rows, path)
}

pub fn write_edit_csv(rows: &[EditRow], meta: Metadata, path: impl AsRef<Path>) -> Result<()> {
    let rows: Vec<_> = rows
        .iter()
        .map(|r| {
            (
                format!("n_share{}", r.n_share),
                vec![r.n_share as f64, r.mse_to_reconstruction, r.mse_to_free_edit],
            )
        })
        .collect();
    write_csv_with_metadata(&meta, &rows, path)
}
