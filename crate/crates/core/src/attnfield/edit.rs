//! Inversion with value capture and denoising with value replacement.
//!
//! The last `n_share` inversion intervals capture the value tensors of the
//! last `m_share` blocks, for the expansion-point evaluation and for each
//! derivative probe separately. Denoising over the same intervals (its first
//! `n_share` steps) swaps those tensors in.

use super::{AttentionField, BlockValues, CacheKey, FeatureCache, ShareConfig};
use crate::error::{ensure, Result};
use crate::field::{check_inputs, check_output, ConditionId, VelocityField};
use crate::solver::{
    run_trajectory_with, Direction, EvalPoint, Evaluator, SolverConfig, TimeGrid, TrajectoryOutput,
};
use crate::tensorio::Tensor;

struct CaptureEvaluator<'a> {
    field: &'a AttentionField,
    condition: Option<ConditionId>,
    share: ShareConfig,
    steps: usize,
    cache: FeatureCache,
}

impl Evaluator for CaptureEvaluator<'_> {
    fn evaluate(&mut self, at: EvalPoint, state: &Tensor) -> Result<Tensor> {
        check_inputs(self.field, state, at.t)?;
        if !self.share.shares_interval(at.interval, self.steps) {
            return self
                .field
                .evaluate_checked(state, at.t, self.condition, None, None);
        }
        let mut captured = BlockValues::new();
        let v = self
            .field
            .evaluate_checked(state, at.t, self.condition, None, Some(&mut captured))?;
        for block in self.share.blocks(self.field.num_blocks()) {
            let value = captured.remove(&block).expect("every block captures");
            let key = CacheKey {
                interval: at.interval,
                block,
                pass: at.pass,
            };
            self.cache.insert(key, value)?;
        }
        Ok(v)
    }
}

struct SharingEvaluator<'a> {
    field: &'a AttentionField,
    condition: Option<ConditionId>,
    share: ShareConfig,
    steps: usize,
    cache: &'a FeatureCache,
}

impl Evaluator for SharingEvaluator<'_> {
    fn evaluate(&mut self, at: EvalPoint, state: &Tensor) -> Result<Tensor> {
        check_inputs(self.field, state, at.t)?;
        if !self.share.shares_interval(at.interval, self.steps) {
            return self
                .field
                .evaluate_checked(state, at.t, self.condition, None, None);
        }
        let overrides: BlockValues = self
            .share
            .blocks(self.field.num_blocks())
            .filter_map(|block| {
                let key = CacheKey {
                    interval: at.interval,
                    block,
                    pass: at.pass,
                };
                self.cache.get(&key).map(|v| (block, v.clone()))
            })
            .collect();
        let overrides = (!overrides.is_empty()).then_some(&overrides);
        self.field
            .evaluate_checked(state, at.t, self.condition, overrides, None)
    }
}

impl AttentionField {
    fn evaluate_checked(
        &self,
        state: &Tensor,
        t: f64,
        condition: Option<ConditionId>,
        v_override: Option<&BlockValues>,
        v_capture: Option<&mut BlockValues>,
    ) -> Result<Tensor> {
        let v = self.forward(state, t, condition, v_override, v_capture)?;
        check_output(self, state, &v, t)?;
        Ok(v)
    }
}

/// Inverts `z0` to noise under `source`, capturing value features over the
/// last `share.n_share` intervals.
pub fn invert_with_capture(
    field: &AttentionField,
    z0: &Tensor,
    grid: &TimeGrid,
    config: &SolverConfig,
    source: Option<ConditionId>,
    share: ShareConfig,
) -> Result<(Tensor, FeatureCache)> {
    share.validate(grid.steps(), field.num_blocks())?;
    let mut eval = CaptureEvaluator {
        field,
        condition: source,
        share,
        steps: grid.steps(),
        cache: FeatureCache::new(),
    };
    let out = run_trajectory_with(
        &mut eval,
        z0,
        grid,
        &config.with_direction(Direction::Invert),
        false,
    )?;
    Ok((out.final_state, eval.cache))
}

/// Denoises `noise` under `target`, replacing values over the first
/// `share.n_share` steps with entries from `cache`. Keys missing from the
/// cache fall back to the network's own values.
#[allow(clippy::too_many_arguments)]
pub fn denoise_with_sharing(
    field: &AttentionField,
    noise: &Tensor,
    grid: &TimeGrid,
    config: &SolverConfig,
    target: Option<ConditionId>,
    share: ShareConfig,
    cache: &FeatureCache,
    record: bool,
) -> Result<TrajectoryOutput> {
    share.validate(grid.steps(), field.num_blocks())?;
    ensure!(
        field.accepts(noise.shape()),
        "noise shape {:?} does not match attention field",
        noise.shape()
    );
    let mut eval = SharingEvaluator {
        field,
        condition: target,
        share,
        steps: grid.steps(),
        cache,
    };
    run_trajectory_with(
        &mut eval,
        noise,
        grid,
        &config.with_direction(Direction::Denoise),
        record,
    )
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub noise: Tensor,
    pub edited: Tensor,
    pub cache: FeatureCache,
}

/// Full edit: invert under `source` with capture, denoise under `target`
/// with sharing.
pub fn edit(
    field: &AttentionField,
    z0: &Tensor,
    grid: &TimeGrid,
    config: &SolverConfig,
    source: Option<ConditionId>,
    target: Option<ConditionId>,
    share: ShareConfig,
) -> Result<EditOutput> {
    let (noise, cache) = invert_with_capture(field, z0, grid, config, source, share)?;
    let edited = denoise_with_sharing(field, &noise, grid, config, target, share, &cache, false)?.final_state;
    Ok(EditOutput { noise, edited, cache })
}
