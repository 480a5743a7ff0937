//! Toy attention velocity network with value-feature capture and override.
//!
//! The state is viewed as `tokens x channels`. Each block applies RMS
//! pre-normalisation, single-head softmax attention and a residual update;
//! a final linear map produces the velocity. Per-token condition embeddings
//! and a time embedding are added to the input.

mod cache;
mod edit;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use cache::{CacheKey, FeatureCache};
pub use edit::{denoise_with_sharing, edit, invert_with_capture, EditOutput};

use crate::error::{ensure, Result};
use crate::field::{ConditionId, VelocityField};
use crate::tensorio::Tensor;

/// Value tensors (`tokens x channels`) keyed by block index.
pub type BlockValues = BTreeMap<usize, Tensor>;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AttnBlock {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionGeometry {
    pub tokens: usize,
    pub channels: usize,
    pub blocks: usize,
    pub conditions: usize,
    /// Standard deviation of the condition embedding entries.
    pub condition_scale: f64,
}

impl Default for AttentionGeometry {
    fn default() -> Self {
        Self {
            tokens: 4,
            channels: 8,
            blocks: 2,
            conditions: 4,
            condition_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionField {
    tokens: usize,
    channels: usize,
    blocks: Vec<AttnBlock>,
    /// One `tokens x channels` embedding per condition id.
    condition_embeddings: Vec<Array2<f64>>,
    time_embedding: Array1<f64>,
    w_out: Array2<f64>,
}

impl AttentionField {
    /// Gaussian initialisation with std `1/sqrt(channels)` for projections,
    /// unit std for the time embedding and `condition_scale` for condition
    /// embeddings.
    pub fn random(geometry: AttentionGeometry, seed: u64) -> Result<Self> {
        let AttentionGeometry {
            tokens,
            channels,
            blocks,
            conditions,
            condition_scale,
        } = geometry;
        ensure!(
            tokens > 0 && channels > 0,
            "token and channel counts must be positive"
        );
        ensure!(blocks >= 1, "attention field needs at least one block");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            Array2::from_shape_fn((rows, cols), |_| {
                std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
        };
        let proj = 1.0 / (channels as f64).sqrt();
        let blocks = (0..blocks)
            .map(|_| AttnBlock {
                w_q: gauss(channels, channels, proj),
                w_k: gauss(channels, channels, proj),
                w_v: gauss(channels, channels, proj),
                w_o: gauss(channels, channels, proj),
            })
            .collect();
        let condition_embeddings = (0..conditions)
            .map(|_| gauss(tokens, channels, condition_scale))
            .collect();
        let time_embedding = gauss(1, channels, 1.0).index_axis_move(Axis(0), 0);
        let w_out = gauss(channels, channels, proj);
        Ok(Self {
            tokens,
            channels,
            blocks,
            condition_embeddings,
            time_embedding,
            w_out,
        })
    }

    pub fn from_parts(
        tokens: usize,
        channels: usize,
        blocks: Vec<AttnBlock>,
        condition_embeddings: Vec<Array2<f64>>,
        time_embedding: Array1<f64>,
        w_out: Array2<f64>,
    ) -> Result<Self> {
        ensure!(!blocks.is_empty(), "attention field needs at least one block");
        let square = (channels, channels);
        for (m, b) in blocks.iter().enumerate() {
            ensure!(
                [&b.w_q, &b.w_k, &b.w_v, &b.w_o].iter().all(|w| w.dim() == square),
                "block {m} projections must be {channels}x{channels}"
            );
        }
        ensure!(
            condition_embeddings.iter().all(|e| e.dim() == (tokens, channels)),
            "condition embeddings must be {tokens}x{channels}"
        );
        ensure!(
            time_embedding.len() == channels,
            "time embedding must have {channels} entries"
        );
        ensure!(
            w_out.dim() == square,
            "output projection must be {channels}x{channels}"
        );
        Ok(Self {
            tokens,
            channels,
            blocks,
            condition_embeddings,
            time_embedding,
            w_out,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_conditions(&self) -> usize {
        self.condition_embeddings.len()
    }

    pub fn value_shape(&self) -> [usize; 2] {
        [self.tokens, self.channels]
    }

    /// Velocity with optional per-block value overrides and value capture.
    ///
    /// Blocks present in `v_override` attend with the supplied value tensor in
    /// place of their own; queries and keys are always recomputed. Every value
    /// tensor the network computes (before any override) is written to
    /// `v_capture`.
    pub fn forward(
        &self,
        state: &Tensor,
        t: f64,
        condition: Option<ConditionId>,
        v_override: Option<&BlockValues>,
        mut v_capture: Option<&mut BlockValues>,
    ) -> Result<Tensor> {
        ensure!(
            state.len() == self.tokens * self.channels,
            "state has {} elements, attention field expects {}x{}",
            state.len(),
            self.tokens,
            self.channels
        );
        if let Some(overrides) = v_override {
            for (&m, v) in overrides {
                ensure!(m < self.blocks.len(), "override for missing block {m}");
                ensure!(
                    v.shape() == self.value_shape(),
                    "override for block {m} has shape {:?}, expected {:?}",
                    v.shape(),
                    self.value_shape()
                );
            }
        }
        let embedding = match condition {
            Some(ConditionId(id)) => {
                let id = id as usize;
                ensure!(
                    id < self.condition_embeddings.len(),
                    "condition {id} outside embedding table of {}",
                    self.condition_embeddings.len()
                );
                Some(&self.condition_embeddings[id])
            }
            None => None,
        };

        let view =
            ArrayView2::from_shape((self.tokens, self.channels), state.data()).expect("length checked");
        let mut x = view.to_owned() + &(&self.time_embedding * t);
        if let Some(e) = embedding {
            x += e;
        }

        let scale = 1.0 / (self.channels as f64).sqrt();
        for (m, block) in self.blocks.iter().enumerate() {
            let normed = rms_norm(&x);
            let q = normed.dot(&block.w_q.t());
            let k = normed.dot(&block.w_k.t());
            let v = normed.dot(&block.w_v.t());
            if let Some(sink) = v_capture.as_deref_mut() {
                sink.insert(m, array_to_tensor(&v));
            }
            let replaced = v_override.and_then(|o| o.get(&m)).map(|t| {
                Array2::from_shape_vec((self.tokens, self.channels), t.data().to_vec())
                    .expect("shape checked")
            });
            let values = replaced.as_ref().unwrap_or(&v);
            let mut scores = q.dot(&k.t()) * scale;
            softmax_rows(&mut scores);
            let attended = scores.dot(values);
            x += &attended.dot(&block.w_o.t());
        }
        let out = x.dot(&self.w_out.t());
        Tensor::new(state.shape().to_vec(), out.into_iter().collect())
    }
}

impl VelocityField for AttentionField {
    fn name(&self) -> String {
        "attention".into()
    }

    fn dim(&self) -> usize {
        self.tokens * self.channels
    }

    fn accepts(&self, shape: &[usize]) -> bool {
        shape.iter().product::<usize>() == self.dim()
    }

    fn velocity(&self, state: &Tensor, t: f64, condition: Option<ConditionId>) -> Result<Tensor> {
        self.forward(state, t, condition, None, None)
    }
}

fn rms_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|s| s / sum);
    }
}

fn array_to_tensor(a: &Array2<f64>) -> Tensor {
    let (r, c) = a.dim();
    Tensor::new(vec![r, c], a.iter().copied().collect()).expect("non-empty")
}

/// How many timesteps and final blocks share value features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ShareConfig {
    /// Timesteps at the noise end of the schedule (0 disables sharing).
    pub n_share: usize,
    /// Number of final blocks that share.
    pub m_share: usize,
}

impl ShareConfig {
    pub fn new(n_share: usize, m_share: usize) -> Self {
        Self { n_share, m_share }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn validate(&self, steps: usize, blocks: usize) -> Result<()> {
        ensure!(
            self.n_share <= steps,
            "n_share {} exceeds the {steps} grid steps",
            self.n_share
        );
        if self.n_share > 0 {
            ensure!(
                (1..=blocks).contains(&self.m_share),
                "m_share {} must be in 1..={blocks}",
                self.m_share
            );
        }
        Ok(())
    }

    /// Whether the interval with upper grid index `k` shares features.
    pub fn shares_interval(&self, interval: usize, steps: usize) -> bool {
        self.n_share > 0 && interval + self.n_share > steps
    }

    /// Indices of the sharing blocks.
    pub fn blocks(&self, total: usize) -> std::ops::Range<usize> {
        total - self.m_share.min(total)..total
    }
}
