//! Turning merged options into fields, start states and solver settings.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfsolve::attnfield::AttentionGeometry;
use rfsolve::tensorio::read_tensor;
use rfsolve::train::{standard_normal, GaussianComponent, Optimizer};
use rfsolve::{
    AnalyticField, AttentionField, ConditionId, Error, MlpField, Tensor, ToyDistribution, VelocityField,
};

use crate::options::Options;
use crate::Failure;

pub const DEFAULT_ORDER: usize = 2;
pub const DEFAULT_N: usize = 25;
pub const DEFAULT_SEED: u64 = 0;

pub enum Field {
    Analytic(AnalyticField),
    Mlp(MlpField),
    Attention(AttentionField),
}

impl Field {
    pub fn as_dyn(&self) -> &(dyn VelocityField + Sync) {
        match self {
            Field::Analytic(f) => f,
            Field::Mlp(f) => f,
            Field::Attention(f) => f,
        }
    }

    pub fn state_shape(&self, samples: Option<usize>) -> Vec<usize> {
        match self {
            Field::Attention(f) => f.value_shape().to_vec(),
            other => {
                let dim = other.as_dyn().dim();
                match samples {
                    Some(n) => vec![n, dim],
                    None => vec![dim],
                }
            }
        }
    }
}

fn missing(flag: &str) -> Failure {
    Failure::Usage(format!("missing required flag --{flag}"))
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn field_name(opts: &Options) -> Result<&str, Failure> {
    opts.field.as_deref().ok_or_else(|| missing("field"))
}

pub fn build_field(opts: &Options) -> Result<Field, Failure> {
    let dim = opts.dim.unwrap_or(2);
    let repeat = |x: f64| vec![x; dim];
    let field = match field_name(opts)? {
        "constant" => {
            let c = opts.c.clone().map_or_else(|| repeat(1.0), |l| l.0);
            Field::Analytic(AnalyticField::constant(c)?)
        }
        "linear-state" => Field::Analytic(AnalyticField::linear_state(opts.a.unwrap_or(1.0), dim)?),
        "linear-time" => Field::Analytic(AnalyticField::linear_time(dim)?),
        "quadratic-time" => Field::Analytic(AnalyticField::quadratic_time(dim)?),
        "rotation" => Field::Analytic(AnalyticField::rotation(opts.omega.unwrap_or(1.0))?),
        "gaussian-ot" => {
            let mu0 = opts.mu0.clone().map_or_else(|| repeat(2.0), |l| l.0);
            let d = mu0.len();
            let sigma0 = opts.sigma0.clone().map_or_else(|| vec![0.5; d], |l| l.0);
            let mu1 = opts.mu1.clone().map_or_else(|| vec![0.0; d], |l| l.0);
            Field::Analytic(AnalyticField::gaussian_pair_ot(mu0, sigma0, mu1)?)
        }
        "mlp" => {
            let dir = opts.params.as_ref().ok_or_else(|| missing("params"))?;
            Field::Mlp(MlpField::load(dir)?)
        }
        "attention" => {
            let defaults = AttentionGeometry::default();
            let geometry = AttentionGeometry {
                tokens: opts.tokens.unwrap_or(defaults.tokens),
                channels: opts.channels.unwrap_or(defaults.channels),
                blocks: opts.blocks.unwrap_or(defaults.blocks),
                conditions: opts.conditions.unwrap_or(defaults.conditions),
                ..defaults
            };
            Field::Attention(AttentionField::random(geometry, opts.field_seed.unwrap_or(0))?)
        }
        other => return Err(usage(format!("unknown field `{other}`"))),
    };
    Ok(field)
}

pub fn distribution(name: &str) -> Result<ToyDistribution, Failure> {
    let comp = |mean: Vec<f64>, std: f64, weight: f64| GaussianComponent {
        std: vec![std; mean.len()],
        mean,
        weight,
    };
    let dist = match name {
        "mixture" => ToyDistribution::gaussian_mixture(vec![
            comp(vec![-2.0, 0.0], 0.3, 0.5),
            comp(vec![2.0, 0.0], 0.3, 0.5),
        ])?,
        "gaussian" => ToyDistribution::gaussian_mixture(vec![comp(vec![2.0, 2.0], 0.5, 1.0)])?,
        "two-moons" => ToyDistribution::two_moons(0.05)?,
        "checkerboard" => ToyDistribution::checkerboard(4)?,
        other => return Err(usage(format!("unknown distribution `{other}`"))),
    };
    Ok(dist)
}

pub fn optimizer(opts: &Options) -> Result<Optimizer, Failure> {
    match opts.optimizer.as_deref().unwrap_or("adam") {
        "adam" => Ok(Optimizer::adam()),
        "sgd" => Ok(Optimizer::Sgd),
        other => Err(usage(format!("unknown optimizer `{other}`"))),
    }
}

/// Start state: `--input` if given, else samples from `--dist` when
/// `from_data` is set, else standard normal draws seeded by `--seed`.
pub fn start_state(opts: &Options, field: &Field, from_data: bool) -> Result<Tensor, Failure> {
    if let Some(path) = &opts.input {
        return Ok(read_tensor(path)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.unwrap_or(DEFAULT_SEED));
    if from_data {
        if let Some(name) = &opts.dist {
            let dist = distribution(name)?;
            return Ok(dist.sample(opts.samples.unwrap_or(1), &mut rng));
        }
    }
    Ok(standard_normal(&field.state_shape(opts.samples), &mut rng))
}

pub fn condition(id: Option<u32>) -> Option<ConditionId> {
    id.map(ConditionId)
}

pub fn out_dir(opts: &Options) -> Result<PathBuf, Failure> {
    let dir = opts
        .out
        .clone()
        .or_else(|| std::env::var_os("RFSOLVE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Failure::from(Error::io(&dir, e)))?;
    Ok(dir)
}

pub fn join_list(items: &[usize]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("+")
}
