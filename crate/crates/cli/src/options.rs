//! Flag set shared by every subcommand and the `key = value` config file
//! that can stand in for it.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Comma-separated list value, e.g. `--steps 10,20,40`.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|item| {
                let item = item.trim();
                item.parse::<T>()
                    .map_err(|e| format!("bad list item `{item}`: {e}"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(List)
    }
}

macro_rules! options {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty, )*) => {
        #[derive(Debug, Default, Clone, clap::Args)]
        pub struct Options {
            $( $(#[doc = $doc])* #[arg(long)] pub $name: Option<$ty>, )*
        }

        impl Options {
            fn set(&mut self, key: &str, value: &str) -> Option<Result<(), String>> {
                match key {
                    $( stringify!($name) => Some(
                        value
                            .parse::<$ty>()
                            .map(|v| self.$name = Some(v))
                            .map_err(|e| format!("invalid value `{value}` for {key}: {e}")),
                    ), )*
                    _ => None,
                }
            }

            /// Values from `over` win; unset ones fall back to `self`.
            pub fn overlay(self, over: Options) -> Options {
                Options { $( $name: over.$name.or(self.$name), )* }
            }
        }
    };
}

options! {
    /// Velocity field: constant, linear-state, linear-time, quadratic-time,
    /// rotation, gaussian-ot, mlp or attention
    field: String,
    /// Growth rate of linear-state
    a: f64,
    /// Angular speed of rotation
    omega: f64,
    /// Velocity of the constant field, one entry per dimension
    c: List<f64>,
    /// State dimension for dimension-free analytic fields
    dim: usize,
    /// Data mean of gaussian-ot
    mu0: List<f64>,
    /// Data standard deviation of gaussian-ot
    sigma0: List<f64>,
    /// Noise mean of gaussian-ot
    mu1: List<f64>,
    /// Directory holding trained mlp parameters
    params: PathBuf,
    /// Initialisation seed for mlp and attention weights
    field_seed: u64,
    /// Attention tokens
    tokens: usize,
    /// Attention channels
    channels: usize,
    /// Attention blocks
    blocks: usize,
    /// Attention condition table size
    conditions: usize,
    /// Number of grid intervals
    n: usize,
    /// Solver order (1, 2 or 3)
    order: usize,
    /// Solver orders for multi-order studies
    orders: List<usize>,
    /// Derivative probe step
    delta_t: f64,
    /// Seed for start states and training batches
    seed: u64,
    /// Number of start states drawn when no input is given
    samples: usize,
    /// Start state tensor file
    input: PathBuf,
    /// Data distribution: mixture, gaussian, two-moons or checkerboard
    dist: String,
    /// Condition id passed to the field
    condition: u32,
    /// Edit source condition
    source: u32,
    /// Edit target condition
    target: u32,
    /// Sharing steps; a list sweeps them
    n_share: List<usize>,
    /// Number of trailing blocks whose values are shared
    m_share: usize,
    /// Grid sizes for the convergence study
    steps: List<usize>,
    /// Integration direction for the convergence study: denoise or invert
    direction: String,
    /// Per-direction evaluation budget for the ablation
    total_nfe: usize,
    /// Match evaluations across orders in fig2 (order k takes 2N/k steps)
    nfe_matched: bool,
    /// Hidden layer widths of a fresh mlp
    hidden: List<usize>,
    /// Training batch size
    batch_size: usize,
    /// Training steps
    train_steps: usize,
    /// Learning rate
    lr: f64,
    /// Optimizer: adam or sgd
    optimizer: String,
    /// Output directory (default: $RFSOLVE_OUT, else the working directory)
    out: PathBuf,
    /// Worker threads for independent sweep points
    jobs: usize,
}

/// Parsed config file: options plus the optional `command` entry.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub command: Option<String>,
    pub options: Options,
}

pub fn parse_config(text: &str, path: &Path) -> Result<ConfigFile, String> {
    let mut cfg = ConfigFile::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("{}:{line_no}: expected `key = value`", path.display()));
        };
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        if key == "command" {
            cfg.command = Some(value.to_string());
            continue;
        }
        match cfg.options.set(&key, value) {
            Some(Ok(())) => {}
            Some(Err(e)) => return Err(format!("{}:{line_no}: {e}", path.display())),
            None => return Err(format!("{}:{line_no}: unknown key `{key}`", path.display())),
        }
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ConfigFile, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse_config(&text, path)
}
