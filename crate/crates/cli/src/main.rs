//! `rfsolve`: solve, invert, train and run studies from the command line.
//!
//! Every subcommand takes the same long flags; `--config FILE` supplies
//! `key = value` defaults that explicit flags override. Outputs land in
//! `--out`, `$RFSOLVE_OUT` or the working directory, named
//! `<command>-<field>-<order>-<N>.csv`.

mod options;
mod setup;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use rfsolve::harness::{self, Metadata};
use rfsolve::tensorio::{format_f64, write_csv_with_metadata, write_tensor};
use rfsolve::train::{self, TrainConfig};
use rfsolve::{Direction, Error, MlpField, SolverConfig, TimeGrid};

use options::{load_config, Options};
use setup::{
    build_field, condition, distribution, field_name, join_list, out_dir, start_state, Field, DEFAULT_N,
    DEFAULT_ORDER, DEFAULT_SEED,
};

#[derive(Parser)]
#[command(
    name = "rfsolve",
    version,
    about = "Rectified-flow solvers, inversion and editing studies"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, clap::Args)]
struct Args {
    /// `key = value` file supplying defaults for any flag
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    options: Options,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate from noise (t=1) to data (t=0)
    Sample(Args),
    /// Integrate from data (t=0) to noise (t=1)
    Invert(Args),
    /// Invert then denoise; report per-timestep and terminal MSE
    Roundtrip(Args),
    /// Fit an MLP velocity field to a toy distribution
    Train(Args),
    /// Inversion/reconstruction error curves for several orders
    Fig2(Args),
    /// Global error against the exact flow over several grid sizes
    Converge(Args),
    /// Reconstruction error per order under a fixed evaluation budget
    NfeAblation(Args),
    /// Sweep the number of feature-sharing steps of an edit
    EditStudy(Args),
}

impl Command {
    fn parts(&self) -> (&'static str, &Args) {
        match self {
            Command::Sample(a) => ("sample", a),
            Command::Invert(a) => ("invert", a),
            Command::Roundtrip(a) => ("roundtrip", a),
            Command::Train(a) => ("train", a),
            Command::Fig2(a) => ("fig2", a),
            Command::Converge(a) => ("converge", a),
            Command::NfeAblation(a) => ("nfe-ablation", a),
            Command::EditStudy(a) => ("edit-study", a),
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = cli.command.parts();
    match run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(name: &str, args: &Args) -> Result<(), Failure> {
    let opts = match &args.config {
        Some(path) => {
            let file = load_config(path).map_err(Failure::Usage)?;
            if let Some(cmd) = &file.command {
                if cmd != name {
                    return Err(Failure::Usage(format!(
                        "{} is for command `{cmd}`, not `{name}`",
                        path.display()
                    )));
                }
            }
            file.options.overlay(args.options.clone())
        }
        None => args.options.clone(),
    };
    let run = match name {
        "sample" => solve,
        "invert" => solve,
        "roundtrip" => roundtrip,
        "train" => train_mlp,
        "fig2" => fig2,
        "converge" => converge,
        "nfe-ablation" => nfe_ablation,
        _ => edit_study,
    };
    run(name, &opts)
}

struct Common {
    field: Field,
    field_name: String,
    n: usize,
    order: usize,
    delta_t: f64,
    out: PathBuf,
}

impl Common {
    fn new(opts: &Options) -> Result<Self, Failure> {
        Ok(Self {
            field: build_field(opts)?,
            field_name: field_name(opts)?.to_string(),
            n: opts.n.unwrap_or(DEFAULT_N),
            order: opts.order.unwrap_or(DEFAULT_ORDER),
            delta_t: opts.delta_t.unwrap_or(rfsolve::solver::DEFAULT_DELTA_T),
            out: out_dir(opts)?,
        })
    }

    fn metadata(&self, command: &str, opts: &Options) -> Metadata {
        vec![
            ("command".into(), command.into()),
            ("field".into(), self.field_name.clone()),
            ("n".into(), self.n.to_string()),
            ("order".into(), self.order.to_string()),
            ("delta_t".into(), format_f64(self.delta_t)),
            ("seed".into(), opts.seed.unwrap_or(DEFAULT_SEED).to_string()),
        ]
    }

    fn path(&self, command: &str, order: &str, n: &str, ext: &str) -> PathBuf {
        self.out
            .join(format!("{command}-{}-{order}-{n}.{ext}", self.field_name))
    }
}

fn report(path: &Path) {
    println!("wrote {}", path.display());
}

fn jobs_pool(opts: &Options) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(1).max(1))
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start worker pool: {e}")))
}

fn solve(command: &str, opts: &Options) -> Result<(), Failure> {
    let c = Common::new(opts)?;
    let direction = if command == "invert" {
        Direction::Invert
    } else {
        Direction::Denoise
    };
    let grid = TimeGrid::uniform(c.n)?;
    let config = SolverConfig::new(c.order, c.delta_t, direction)?;
    let z = start_state(opts, &c.field, direction == Direction::Invert)?;
    let cond = condition(opts.condition);
    let out = rfsolve::solver::run_trajectory(c.field.as_dyn(), &z, &grid, &config, cond, true)?;
    let record = out.record.expect("recorded");

    let mut meta = c.metadata(command, opts);
    meta.push(("nfe".into(), out.nfe.to_string()));
    meta.push(("shape".into(), format!("{:?}", z.shape())));
    let rows: Vec<_> = (0..=c.n)
        .map(|i| {
            (
                format!("t={}", format_f64(grid.t(i))),
                record.state_at(i).data().to_vec(),
            )
        })
        .collect();
    let (order, n) = (c.order.to_string(), c.n.to_string());
    let csv = c.path(command, &order, &n, "csv");
    write_csv_with_metadata(&meta, &rows, &csv)?;
    let tensor = c.path(command, &order, &n, "rft");
    write_tensor(&out.final_state, &tensor)?;
    report(&csv);
    report(&tensor);
    Ok(())
}

fn roundtrip(command: &str, opts: &Options) -> Result<(), Failure> {
    let c = Common::new(opts)?;
    let grid = TimeGrid::uniform(c.n)?;
    let z0 = start_state(opts, &c.field, true)?;
    let rt = harness::roundtrip(
        c.field.as_dyn(),
        &z0,
        &grid,
        c.order,
        c.delta_t,
        condition(opts.condition),
    )?;
    let terminal = rfsolve::tensorio::mse(&z0, &rt.reconstruction);

    let mut meta = c.metadata(command, opts);
    meta.push(("nfe".into(), rt.nfe.to_string()));
    meta.push(("terminal_mse".into(), format_f64(terminal)));
    let rows = vec![
        ("t".to_string(), (0..=c.n).map(|i| grid.t(i)).collect()),
        ("mse".to_string(), rt.per_timestep_mse()),
    ];
    let csv = c.path(command, &c.order.to_string(), &c.n.to_string(), "csv");
    write_csv_with_metadata(&meta, &rows, &csv)?;
    println!("terminal_mse {}", format_f64(terminal));
    report(&csv);
    Ok(())
}

fn train_mlp(command: &str, opts: &Options) -> Result<(), Failure> {
    let dist_name = opts.dist.as_deref().unwrap_or("mixture");
    let dist = distribution(dist_name)?;
    let hidden = opts.hidden.clone().map_or_else(|| vec![64, 64, 64], |l| l.0);
    let init = MlpField::new(dist.dim(), &hidden, opts.field_seed.unwrap_or(0))?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        batch_size: opts.batch_size.unwrap_or(defaults.batch_size),
        steps: opts.train_steps.unwrap_or(defaults.steps),
        learning_rate: opts.lr.unwrap_or(defaults.learning_rate),
        seed: opts.seed.unwrap_or(DEFAULT_SEED),
        optimizer: setup::optimizer(opts)?,
    };
    let outcome = train::train(init, &dist, &config)?;

    let out = out_dir(opts)?;
    let stem = format!("{command}-mlp-{dist_name}-{}", config.steps);
    let params = out.join(&stem);
    outcome.field.save(&params)?;
    let meta: Metadata = vec![
        ("command".into(), command.into()),
        ("dist".into(), dist_name.into()),
        ("hidden".into(), join_list(&hidden)),
        ("batch_size".into(), config.batch_size.to_string()),
        ("steps".into(), config.steps.to_string()),
        ("lr".into(), format_f64(config.learning_rate)),
        (
            "optimizer".into(),
            opts.optimizer.clone().unwrap_or_else(|| "adam".into()),
        ),
        ("seed".into(), config.seed.to_string()),
        ("field_seed".into(), opts.field_seed.unwrap_or(0).to_string()),
    ];
    let csv = out.join(format!("{stem}.csv"));
    write_csv_with_metadata(&meta, &[("loss".to_string(), outcome.losses.clone())], &csv)?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!("loss {} -> {}", format_f64(*first), format_f64(*last));
    }
    report(&csv);
    report(&params);
    Ok(())
}

fn orders(opts: &Options, default: &[usize]) -> Vec<usize> {
    opts.orders.clone().map_or_else(|| default.to_vec(), |l| l.0)
}

fn fig2(command: &str, opts: &Options) -> Result<(), Failure> {
    let c = Common::new(opts)?;
    let orders = orders(opts, &[1, 2]);
    let matched = opts.nfe_matched.unwrap_or(true);
    let z0 = start_state(opts, &c.field, true)?;
    let curves = harness::fig2_study(
        c.field.as_dyn(),
        &z0,
        c.n,
        &orders,
        condition(opts.condition),
        c.delta_t,
        matched,
    )?;
    let mut meta = c.metadata(command, opts);
    meta.push(("orders".into(), join_list(&orders)));
    meta.push(("nfe_matched".into(), matched.to_string()));
    let csv = c.path(command, &join_list(&orders), &c.n.to_string(), "csv");
    harness::write_curves_csv(&curves, meta, &csv)?;
    report(&csv);
    Ok(())
}

fn converge(command: &str, opts: &Options) -> Result<(), Failure> {
    let c = Common::new(opts)?;
    let Field::Analytic(field) = &c.field else {
        return Err(Failure::Usage(format!(
            "converge needs an analytic field, got `{}`",
            c.field_name
        )));
    };
    let steps = opts
        .steps
        .clone()
        .ok_or_else(|| Failure::Usage("missing required flag --steps".into()))?
        .0;
    let direction = match opts.direction.as_deref().unwrap_or("denoise") {
        "denoise" => Direction::Denoise,
        "invert" => Direction::Invert,
        other => return Err(Failure::Usage(format!("unknown direction `{other}`"))),
    };
    let z0 = start_state(opts, &c.field, false)?;
    let report_ = harness::convergence_study(field, &z0, direction, c.order, c.delta_t, &steps)?;
    let mut meta = c.metadata(command, opts);
    meta.retain(|(k, _)| k != "n" && k != "field" && k != "order");
    let csv = c.path(command, &c.order.to_string(), &join_list(&steps), "csv");
    harness::write_convergence_csv(&report_, meta, &csv)?;
    match report_.slope {
        Some(s) => println!("slope {}", format_f64(s)),
        None => println!("slope exact"),
    }
    report(&csv);
    Ok(())
}

fn nfe_ablation(command: &str, opts: &Options) -> Result<(), Failure> {
    let c = Common::new(opts)?;
    let orders = orders(opts, &[1, 2, 3]);
    let total = opts.total_nfe.unwrap_or(120);
    let z0 = start_state(opts, &c.field, true)?;
    let cond = condition(opts.condition);
    let pool = jobs_pool(opts)?;
    let rows = pool.install(|| {
        orders
            .par_iter()
            .map(|&o| harness::nfe_ablation(c.field.as_dyn(), &z0, total, &[o], cond, c.delta_t))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let rows: Vec<_> = rows.into_iter().flatten().collect();
    let mut meta = c.metadata(command, opts);
    meta.retain(|(k, _)| k != "n" && k != "order");
    meta.push(("total_nfe".into(), total.to_string()));
    let csv = c.path(command, &join_list(&orders), &total.to_string(), "csv");
    harness::write_ablation_csv(&rows, meta, &csv)?;
    report(&csv);
    Ok(())
}

fn edit_study(command: &str, opts: &Options) -> Result<(), Failure> {
    let c = Common::new(opts)?;
    let Field::Attention(field) = &c.field else {
        return Err(Failure::Usage(format!(
            "edit-study needs the attention field, got `{}`",
            c.field_name
        )));
    };
    let grid = TimeGrid::uniform(c.n)?;
    let config = SolverConfig::new(c.order, c.delta_t, Direction::Denoise)?;
    let source = rfsolve::ConditionId(opts.source.unwrap_or(0));
    let target = rfsolve::ConditionId(opts.target.unwrap_or(1));
    let m_share = opts.m_share.unwrap_or(field.num_blocks());
    let sweep = opts.n_share.clone().map_or_else(|| (0..=c.n).collect(), |l| l.0);
    let z0 = start_state(opts, &c.field, true)?;
    let pool = jobs_pool(opts)?;
    let rows = pool.install(|| {
        sweep
            .par_iter()
            .map(|&n| harness::edit_study(field, &z0, &grid, &config, source, target, m_share, &[n]))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let rows: Vec<_> = rows.into_iter().flatten().collect();
    let mut meta = c.metadata(command, opts);
    meta.push(("source".into(), source.0.to_string()));
    meta.push(("target".into(), target.0.to_string()));
    meta.push(("m_share".into(), m_share.to_string()));
    meta.push(("field_seed".into(), opts.field_seed.unwrap_or(0).to_string()));
    let csv = c.path(command, &c.order.to_string(), &c.n.to_string(), "csv");
    harness::write_edit_csv(&rows, meta, &csv)?;
    report(&csv);
    Ok(())
}
