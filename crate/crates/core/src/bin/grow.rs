//! `grow`: run growth experiments, verify the library, inspect checkpoints.
//!
//! Exit codes: 0 ok, 1 usage, 2 data, 3 numerical failure, 4 verification
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use neurogrow::growth::{self, GrowthError, GrowthProposal, Method, ProposalConfig};
use neurogrow::harness::{self, DataSpec, ExperimentConfig, HarnessError, Task};
use neurogrow::net::{Layer, Loss, Network};
use neurogrow::numerics::DEFAULT_RCOND;
use neurogrow::verify::{self, Fault};

#[derive(Parser)]
#[command(name = "grow", version, about = "Grow neural networks where their expressivity is lacking")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one or more growth experiments (parallel over GROW_WORKERS).
    Run {
        /// TOML experiment file; repeat for several runs.
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        /// Override the seed of every run.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory (log CSV and final checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant and oracle suite.
    Verify {
        /// Only checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV report here instead of after the text report.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a checkpoint's layers, and per-site bottleneck statistics on data.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset spec, e.g. `blobs:n=500,classes=2`.
        #[arg(long)]
        data: Option<String>,
        /// Defaults to cross-entropy for classification, square otherwise.
        #[arg(long)]
        loss: Option<String>,
        /// How many eigenvalues to show per site.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Compute the neurons one method would add at one site.
    Propose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: String,
        /// Index of the first layer of the site.
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::Tiny)]
        method: MethodArg,
        /// Neuron budget (default: all TINY finds, 1 for the baselines).
        #[arg(long)]
        max: Option<usize>,
        #[arg(long)]
        loss: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Tiny,
    Gradmax,
    Random,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let code = match &e {
            HarnessError::Config(_) => 1,
            _ if e.is_numerical() => 3,
            HarnessError::Growth(g) => growth_code(g),
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn growth_code(e: &GrowthError) -> u8 {
    match e {
        _ if e.is_numerical() => 3,
        GrowthError::NotGrowable(_) | GrowthError::Domain(_) => 1,
        _ => 2,
    }
}

impl From<GrowthError> for Failure {
    fn from(e: GrowthError) -> Self {
        Failure { code: growth_code(&e), msg: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.cmd {
        Cmd::Run { config, seed, out } => run(&config, seed, out),
        Cmd::Verify { filter, seed, csv } => run_verify(filter.as_deref(), seed, csv),
        Cmd::Inspect { checkpoint, data, loss, top } => inspect(&checkpoint, data.as_deref(), loss.as_deref(), top),
        Cmd::Propose { checkpoint, data, layer, method, max, loss, seed } => {
            propose(&checkpoint, &data, layer, method, max, loss.as_deref(), seed)
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(paths: &[PathBuf], seed: Option<u64>, out: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfgs = Vec::with_capacity(paths.len());
    for p in paths {
        let mut cfg = ExperimentConfig::from_path(p)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if out.is_some() {
            cfg.out_dir.clone_from(&out);
        }
        cfgs.push(cfg);
    }
    let mut first_err = None;
    for (cfg, res) in cfgs.iter().zip(harness::run_many(&cfgs, harness::worker_count())) {
        match res {
            Ok(o) => {
                let last = o.records.last().expect("every run logs its start");
                println!(
                    "{}: {} additions, {} params, train loss {:.6e}, test loss {:.6e}, test acc {:.4}",
                    cfg.run_id, o.additions, last.params, last.train_loss, last.test_loss, last.test_acc
                );
                if let Some(p) = &o.log_path {
                    println!("  log {}", p.display());
                }
                if let Some(p) = &o.checkpoint_path {
                    println!("  checkpoint {}", p.display());
                }
            }
            Err(e) => {
                eprintln!("{}: {e}", cfg.run_id);
                first_err.get_or_insert(Failure::from(e));
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn run_verify(filter: Option<&str>, seed: u64, csv: Option<PathBuf>) -> Result<(), Failure> {
    let report = verify::run_invariant_suite(seed, filter, Fault::None);
    if report.checks.is_empty() {
        return Err(Failure::usage(format!("no check matches {:?}", filter.unwrap_or(""))));
    }
    print!("{}", report.to_text());
    match csv {
        Some(p) => std::fs::write(&p, report.to_csv())
            .map_err(|e| Failure { code: 2, msg: format!("cannot write {}: {e}", p.display()) })?,
        None => print!("\n{}", report.to_csv()),
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure { code: 4, msg: format!("{} of {} checks failed", report.failed(), report.checks.len()) })
    }
}

fn load_net(path: &PathBuf) -> Result<Network, Failure> {
    harness::load_checkpoint(path).map_err(|e| Failure { code: 2, msg: format!("{}: {e}", path.display()) })
}

/// Full dataset of `spec` (train and test together), with its natural loss.
fn load_data(spec: &str, loss: Option<&str>) -> Result<(harness::Dataset, Loss), Failure> {
    let spec = DataSpec::parse(spec).map_err(|e| Failure { code: 2, msg: e.to_string() })?;
    let split = harness::data::load(&spec, 0).map_err(|e| Failure { code: 2, msg: e.to_string() })?;
    let loss = match loss {
        Some(s) => Loss::parse(s).ok_or_else(|| Failure::usage(format!("unknown loss {s:?}")))?,
        None => match split.train.task {
            Task::Classification { .. } => Loss::CrossEntropy,
            Task::Regression => Loss::Square,
        },
    };
    Ok((split.train, loss))
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join(", ")
}

fn inspect(path: &PathBuf, data: Option<&str>, loss: Option<&str>, top: usize) -> Result<(), Failure> {
    let net = load_net(path)?;
    println!("input {:?}, {} params, {} MACs", net.input_shape(), net.param_count(), net.macs_count());
    let growable = net.growable_positions();
    for ((i, layer), shape) in net.layers().iter().enumerate().zip(net.output_shapes()) {
        let mark = if growable.contains(&i) { "  (growable)" } else { "" };
        let what = match layer {
            Layer::Activation(a) => format!("activation {}", a.name()),
            other => other.kind().to_string(),
        };
        println!("  [{i}] {what} -> {shape:?}{mark}");
    }
    let Some(spec) = data else { return Ok(()) };
    let (d, loss) = load_data(spec, loss)?;
    println!("loss {:.6e} on {} samples", net.loss(&d.x, &d.y, loss).map_err(|e| Failure { code: 2, msg: e.to_string() })?, d.len());
    for &p in &growable {
        let prop = growth::propose_tiny(&net, &d.x, &d.y, loss, p, &ProposalConfig::default())?;
        let lambdas: Vec<f64> = prop.lambdas().iter().take(top).copied().collect();
        println!("  site {p}: psi {:.6e}, {} neurons, top lambda [{}]", prop.psi_before, prop.lambdas().len(), fmt_list(&lambdas));
    }
    Ok(())
}

fn propose(
    path: &PathBuf,
    data: &str,
    layer: usize,
    method: MethodArg,
    max: Option<usize>,
    loss: Option<&str>,
    seed: u64,
) -> Result<(), Failure> {
    let net = load_net(path)?;
    let (d, loss) = load_data(data, loss)?;
    let cfg = ProposalConfig { max_neurons: max, rcond: DEFAULT_RCOND, ..Default::default() };
    let prop: GrowthProposal = match method {
        MethodArg::Tiny => growth::propose_tiny(&net, &d.x, &d.y, loss, layer, &cfg)?,
        MethodArg::Gradmax => growth::propose_gradmax(&net, &d.x, &d.y, loss, layer, &cfg)?,
        MethodArg::Random => growth::propose_random(&net, layer, max.unwrap_or(1), growth::Distribution::Gaussian, seed)?,
    };
    let name = match prop.method {
        Method::Tiny => "tiny",
        Method::GradMax => "gradmax",
        Method::Random => "random",
    };
    println!("{name} at layer {layer}: {} neurons, psi {:.6e}", prop.alpha().ncols(), prop.psi_before);
    println!("  alpha {}x{}, omega {}x{}", prop.alpha().nrows(), prop.alpha().ncols(), prop.omega().nrows(), prop.omega().ncols());
    if !prop.lambdas().is_empty() {
        println!("  lambda [{}]", fmt_list(prop.lambdas()));
    }
    println!("  first-order gain: neurons {:.6e}, best update {:.6e}", prop.gains.delta_theta, prop.gains.delta_dw);
    Ok(())
}
