//! Experiment driver: data, configuration, the grow/train loop, run logs
//! and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod log;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::growth::{self, grow_step, learning_batch_size, site, GrowthError, ProposalConfig, StepConfig};
use crate::net::{argmax_columns, Layer, Loss, NetError, Network, Shape};
use crate::numerics::DEFAULT_RCOND;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::{ExperimentConfig, Grower};
pub use data::{DataError, DataSpec, Dataset, Split, Task};
pub use log::{read_log, write_log, Event, LogError, RunLogRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Growth(#[from] GrowthError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, HarnessError::Growth(g) if g.is_numerical())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Mean loss and accuracy (NaN for regression or an empty set).
pub fn evaluate(net: &Network, data: &Dataset, loss: Loss) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let l = net.loss(&data.x, &data.y, loss)?;
    let acc = match &data.labels {
        Some(labels) => {
            let pred = argmax_columns(&net.forward(&data.x)?.to_flat());
            pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
        }
        None => f64::NAN,
    };
    Ok((l, acc))
}

/// Widths of the layers feeding each growable position.
pub fn growable_widths(net: &Network, positions: &[usize]) -> Vec<usize> {
    positions
        .iter()
        .map(|&p| match &net.layers()[p] {
            Layer::Dense(d) => d.out_dim(),
            Layer::Conv2d(c) => c.out_ch,
            _ => 0,
        })
        .collect()
}

/// Estimation batch size for a site from its kernel, width and pixel count.
pub fn site_estimation_size(net: &Network, layer: usize, coeff: f64, dataset: usize) -> Result<usize> {
    let s = site(net, layer)?;
    let width = growable_widths(net, &[layer])[0];
    Ok(match s.conv {
        Some(g) => {
            let pixels = match net.layer_input_shape(s.second) {
                Shape::Image { h, w, .. } => h * w,
                Shape::Flat(_) => 1,
            };
            growth::estimation_batch_size(coeff, g.k2, width, pixels, true, dataset)
        }
        None => growth::estimation_batch_size(coeff, 1, width, 1, false, dataset),
    })
}

pub struct ExperimentOutcome {
    pub records: Vec<RunLogRecord>,
    pub net: Network,
    pub additions: usize,
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

struct Driver<'a> {
    cfg: &'a ExperimentConfig,
    split: Split,
    records: Vec<RunLogRecord>,
    wall_step: u64,
    epoch: u64,
}

impl Driver<'_> {
    fn record(&mut self, net: &Network, event: growth_event::Info) -> Result<()> {
        let (train_loss, train_acc) = evaluate(net, &self.split.train, self.cfg.loss)?;
        let (test_loss, test_acc) = evaluate(net, &self.split.test, self.cfg.loss)?;
        self.records.push(RunLogRecord {
            run_id: self.cfg.run_id.clone(),
            wall_step: self.wall_step,
            epoch: self.epoch,
            event: event.event,
            layer: event.layer,
            neurons_added: event.added,
            gamma: event.gamma,
            params: net.param_count(),
            macs: net.macs_count(),
            train_loss,
            train_acc,
            test_loss,
            test_acc,
            psi_per_growable: event.psi,
            lambda_sum_sq: event.lambda_sum_sq,
        });
        self.wall_step += 1;
        Ok(())
    }

    fn train_epoch(&mut self, net: &mut Network, batch: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let n = self.split.train.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        for chunk in idx.chunks(batch.max(1)) {
            let b = self.split.train.select(chunk);
            net.sgd_step(&b.x, &b.y, self.cfg.lr, self.cfg.loss)?;
        }
        self.epoch += 1;
        Ok(())
    }
}

mod growth_event {
    use super::Event;

    pub struct Info {
        pub event: Event,
        pub layer: Option<usize>,
        pub added: usize,
        pub gamma: f64,
        pub psi: Vec<f64>,
        pub lambda_sum_sq: f64,
    }

    impl Info {
        pub fn train() -> Self {
            Info { event: Event::Train, layer: None, added: 0, gamma: f64::NAN, psi: Vec::new(), lambda_sum_sq: f64::NAN }
        }
    }
}

/// Build the initial network for `cfg` on data of the given shape.
pub fn initial_network(cfg: &ExperimentConfig, input: Shape, out: usize) -> Result<Network> {
    let d = match input {
        Shape::Flat(d) => d,
        Shape::Image { .. } => input.numel(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = Network::mlp(d, &cfg.hidden, out, cfg.activation, &mut rng)?;
    if let Shape::Image { .. } = input {
        let mut layers = vec![Layer::Flatten];
        layers.extend(net.layers().iter().cloned());
        return Ok(Network::new(input, layers)?);
    }
    Ok(net)
}

/// The grow/train loop. For each growth event: pick the next growable layer
/// below its target width (shallow to deep, round robin), propose on an
/// estimation batch, line-search and apply on a disjoint amplitude batch
/// (the whole training set when it is too small to split), then train for
/// `delta_t` epochs with the square-root batch-size schedule.
pub fn run_growth_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let split = data::load(&cfg.data, cfg.seed)?;
    if split.train.is_empty() {
        return Err(HarnessError::Config("training set is empty".into()));
    }
    let mut net = initial_network(cfg, split.train.input_shape(), split.train.output_dim())?;
    let positions = net.growable_positions();
    let mut drv = Driver { cfg, split, records: Vec::new(), wall_step: 0, epoch: 0 };
    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut batch = cfg.schedule.initial_batch;
    let mut additions = 0;
    drv.record(&net, growth_event::Info::train())?;

    let result = (|| -> Result<()> {
        for event in 0..cfg.schedule.max_additions {
            if let Some(stop) = cfg.stop_loss {
                if net.loss(&drv.split.train.x, &drv.split.train.y, cfg.loss)? < stop {
                    break;
                }
            }
            let widths = growable_widths(&net, &positions);
            let Some(layer) = cfg.schedule.next_site(&positions, &widths, event) else { break };
            let j = positions.iter().position(|&p| p == layer).expect("site from positions");
            let mut k = *cfg.neurons_per_depth.get(j).or(cfg.neurons_per_depth.last()).expect("validated nonempty");
            if let Some(&t) = cfg.schedule.target_widths.get(j) {
                k = k.min(t - widths[j]);
            }

            let n = drv.split.train.len();
            let n_est = site_estimation_size(&net, layer, cfg.schedule.estimation_coeff, n)?;
            let n_amp = cfg.amplitude_batch.min(n);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut batch_rng);
            let est = drv.split.train.select(&idx[..n_est]);
            let amp = if n_est + n_amp <= n { drv.split.train.select(&idx[n_est..n_est + n_amp]) } else { drv.split.train.clone() };

            let step_cfg = StepConfig {
                method: cfg.grower.method(),
                completed: cfg.grower == Grower::CompletedTiny,
                proposal: ProposalConfig { max_neurons: Some(k), ..Default::default() },
                normalization: cfg.normalization,
                amplitude: cfg.amplitude,
                amplitude_search: cfg.amplitude_search,
                best_update: cfg.best_update,
                refit: cfg.refit,
                random_dist: cfg.random_distribution,
                ..StepConfig::default()
            };
            let psi = positions
                .iter()
                .map(|&p| growth::site_psi(&net, &est.x, &est.y, cfg.loss, p, DEFAULT_RCOND))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let params_before = net.param_count();
            let step_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(event as u64);
            let out = grow_step(&net, layer, (&est.x, &est.y), (&amp.x, &amp.y), cfg.loss, &step_cfg, step_seed)?;
            net = out.net;
            additions += 1;
            drv.record(
                &net,
                growth_event::Info {
                    event: Event::Grow,
                    layer: Some(layer),
                    added: out.added,
                    gamma: out.gamma,
                    psi,
                    lambda_sum_sq: out.lambda_sum_sq,
                },
            )?;
            batch = learning_batch_size(batch, params_before as f64, net.param_count() as f64);
            for _ in 0..cfg.schedule.epochs_between {
                drv.train_epoch(&mut net, batch, &mut train_rng)?;
                drv.record(&net, growth_event::Info::train())?;
            }
        }
        for _ in 0..cfg.final_epochs {
            drv.train_epoch(&mut net, batch, &mut train_rng)?;
            drv.record(&net, growth_event::Info::train())?;
        }
        Ok(())
    })();

    // the log is flushed even when the loop aborts
    let mut log_path = None;
    let mut checkpoint_path = None;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.clone(), source })?;
        let lp = dir.join(format!("{}.csv", cfg.run_id));
        let file = std::fs::File::create(&lp).map_err(|source| HarnessError::Io { path: lp.clone(), source })?;
        write_log(file, &drv.records)?;
        log_path = Some(lp);
        if result.is_ok() {
            let cp = dir.join(format!("{}.ckpt", cfg.run_id));
            save_checkpoint(&net, &cp)?;
            checkpoint_path = Some(cp);
        }
    }
    result?;
    Ok(ExperimentOutcome { records: drv.records, net, additions, log_path, checkpoint_path })
}

/// Worker count from `GROW_WORKERS`, defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var("GROW_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run independent experiments on up to `workers` threads. Results keep the
/// order of `cfgs`.
pub fn run_many(cfgs: &[ExperimentConfig], workers: usize) -> Vec<Result<ExperimentOutcome>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ExperimentOutcome>>>> = cfgs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(cfgs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cfgs.len() {
                    break;
                }
                let r = run_growth_experiment(&cfgs[i]);
                *slots[i].lock().expect("no poisoned slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("no poisoned slot").expect("every slot filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!("[data]\nspec = \"regression:n=8,test=0\"\n[model]\nhidden = [2]\n{extra}")).unwrap()
    }

    #[test]
    fn target_width_equal_to_initial_means_no_growth() {
        let c = cfg("[growth]\ntarget_widths = [2]\nmax_additions = 5\n[train]\nfinal_epochs = 3\n");
        let out = run_growth_experiment(&c).unwrap();
        assert_eq!(out.additions, 0);
        assert!(out.records.iter().all(|r| r.event == Event::Train));
        assert_eq!(out.records.len(), 4);
    }

    #[test]
    fn params_never_decrease_across_growth() {
        let c = cfg("[growth]\nmax_additions = 4\n");
        let out = run_growth_experiment(&c).unwrap();
        let grows: Vec<_> = out.records.iter().filter(|r| r.event == Event::Grow).collect();
        assert_eq!(grows.len(), 4);
        assert!(grows.windows(2).all(|w| w[0].params <= w[1].params));
    }

    #[test]
    fn run_many_matches_sequential() {
        let cs = vec![cfg("[run]\nseed = 1\n"), cfg("[run]\nseed = 2\n")];
        let par = run_many(&cs, 2);
        let csv = |recs: &[RunLogRecord]| {
            let mut buf = Vec::new();
            write_log(&mut buf, recs).unwrap();
            buf
        };
        for (c, r) in cs.iter().zip(par) {
            assert_eq!(csv(&r.unwrap().records), csv(&run_growth_experiment(c).unwrap().records));
        }
    }
}
