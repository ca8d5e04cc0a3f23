//! End-to-end checks: growth runs, the overfit construction, schedules and
//! file formats.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::growth::{
    estimation_batch_size_raw, grow_step, learning_batch_size, overfit_construct, Method, NormalizationMode, OverfitOptions,
    StepConfig,
};
use crate::harness::checkpoint::{decode, encode};
use crate::harness::data::{gen_synthetic_regression, Target};
use crate::harness::{read_log, run_growth_experiment, write_log, Event, ExperimentConfig, Grower, RunLogRecord};
use crate::net::{random_conv, random_dense, Activation, Layer, Loss, Network, Shape, Tensor4, Value};

use super::algebra::gaussian;
use super::{tol, CheckResult, Ctx};

/// Step settings for the 4-point regression: completed TINY, amplitudes
/// scored after refitting the output layer, raw neuron scale.
pub fn greedy_step_config() -> StepConfig {
    StepConfig {
        completed: true,
        refit: true,
        normalization: NormalizationMode::Unscaled,
        ..StepConfig::for_method(Method::Tiny)
    }
}

/// Trace of one greedy run: loss after every addition.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyTrace {
    pub losses: Vec<f64>,
    pub additions: usize,
    pub max_increase: f64,
}

/// Grow a `1 -> 1 -> 1` selu network on `2 sin(x) + x` at four grid points
/// until the train MSE drops below the tolerance or 20 additions are spent.
pub fn greedy_regression_run(seed: u64) -> Result<GreedyTrace, String> {
    let d = gen_synthetic_regression(4, true, Target::TwoSinPlusX, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::mlp(1, &[1], 1, Activation::Selu, &mut rng).map_err(|e| e.to_string())?;
    let cfg = greedy_step_config();
    let mut losses = vec![net.loss(&d.x, &d.y, Loss::Square).map_err(|e| e.to_string())?];
    let mut max_increase = f64::NEG_INFINITY;
    let mut additions = 0;
    while additions < tol::GREEDY_MAX_ADDITIONS && *losses.last().expect("nonempty") >= tol::GREEDY_MSE {
        let out = grow_step(&net, 0, (&d.x, &d.y), (&d.x, &d.y), Loss::Square, &cfg, seed.wrapping_add(additions as u64))
            .map_err(|e| e.to_string())?;
        max_increase = max_increase.max(out.loss_after - out.loss_before);
        net = out.net;
        losses.push(out.loss_after);
        additions += 1;
    }
    Ok(GreedyTrace { losses, additions, max_increase })
}

pub fn greedy_regression(ctx: &Ctx) -> CheckResult {
    let start = Instant::now();
    let (mut final_loss, mut increase, mut adds) = (0.0f64, f64::NEG_INFINITY, 0usize);
    for i in 0..3 {
        match greedy_regression_run(ctx.seed.wrapping_add(i)) {
            Ok(t) => {
                final_loss = final_loss.max(*t.losses.last().expect("nonempty"));
                increase = increase.max(t.max_increase);
                adds = adds.max(t.additions);
            }
            Err(e) => return CheckResult::error(e),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    CheckResult::all(vec![
        CheckResult::at_most(secs, tol::GREEDY_SECONDS, format!("{secs:.2} s")),
        CheckResult::at_most(increase, 0.0, format!("largest loss change at an addition {increase:.2e}")),
        CheckResult::at_most(adds as f64, tol::GREEDY_MAX_ADDITIONS as f64, format!("at most {adds} additions")),
        CheckResult::at_most(final_loss, tol::GREEDY_MSE, format!("worst final MSE {final_loss:.2e} over 3 starts")),
    ])
}

pub fn overfit_construction(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(40);
    let (mut worst, mut wrong_count) = (0.0f64, 0usize);
    for t in 0..20u64 {
        let n = rng.random_range(1..=64);
        let x = gaussian(&mut rng, 2, n);
        let outs = rng.random_range(1..=2);
        let y = gaussian(&mut rng, outs, n);
        let opts = OverfitOptions { seed: ctx.seed.wrapping_add(t), ..Default::default() };
        match overfit_construct(&x, &y, &opts) {
            Ok(tr) => {
                wrong_count += usize::from(tr.losses.len() != n);
                worst = worst.max(tr.losses.last().copied().unwrap_or(f64::INFINITY));
            }
            Err(e) => return CheckResult::error(e),
        }
    }
    CheckResult::all(vec![
        CheckResult::at_most(wrong_count as f64, 0.0, format!("{wrong_count} runs without exactly n additions")),
        CheckResult::at_most(worst, tol::OVERFIT_LOSS, format!("worst final loss {worst:.2e}, 20 datasets")),
    ])
}

/// The blobs desk run for `grower`.
pub fn desk_config(grower: Grower, seed: u64) -> ExperimentConfig {
    let norm = match grower {
        Grower::GradMax => "gradmax_sqrt",
        Grower::Random => "unit_then_gamma",
        Grower::Tiny | Grower::CompletedTiny => "tiny_sqrt",
    };
    let text = format!(
        "[run]\nid = \"desk-{}\"\nseed = {seed}\n\
         [data]\nspec = \"blobs:n=1250,classes=2,seed=3\"\n\
         [model]\nhidden = [1, 1]\nactivation = \"selu\"\nloss = \"cross_entropy\"\n\
         [growth]\ngrower = \"{}\"\nnormalization = \"{norm}\"\nmax_additions = 10\ntarget_widths = [4, 4]\n\
         [train]\nlr = 0.1\nfinal_epochs = 5\n",
        grower.name(),
        grower.name()
    );
    ExperimentConfig::from_toml(&text).expect("desk config is valid")
}

fn csv_bytes(records: &[RunLogRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_log(&mut buf, records).expect("in-memory log");
    buf
}

pub fn classification_desk_run(ctx: &Ctx) -> CheckResult {
    let start = Instant::now();
    let main = match run_growth_experiment(&desk_config(Grower::CompletedTiny, ctx.seed)) {
        Ok(o) => o,
        Err(e) => return CheckResult::error(e),
    };
    let secs = start.elapsed().as_secs_f64();
    let acc = main.records.last().map_or(f64::NAN, |r| r.test_acc);
    let mut bad_logs = 0usize;
    for g in [Grower::CompletedTiny, Grower::GradMax, Grower::Random] {
        let recs = if g == Grower::CompletedTiny {
            main.records.clone()
        } else {
            match run_growth_experiment(&desk_config(g, ctx.seed)) {
                Ok(o) => o.records,
                Err(e) => return CheckResult::error(format!("{}: {e}", g.name())),
            }
        };
        let ok = read_log(csv_bytes(&recs).as_slice()).is_ok_and(|back| back.len() == recs.len())
            && recs.iter().any(|r| r.event == Event::Grow);
        bad_logs += usize::from(!ok);
    }
    CheckResult::all(vec![
        CheckResult::at_most(bad_logs as f64, 0.0, format!("{bad_logs} growers without a parseable log")),
        CheckResult::at_most(secs, tol::DESK_SECONDS, format!("{secs:.2} s")),
        CheckResult::at_least(acc, tol::DESK_ACCURACY, format!("completed-TINY test accuracy {acc:.4}")),
    ])
}

fn small_run_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig::from_toml(&format!(
        "[run]\nseed = {seed}\n[data]\nspec = \"regression:n=16,grid=false,seed=2\"\n[model]\nhidden = [2]\n[growth]\nmax_additions = 3\n"
    ))
    .expect("valid config")
}

pub fn schedules_and_formats(ctx: &Ctx) -> CheckResult {
    let mut failures = Vec::new();
    let lb = learning_batch_size(32, 1000.0, 4000.0);
    if lb != 64 {
        failures.push(format!("learning batch {lb} != 64"));
    }
    let eb = estimation_batch_size_raw(1.0, 9, 16, 1024, true);
    if eb != 41 {
        failures.push(format!("estimation batch {eb} != 41"));
    }
    let mut rng = ctx.rng(41);
    let net = Network::new(
        Shape::Image { c: 1, h: 6, w: 6 },
        vec![
            Layer::Conv2d(random_conv(2, 1, 3, 1, &mut rng)),
            Layer::Activation(Activation::Relu),
            Layer::Conv2d(random_conv(2, 2, 3, 1, &mut rng)),
            Layer::Activation(Activation::Selu),
            Layer::AvgPool2d(2),
            Layer::Flatten,
            Layer::Dense(random_dense(3, 18, &mut rng)),
            Layer::Activation(Activation::Softmax),
        ],
    )
    .expect("valid net");
    let bytes = encode(&net);
    match decode(&bytes) {
        Ok(back) => {
            let x = Value::Spatial(Tensor4::from_fn(2, 1, 6, 6, |_, _, _, _| rng.random_range(-1.0..1.0)));
            let same_out = match (net.forward(&x), back.forward(&x)) {
                (Ok(a), Ok(b)) => a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()),
                _ => false,
            };
            if back != net || encode(&back) != bytes || !same_out {
                failures.push("checkpoint round trip not bit-exact".into());
            }
        }
        Err(e) => failures.push(format!("checkpoint decode: {e}")),
    }
    let cfg = small_run_config(ctx.seed);
    match (run_growth_experiment(&cfg), run_growth_experiment(&cfg)) {
        (Ok(a), Ok(b)) => {
            if csv_bytes(&a.records) != csv_bytes(&b.records) {
                failures.push("same-seed logs differ".into());
            }
        }
        (Err(e), _) | (_, Err(e)) => failures.push(format!("run failed: {e}")),
    }
    let notes = if failures.is_empty() {
        "batch 64, estimation 41, checkpoint bit-exact, logs identical".to_string()
    } else {
        failures.join("; ")
    };
    CheckResult::at_most(failures.len() as f64, 0.0, notes)
}

pub fn log_schema(ctx: &Ctx) -> CheckResult {
    let out = match run_growth_experiment(&small_run_config(ctx.seed.wrapping_add(1))) {
        Ok(o) => o,
        Err(e) => return CheckResult::error(e),
    };
    let bytes = csv_bytes(&out.records);
    let mut problems = 0usize;
    match read_log(bytes.as_slice()) {
        Ok(back) => problems += usize::from(csv_bytes(&back) != bytes),
        Err(_) => problems += 1,
    }
    let grows: Vec<_> = out.records.iter().filter(|r| r.event == Event::Grow).collect();
    problems += grows.windows(2).filter(|w| w[1].params < w[0].params).count();
    CheckResult::at_most(problems as f64, 0.0, "parse-back and monotone parameter count")
}
