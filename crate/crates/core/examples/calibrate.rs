//! Learnability of the synthetic 3-class task: a logistic probe on the raw
//! ROI flow against the network, single client, first split of each seed.
//!
//! `cargo run --release -p aufed --example calibrate [seeds] [epochs]`

use std::time::Instant;

use aufed::experiment::{self, ExperimentConfig, Precision};
use aufed::fed::{FedConfig, Federation, LogisticData, LogisticLearner, Strategy};
use aufed::metrics::uf1;
use aufed::Tensor;

fn main() -> aufed::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let seeds = args.first().copied().unwrap_or(5);
    let epochs = args.get(1).copied().unwrap_or(50);
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../config/learnability.toml"))?;
    for seed in 0..seeds as u64 {
        let cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::from_toml(&text)?
        };
        let prepared = experiment::prepare(&cfg)?;
        let data = &prepared.clients[0];
        let split = &prepared.splits[0][0];

        let features = |idx: &[usize]| {
            let width = data.samples[0].rois.len();
            let x: Vec<f64> = idx.iter().flat_map(|&i| data.samples[i].rois.iter().copied()).collect();
            Tensor::new(&[idx.len(), width], x).expect("sized")
        };
        let labels = |idx: &[usize]| idx.iter().map(|&i| data.samples[i].emotion).collect::<Vec<_>>();
        let probe_data = LogisticData {
            train_x: features(&split.train),
            train_y: labels(&split.train),
            test_x: features(&split.test),
            test_y: labels(&split.test),
        };
        let probe = LogisticLearner::new(probe_data.train_x.shape()[1], cfg.model.classes)?;
        let probe_cfg = FedConfig {
            rounds: 200,
            local_epochs: 1,
            lr: 0.05,
            momentum: 0.9,
            ..FedConfig::default()
        };
        let rounds = Federation::new(&probe, &probe_cfg, Strategy::LocalOnly, vec![probe_data], seed)?.run()?;
        let probe_uf1 = rounds.last().map_or(0.0, |r| r.clients[0].uf1);

        let t0 = Instant::now();
        let (best, reached) = match cfg.training.precision {
            Precision::F64 => train::<f64>(&cfg, &prepared, epochs)?,
            Precision::F32 => train::<f32>(&cfg, &prepared, epochs)?,
        };
        println!(
            "seed {seed}: n={} probe UF1 {probe_uf1:.3}, net best UF1 {best:.3} (epoch {reached}), {:.1}s",
            data.len(),
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn train<T: aufed::Scalar>(cfg: &ExperimentConfig, prepared: &experiment::Prepared, epochs: usize) -> aufed::Result<(f64, usize)> {
    let learner = experiment::learner::<T>(cfg, &prepared.priors)?;
    let clients = prepared.clients_for::<T>(0, cfg.priors.toggles())?;
    let fed_cfg = FedConfig {
        rounds: epochs,
        local_epochs: 1,
        ..cfg.federation.clone()
    };
    let mut fed = Federation::new(&learner, &fed_cfg, Strategy::LocalOnly, clients, experiment::run_seed(cfg, 0))?;
    let (mut best, mut at) = (0.0, 0);
    for e in 1..=epochs {
        let r = fed.round()?;
        let cm = &r.clients[0].confusion;
        let f = uf1(cm).value;
        eprintln!("  epoch {e}: loss {:.4} UF1 {f:.3}", r.clients[0].train_loss);
        if f > best {
            best = f;
            at = e;
        }
    }
    Ok((best, at))
}
