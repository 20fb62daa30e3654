use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::fed::{RoundRecord, Strategy};
use crate::metrics::ConfusionMatrix;

/// One strategy trained on every split.
#[derive(Clone, Debug)]
pub struct StrategyRun {
    pub strategy: Strategy,
    /// `splits[repeat][round - 1]`.
    pub splits: Vec<Vec<RoundRecord>>,
    pub wall_ms: f64,
}

impl StrategyRun {
    pub fn rounds(&self) -> usize {
        self.splits.first().map_or(0, Vec::len)
    }

    /// Client `c`'s metric in `round` (1-based), one value per split.
    fn per_split(&self, round: usize, client: usize, metric: impl Fn(&crate::fed::ClientRound) -> f64) -> Vec<f64> {
        self.splits.iter().map(|s| metric(&s[round - 1].clients[client])).collect()
    }

    /// Final-round UF1 of each client, averaged over splits.
    pub fn final_uf1(&self) -> Vec<f64> {
        let r = self.rounds();
        (0..self.clients()).map(|c| mean(&self.per_split(r, c, |x| x.uf1))).collect()
    }

    /// Mean over clients of [`StrategyRun::final_uf1`].
    pub fn mean_final_uf1(&self) -> f64 {
        mean(&self.final_uf1())
    }

    pub fn clients(&self) -> usize {
        self.splits.first().and_then(|s| s.first()).map_or(0, |r| r.clients.len())
    }

    /// Confusion matrix of client `c` in `round`, summed over splits.
    pub fn confusion(&self, round: usize, client: usize) -> Result<ConfusionMatrix> {
        let mut cm = self.splits[0][round - 1].clients[client].confusion.clone();
        for s in &self.splits[1..] {
            cm.merge(&s[round - 1].clients[client].confusion)?;
        }
        Ok(cm)
    }
}

/// Everything an experiment produced.
#[derive(Clone, Debug)]
pub struct Report {
    pub seed: u64,
    pub classes: usize,
    pub client_samples: Vec<usize>,
    /// `stratified[client][repeat]`.
    pub stratified: Vec<Vec<bool>>,
    pub runs: Vec<StrategyRun>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Sample standard deviation; 0 for fewer than two values.
fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Serialize)]
struct Stat {
    mean: f64,
    std: f64,
}

impl Stat {
    fn of(v: &[f64]) -> Self {
        Self { mean: mean(v), std: std(v) }
    }
}

#[derive(Serialize)]
struct ClientSummary {
    client: usize,
    train_samples_total: usize,
    stratified_splits: usize,
    uf1: Stat,
    uar: Stat,
    /// Classes without support in some split's final scoring.
    flagged: Vec<usize>,
}

#[derive(Serialize)]
struct RoundSummary {
    round: usize,
    mean_uf1: f64,
    mean_uar: f64,
}

#[derive(Serialize)]
struct StrategySummary {
    strategy: Strategy,
    mean_uf1: f64,
    mean_uar: f64,
    clients: Vec<ClientSummary>,
    rounds: Vec<RoundSummary>,
    wall_ms: f64,
}

#[derive(Serialize)]
struct Summary {
    seed: u64,
    classes: usize,
    splits: usize,
    strategies: Vec<StrategySummary>,
}

impl Report {
    pub fn run(&self, strategy: Strategy) -> Option<&StrategyRun> {
        self.runs.iter().find(|r| r.strategy == strategy)
    }

    /// One row per strategy, round and client; metrics are means over splits.
    /// Holds no timings, so equal seeds give equal bytes.
    pub fn results_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["strategy", "round", "client", "train_loss", "uf1", "uf1_std", "uar", "uar_std", "flagged"])?;
        for run in &self.runs {
            for round in 1..=run.rounds() {
                for c in 0..run.clients() {
                    let loss = run.per_split(round, c, |x| x.train_loss);
                    let f = run.per_split(round, c, |x| x.uf1);
                    let r = run.per_split(round, c, |x| x.uar);
                    w.write_record([
                        run.strategy.id().to_string(),
                        round.to_string(),
                        c.to_string(),
                        mean(&loss).to_string(),
                        mean(&f).to_string(),
                        std(&f).to_string(),
                        mean(&r).to_string(),
                        std(&r).to_string(),
                        flagged_list(run, round, c),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Final-round per-client mean ± std over splits, and per-round means.
    pub fn summary_json(&self) -> Result<String> {
        let strategies = self
            .runs
            .iter()
            .map(|run| {
                let r = run.rounds();
                let clients: Vec<ClientSummary> = (0..run.clients())
                    .map(|c| ClientSummary {
                        client: c,
                        train_samples_total: self.client_samples[c],
                        stratified_splits: self.stratified[c].iter().filter(|&&s| s).count(),
                        uf1: Stat::of(&run.per_split(r, c, |x| x.uf1)),
                        uar: Stat::of(&run.per_split(r, c, |x| x.uar)),
                        flagged: flagged(run, r, c),
                    })
                    .collect();
                let rounds = (1..=r)
                    .map(|round| {
                        let m = |f: fn(&crate::fed::ClientRound) -> f64| {
                            mean(&(0..run.clients()).map(|c| mean(&run.per_split(round, c, f))).collect::<Vec<_>>())
                        };
                        RoundSummary {
                            round,
                            mean_uf1: m(|x| x.uf1),
                            mean_uar: m(|x| x.uar),
                        }
                    })
                    .collect();
                StrategySummary {
                    strategy: run.strategy,
                    mean_uf1: mean(&clients.iter().map(|c| c.uf1.mean).collect::<Vec<_>>()),
                    mean_uar: mean(&clients.iter().map(|c| c.uar.mean).collect::<Vec<_>>()),
                    clients,
                    rounds,
                    wall_ms: run.wall_ms,
                }
            })
            .collect();
        let summary = Summary {
            seed: self.seed,
            classes: self.classes,
            splits: self.runs.first().map_or(0, |r| r.splits.len()),
            strategies,
        };
        Ok(serde_json::to_string_pretty(&summary)? + "\n")
    }

    /// Writes `results.csv`, `summary.json` and
    /// `<strategy>/confmat_<client>_<round>.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("results.csv"), self.results_csv()?)?;
        fs::write(dir.join("summary.json"), self.summary_json()?)?;
        for run in &self.runs {
            let sub = dir.join(run.strategy.id());
            fs::create_dir_all(&sub)?;
            for round in 1..=run.rounds() {
                for c in 0..run.clients() {
                    fs::write(sub.join(format!("confmat_{c}_{round}.csv")), run.confusion(round, c)?.to_csv())?;
                }
            }
        }
        Ok(())
    }
}

fn flagged(run: &StrategyRun, round: usize, client: usize) -> Vec<usize> {
    let mut out: Vec<usize> = run
        .splits
        .iter()
        .flat_map(|s| s[round - 1].clients[client].flagged.iter().copied())
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn flagged_list(run: &StrategyRun, round: usize, client: usize) -> String {
    let mut s = String::new();
    for (i, k) in flagged(run, round, client).iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{k}");
    }
    s
}
