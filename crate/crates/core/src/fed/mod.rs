//! Simulated federation: a server that only ever sees serialized models and
//! sample counts, clients that own their data, and the round loop.

mod aggregate;
mod logistic;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use aggregate::{
    aggregate_fedavg, aggregate_pfedprox, aggregate_pfedprox_with, apply_proximal, fedavg_weights, mix,
    pfedprox_weights, proximal_term,
};
pub use logistic::{LogisticData, LogisticLearner};

use crate::error::{Error, Result};
use crate::metrics::{uar, uf1, ConfusionMatrix};
use crate::nn::ModelState;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Sgd;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "pfedprox")]
    PFedProx,
    #[serde(rename = "local-only")]
    LocalOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::FedAvg, Strategy::FedProx, Strategy::PFedProx, Strategy::LocalOnly];

    pub fn id(self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx => "fedprox",
            Strategy::PFedProx => "pfedprox",
            Strategy::LocalOnly => "local-only",
        }
    }

    /// Whether local training is anchored to the received model.
    pub fn proximal(self) -> bool {
        matches!(self, Strategy::FedProx | Strategy::PFedProx)
    }

    /// Whether clients are scored on their own trained model rather than
    /// the aggregated one.
    pub fn personal(self) -> bool {
        matches!(self, Strategy::PFedProx | Strategy::LocalOnly)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::contract(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    /// Own-model weight of the personalised initialisation.
    pub theta: f64,
    /// Proximal coefficient α₄.
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_epochs: 1,
            theta: 0.9,
            alpha: 0.01,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("federation.{f}"), m));
        if self.rounds == 0 {
            return err("rounds", "must be positive".into());
        }
        if self.local_epochs == 0 {
            return err("local_epochs", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return err("theta", format!("{} outside [0, 1]", self.theta));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return err("alpha", format!("{} must be finite and non-negative", self.alpha));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err("lr", format!("{} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum", format!("{} outside [0, 1)", self.momentum));
        }
        Ok(())
    }
}

/// A model on the wire: parameters and buffers, each in the parameter
/// format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelMessage {
    pub params: Vec<u8>,
    pub buffers: Vec<u8>,
}

impl ModelMessage {
    pub fn encode<T: Scalar>(state: &ModelState<T>) -> Self {
        Self {
            params: state.params.to_bytes(),
            buffers: state.buffers.to_bytes(),
        }
    }

    pub fn decode<T: Scalar>(&self) -> Result<ModelState<T>> {
        Ok(ModelState {
            params: ParamSet::from_bytes(&self.params)?,
            buffers: ParamSet::from_bytes(&self.buffers)?,
        })
    }
}

/// Everything a client sends upstream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientUpdate {
    pub client: usize,
    pub samples: usize,
    pub model: ModelMessage,
}

/// What the server sends back after a round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outbox {
    /// One model for everyone.
    Broadcast(ModelMessage),
    /// One model per client, in client order.
    Personal(Vec<ModelMessage>),
    /// Nothing is shared.
    Silent,
}

/// Aggregation endpoint. Works on `f64` whatever the clients compute in.
#[derive(Clone, Debug)]
pub struct Server {
    pub strategy: Strategy,
    pub theta: f64,
}

impl Server {
    pub fn aggregate(&self, updates: &[ClientUpdate]) -> Result<Outbox> {
        if self.strategy == Strategy::LocalOnly {
            return Ok(Outbox::Silent);
        }
        if updates.iter().enumerate().any(|(i, u)| u.client != i) {
            return Err(Error::contract("updates must arrive complete and in client order"));
        }
        let states: Vec<ModelState<f64>> = updates.iter().map(|u| u.model.decode()).collect::<Result<_>>()?;
        let params: Vec<(&ParamSet, usize)> = states.iter().zip(updates).map(|(s, u)| (&s.params, u.samples)).collect();
        let buffers: Vec<(&ParamSet, usize)> = states.iter().zip(updates).map(|(s, u)| (&s.buffers, u.samples)).collect();
        match self.strategy {
            Strategy::FedAvg | Strategy::FedProx => {
                let state = ModelState {
                    params: aggregate_fedavg(&params)?,
                    buffers: aggregate_fedavg(&buffers)?,
                };
                Ok(Outbox::Broadcast(ModelMessage::encode(&state)))
            }
            Strategy::PFedProx => {
                let p = aggregate_pfedprox(&params, self.theta)?;
                let b = aggregate_pfedprox(&buffers, self.theta)?;
                Ok(Outbox::Personal(
                    p.into_iter()
                        .zip(b)
                        .map(|(params, buffers)| ModelMessage::encode(&ModelState { params, buffers }))
                        .collect(),
                ))
            }
            Strategy::LocalOnly => unreachable!(),
        }
    }
}

/// Position of a local epoch within the whole run, for schedules.
#[derive(Clone, Copy, Debug)]
pub struct Progress {
    pub epoch: usize,
    pub horizon: usize,
}

/// Local optimisation context of one epoch.
pub struct LocalStep<'a, T: Scalar> {
    pub opt: &'a mut Sgd<T>,
    /// Model received at the start of the round, with its proximal weight.
    pub anchor: Option<(&'a ParamSet<T>, f64)>,
    pub progress: Progress,
    pub rng: &'a mut ChaCha8Rng,
}

/// A trainable model family. `Data` stays on the client.
pub trait Learner {
    type Scalar: Scalar;
    type Data;

    fn init(&self, rng: &mut ChaCha8Rng) -> Result<ModelState<Self::Scalar>>;

    /// Training samples, the client's aggregation weight.
    fn train_size(&self, data: &Self::Data) -> usize;

    /// One pass over the training data; returns the mean local objective.
    fn train_epoch(&self, state: &mut ModelState<Self::Scalar>, data: &Self::Data, step: LocalStep<'_, Self::Scalar>) -> Result<f64>;

    /// Scores the model on the client's held-out data.
    fn evaluate(&self, state: &ModelState<Self::Scalar>, data: &Self::Data) -> Result<ConfusionMatrix>;
}

pub struct ClientState<L: Learner> {
    pub id: usize,
    pub data: L::Data,
    pub samples: usize,
    pub model: ModelState<L::Scalar>,
    pub opt: Sgd<L::Scalar>,
    pub history: Vec<ClientRound>,
    anchor: Option<ParamSet<L::Scalar>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClientRound {
    pub client: usize,
    pub train_loss: f64,
    pub uf1: f64,
    pub uar: f64,
    /// Classes without support in this round's scoring.
    pub flagged: Vec<usize>,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: Strategy,
    pub clients: Vec<ClientRound>,
    pub wall_ms: f64,
}

/// Clients plus server, advanced one round at a time.
pub struct Federation<'l, L: Learner> {
    learner: &'l L,
    cfg: FedConfig,
    strategy: Strategy,
    seed: u64,
    clients: Vec<ClientState<L>>,
    server: Server,
    inbox: Vec<Option<ModelMessage>>,
    global: Option<ModelMessage>,
    round: usize,
}

impl<'l, L: Learner> Federation<'l, L> {
    /// Every client starts from the same initial model.
    pub fn new(learner: &'l L, cfg: &FedConfig, strategy: Strategy, data: Vec<L::Data>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::contract("a federation needs at least one client"));
        }
        if strategy == Strategy::PFedProx && data.len() == 1 && cfg.theta < 1.0 {
            return Err(Error::contract("a single client has no peers to mix with"));
        }
        let init = learner.init(&mut seed::rng(seed, "init"))?;
        let message = ModelMessage::encode(&init);
        let clients = data
            .into_iter()
            .enumerate()
            .map(|(id, data)| {
                let samples = learner.train_size(&data);
                if samples == 0 {
                    return Err(Error::contract(format!("client {id} has no training samples")));
                }
                Ok(ClientState {
                    id,
                    data,
                    samples,
                    model: init.clone(),
                    opt: Sgd::new(L::Scalar::cst(cfg.lr), L::Scalar::cst(cfg.momentum))?,
                    history: Vec::new(),
                    anchor: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            learner,
            cfg: cfg.clone(),
            strategy,
            seed,
            inbox: vec![Some(message); clients.len()],
            clients,
            server: Server { strategy, theta: cfg.theta },
            global: None,
            round: 0,
        })
    }

    pub fn clients(&self) -> &[ClientState<L>] {
        &self.clients
    }

    /// Latest aggregated model, for the strategies that have one.
    pub fn global(&self) -> Result<Option<ModelState<L::Scalar>>> {
        self.global.as_ref().map(ModelMessage::decode).transpose()
    }

    pub fn round(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        self.round += 1;
        let t = self.round;
        let (epochs, horizon) = (self.cfg.local_epochs, self.cfg.rounds * self.cfg.local_epochs);
        let mut updates = Vec::with_capacity(self.clients.len());
        let mut losses = Vec::with_capacity(self.clients.len());
        for (c, inbox) in self.clients.iter_mut().zip(&mut self.inbox) {
            if let Some(msg) = inbox.take() {
                c.model = msg.decode()?;
                c.anchor = self.strategy.proximal().then(|| c.model.params.clone());
            }
            let mut rng = seed::rng_at(self.seed, &format!("train/{}", c.id), t as u64);
            let mut loss = 0.0;
            for e in 0..epochs {
                let step = LocalStep {
                    opt: &mut c.opt,
                    anchor: c.anchor.as_ref().map(|a| (a, self.cfg.alpha)),
                    progress: Progress {
                        epoch: (t - 1) * epochs + e,
                        horizon,
                    },
                    rng: &mut rng,
                };
                loss = self
                    .learner
                    .train_epoch(&mut c.model, &c.data, step)
                    .map_err(|e| client_error(c.id, t, e))?;
                if !loss.is_finite() {
                    return Err(client_error(c.id, t, Error::Numeric { op: "local objective" }));
                }
            }
            losses.push(loss);
            updates.push(ClientUpdate {
                client: c.id,
                samples: c.samples,
                model: ModelMessage::encode(&c.model),
            });
        }

        let outbox = self.server.aggregate(&updates)?;
        let global = match &outbox {
            Outbox::Broadcast(m) => Some(m.decode::<L::Scalar>()?),
            _ => None,
        };
        match outbox {
            Outbox::Broadcast(m) => {
                self.inbox.iter_mut().for_each(|slot| *slot = Some(m.clone()));
                self.global = Some(m);
            }
            Outbox::Personal(ms) => self.inbox = ms.into_iter().map(Some).collect(),
            Outbox::Silent => {}
        }

        let mut rows = Vec::with_capacity(self.clients.len());
        for (c, loss) in self.clients.iter_mut().zip(losses) {
            let model = match (&global, self.strategy.personal()) {
                (Some(g), false) => g,
                _ => &c.model,
            };
            let cm = self.learner.evaluate(model, &c.data).map_err(|e| client_error(c.id, t, e))?;
            let (f, r) = (uf1(&cm), uar(&cm));
            let mut flagged = f.flagged.clone();
            flagged.extend(r.flagged.iter().filter(|k| !f.flagged.contains(k)));
            flagged.sort_unstable();
            let row = ClientRound {
                client: c.id,
                train_loss: loss,
                uf1: f.value,
                uar: r.value,
                flagged,
                confusion: cm,
            };
            c.history.push(row.clone());
            rows.push(row);
        }
        Ok(RoundRecord {
            round: t,
            strategy: self.strategy,
            clients: rows,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// All configured rounds.
    pub fn run(mut self) -> Result<Vec<RoundRecord>> {
        (0..self.cfg.rounds).map(|_| self.round()).collect()
    }
}

fn client_error(client: usize, round: usize, source: Error) -> Error {
    Error::Client {
        client,
        round,
        source: Box::new(source),
    }
}

/// Runs `strategy` for the configured number of rounds.
pub fn run_rounds<L: Learner>(learner: &L, cfg: &FedConfig, strategy: Strategy, data: Vec<L::Data>, seed: u64) -> Result<Vec<RoundRecord>> {
    Federation::new(learner, cfg, strategy, data, seed)?.run()
}
