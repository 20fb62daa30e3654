use std::marker::PhantomData;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::Result;
use crate::fed::{apply_proximal, Learner, LocalStep};
use crate::metrics::ConfusionMatrix;
use crate::nn::{update_running_stats, AfrPriors, Fwd, MerNet, Mode, ModelConfig, ModelState};
use crate::priors::{AuCatalog, BetaSchedule};
use crate::scalar::Scalar;
use crate::tensor::Graph;

const EVAL_BATCH: usize = 64;

/// One client's share of an experiment: its samples, the current split and
/// the priors built from its own training labels.
pub struct MerClient<T: Scalar> {
    pub data: Arc<Dataset>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub priors: AfrPriors<T>,
}

/// The recognition network as a federated learner.
#[derive(Clone, Debug)]
pub struct MerLearner<T: Scalar> {
    net: MerNet,
    catalog: AuCatalog,
    batch_size: usize,
    beta: BetaSchedule,
    _scalar: PhantomData<T>,
}

impl<T: Scalar> MerLearner<T> {
    /// `beta` is used as given; pass a zero schedule to drop D.
    pub fn new(model: &ModelConfig, catalog: &AuCatalog, batch_size: usize, beta: BetaSchedule) -> Result<Self> {
        let mut rng = crate::seed::rng(0, "mer/layout");
        let (net, _) = MerNet::new::<T, _>(model, catalog, &mut rng)?;
        Ok(Self {
            net,
            catalog: catalog.clone(),
            batch_size: batch_size.max(1),
            beta,
            _scalar: PhantomData,
        })
    }

    pub fn net(&self) -> &MerNet {
        &self.net
    }

    /// Predicted classes for the given samples.
    pub fn predict(&self, state: &ModelState<T>, client: &MerClient<T>, indices: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_BATCH) {
            let batch = client.data.batch::<T>(chunk);
            let mut g = Graph::new();
            let mut f = Fwd::new(&mut g, &state.params, &state.buffers, Mode::Eval);
            let beta = self.beta.value(usize::MAX, 1);
            let logits = self.net.forward(&mut f, &batch, &client.priors, beta)?.logits;
            let classes = self.net.config.classes;
            for row in g.value(logits).data().chunks(classes) {
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                out.push(best);
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Learner for MerLearner<T> {
    type Scalar = T;
    type Data = MerClient<T>;

    fn init(&self, rng: &mut ChaCha8Rng) -> Result<ModelState<T>> {
        Ok(MerNet::new::<T, _>(&self.net.config, &self.catalog, rng)?.1)
    }

    fn train_size(&self, data: &MerClient<T>) -> usize {
        data.train.len()
    }

    fn train_epoch(&self, state: &mut ModelState<T>, client: &MerClient<T>, step: LocalStep<'_, T>) -> Result<f64> {
        let mut order = client.train.clone();
        order.shuffle(step.rng);
        let beta = self.beta.value(step.progress.epoch, step.progress.horizon);
        let mut total = 0.0;
        for chunk in order.chunks(self.batch_size) {
            let batch = client.data.batch::<T>(chunk);
            let mut g = Graph::new();
            let mut f = Fwd::new(&mut g, &state.params, &state.buffers, Mode::Train);
            let loss = self.net.forward(&mut f, &batch, &client.priors, beta)?.loss;
            let nodes = f.into_bn_nodes();
            let mut value = g.value(loss).item()?;
            state.params.zero_grad();
            g.backward(loss, &mut state.params)?;
            if let Some((anchor, alpha)) = step.anchor {
                value += apply_proximal(&mut state.params, anchor, alpha)?;
            }
            update_running_stats(&mut state.buffers, &g, &nodes)?;
            step.opt.step(&mut state.params)?;
            total += value.as_f64() * chunk.len() as f64;
        }
        Ok(total / order.len().max(1) as f64)
    }

    fn evaluate(&self, state: &ModelState<T>, client: &MerClient<T>) -> Result<ConfusionMatrix> {
        let pred = self.predict(state, client, &client.test)?;
        let truth: Vec<usize> = client.test.iter().map(|&i| client.data.samples[i].emotion).collect();
        ConfusionMatrix::from_predictions(self.net.config.classes, &truth, &pred)
    }
}
