//! Multinomial logistic regression as a [`Learner`]: the convex reference
//! for the round loop, and a linear probe on flattened features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{apply_proximal, Learner, LocalStep};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::nn::{Builder, Fwd, Linear, Mode, ModelState};
use crate::seed;
use crate::tensor::{Graph, Tensor};

/// Row-major features with class labels, split into train and test.
#[derive(Clone, Debug)]
pub struct LogisticData {
    pub train_x: Tensor,
    pub train_y: Vec<usize>,
    pub test_x: Tensor,
    pub test_y: Vec<usize>,
}

impl LogisticData {
    /// Heterogeneous clients: each has its own class mix and feature shift.
    /// Class `c` is centred on a fixed random mean shared by all clients.
    pub fn heterogeneous(clients: usize, dim: usize, classes: usize, seed: u64) -> Vec<Self> {
        let mut rng = seed::rng(seed, "logistic/means");
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..dim).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        (0..clients)
            .map(|c| {
                let mut rng = seed::rng_at(seed, "logistic/client", c as u64);
                let n = rng.random_range(40..=120);
                let weights: Vec<f64> = (0..classes).map(|_| rng.random_range(0.1..1.0)).collect();
                let shift: Vec<f64> = (0..dim).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
                let mut draw = |count: usize| {
                    let mut x = Vec::with_capacity(count * dim);
                    let mut y = Vec::with_capacity(count);
                    for _ in 0..count {
                        let total: f64 = weights.iter().sum();
                        let mut t = rng.random::<f64>() * total;
                        let class = weights
                            .iter()
                            .position(|&w| {
                                t -= w;
                                t < 0.0
                            })
                            .unwrap_or(classes - 1);
                        for d in 0..dim {
                            x.push(means[class][d] + shift[d] + rng.sample::<f64, _>(StandardNormal));
                        }
                        y.push(class);
                    }
                    (Tensor::new(&[count, dim], x).expect("sized"), y)
                };
                let (train_x, train_y) = draw(n);
                let (test_x, test_y) = draw(n / 2);
                Self {
                    train_x,
                    train_y,
                    test_x,
                    test_y,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct LogisticLearner {
    pub features: usize,
    pub classes: usize,
    layer: Linear,
    template: ModelState,
}

impl LogisticLearner {
    pub fn new(features: usize, classes: usize) -> Result<Self> {
        let mut rng = seed::rng(0, "logistic/layout");
        let mut bld = Builder::<f64, _>::new(&mut rng);
        let layer = Linear::new(&mut bld, "linear", features, classes, true)?;
        let mut template = ModelState {
            params: bld.params,
            buffers: bld.buffers,
        };
        for (_, t) in template.params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(Self {
            features,
            classes,
            layer,
            template,
        })
    }

    fn logits(&self, g: &mut Graph, state: &ModelState, x: &Tensor) -> Result<crate::tensor::Var> {
        if x.shape().len() != 2 || x.shape()[1] != self.features {
            return Err(Error::dim("logistic", format!("{:?} for {} features", x.shape(), self.features)));
        }
        let mut f = Fwd::new(g, &state.params, &state.buffers, Mode::Eval);
        let xv = f.constant(x.clone());
        self.layer.forward(&mut f, xv)
    }

    /// Mean cross-entropy of `state` on the given samples.
    pub fn loss(&self, state: &ModelState, x: &Tensor, y: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let z = self.logits(&mut g, state, x)?;
        let l = g.cross_entropy(z, y)?;
        g.value(l).item()
    }

    pub fn predict(&self, state: &ModelState, x: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let z = self.logits(&mut g, state, x)?;
        Ok(argmax_rows(g.value(z).data(), self.classes))
    }
}

/// Index of the largest entry of every row, first on ties.
pub(crate) fn argmax_rows(values: &[f64], width: usize) -> Vec<usize> {
    values
        .chunks(width)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

impl Learner for LogisticLearner {
    type Scalar = f64;
    type Data = LogisticData;

    /// Zero weights, so every client starts at the same convex point.
    fn init(&self, _rng: &mut ChaCha8Rng) -> Result<ModelState> {
        Ok(self.template.clone())
    }

    fn train_size(&self, data: &LogisticData) -> usize {
        data.train_y.len()
    }

    /// One full-batch gradient step.
    fn train_epoch(&self, state: &mut ModelState, data: &LogisticData, step: LocalStep<'_, f64>) -> Result<f64> {
        let mut g = Graph::new();
        let z = self.logits(&mut g, state, &data.train_x)?;
        let l = g.cross_entropy(z, &data.train_y)?;
        let mut loss = g.value(l).item()?;
        state.params.zero_grad();
        g.backward(l, &mut state.params)?;
        if let Some((anchor, alpha)) = step.anchor {
            loss += apply_proximal(&mut state.params, anchor, alpha)?;
        }
        step.opt.step(&mut state.params)?;
        Ok(loss)
    }

    fn evaluate(&self, state: &ModelState, data: &LogisticData) -> Result<ConfusionMatrix> {
        let pred = self.predict(state, &data.test_x)?;
        ConfusionMatrix::from_predictions(self.classes, &data.test_y, &pred)
    }
}
