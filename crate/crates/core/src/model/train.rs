use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, Network};
use crate::autodiff::{GradOptions, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Mini-batch SGD settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Cross-entropy of `logits` against `label`, as `ln Σ exp(z − max z) − (z_label − max z)`.
fn cross_entropy<'t>(tape: &'t Tape, logits: Var<'t>, label: usize) -> Result<Var<'t>> {
    let z = logits.value();
    let max = z.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = logits.sub(tape.constant(Tensor::filled(z.shape(), max)))?;
    let mut onehot = Tensor::zeros(z.shape());
    onehot.data_mut()[label] = 1.0;
    let picked = shifted.mul(tape.constant(onehot))?.sum();
    shifted.exp().sum().ln().sub(picked)
}

pub(crate) fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    for (x, &y) in data.images().iter().zip(data.labels()) {
        if net.predict_class(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains a freshly initialised network with mini-batch SGD on cross-entropy.
/// Deterministic for a given seed.
pub fn train(
    arch: &Architecture,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&label) = data.labels().iter().find(|&&l| l >= arch.classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: arch.classes,
        });
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "batch size {} / learning rate {}",
            cfg.batch_size, cfg.learning_rate
        )));
    }
    let mut net = Network::init(arch.clone(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();

    // flat list of (layer, is_bias) parameter slots
    let slots: Vec<(usize, bool)> = net
        .params()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            let w = p.weight.as_ref().map(|_| (i, false));
            let b = p.bias.as_ref().map(|_| (i, true));
            w.into_iter().chain(b)
        })
        .collect();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f64>> = Vec::new();
            for &idx in batch {
                let tape = Tape::new();
                let x = tape.constant(data.image(idx).clone());
                let trace = net.forward_trainable(&tape, x)?;
                let loss = cross_entropy(&tape, trace.logits, data.label(idx))?;
                let vars: Vec<Var<'_>> = slots
                    .iter()
                    .map(|&(i, is_bias)| {
                        let s = &trace.steps[i];
                        if is_bias { s.bias } else { s.weight }.expect("parameter slot")
                    })
                    .collect();
                let grads = tape.grad(loss, &vars, GradOptions::default())?;
                if acc.is_empty() {
                    acc = grads.iter().map(|g| g.value().data().to_vec()).collect();
                } else {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (p, q) in a.iter_mut().zip(g.value().data()) {
                            *p += q;
                        }
                    }
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (&(i, is_bias), g) in slots.iter().zip(&acc) {
                let p = &mut net.params_mut()[i];
                let t = if is_bias { &mut p.bias } else { &mut p.weight };
                let t = Arc::make_mut(t.as_mut().expect("parameter slot"));
                for (w, d) in t.data_mut().iter_mut().zip(g) {
                    *w -= step * d;
                }
            }
        }
    }

    let train_accuracy = accuracy(&net, data)?;
    let test_accuracy = match test {
        Some(t) => Some(accuracy(&net, t)?),
        None => None,
    };
    Ok(TrainOutcome {
        network: net,
        train_accuracy,
        test_accuracy,
    })
}
