//! Linear-probe evaluation of frozen features.

use ape_tensor::nn::Linear;
use ape_tensor::{Optimizer, OptimizerConfig, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{images_to_tensor, Encoder, Readout};
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, tag};
use crate::vision::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Standardise each feature with training-split statistics first.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 0.0,
            standardize: true,
        }
    }
}

/// Frozen features `[n, d]` of `samples`, computed in chunks.
pub fn extract_features(
    encoder: &Encoder,
    store: &ParamStore<f32>,
    samples: &[Sample],
    readout: Readout,
) -> Result<Tensor<f32>> {
    let d = encoder.feature_dim(readout);
    let mut out = Vec::with_capacity(samples.len() * d);
    for chunk in samples.chunks(64) {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let x = tape.constant(images_to_tensor(&images)?);
        out.extend_from_slice(encoder.encode(&p, x, readout)?.value().data());
    }
    Ok(Tensor::new(&[samples.len(), d], out)?)
}

fn standardize(train: &mut Tensor<f32>, val: &mut Tensor<f32>) {
    let d = train.shape()[1];
    let n = train.shape()[0].max(1) as f64;
    let mut mean = vec![0.0f64; d];
    let mut var = vec![0.0f64; d];
    for row in train.data().chunks(d) {
        row.iter().enumerate().for_each(|(j, &v)| mean[j] += v as f64 / n);
    }
    for row in train.data().chunks(d) {
        row.iter()
            .enumerate()
            .for_each(|(j, &v)| var[j] += (v as f64 - mean[j]).powi(2) / n);
    }
    for t in [train, val] {
        for row in t.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = ((*v as f64 - mean[j]) / (var[j].sqrt() + 1e-6)) as f32;
            }
        }
    }
}

/// Trains a softmax-regression layer on frozen features and returns top-1
/// accuracy on the validation features.
pub fn linear_probe(
    train_x: &Tensor<f32>,
    train_y: &[usize],
    val_x: &Tensor<f32>,
    val_y: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if classes < 2 {
        return Err(invalid(format!("probe needs at least 2 classes, got {classes}")));
    }
    let d = train_x.shape()[1];
    if train_x.shape()[0] != train_y.len() || val_x.shape()[0] != val_y.len() || val_x.shape()[1] != d {
        return Err(invalid("feature and label counts disagree"));
    }
    if let Some(&y) = train_y.iter().chain(val_y).find(|&&y| y >= classes) {
        return Err(invalid(format!("label {y} outside {classes} classes")));
    }
    let (mut train_x, mut val_x) = (train_x.clone(), val_x.clone());
    if cfg.standardize {
        standardize(&mut train_x, &mut val_x);
    }
    let mut rng = stream(seed, &[tag::PROBE]);
    let mut store = ParamStore::<f32>::new();
    let layer = Linear::new(&mut store, "probe", d, classes, &mut rng);
    let mut opt = Optimizer::new(OptimizerConfig::sgd(cfg.lr, cfg.momentum, cfg.weight_decay), store.len());
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let b = chunk.len();
            let mut x = Vec::with_capacity(b * d);
            let mut onehot = vec![0f32; b * classes];
            for (r, &i) in chunk.iter().enumerate() {
                x.extend_from_slice(train_x.row(i));
                onehot[r * classes + train_y[i]] = 1.0;
            }
            let tape = Tape::new();
            let p = store.bind_all(&tape);
            let logits = layer.forward(&p, tape.constant(Tensor::new(&[b, d], x)?))?;
            let target = tape.constant(Tensor::new(&[b, classes], onehot)?);
            let loss = logits.log_softmax(1)?.mul(target)?.sum().scale(-1.0 / b as f64);
            if !loss.item().is_finite() {
                return Err(Error::NonFinite { component: "probe" });
            }
            let g = tape.backward(loss)?;
            let grads = p.grads(&g);
            drop(p);
            opt.step(&mut store, grads)?;
        }
    }
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let logits = layer.forward(&p, tape.constant(val_x))?.value();
    let hits = logits
        .data()
        .chunks(classes)
        .zip(val_y)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i);
            best == Some(y)
        })
        .count();
    Ok(hits as f64 / val_y.len().max(1) as f64)
}
