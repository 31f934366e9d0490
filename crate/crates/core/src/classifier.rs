//! Victim model: initialization, training, clean evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledView;
use crate::error::{Error, Result};
use crate::net::{self, Architecture, ModelParams};
use crate::tensor::Tensor;

/// Rows per forward call when scoring many images.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's mini-batches, weighted by batch size.
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanMetrics {
    pub accuracy: f64,
    pub mean_true_softmax: f64,
}

/// He-style uniform initialization, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`,
/// with zero biases.
pub fn init_params(arch: Architecture, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        if t.rank() == 1 {
            continue;
        }
        let fan_in: usize = t.shape()[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in t.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Smallest standard deviation accepted for a channel; flatter channels are
/// left unscaled rather than blown up.
const MIN_CHANNEL_STD: f64 = 1e-3;

/// Per-channel mean and standard deviation over a set of `[H, W, C]` images.
pub fn channel_stats(images: &[&Tensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("no images for channel statistics"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid("images must be [H, W, C]"));
    }
    let c = shape[2];
    let mut sum = vec![0.0; c];
    let mut count = 0usize;
    for img in images {
        img.ensure_shape(&shape)?;
        for px in img.data().chunks(c) {
            for (s, v) in sum.iter_mut().zip(px) {
                *s += v;
            }
        }
        count += img.len() / c;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0; c];
    for img in images {
        for px in img.data().chunks(c) {
            for ((q, v), m) in sq.iter_mut().zip(px).zip(&mean) {
                *q += (v - m) * (v - m);
            }
        }
    }
    let std = sq
        .iter()
        .map(|q| {
            let s = (q / count as f64).sqrt();
            if s < MIN_CHANNEL_STD {
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok((mean, std))
}

/// Fresh parameters whose input standardization is fitted to `views`.
pub fn init_params_for(arch: Architecture, views: &[&LabeledView], seed: u64) -> Result<ModelParams> {
    let images: Vec<&Tensor> = views.iter().map(|v| &v.image).collect();
    let (mean, std) = channel_stats(&images)?;
    init_params(arch, seed)?.with_input_norm(mean, std)
}

pub fn stack_views(views: &[&LabeledView]) -> Result<Tensor> {
    let images: Vec<&Tensor> = views.iter().map(|v| &v.image).collect();
    Tensor::stack(&images)
}

/// Softmax probabilities for a list of images, `[N, K]`.
pub fn predict(params: &ModelParams, images: &[&Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::invalid("nothing to predict"));
    }
    let k = params.arch().classes;
    let mut data = Vec::with_capacity(images.len() * k);
    for chunk in images.chunks(EVAL_CHUNK) {
        let batch = Tensor::stack(chunk)?;
        data.extend_from_slice(net::softmax(&net::logits(params, &batch)?).data());
    }
    Tensor::new(vec![images.len(), k], data)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate_clean(params: &ModelParams, views: &[&LabeledView]) -> Result<CleanMetrics> {
    let images: Vec<&Tensor> = views.iter().map(|v| &v.image).collect();
    let probs = predict(params, &images)?;
    let k = params.arch().classes;
    let mut correct = 0usize;
    let mut conf = 0.0;
    for (row, view) in probs.data().chunks(k).zip(views) {
        if argmax(row) == view.label {
            correct += 1;
        }
        conf += row[view.label];
    }
    let n = views.len() as f64;
    Ok(CleanMetrics {
        accuracy: correct as f64 / n,
        mean_true_softmax: conf / n,
    })
}

/// Mini-batch SGD with momentum (`v = m v + g; w -= lr v`).
///
/// Each epoch visits the training views in a seeded shuffle. When `test`
/// views are given their accuracy is logged after every epoch.
pub fn train(
    params: &ModelParams,
    train_views: &[&LabeledView],
    test_views: Option<&[&LabeledView]>,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    config.validate()?;
    if train_views.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let mut params = params.clone();
    let mut velocity = ModelParams::zeros(params.arch().clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_views.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let views: Vec<&LabeledView> = chunk.iter().map(|&i| train_views[i]).collect();
            let labels: Vec<usize> = views.iter().map(|v| v.label).collect();
            let batch = stack_views(&views)?;
            let (loss, grads) = match net::loss_and_param_grad(&params, &batch, &labels) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss * views.len() as f64;
            for ((w, v), g) in params
                .tensors_mut()
                .iter_mut()
                .zip(velocity.tensors_mut())
                .zip(grads.tensors())
            {
                for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *vi = config.momentum * *vi + gi;
                    *wi -= config.learning_rate * *vi;
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let train_accuracy = match evaluate_clean(&params, train_views) {
            Ok(m) => m.accuracy,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
            Err(e) => return Err(e),
        };
        let test_accuracy = match test_views {
            Some(t) if !t.is_empty() => Some(evaluate_clean(&params, t)?.accuracy),
            _ => None,
        };
        log.push(EpochLog {
            epoch,
            loss: loss_sum / train_views.len() as f64,
            train_accuracy,
            test_accuracy,
        });
    }
    Ok((params, log))
}

/// `epoch,loss,train_acc,test_acc`; an absent test accuracy is left empty.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,train_acc,test_acc\n");
    for e in log {
        let test = e.test_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        writeln!(out, "{},{:.8},{:.6},{}", e.epoch, e.loss, e.train_accuracy, test).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetConfig, Split};

    fn arch() -> Architecture {
        Architecture::standard(32, 32, 3, 4)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(arch(), 1).unwrap();
        let b = init_params(arch(), 1).unwrap();
        let c = init_params(arch(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for t in a.tensors() {
            assert!(t.max_abs() < 1.0);
        }
    }

    #[test]
    fn uniform_model_metrics() {
        let d = generate_dataset(&DatasetConfig {
            objects_per_class: 1,
            views_per_object: 4,
            train_views: 2,
            ..DatasetConfig::default()
        })
        .unwrap();
        let views: Vec<&LabeledView> = d.views.iter().collect();
        let m = evaluate_clean(&ModelParams::zeros(arch()).unwrap(), &views).unwrap();
        assert_eq!(m.mean_true_softmax, 0.25);
        // Uniform ties resolve to class 0, which owns a quarter of the views.
        assert_eq!(m.accuracy, 0.25);
    }

    #[test]
    fn tiny_learning_rate_is_nearly_a_no_op() {
        let d = generate_dataset(&DatasetConfig::default()).unwrap();
        let train_views = d.split(Split::Train);
        let p0 = init_params(arch(), 3).unwrap();
        let before = evaluate_clean(&p0, &train_views).unwrap().accuracy;
        let cfg = TrainConfig {
            epochs: 1,
            learning_rate: 1e-9,
            ..TrainConfig::default()
        };
        let (p1, log) = train(&p0, &train_views, None, &cfg).unwrap();
        let after = evaluate_clean(&p1, &train_views).unwrap().accuracy;
        assert!((after - before).abs() <= 0.02, "{before} -> {after}");
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn rejects_bad_config() {
        let p = init_params(arch(), 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&p, &[], None, &TrainConfig::default()).is_err());
        let d = generate_dataset(&DatasetConfig {
            objects_per_class: 1,
            views_per_object: 2,
            train_views: 1,
            ..DatasetConfig::default()
        })
        .unwrap();
        let v: Vec<&LabeledView> = d.views.iter().collect();
        assert!(train(&p, &v, None, &cfg).is_err());
    }

    #[test]
    fn divergence_reports_epoch() {
        let d = generate_dataset(&DatasetConfig {
            objects_per_class: 1,
            views_per_object: 4,
            train_views: 3,
            ..DatasetConfig::default()
        })
        .unwrap();
        let v = d.split(Split::Train);
        let p = init_params(arch(), 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&p, &v, None, &cfg), Err(Error::Diverged { epoch: 1 })));
    }

    #[test]
    fn csv_layout() {
        let csv = log_csv(&[EpochLog {
            epoch: 1,
            loss: 0.5,
            train_accuracy: 0.75,
            test_accuracy: None,
        }]);
        assert_eq!(csv, "epoch,loss,train_acc,test_acc\n1,0.50000000,0.750000,\n");
    }
}
