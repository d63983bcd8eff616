//! Mini-batch training loop with gradient accumulation per sample.

use super::{argmax, ForwardOptions, Model, ModelError};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::Real;
use std::sync::Arc;

/// Cross entropy against smoothed targets: `-(sum_k q_k log p_k)` with
/// `q_y = 1 - eps + eps/K` and `q_other = eps/K`.
fn smoothed_ce_var(
    logits: Var<'_>,
    y: usize,
    classes: usize,
    eps: Real,
) -> Result<Var<'_>, TensorError> {
    let ls = logits.log_softmax()?;
    let off = eps / classes as Real;
    let map: Vec<Option<(usize, Real)>> = (0..classes)
        .map(|k| Some((k, if k == y { -(1.0 - eps + off) } else { -off })))
        .collect();
    Ok(ls.gather_signed(vec![classes], Arc::new(map))?.sum())
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    /// Smoothing mass spread over the non-target classes. Keeps the toy
    /// models' logit gaps bounded: a fully saturated f64 softmax yields
    /// exactly-zero input gradients, which starves gradient-based attacks.
    pub label_smoothing: Real,
    /// Determines parameter initialization (via the model builders) and
    /// batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 1e-3,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_accuracy: Vec<Real>,
    pub val_accuracy: Vec<Real>,
    pub final_val_accuracy: Real,
}

/// Fraction of images whose prediction matches the label.
pub fn accuracy(model: &Model, images: &[Tensor], labels: &[usize]) -> Result<Real, ModelError> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (x, &y) in images.iter().zip(labels) {
        let logits = model.logits(x)?;
        if argmax(&logits) == y {
            hits += 1;
        }
    }
    Ok(hits as Real / images.len() as Real)
}

/// Train `model` in place. Deterministic given the configuration seed and
/// the model's build seed.
pub fn train(
    model: &mut Model,
    train_images: &[Tensor],
    train_labels: &[usize],
    val_images: &[Tensor],
    val_labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport, ModelError> {
    let classes = model.num_classes();
    for &y in train_labels.iter().chain(val_labels) {
        if y >= classes {
            return Err(ModelError::InvalidLabel { label: y, classes });
        }
    }
    assert_eq!(train_images.len(), train_labels.len());
    assert_eq!(val_images.len(), val_labels.len());

    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &sizes);
    let mut order: Vec<usize> = (0..train_images.len()).collect();
    let mut rng = Rng::new(cfg.seed).fork(0x7e41);

    let mut report = TrainReport {
        train_accuracy: Vec::with_capacity(cfg.epochs),
        val_accuracy: Vec::with_capacity(cfg.epochs),
        final_val_accuracy: 0.0,
    };

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut hits = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grad_accum: Vec<Tensor> =
                model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            let scale = 1.0 / batch.len() as Real;
            for &i in batch {
                let tape = Tape::new();
                let xv = tape.constant(train_images[i].clone());
                let pass = model.forward(
                    &tape,
                    xv,
                    ForwardOptions { train_params: true, record_attention: false },
                )?;
                let loss = smoothed_ce_var(pass.logits, train_labels[i], classes, cfg.label_smoothing)?;
                let loss_value = tape.scalar_value(loss)?;
                if !loss_value.is_finite() {
                    return Err(ModelError::DivergedTraining { epoch });
                }
                if argmax(pass.logits.value().data()) == train_labels[i] {
                    hits += 1;
                }
                let grads = tape.backward(loss)?;
                for (acc, var) in grad_accum.iter_mut().zip(&pass.param_vars) {
                    if let Some(g) = grads.get(*var) {
                        for (a, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += gv * scale;
                        }
                    }
                }
            }
            let mut params = model.params_mut();
            adam.step(&mut params, &grad_accum);
        }
        let train_acc = hits as Real / train_images.len().max(1) as Real;
        let val_acc = accuracy(model, val_images, val_labels)?;
        report.train_accuracy.push(train_acc);
        report.val_accuracy.push(val_acc);
    }
    report.final_val_accuracy = report.val_accuracy.last().copied().unwrap_or(0.0);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Cnn, CnnConfig};

    fn tiny_dataset(n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
        // Two trivially separable classes: bright left half vs bright right half.
        let mut rng = Rng::new(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let img = Tensor::from_fn(&[1, 16, 16], |idx| {
                let col = idx % 16;
                let bright = if label == 0 { col < 8 } else { col >= 8 };
                let base: Real = if bright { 0.8 } else { 0.2 };
                base + rng.uniform(-0.05, 0.05)
            });
            images.push(img);
            labels.push(label);
        }
        (images, labels)
    }

    #[test]
    fn learns_separable_data_and_is_deterministic() {
        let (images, labels) = tiny_dataset(40, 1);
        let (val_images, val_labels) = tiny_dataset(16, 2);
        let cfg = TrainConfig { epochs: 4, batch_size: 8, learning_rate: 2e-3, label_smoothing: 0.1, seed: 5 };

        let run = || {
            let mut model: Model = Cnn::build(CnnConfig::new((1, 16, 16), 2, 3).with_width(4)).into();
            let report =
                train(&mut model, &images, &labels, &val_images, &val_labels, &cfg).unwrap();
            (report.final_val_accuracy, model.params().iter().map(|p| p.data().to_vec()).collect::<Vec<_>>())
        };
        let (acc1, params1) = run();
        let (acc2, params2) = run();
        assert!(acc1 > 0.9, "val accuracy {acc1}");
        assert_eq!(acc1, acc2);
        assert_eq!(params1, params2, "same seed must give identical parameters");
    }

    #[test]
    fn untrained_model_sits_at_chance_level() {
        // Predictions of a random-init model are label-independent, so
        // accuracy on balanced data concentrates around 1/K.
        let classes = 4;
        let model: Model = Cnn::build(CnnConfig::new((1, 16, 16), classes, 77).with_width(4)).into();
        let mut rng = Rng::new(6);
        let n = 80;
        let images: Vec<Tensor> =
            (0..n).map(|_| Tensor::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let acc = accuracy(&model, &images, &labels).unwrap();
        assert!(
            (0.05..=0.5).contains(&acc),
            "untrained accuracy {acc} far from chance 1/{classes}"
        );
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let (images, labels) = tiny_dataset(8, 3);
        let mut model: Model = Cnn::build(CnnConfig::new((1, 16, 16), 2, 3).with_width(4)).into();
        let before: Vec<Vec<Real>> = model.params().iter().map(|p| p.data().to_vec()).collect();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        train(&mut model, &images, &labels, &images, &labels, &cfg).unwrap();
        let after: Vec<Vec<Real>> = model.params().iter().map(|p| p.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let (images, mut labels) = tiny_dataset(4, 4);
        labels[0] = 9;
        let mut model: Model = Cnn::build(CnnConfig::new((1, 16, 16), 2, 3).with_width(4)).into();
        let err =
            train(&mut model, &images, &labels, &[], &[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, ModelError::InvalidLabel { label: 9, classes: 2 }));
    }
}
