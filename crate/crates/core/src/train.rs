//! Training loop: stratified split, train-split normalization, AdamW with
//! warmup/cosine schedule, global-norm clipping, label-smoothed loss, and
//! per-epoch structured logging. Fully deterministic under a fixed seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    apply_norm, fit_norm_stats, kfold, stratified_split, WindowSet, CHANNELS,
};
use crate::error::{DataError, TrainError};

use crate::model::{argmax, forward, forward_inference, init_params, ClassifierBundle, ModelConfig, TrainMeta};
use crate::optim::{clip_global_norm, AdamW, LrSchedule};
use crate::simgen::mix_seed;
use crate::tensor::Tensor;

/// Optimization recipe. Defaults follow the standard recipe: 100 epochs,
/// batch 32, base rate 1e-3, weight decay 1e-4, smoothing 0.1, clip 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    /// Warmup length as a fraction of total steps.
    pub warmup_frac: f64,
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.001,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            warmup_frac: 0.1,
            train_frac: 0.8,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr_last: f64,
    pub train_loss: f64,
    pub train_acc: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub bundle: ClassifierBundle,
    pub epochs: Vec<EpochStats>,
    /// Accuracy over the training split, evaluation mode, after training.
    pub final_train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub train_windows: usize,
    pub val_windows: usize,
}

/// Stack windows `indices` into a `[B, window_len, 6]` batch plus labels.
pub fn batch_tensor(set: &WindowSet, indices: &[usize]) -> (Tensor, Vec<usize>) {
    let b = indices.len();
    let mut data = Vec::with_capacity(b * set.window_len * CHANNELS);
    let mut labels = Vec::with_capacity(b);
    for &i in indices {
        data.extend_from_slice(&set.windows[i].values);
        labels.push(set.windows[i].label);
    }
    (
        Tensor::new(vec![b, set.window_len, CHANNELS], data).expect("sized buffer"),
        labels,
    )
}

/// Evaluation-mode loss and accuracy over a whole window set, in batches.
pub fn evaluate_set(
    bundle: &ClassifierBundle,
    set: &WindowSet,
    label_smoothing: f64,
) -> Result<(f64, f64), TrainError> {
    if set.is_empty() {
        return Err(TrainError::Data(DataError::EmptySet));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(64) {
        let (batch, labels) = batch_tensor(set, chunk);
        let mut pass = forward_inference(bundle, &batch)?;
        let loss = pass
            .graph
            .smoothed_cross_entropy(pass.logits, &labels, label_smoothing)?;
        loss_sum += pass.graph.value(loss).data()[0] * chunk.len() as f64;
        let logits = pass.graph.value(pass.logits);
        let k = bundle.config.num_classes;
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok((
        loss_sum / set.len() as f64,
        100.0 * correct as f64 / set.len() as f64,
    ))
}

/// Split `raw` (stratified holdout), normalize with train-split statistics,
/// and train. `raw` must be unnormalized pooled windows.
pub fn train(
    raw: &WindowSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome, TrainError> {
    ensure_all_classes_present(raw)?;
    let (train_raw, val_raw) = stratified_split(raw, cfg.train_frac, cfg.seed)?;
    train_on_split(train_raw, val_raw, model_cfg, cfg, log)
}

/// Validation metrics of one cross-validation fold.
#[derive(Debug, Clone, Copy)]
pub struct FoldMetrics {
    pub fold: usize,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// K-fold variant: trains one model per fold and reports per-fold validation
/// metrics. The returned outcome belongs to the first fold.
pub fn train_kfold(
    raw: &WindowSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    k: usize,
    log: &mut dyn FnMut(&str),
) -> Result<(TrainOutcome, Vec<FoldMetrics>), TrainError> {
    ensure_all_classes_present(raw)?;
    let folds = kfold(raw, k, cfg.seed)?;
    let mut fold_metrics = Vec::with_capacity(k);
    let mut first: Option<TrainOutcome> = None;
    for (i, (train_raw, val_raw)) in folds.into_iter().enumerate() {
        log(&format!("fold={}", i + 1));
        let mut fold_cfg = cfg.clone();
        fold_cfg.seed = mix_seed(cfg.seed, &[0xF0 + i as u64]);
        let outcome = train_on_split(train_raw, val_raw, model_cfg, &fold_cfg, log)?;
        fold_metrics.push(FoldMetrics {
            fold: i + 1,
            val_loss: outcome.val_loss,
            val_acc: outcome.val_acc,
        });
        if first.is_none() {
            first = Some(outcome);
        }
    }
    Ok((first.expect("k >= 2 folds"), fold_metrics))
}

fn ensure_all_classes_present(raw: &WindowSet) -> Result<(), DataError> {
    if raw.is_empty() {
        return Err(DataError::EmptySet);
    }
    for (label, count) in raw.class_counts().iter().enumerate() {
        if *count < 2 {
            return Err(DataError::ClassTooSmall {
                class: raw.class_names[label].clone(),
                count: *count,
                min: 2,
            });
        }
    }
    Ok(())
}

fn train_on_split(
    mut train_set: WindowSet,
    mut val_set: WindowSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome, TrainError> {
    let stats = fit_norm_stats(&train_set)?;
    apply_norm(&mut train_set, &stats)?;
    apply_norm(&mut val_set, &stats)?;

    let mut bundle = init_params(model_cfg, &train_set.class_names)?;
    let names = bundle.params.names();
    let shapes = bundle.params.shapes();
    let n_train = train_set.len();
    let steps_per_epoch = n_train.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup = (cfg.warmup_frac * total_steps as f64).round() as usize;
    let schedule = LrSchedule::new(warmup.min(total_steps), total_steps.max(1), cfg.lr)?;
    let mut opt = AdamW::new(&bundle.params.sizes(), cfg.lr, cfg.weight_decay);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0xD0]));

    let mut epoch_stats = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut order_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x0E, epoch as u64]));
        order.shuffle(&mut order_rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr_last = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = batch_tensor(&train_set, chunk);
            let mut pass = forward(&bundle, &batch, true, Some(&mut dropout_rng))?;
            let loss_node = pass
                .graph
                .smoothed_cross_entropy(pass.logits, &labels, cfg.label_smoothing)?;
            let loss = pass.graph.value(loss_node).data()[0];
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            loss_sum += loss * chunk.len() as f64;
            {
                let logits = pass.graph.value(pass.logits);
                let k = bundle.config.num_classes;
                for (row, &label) in logits.data().chunks(k).zip(&labels) {
                    if argmax(row) == label {
                        correct += 1;
                    }
                }
            }
            pass.graph.backward(loss_node)?;

            let mut grads: Vec<Vec<f64>> = pass
                .param_nodes
                .iter()
                .zip(bundle.params.sizes())
                .map(|(node, size)| {
                    pass.graph
                        .grad(*node)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; size])
                })
                .collect();
            clip_global_norm(&names, &mut grads, cfg.clip_norm)?;
            let lr = schedule.lr_at(step)?;
            lr_last = lr;
            let mut bufs = bundle.params.take_buffers();
            opt.step(&names, &mut bufs, &grads, lr)?;
            bundle.params.restore_buffers(&shapes, bufs);
            step += 1;
        }

        let train_loss = loss_sum / n_train as f64;
        let train_acc = 100.0 * correct as f64 / n_train as f64;
        log(&format!(
            "epoch={epoch} steps={step} lr={lr_last:.8} train_loss={train_loss:.6} train_acc={train_acc:.2}"
        ));
        epoch_stats.push(EpochStats {
            epoch,
            lr_last,
            train_loss,
            train_acc,
        });
    }

    let (val_loss, val_acc) = evaluate_set(&bundle, &val_set, cfg.label_smoothing)?;
    let (_, final_train_acc) = evaluate_set(&bundle, &train_set, cfg.label_smoothing)?;
    log(&format!(
        "final train_acc={final_train_acc:.2} val_loss={val_loss:.6} val_acc={val_acc:.2}"
    ));

    bundle.norm_stats = Some(stats);
    bundle.train_meta = Some(TrainMeta {
        split_seed: cfg.seed,
        train_frac: cfg.train_frac,
    });

    Ok(TrainOutcome {
        bundle,
        epochs: epoch_stats,
        final_train_acc,
        val_loss,
        val_acc,
        train_windows: n_train,
        val_windows: val_set.len(),
    })
}
