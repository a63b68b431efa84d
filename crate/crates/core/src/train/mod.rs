//! Two-stage training.
//!
//! Stage 1 jointly fine-tunes the encoder, embeddings, skipping gates, the
//! last classifier and the stage-1 projection head against
//! `CE(z_L, y) + lambda / (eps + sum_i G_i) + eta * ccl_1`. Stage 2 freezes
//! all of that and trains the intermediate classifiers plus the stage-2
//! projection head against `sum_i CE(z_i, y) + eta * ccl_2`, running the
//! forward with hard gate decisions so training matches inference.
//!
//! The `soft_then_hard` schedule warms gates up with their continuous
//! probabilities as mixing weights, then switches to thresholded decisions
//! routed through the straight-through estimator.

pub mod adamw;
pub mod checkpoint;

pub use adamw::{adamw_step, OptimizerState, ADAM_EPS, BETA1, BETA2};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use serde::{Deserialize, Serialize};

use crate::adaptive::{classifier_logits, gate_forward, soft_skip_mix};
use crate::contrastive::{ccl_loss_stage1, ccl_loss_stage2, CclConfig};
use crate::data::{Dataset, Sample};
use crate::encoder::{embed, encoder_layer_forward, Dropout, PadMask};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::rng::RngStream;
use crate::tensor::{concat_scalars, stack_rows, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Continuous gate probabilities as mixing weights for every epoch.
    Soft,
    /// Straight-through hard decisions from the first step.
    Hard,
    /// Soft warmup epochs, then hard.
    SoftThenHard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the skip-encouraging regularizer, in [0,1].
    pub lambda: f64,
    /// Weight of the cross-layer contrastive terms, in [0,1].
    pub eta: f64,
    pub learning_rate: f64,
    /// Stage-2 learning rate; falls back to `learning_rate` when absent.
    pub stage2_learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Epochs trained with soft gate mixing under `soft_then_hard`.
    pub soft_warmup_epochs: usize,
    pub seed: u64,
    pub gate_mode: GateMode,
    /// Floor of the regularizer denominator; the term is bounded by
    /// lambda / regularizer_epsilon when every gate closes.
    pub regularizer_epsilon: f64,
    /// Linear learning-rate warmup steps (0 disables).
    pub lr_warmup_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            eta: 0.1,
            learning_rate: 1e-3,
            stage2_learning_rate: None,
            weight_decay: 0.01,
            batch_size: 32,
            stage1_epochs: 5,
            stage2_epochs: 4,
            soft_warmup_epochs: 2,
            seed: 17,
            gate_mode: GateMode::SoftThenHard,
            regularizer_epsilon: 1e-6,
            lr_warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(
                "lambda and eta must lie in [0,1]".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if let Some(lr2) = self.stage2_learning_rate {
            if lr2 <= 0.0 {
                return Err(Error::InvalidConfig(
                    "stage2_learning_rate must be positive".into(),
                ));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.regularizer_epsilon <= 0.0 {
            return Err(Error::InvalidConfig(
                "regularizer_epsilon must be positive".into(),
            ));
        }
        if self.gate_mode == GateMode::SoftThenHard
            && self.soft_warmup_epochs > self.stage1_epochs
        {
            return Err(Error::InvalidConfig(
                "soft_warmup_epochs cannot exceed stage1_epochs".into(),
            ));
        }
        Ok(())
    }

    /// Whether the given stage-1 epoch mixes with hard gate decisions.
    pub fn hard_gates_at_epoch(&self, epoch: usize) -> bool {
        match self.gate_mode {
            GateMode::Soft => false,
            GateMode::Hard => true,
            GateMode::SoftThenHard => epoch >= self.soft_warmup_epochs,
        }
    }

    pub fn stage2_lr(&self) -> f64 {
        self.stage2_learning_rate.unwrap_or(self.learning_rate)
    }
}

/// Per-term loss diagnostics for one batch.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub reg: f64,
    pub ccl: f64,
}

/// Training-mode forward of one sample through the gated stack. Every layer
/// is computed and mixed per the gated residual; nothing is skipped.
struct GatedForward {
    /// X^1..X^L after mixing.
    layer_outputs: Vec<Value>,
    /// Gate values used in the mix (soft probability or straight-through).
    gate_values: Vec<Value>,
    /// Soft probabilities, for diagnostics.
    gate_probs: Vec<f64>,
    mask: PadMask,
}

fn gated_forward(
    params: &ModelParams,
    ids: &[usize],
    hard: bool,
    drop: &mut Option<Dropout<'_>>,
) -> Result<GatedForward> {
    let cfg = &params.config;
    let (mut x, mask) = embed(cfg, &params.embedding, ids, drop.as_mut())?;
    let mut layer_outputs = Vec::with_capacity(cfg.num_layers);
    let mut gate_values = Vec::with_capacity(cfg.num_layers);
    let mut gate_probs = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let g_soft = gate_forward(cfg, &params.gates[i], &x, &mask)?;
        gate_probs.push(g_soft.item());
        let g_used = if hard {
            g_soft.straight_through_threshold()
        } else {
            g_soft
        };
        let layer_out = encoder_layer_forward(cfg, &params.layers[i], &x, &mask, drop.as_mut())?;
        x = soft_skip_mix(&x, &layer_out, &g_used)?;
        layer_outputs.push(x.clone());
        gate_values.push(g_used);
    }
    Ok(GatedForward {
        layer_outputs,
        gate_values,
        gate_probs,
        mask,
    })
}

/// Stage-1 objective over a batch. Returns the loss node, per-term values
/// and the per-layer mean soft gate probabilities.
pub fn stage1_loss(
    params: &ModelParams,
    batch: &[Sample],
    ccl_cfg: &CclConfig,
    cfg: &TrainConfig,
    hard: bool,
    mut drop: Option<Dropout<'_>>,
) -> Result<(Value, LossParts, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let l = params.config.num_layers;
    let last = params.last_classifier();
    let mut logit_rows = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    let mut all_gates: Vec<Value> = Vec::with_capacity(batch.len() * l);
    let mut gate_prob_sums = vec![0.0; l];
    let mut ccl_terms = Vec::with_capacity(batch.len());
    for sample in batch {
        let fwd = gated_forward(params, &sample.ids, hard, &mut drop)?;
        let (logits, _) = classifier_logits(
            &params.config,
            &params.classifiers[last],
            &fwd.layer_outputs[l - 1],
            &fwd.mask,
        )?;
        logit_rows.push(logits);
        labels.push(sample.label);
        for (i, p) in fwd.gate_probs.iter().enumerate() {
            gate_prob_sums[i] += p;
        }
        all_gates.extend(fwd.gate_values.iter().cloned());
        if cfg.eta > 0.0 {
            ccl_terms.push(ccl_loss_stage1(
                &fwd.layer_outputs,
                &fwd.mask,
                &params.proj_stage1,
                ccl_cfg,
            )?);
        }
    }
    let ce = stack_rows(&logit_rows)?.cross_entropy(&labels)?;
    let mut loss = ce.clone();
    let mut parts = LossParts {
        ce: ce.item(),
        ..Default::default()
    };
    if cfg.lambda > 0.0 {
        // lambda / (eps + sum over layers of batch-mean gate value).
        let gate_sum = concat_scalars(&all_gates)?
            .sum()
            .scale(1.0 / batch.len() as f64);
        let reg = gate_sum
            .add_scalar(cfg.regularizer_epsilon)
            .recip()
            .scale(cfg.lambda);
        parts.reg = reg.item();
        loss = loss.add(&reg)?;
    }
    if cfg.eta > 0.0 {
        let ccl = concat_scalars(&ccl_terms)?.mean().scale(cfg.eta);
        parts.ccl = ccl.item();
        loss = loss.add(&ccl)?;
    }
    parts.total = loss.item();
    let gate_means = gate_prob_sums
        .iter()
        .map(|s| s / batch.len() as f64)
        .collect();
    Ok((loss, parts, gate_means))
}

/// Inference-consistent stream for stage 2 and evaluation: hard decisions,
/// skipped layers are genuinely not computed, and every X^i is detached so
/// no gradient can reach the frozen stage-1 parameters.
pub fn hard_stream(params: &ModelParams, ids: &[usize]) -> Result<(Vec<Value>, PadMask)> {
    let cfg = &params.config;
    let (x0, mask) = embed(cfg, &params.embedding, ids, None)?;
    let mut x = x0.detach();
    let mut outputs = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let p = gate_forward(cfg, &params.gates[i], &x, &mask)?.item();
        if p < 0.5 {
            x = encoder_layer_forward(cfg, &params.layers[i], &x, &mask, None)?.detach();
        }
        outputs.push(x.clone());
    }
    Ok((outputs, mask))
}

/// Stage-2 objective over a batch: intermediate-classifier cross entropies
/// plus the stage-2 contrastive term over the classifiers' attention
/// hiddens.
pub fn stage2_loss(
    params: &ModelParams,
    batch: &[Sample],
    ccl_cfg: &CclConfig,
    cfg: &TrainConfig,
) -> Result<(Value, LossParts)> {
    if batch.is_empty() {
        return Err(Error::Train("empty batch".into()));
    }
    let l = params.config.num_layers;
    let mut labels = Vec::with_capacity(batch.len());
    let mut logit_rows: Vec<Vec<Value>> = vec![Vec::with_capacity(batch.len()); l - 1];
    let mut ccl_terms = Vec::with_capacity(batch.len());
    for sample in batch {
        let (xs, mask) = hard_stream(params, &sample.ids)?;
        labels.push(sample.label);
        let mut hiddens = Vec::with_capacity(l);
        for i in 0..l {
            let (logits, h) =
                classifier_logits(&params.config, &params.classifiers[i], &xs[i], &mask)?;
            if i < l - 1 {
                logit_rows[i].push(logits);
            }
            hiddens.push(h);
        }
        if cfg.eta > 0.0 {
            ccl_terms.push(ccl_loss_stage2(
                &hiddens,
                &mask,
                &params.proj_stage2,
                ccl_cfg,
            )?);
        }
    }
    let mut parts = LossParts::default();
    let mut loss: Option<Value> = None;
    for rows in logit_rows {
        let ce = stack_rows(&rows)?.cross_entropy(&labels)?;
        parts.ce += ce.item();
        loss = Some(match loss {
            None => ce,
            Some(acc) => acc.add(&ce)?,
        });
    }
    let mut loss = loss.expect("at least one intermediate classifier");
    if cfg.eta > 0.0 {
        let ccl = concat_scalars(&ccl_terms)?.mean().scale(cfg.eta);
        parts.ccl = ccl.item();
        loss = loss.add(&ccl)?;
    }
    parts.total = loss.item();
    Ok((loss, parts))
}

/// Accuracy of the last classifier over the hard-gated stream (no exits).
pub fn eval_last_classifier_accuracy(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Train("empty evaluation dataset".into()));
    }
    let l = params.config.num_layers;
    let mut correct = 0usize;
    for s in &ds.samples {
        let (xs, mask) = hard_stream(params, &s.ids)?;
        let (logits, _) = classifier_logits(
            &params.config,
            &params.classifiers[l - 1],
            &xs[l - 1],
            &mask,
        )?;
        if argmax(&logits.to_vec()) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Mean accuracy of the intermediate classifiers over the hard-gated stream.
pub fn eval_intermediate_accuracy(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Train("empty evaluation dataset".into()));
    }
    let l = params.config.num_layers;
    let mut correct = 0usize;
    for s in &ds.samples {
        let (xs, mask) = hard_stream(params, &s.ids)?;
        for i in 0..l - 1 {
            let (logits, _) =
                classifier_logits(&params.config, &params.classifiers[i], &xs[i], &mask)?;
            if argmax(&logits.to_vec()) == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (ds.len() * (l - 1)) as f64)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// One epoch row of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub gate_mode: String,
    pub mean_loss: f64,
    pub mean_ce: f64,
    pub mean_reg: f64,
    pub mean_ccl: f64,
    pub val_accuracy: f64,
    /// Per-layer mean soft gate probabilities over the epoch.
    pub gate_means: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Stream position of the RNG when training finished.
    pub rng_word_pos: u128,
    pub optimizer: OptimizerState,
}

fn batches(samples: &[Sample], order: &[usize], batch_size: usize) -> Vec<Vec<Sample>> {
    order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| samples[i].clone()).collect())
        .collect()
}

fn lr_at(cfg: &TrainConfig, base: f64, step: u64) -> f64 {
    if cfg.lr_warmup_steps == 0 {
        return base;
    }
    let warm = cfg.lr_warmup_steps as f64;
    (base * ((step as f64 + 1.0) / warm)).min(base)
}

/// Stage-1 training. Mutates `params` in place, leaving them at the best
/// validation epoch, and returns the per-epoch log.
pub fn train_stage1(
    params: &ModelParams,
    train: &Dataset,
    val: &Dataset,
    ccl_cfg: &CclConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Train("stage 1: empty training dataset".into()));
    }
    params.set_trainable(&params.stage1_trainable_names());
    let trainables: Vec<(String, Value)> = {
        let names: std::collections::HashSet<String> =
            params.stage1_trainable_names().into_iter().collect();
        params
            .named_params()
            .into_iter()
            .filter(|(n, _)| names.contains(n))
            .collect()
    };
    let root = RngStream::new(cfg.seed);
    let mut drop_rng = root.fork(7001);
    let mut state = OptimizerState::new();
    let mut records = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_snap = params.snapshot();
    let mut global_step: u64 = 0;

    for epoch in 0..cfg.stage1_epochs {
        let hard = cfg.hard_gates_at_epoch(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.fork(8000 + epoch as u64).shuffle(&mut order);
        let mut sums = LossParts::default();
        let mut gate_sums = vec![0.0; params.config.num_layers];
        let batch_list = batches(&train.samples, &order, cfg.batch_size);
        let n_batches = batch_list.len() as f64;
        for (step, batch) in batch_list.iter().enumerate() {
            params.zero_grads();
            let drop = if params.config.dropout_rate > 0.0 {
                Some(Dropout {
                    rate: params.config.dropout_rate,
                    rng: &mut drop_rng,
                })
            } else {
                None
            };
            let (loss, parts, gate_means) =
                stage1_loss(params, batch, ccl_cfg, cfg, hard, drop)?;
            if !parts.total.is_finite() {
                return Err(Error::Train(format!(
                    "stage 1 loss is not finite at epoch {epoch} step {step}"
                )));
            }
            loss.backward()?;
            adamw_step(
                &trainables,
                &mut state,
                lr_at(cfg, cfg.learning_rate, global_step),
                (BETA1, BETA2),
                ADAM_EPS,
                cfg.weight_decay,
            )?;
            global_step += 1;
            sums.total += parts.total;
            sums.ce += parts.ce;
            sums.reg += parts.reg;
            sums.ccl += parts.ccl;
            for (a, g) in gate_sums.iter_mut().zip(&gate_means) {
                *a += g;
            }
        }
        let val_accuracy = eval_last_classifier_accuracy(params, val)?;
        records.push(EpochRecord {
            stage: 1,
            epoch,
            gate_mode: if hard { "hard".into() } else { "soft".into() },
            mean_loss: sums.total / n_batches,
            mean_ce: sums.ce / n_batches,
            mean_reg: sums.reg / n_batches,
            mean_ccl: sums.ccl / n_batches,
            val_accuracy,
            gate_means: gate_sums.iter().map(|s| s / n_batches).collect(),
        });
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_epoch = epoch;
            best_snap = params.snapshot();
        }
    }
    params.restore(&best_snap);
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_val_accuracy: best_acc,
        rng_word_pos: drop_rng.word_pos(),
        optimizer: state,
    })
}

/// Plain fine-tune of the backbone plus last classifier with gates bypassed
/// entirely (every layer always executes, no mixing, no gate evaluation).
/// This is the reference model for cost-ratio comparisons.
pub fn train_vanilla(
    params: &ModelParams,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Train("vanilla: empty training dataset".into()));
    }
    let names: Vec<String> = params
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| {
            n.starts_with("embedding.")
                || n.starts_with("encoder.")
                || n.starts_with(&format!("classifier.{}.", params.last_classifier()))
        })
        .collect();
    params.set_trainable(&names);
    let trainables: Vec<(String, Value)> = {
        let set: std::collections::HashSet<&str> = names.iter().map(String::as_str).collect();
        params
            .named_params()
            .into_iter()
            .filter(|(n, _)| set.contains(n.as_str()))
            .collect()
    };
    let root = RngStream::new(cfg.seed);
    let mut drop_rng = root.fork(7001);
    let mut state = OptimizerState::new();
    let mut records = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_snap = params.snapshot();
    let mut global_step: u64 = 0;
    let last = params.last_classifier();
    for epoch in 0..cfg.stage1_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.fork(8000 + epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let batch_list = batches(&train.samples, &order, cfg.batch_size);
        let n_batches = batch_list.len() as f64;
        for (step, batch) in batch_list.iter().enumerate() {
            params.zero_grads();
            let mut rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for sample in batch {
                let mut drop = if params.config.dropout_rate > 0.0 {
                    Some(Dropout {
                        rate: params.config.dropout_rate,
                        rng: &mut drop_rng,
                    })
                } else {
                    None
                };
                let (mut x, mask) =
                    embed(&params.config, &params.embedding, &sample.ids, drop.as_mut())?;
                for layer in &params.layers {
                    x = encoder_layer_forward(&params.config, layer, &x, &mask, drop.as_mut())?;
                }
                let (logits, _) =
                    classifier_logits(&params.config, &params.classifiers[last], &x, &mask)?;
                rows.push(logits);
                labels.push(sample.label);
            }
            let loss = stack_rows(&rows)?.cross_entropy(&labels)?;
            let total = loss.item();
            if !total.is_finite() {
                return Err(Error::Train(format!(
                    "vanilla loss is not finite at epoch {epoch} step {step}"
                )));
            }
            loss.backward()?;
            adamw_step(
                &trainables,
                &mut state,
                lr_at(cfg, cfg.learning_rate, global_step),
                (BETA1, BETA2),
                ADAM_EPS,
                cfg.weight_decay,
            )?;
            global_step += 1;
            loss_sum += total;
        }
        let val_accuracy = eval_vanilla_accuracy(params, val)?;
        records.push(EpochRecord {
            stage: 0,
            epoch,
            gate_mode: "off".into(),
            mean_loss: loss_sum / n_batches,
            mean_ce: loss_sum / n_batches,
            mean_reg: 0.0,
            mean_ccl: 0.0,
            val_accuracy,
            gate_means: Vec::new(),
        });
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_epoch = epoch;
            best_snap = params.snapshot();
        }
    }
    params.restore(&best_snap);
    Ok(TrainOutcome {
        records,
        best_epoch,
        best_val_accuracy: best_acc,
        rng_word_pos: drop_rng.word_pos(),
        optimizer: state,
    })
}

/// Accuracy of the last classifier over the plain (ungated) stack.
pub fn eval_vanilla_accuracy(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Train("empty evaluation dataset".into()));
    }
    let last = params.last_classifier();
    let mut correct = 0usize;
    for s in &ds.samples {
        let (mut x, mask) = embed(&params.config, &params.embedding, &s.ids, None)?;
        for layer in &params.layers {
            x = encoder_layer_forward(&params.config, layer, &x, &mask, None)?;
        }
        let (logits, _) =
            classifier_logits(&params.config, &params.classifiers[last], &x, &mask)?;
        if argmax(&logits.to_vec()) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Stage-2 training. Only intermediate classifiers and the stage-2
/// projection head change; every stage-1 parameter stays bit-identical.
pub fn train_stage2(
    params: &ModelParams,
    train: &Dataset,
    val: &Dataset,
    ccl_cfg: &CclConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Train("stage 2: empty training dataset".into()));
    }
    params.set_trainable(&params.stage2_trainable_names());
    let trainables: Vec<(String, Value)> = {
        let names: std::collections::HashSet<String> =
            params.stage2_trainable_names().into_iter().collect();
        params
            .named_params()
            .into_iter()
            .filter(|(n, _)| names.contains(n))
            .collect()
    };
    let root = RngStream::new(cfg.seed);
    let mut state = OptimizerState::new();
    let mut records = Vec::new();
    let mut global_step: u64 = 0;
    for epoch in 0..cfg.stage2_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.fork(9000 + epoch as u64).shuffle(&mut order);
        let mut sums = LossParts::default();
        let batch_list = batches(&train.samples, &order, cfg.batch_size);
        let n_batches = batch_list.len() as f64;
        for (step, batch) in batch_list.iter().enumerate() {
            params.zero_grads();
            let (loss, parts) = stage2_loss(params, batch, ccl_cfg, cfg)?;
            if !parts.total.is_finite() {
                return Err(Error::Train(format!(
                    "stage 2 loss is not finite at epoch {epoch} step {step}"
                )));
            }
            loss.backward()?;
            adamw_step(
                &trainables,
                &mut state,
                lr_at(cfg, cfg.stage2_lr(), global_step),
                (BETA1, BETA2),
                ADAM_EPS,
                cfg.weight_decay,
            )?;
            global_step += 1;
            sums.total += parts.total;
            sums.ce += parts.ce;
            sums.ccl += parts.ccl;
        }
        let val_accuracy = eval_intermediate_accuracy(params, val)?;
        records.push(EpochRecord {
            stage: 2,
            epoch,
            gate_mode: "hard".into(),
            mean_loss: sums.total / n_batches,
            mean_ce: sums.ce / n_batches,
            mean_reg: 0.0,
            mean_ccl: sums.ccl / n_batches,
            val_accuracy,
            gate_means: Vec::new(),
        });
    }
    let last_acc = records.last().map(|r| r.val_accuracy).unwrap_or(0.0);
    Ok(TrainOutcome {
        records,
        best_epoch: cfg.stage2_epochs.saturating_sub(1),
        best_val_accuracy: last_acc,
        rng_word_pos: 0,
        optimizer: state,
    })
}
