//! Adaptive inference: skipping takes priority over exiting.
//!
//! Per layer, the gate decides first; a skipped layer is carried forward
//! unchanged and (except at the last layer) its classifier never runs. An
//! executed layer is followed by its classifier, and inference returns early
//! when the normalized entropy of the class distribution falls below the
//! threshold. When the loop ends without an early exit, the prediction comes
//! from the last classifier evaluated on whatever representation survived,
//! including the all-skip case where that is the embedding itself.

use serde::{Deserialize, Serialize};

use crate::adaptive::{classifier_forward, gate_forward, normalized_entropy, GateDecision};
use crate::data::Dataset;
use crate::encoder::{embed, encoder_layer_forward};
use crate::error::{Error, Result};
use crate::flops::{ExecutedOp, FlopsConvention, FlopsLedger};
use crate::params::ModelParams;
use crate::train::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Gates and entropy exits both active.
    Full,
    /// Gates active, exits disabled; classification only at the end.
    SkipOnly,
    /// Gates bypassed (never evaluated, never counted); exits active.
    ExitOnly,
    /// Plain full forward with a single final classification.
    NoGatesNoExit,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "skip_only" => Ok(AblationMode::SkipOnly),
            "exit_only" => Ok(AblationMode::ExitOnly),
            "no_gates_no_exit" => Ok(AblationMode::NoGatesNoExit),
            other => Err(Error::InvalidArgument {
                op: "ablation mode",
                msg: format!("unknown mode '{other}'"),
            }),
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AblationMode::Full => "full",
            AblationMode::SkipOnly => "skip_only",
            AblationMode::ExitOnly => "exit_only",
            AblationMode::NoGatesNoExit => "no_gates_no_exit",
        };
        f.write_str(s)
    }
}

/// Test-only overrides of the gate decision; the gate network still runs
/// (and is still paid for) in either forced mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatePolicy {
    #[default]
    Learned,
    ForceSkip,
    ForceExecute,
}

/// Full record of one sample's pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub gate_decisions: Vec<GateDecision>,
    /// 1-based layer the prediction came from; L when no early exit fired.
    pub exit_layer: usize,
    pub early_exit: bool,
    /// (layer, normalized entropy) wherever a classifier ran.
    pub entropies: Vec<(usize, f64)>,
    pub predicted: usize,
    pub executed: Vec<ExecutedOp>,
    /// Total cost of `executed` in the ledger convention used at build time.
    pub flops: u64,
}

/// Options for a single adaptive pass.
#[derive(Debug, Clone, Copy)]
pub struct InferOptions {
    pub threshold: f64,
    pub mode: AblationMode,
    pub gate_policy: GatePolicy,
    pub convention: FlopsConvention,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            threshold: 0.3,
            mode: AblationMode::Full,
            gate_policy: GatePolicy::Learned,
            convention: FlopsConvention::TwoFlopsPerMac,
        }
    }
}

impl InferOptions {
    pub fn validate(&self) -> Result<()> {
        if self.threshold < 0.0 {
            return Err(Error::InvalidArgument {
                op: "infer",
                msg: format!("threshold must be >= 0, got {}", self.threshold),
            });
        }
        Ok(())
    }
}

/// Adaptive inference for one sample.
pub fn infer_sample(
    params: &ModelParams,
    ids: &[usize],
    opts: &InferOptions,
) -> Result<(usize, InferenceTrace)> {
    opts.validate()?;
    let cfg = &params.config;
    let l = cfg.num_layers;
    let ledger = FlopsLedger::new(cfg, opts.convention);
    let gates_active = matches!(opts.mode, AblationMode::Full | AblationMode::SkipOnly);
    let exits_active = matches!(opts.mode, AblationMode::Full | AblationMode::ExitOnly);

    let (x0, mask) = embed(cfg, &params.embedding, ids, None)?;
    let mut x = x0;
    let mut executed = vec![ExecutedOp::Embedding];
    let mut decisions = Vec::new();
    let mut entropies = Vec::new();
    let mut outcome: Option<(usize, usize, bool)> = None; // (pred, layer, early)

    for layer in 1..=l {
        let skip = if gates_active {
            executed.push(ExecutedOp::Gate(layer));
            let p = gate_forward(cfg, &params.gates[layer - 1], &x, &mask)?.item();
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gate {layer} output"),
                });
            }
            let mut d = GateDecision::from_prob(layer, p);
            match opts.gate_policy {
                GatePolicy::Learned => {}
                GatePolicy::ForceSkip => d.skip = true,
                GatePolicy::ForceExecute => d.skip = false,
            }
            decisions.push(d);
            d.skip
        } else {
            false
        };

        if skip {
            // Representation passes through unchanged; no classifier except
            // the mandatory final classification at layer L.
            if layer != l {
                continue;
            }
        } else {
            executed.push(ExecutedOp::EncoderLayer(layer));
            x = encoder_layer_forward(cfg, &params.layers[layer - 1], &x, &mask, None)?;
        }

        let classify_here = layer == l || (!skip && exits_active);
        if opts.mode == AblationMode::SkipOnly && layer != l {
            continue;
        }
        if opts.mode == AblationMode::NoGatesNoExit && layer != l {
            continue;
        }
        if !classify_here {
            continue;
        }
        executed.push(ExecutedOp::Classifier(layer));
        let (z, _) = classifier_forward(cfg, &params.classifiers[layer - 1], &x, &mask)?;
        let dist = z.to_vec();
        if dist.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("classifier {layer} distribution"),
            });
        }
        let entropy = normalized_entropy(&dist)?;
        entropies.push((layer, entropy));
        let pred = argmax(&dist);
        if exits_active && entropy < opts.threshold {
            outcome = Some((pred, layer, layer != l));
            break;
        }
        if layer == l {
            outcome = Some((pred, l, false));
        }
    }

    let (predicted, exit_layer, early_exit) =
        outcome.expect("layer L always produces a classification");
    let flops = ledger.total(&executed);
    Ok((
        predicted,
        InferenceTrace {
            gate_decisions: decisions,
            exit_layer,
            early_exit,
            entropies,
            predicted,
            executed,
            flops,
        },
    ))
}

/// Plain stacked forward (no gates, no exits) returning the last
/// classifier's argmax. Reference path for equivalence checks.
pub fn vanilla_forward(params: &ModelParams, ids: &[usize]) -> Result<usize> {
    let cfg = &params.config;
    let (mut x, mask) = embed(cfg, &params.embedding, ids, None)?;
    for layer in &params.layers {
        x = encoder_layer_forward(cfg, layer, &x, &mask, None)?;
    }
    let (z, _) = classifier_forward(
        cfg,
        &params.classifiers[cfg.num_layers - 1],
        &x,
        &mask,
    )?;
    Ok(argmax(&z.to_vec()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MacroF1,
    Mcc,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "macro_f1" => Ok(Metric::MacroF1),
            "mcc" => Ok(Metric::Mcc),
            other => Err(Error::InvalidArgument {
                op: "metric",
                msg: format!("unknown metric '{other}'"),
            }),
        }
    }
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MacroF1 => "macro_f1",
            Metric::Mcc => "mcc",
        }
    }

    pub fn compute(&self, preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
        match self {
            Metric::Accuracy => {
                let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
                hits as f64 / preds.len() as f64
            }
            Metric::MacroF1 => {
                let mut f1_sum = 0.0;
                for c in 0..num_classes {
                    let tp = preds
                        .iter()
                        .zip(labels)
                        .filter(|(p, l)| **p == c && **l == c)
                        .count() as f64;
                    let fp = preds
                        .iter()
                        .zip(labels)
                        .filter(|(p, l)| **p == c && **l != c)
                        .count() as f64;
                    let fnn = preds
                        .iter()
                        .zip(labels)
                        .filter(|(p, l)| **p != c && **l == c)
                        .count() as f64;
                    let denom = 2.0 * tp + fp + fnn;
                    f1_sum += if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
                }
                f1_sum / num_classes as f64
            }
            Metric::Mcc => {
                // Multiclass MCC from the confusion matrix.
                let k = num_classes;
                let mut cm = vec![0f64; k * k];
                for (&p, &l) in preds.iter().zip(labels) {
                    cm[l * k + p] += 1.0;
                }
                let n: f64 = cm.iter().sum();
                let trace: f64 = (0..k).map(|i| cm[i * k + i]).sum();
                let row: Vec<f64> = (0..k).map(|i| (0..k).map(|j| cm[i * k + j]).sum()).collect();
                let col: Vec<f64> = (0..k).map(|j| (0..k).map(|i| cm[i * k + j]).sum()).collect();
                let sum_rc: f64 = (0..k).map(|i| row[i] * col[i]).sum();
                let sum_rr: f64 = row.iter().map(|r| r * r).sum();
                let sum_cc: f64 = col.iter().map(|c| c * c).sum();
                let denom = ((n * n - sum_rr) * (n * n - sum_cc)).sqrt();
                if denom == 0.0 {
                    0.0
                } else {
                    (n * trace - sum_rc) / denom
                }
            }
        }
    }
}

/// Per-layer skip/exit counts over a dataset pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub threshold_milli: u64,
    /// Count of samples whose gate skipped each layer (1-based index - 1).
    pub skips: Vec<u64>,
    /// Count of samples that exited early at each layer.
    pub exits: Vec<u64>,
    /// Samples that reached the final classifier without an early exit.
    pub fallthrough: u64,
    pub total: u64,
}

/// One threshold's aggregate over a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub s: f64,
    pub mode: String,
    pub metric_name: String,
    pub metric_value: f64,
    pub mean_flops: f64,
    pub cost_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequencies: Option<FrequencyReport>,
}

/// Run every sample of `ds` at each threshold. Traces for the final
/// threshold in the list can be captured via `sweep_with_traces`.
pub fn sweep_thresholds(
    params: &ModelParams,
    ds: &Dataset,
    thresholds: &[f64],
    mode: AblationMode,
    metric: Metric,
    convention: FlopsConvention,
) -> Result<Vec<SweepResult>> {
    if ds.is_empty() {
        return Err(Error::Data("sweep over an empty dataset".into()));
    }
    params.validate_finite()?;
    let ledger = FlopsLedger::new(&params.config, convention);
    let denom = ledger.vanilla_full() as f64;
    let mut out = Vec::with_capacity(thresholds.len());
    for &s in thresholds {
        let mut preds = Vec::with_capacity(ds.len());
        let mut total_flops = 0u64;
        let mut freq = FrequencyReport {
            threshold_milli: (s * 1000.0).round() as u64,
            skips: vec![0; params.config.num_layers],
            exits: vec![0; params.config.num_layers],
            fallthrough: 0,
            total: ds.len() as u64,
        };
        let opts = InferOptions {
            threshold: s,
            mode,
            gate_policy: GatePolicy::Learned,
            convention,
        };
        for sample in &ds.samples {
            let (pred, trace) = infer_sample(params, &sample.ids, &opts)?;
            preds.push(pred);
            total_flops += trace.flops;
            for d in &trace.gate_decisions {
                if d.skip {
                    freq.skips[d.layer - 1] += 1;
                }
            }
            if trace.early_exit {
                freq.exits[trace.exit_layer - 1] += 1;
            } else {
                freq.fallthrough += 1;
            }
        }
        let mean_flops = total_flops as f64 / ds.len() as f64;
        out.push(SweepResult {
            s,
            mode: mode.to_string(),
            metric_name: metric.name().to_string(),
            metric_value: metric.compute(&preds, &ds.labels(), ds.num_classes),
            mean_flops,
            cost_ratio: mean_flops / denom,
            frequencies: Some(freq),
        });
    }
    Ok(out)
}

/// Skip/exit histograms for a single threshold.
pub fn skip_exit_frequencies(
    params: &ModelParams,
    ds: &Dataset,
    s: f64,
    mode: AblationMode,
) -> Result<FrequencyReport> {
    let results = sweep_thresholds(
        params,
        ds,
        &[s],
        mode,
        Metric::Accuracy,
        FlopsConvention::TwoFlopsPerMac,
    )?;
    Ok(results.into_iter().next().unwrap().frequencies.unwrap())
}

/// Mean cosine similarity of the same token's representation in consecutive
/// layers of the plain (ungated) stack; [CLS] tracked separately from the
/// other real tokens.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairSimilarity {
    /// 0-based index i for the pair (layer i, layer i+1); layer 0 is the
    /// embedding output.
    pub lower_layer: usize,
    pub mean_token_similarity: f64,
    pub mean_cls_similarity: f64,
}

pub fn layer_similarity_diagnostic(
    params: &ModelParams,
    ds: &Dataset,
) -> Result<Vec<PairSimilarity>> {
    if ds.is_empty() {
        return Err(Error::Data("similarity diagnostic over empty dataset".into()));
    }
    let cfg = &params.config;
    let l = cfg.num_layers;
    let d = cfg.hidden_dim;
    let mut token_sums = vec![0.0; l];
    let mut token_counts = vec![0u64; l];
    let mut cls_sums = vec![0.0; l];
    let mut cls_counts = vec![0u64; l];
    for sample in &ds.samples {
        let (mut x, mask) = embed(cfg, &params.embedding, &sample.ids, None)?;
        let mut reps: Vec<Vec<f64>> = vec![x.to_vec()];
        for layer in &params.layers {
            x = encoder_layer_forward(cfg, layer, &x, &mask, None)?;
            reps.push(x.to_vec());
        }
        let real = mask.real_indices();
        for pair in 0..l {
            let (a, b) = (&reps[pair], &reps[pair + 1]);
            for &m in &real {
                let u = &a[m * d..(m + 1) * d];
                let v = &b[m * d..(m + 1) * d];
                let sim = cosine(u, v);
                if m == 0 {
                    cls_sums[pair] += sim;
                    cls_counts[pair] += 1;
                } else {
                    token_sums[pair] += sim;
                    token_counts[pair] += 1;
                }
            }
        }
    }
    Ok((0..l)
        .map(|pair| PairSimilarity {
            lower_layer: pair,
            mean_token_similarity: if token_counts[pair] > 0 {
                token_sums[pair] / token_counts[pair] as f64
            } else {
                0.0
            },
            mean_cls_similarity: if cls_counts[pair] > 0 {
                cls_sums[pair] / cls_counts[pair] as f64
            } else {
                0.0
            },
        })
        .collect())
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        return 0.0;
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    dot / (nu * nv)
}

/// One ablation pass at a single threshold.
pub fn ablation_run(
    params: &ModelParams,
    ds: &Dataset,
    mode: AblationMode,
    s: f64,
    metric: Metric,
    convention: FlopsConvention,
) -> Result<SweepResult> {
    let mut results = sweep_thresholds(params, ds, &[s], mode, metric, convention)?;
    Ok(results.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::CLS_ID;
    use crate::rng::RngStream;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq_len: 6,
            num_classes: 2,
            classifier_inner_dim: 4,
            gate_inner_dim: 4,
            dropout_rate: 0.0,
        }
    }

    fn random_ids(rng: &mut RngStream, cfg: &ModelConfig) -> Vec<usize> {
        let len = 2 + rng.below(cfg.max_seq_len - 2);
        let mut ids = vec![CLS_ID];
        for _ in 0..len {
            ids.push(4 + rng.below(cfg.vocab_size - 4));
        }
        ids
    }

    /// Random-weight model with gate heads nudged off 0.5 so decisions vary.
    fn model_with_varied_gates(seed: u64) -> ModelParams {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 4, seed).unwrap();
        let mut rng = RngStream::new(seed ^ 0xabcd);
        for g in &p.gates {
            let w: Vec<f64> = (0..g.head_w.numel()).map(|_| rng.normal(0.0, 2.0)).collect();
            g.head_w.set_data(&w);
        }
        p
    }

    #[test]
    fn forced_execute_with_zero_threshold_matches_vanilla() {
        let p = model_with_varied_gates(3);
        let mut rng = RngStream::new(11);
        let opts = InferOptions {
            threshold: 0.0,
            mode: AblationMode::Full,
            gate_policy: GatePolicy::ForceExecute,
            convention: FlopsConvention::TwoFlopsPerMac,
        };
        for _ in 0..100 {
            let ids = random_ids(&mut rng, &p.config);
            let (pred, trace) = infer_sample(&p, &ids, &opts).unwrap();
            assert_eq!(pred, vanilla_forward(&p, &ids).unwrap());
            assert_eq!(trace.exit_layer, p.config.num_layers);
            assert!(!trace.early_exit);
        }
    }

    #[test]
    fn all_skip_trace_is_embedding_gates_one_classifier() {
        let p = model_with_varied_gates(5);
        let opts = InferOptions {
            threshold: 0.3,
            mode: AblationMode::Full,
            gate_policy: GatePolicy::ForceSkip,
            convention: FlopsConvention::TwoFlopsPerMac,
        };
        let ids = vec![CLS_ID, 5, 6, 7];
        let (_, trace) = infer_sample(&p, &ids, &opts).unwrap();
        let l = p.config.num_layers;
        let mut expect = vec![ExecutedOp::Embedding];
        for i in 1..=l {
            expect.push(ExecutedOp::Gate(i));
        }
        expect.push(ExecutedOp::Classifier(l));
        assert_eq!(trace.executed, expect);
        assert_eq!(trace.exit_layer, l);
        // z_L was computed on X^0; entropy recorded only at layer L.
        assert_eq!(trace.entropies.len(), 1);
        assert_eq!(trace.entropies[0].0, l);
    }

    #[test]
    fn generous_threshold_exits_at_first_executed_layer() {
        let p = model_with_varied_gates(7);
        let opts = InferOptions {
            threshold: 1.5,
            mode: AblationMode::Full,
            gate_policy: GatePolicy::ForceExecute,
            convention: FlopsConvention::TwoFlopsPerMac,
        };
        let ids = vec![CLS_ID, 4, 9, 10, 11];
        let (_, trace) = infer_sample(&p, &ids, &opts).unwrap();
        assert_eq!(trace.exit_layer, 1);
        assert!(trace.early_exit);
    }

    #[test]
    fn skip_priority_no_classifier_on_skipped_layers() {
        let p = model_with_varied_gates(9);
        let mut rng = RngStream::new(13);
        let opts = InferOptions::default();
        for _ in 0..50 {
            let ids = random_ids(&mut rng, &p.config);
            let (_, trace) = infer_sample(&p, &ids, &opts).unwrap();
            let l = p.config.num_layers;
            for d in &trace.gate_decisions {
                if d.skip && d.layer != l {
                    assert!(
                        !trace
                            .executed
                            .contains(&ExecutedOp::Classifier(d.layer)),
                        "classifier ran on skipped layer {}",
                        d.layer
                    );
                    assert!(
                        !trace
                            .executed
                            .contains(&ExecutedOp::EncoderLayer(d.layer)),
                        "encoder layer ran despite skip at {}",
                        d.layer
                    );
                }
            }
        }
    }

    #[test]
    fn trace_flops_recompute_from_ops() {
        let p = model_with_varied_gates(21);
        let mut rng = RngStream::new(17);
        let ledger = FlopsLedger::new(&p.config, FlopsConvention::TwoFlopsPerMac);
        let opts = InferOptions::default();
        for _ in 0..30 {
            let ids = random_ids(&mut rng, &p.config);
            let (_, trace) = infer_sample(&p, &ids, &opts).unwrap();
            assert_eq!(trace.flops, ledger.total(&trace.executed));
        }
    }

    #[test]
    fn exit_only_with_zero_threshold_equals_vanilla_predictions() {
        let p = model_with_varied_gates(23);
        let mut rng = RngStream::new(19);
        let opts = InferOptions {
            threshold: 0.0,
            mode: AblationMode::ExitOnly,
            gate_policy: GatePolicy::Learned,
            convention: FlopsConvention::TwoFlopsPerMac,
        };
        for _ in 0..50 {
            let ids = random_ids(&mut rng, &p.config);
            let (pred, trace) = infer_sample(&p, &ids, &opts).unwrap();
            assert_eq!(pred, vanilla_forward(&p, &ids).unwrap());
            assert!(trace.gate_decisions.is_empty());
            assert!(!trace.executed.iter().any(|o| matches!(o, ExecutedOp::Gate(_))));
        }
    }

    #[test]
    fn skip_only_never_costs_more_than_vanilla_plus_plugins_bound() {
        let p = model_with_varied_gates(29);
        let mut rng = RngStream::new(23);
        let vanilla = InferOptions {
            threshold: 0.0,
            mode: AblationMode::NoGatesNoExit,
            gate_policy: GatePolicy::Learned,
            convention: FlopsConvention::TwoFlopsPerMac,
        };
        let skip_only = InferOptions {
            threshold: 0.0,
            mode: AblationMode::SkipOnly,
            gate_policy: GatePolicy::Learned,
            convention: FlopsConvention::TwoFlopsPerMac,
        };
        let ledger = FlopsLedger::new(&p.config, FlopsConvention::TwoFlopsPerMac);
        let gate_total = p.config.num_layers as u64 * ledger.op_cost(ExecutedOp::Gate(1));
        for _ in 0..30 {
            let ids = random_ids(&mut rng, &p.config);
            let (_, tv) = infer_sample(&p, &ids, &vanilla).unwrap();
            let (_, ts) = infer_sample(&p, &ids, &skip_only).unwrap();
            // Skip-only pays all gates but can only remove encoder layers.
            assert!(ts.flops <= tv.flops + gate_total);
            let skipped = ts.gate_decisions.iter().filter(|d| d.skip).count();
            if skipped as u64 * ledger.op_cost(ExecutedOp::EncoderLayer(1)) > gate_total {
                assert!(ts.flops < tv.flops);
            }
        }
    }

    #[test]
    fn full_mode_cost_never_exceeds_exit_only_at_same_threshold() {
        let p = model_with_varied_gates(31);
        let mut rng = RngStream::new(29);
        let ledger = FlopsLedger::new(&p.config, FlopsConvention::TwoFlopsPerMac);
        let gate_total = p.config.num_layers as u64 * ledger.op_cost(ExecutedOp::Gate(1));
        for s in [0.1, 0.3, 0.5] {
            for _ in 0..20 {
                let ids = random_ids(&mut rng, &p.config);
                let full = InferOptions {
                    threshold: s,
                    mode: AblationMode::Full,
                    gate_policy: GatePolicy::Learned,
                    convention: FlopsConvention::TwoFlopsPerMac,
                };
                let exit_only = InferOptions {
                    threshold: s,
                    mode: AblationMode::ExitOnly,
                    gate_policy: GatePolicy::Learned,
                    convention: FlopsConvention::TwoFlopsPerMac,
                };
                let (_, tf) = infer_sample(&p, &ids, &full).unwrap();
                let (_, te) = infer_sample(&p, &ids, &exit_only).unwrap();
                // Gate overhead aside, skipping can only remove work from
                // the exit-only trace.
                assert!(
                    tf.flops <= te.flops + gate_total,
                    "s={s}: full {} vs exit_only {} (+gates {})",
                    tf.flops,
                    te.flops,
                    gate_total
                );
            }
        }
    }

    #[test]
    fn threshold_monotonicity_per_sample() {
        let p = model_with_varied_gates(37);
        let mut rng = RngStream::new(31);
        let thresholds = [0.0, 0.1, 0.3, 0.5, 0.7, 1.0];
        for _ in 0..25 {
            let ids = random_ids(&mut rng, &p.config);
            let mut prev_exit = usize::MAX;
            let mut prev_flops = u64::MAX;
            for &s in &thresholds {
                let opts = InferOptions {
                    threshold: s,
                    ..Default::default()
                };
                let (_, t) = infer_sample(&p, &ids, &opts).unwrap();
                assert!(t.exit_layer <= prev_exit);
                assert!(t.flops <= prev_flops);
                prev_exit = t.exit_layer;
                prev_flops = t.flops;
            }
        }
    }

    #[test]
    fn frequencies_reconcile_with_traces() {
        let spec = crate::data::SyntheticTaskSpec {
            num_train: 0,
            num_val: 0,
            num_test: 60,
            vocab_size: 16,
            max_len: 5,
            min_len: 3,
            ..Default::default()
        };
        let (_, _, test) = crate::data::generate_synthetic(&spec).unwrap();
        let p = model_with_varied_gates(43);
        let freq = skip_exit_frequencies(&p, &test, 0.4, AblationMode::Full).unwrap();
        let exits: u64 = freq.exits.iter().sum();
        assert_eq!(exits + freq.fallthrough, test.len() as u64);

        // Independent re-aggregation from raw traces.
        let opts = InferOptions {
            threshold: 0.4,
            ..Default::default()
        };
        let mut skips = vec![0u64; p.config.num_layers];
        let mut exit_hist = vec![0u64; p.config.num_layers];
        let mut fall = 0u64;
        for s in &test.samples {
            let (_, t) = infer_sample(&p, &s.ids, &opts).unwrap();
            for d in &t.gate_decisions {
                if d.skip {
                    skips[d.layer - 1] += 1;
                }
            }
            if t.early_exit {
                exit_hist[t.exit_layer - 1] += 1;
            } else {
                fall += 1;
            }
        }
        assert_eq!(freq.skips, skips);
        assert_eq!(freq.exits, exit_hist);
        assert_eq!(freq.fallthrough, fall);
    }

    #[test]
    fn zero_threshold_only_fallthrough_and_no_skip_when_forced() {
        let p = model_with_varied_gates(47);
        let spec = crate::data::SyntheticTaskSpec {
            num_train: 0,
            num_val: 0,
            num_test: 40,
            vocab_size: 16,
            max_len: 5,
            min_len: 3,
            ..Default::default()
        };
        let (_, _, test) = crate::data::generate_synthetic(&spec).unwrap();
        let freq = skip_exit_frequencies(&p, &test, 0.0, AblationMode::ExitOnly).unwrap();
        assert!(freq.skips.iter().all(|&c| c == 0));
        assert!(freq.exits.iter().all(|&c| c == 0));
        assert_eq!(freq.fallthrough, test.len() as u64);
    }

    #[test]
    fn similarity_diagnostic_bounds_and_order_invariance() {
        let p = model_with_varied_gates(53);
        let spec = crate::data::SyntheticTaskSpec {
            num_train: 0,
            num_val: 0,
            num_test: 20,
            vocab_size: 16,
            max_len: 5,
            min_len: 3,
            ..Default::default()
        };
        let (_, _, mut test) = crate::data::generate_synthetic(&spec).unwrap();
        let sims = layer_similarity_diagnostic(&p, &test).unwrap();
        assert_eq!(sims.len(), p.config.num_layers);
        for s in &sims {
            assert!(s.mean_token_similarity >= -1.0 && s.mean_token_similarity <= 1.0);
            assert!(s.mean_cls_similarity >= -1.0 && s.mean_cls_similarity <= 1.0);
        }
        test.samples.reverse();
        let sims2 = layer_similarity_diagnostic(&p, &test).unwrap();
        for (a, b) in sims.iter().zip(&sims2) {
            assert!((a.mean_token_similarity - b.mean_token_similarity).abs() < 1e-12);
            assert!((a.mean_cls_similarity - b.mean_cls_similarity).abs() < 1e-12);
        }
    }

    #[test]
    fn near_identity_layers_give_similarity_near_one() {
        // Degenerate weights: attention and FFN outputs zeroed, layer norms
        // exactly neutral, so each layer is the identity on an already
        // normalized input and consecutive representations coincide.
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, 4, 61).unwrap();
        for layer in &p.layers {
            for w in [&layer.wo, &layer.bo, &layer.w_ffn2, &layer.b_ffn2] {
                w.set_data(&vec![0.0; w.numel()]);
            }
        }
        let spec = crate::data::SyntheticTaskSpec {
            num_train: 0,
            num_val: 0,
            num_test: 10,
            vocab_size: 16,
            max_len: 5,
            min_len: 3,
            ..Default::default()
        };
        let (_, _, test) = crate::data::generate_synthetic(&spec).unwrap();
        let sims = layer_similarity_diagnostic(&p, &test).unwrap();
        // Pairs beyond the first compare LN-stable representations.
        for s in &sims[1..] {
            assert!(
                s.mean_token_similarity > 0.99,
                "pair {} similarity {}",
                s.lower_layer,
                s.mean_token_similarity
            );
        }
    }

    #[test]
    fn metrics_reference_values() {
        let preds = [0, 1, 1, 0];
        let labels = [0, 1, 0, 0];
        assert!((Metric::Accuracy.compute(&preds, &labels, 2) - 0.75).abs() < 1e-12);
        // class 0: tp=2 fp=0 fn=1 -> f1 = 4/5; class 1: tp=1 fp=1 fn=0 -> f1 = 2/3.
        let f1 = Metric::MacroF1.compute(&preds, &labels, 2);
        assert!((f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        // Perfect prediction -> MCC 1.
        assert!((Metric::Mcc.compute(&labels, &labels, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_mode_is_an_error() {
        assert!("bogus".parse::<AblationMode>().is_err());
        assert!("skip_only".parse::<AblationMode>().is_ok());
    }
}
