//! Analytic FLOPs accounting.
//!
//! Costs are closed-form multiply-accumulate (MAC) counts over the matrix
//! products of each operation; biases, layer norms, softmaxes and activations
//! are excluded. Reported numbers can use either raw MACs or the common
//! 2-FLOPs-per-MAC convention; every ledger records which one it uses.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsConvention {
    /// Raw multiply-accumulate counts.
    Macs,
    /// 2 floating point operations per MAC.
    TwoFlopsPerMac,
}

impl FlopsConvention {
    pub fn factor(self) -> u64 {
        match self {
            FlopsConvention::Macs => 1,
            FlopsConvention::TwoFlopsPerMac => 2,
        }
    }
}

/// One executed operation in an inference trace. Layer indices are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op", content = "layer")]
pub enum ExecutedOp {
    Embedding,
    EncoderLayer(usize),
    Gate(usize),
    Classifier(usize),
}

/// Closed-form per-operation MAC counts for a model configuration at its
/// fixed padded sequence length N.
///
/// - embedding: N*D (table gather + position add, one MAC per element)
/// - encoder layer: 4*N*D^2 (Q,K,V,output projections)
///   + 2*N^2*D (scores and attention-times-values over all heads)
///   + 2*N*D*F (the two FFN projections)
/// - gate: 3*N*D*G + 2*N^2*G (single-head self-attention into G) + G (head)
/// - classifier: 3*N*D*I + 2*N^2*I + I*C
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCosts {
    pub embedding_macs: u64,
    pub encoder_layer_macs: u64,
    pub gate_macs: u64,
    pub classifier_macs: u64,
}

/// Analytic cost table plus the reporting convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    pub costs: OpCosts,
    pub convention: FlopsConvention,
    pub num_layers: usize,
    pub seq_len: usize,
}

/// Derive the per-operation MAC table from a configuration.
pub fn count_flops(cfg: &ModelConfig) -> OpCosts {
    let n = cfg.max_seq_len as u64;
    let d = cfg.hidden_dim as u64;
    let f = cfg.ffn_dim as u64;
    let g = cfg.gate_inner_dim as u64;
    let i = cfg.classifier_inner_dim as u64;
    let c = cfg.num_classes as u64;
    OpCosts {
        embedding_macs: n * d,
        encoder_layer_macs: 4 * n * d * d + 2 * n * n * d + 2 * n * d * f,
        gate_macs: 3 * n * d * g + 2 * n * n * g + g,
        classifier_macs: 3 * n * d * i + 2 * n * n * i + i * c,
    }
}

impl FlopsLedger {
    pub fn new(cfg: &ModelConfig, convention: FlopsConvention) -> Self {
        FlopsLedger {
            costs: count_flops(cfg),
            convention,
            num_layers: cfg.num_layers,
            seq_len: cfg.max_seq_len,
        }
    }

    /// Cost of a single executed operation, in the ledger's convention.
    pub fn op_cost(&self, op: ExecutedOp) -> u64 {
        let macs = match op {
            ExecutedOp::Embedding => self.costs.embedding_macs,
            ExecutedOp::EncoderLayer(_) => self.costs.encoder_layer_macs,
            ExecutedOp::Gate(_) => self.costs.gate_macs,
            ExecutedOp::Classifier(_) => self.costs.classifier_macs,
        };
        macs * self.convention.factor()
    }

    /// Total cost of an executed-op list.
    pub fn total(&self, ops: &[ExecutedOp]) -> u64 {
        ops.iter().map(|&op| self.op_cost(op)).sum()
    }

    /// Cost of the plain backbone forward (embedding + all encoder layers),
    /// the 100% denominator for cost ratios. Plugin costs are not part of
    /// the denominator.
    pub fn vanilla_full(&self) -> u64 {
        (self.costs.embedding_macs + self.num_layers as u64 * self.costs.encoder_layer_macs)
            * self.convention.factor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bert_base_layer_cost_near_published_value() {
        let cfg = ModelConfig::bert_base_calibration();
        let ledger = FlopsLedger::new(&cfg, FlopsConvention::TwoFlopsPerMac);
        let layer = ledger.op_cost(ExecutedOp::EncoderLayer(1)) as f64 / 1e6;
        assert!(
            (layer - 1811.8).abs() / 1811.8 < 0.10,
            "per-layer cost {layer}M"
        );
    }

    #[test]
    fn plugin_costs_are_small_and_matched() {
        let cfg = ModelConfig::bert_base_calibration();
        let ledger = FlopsLedger::new(&cfg, FlopsConvention::TwoFlopsPerMac);
        let gate = ledger.op_cost(ExecutedOp::Gate(1)) as f64;
        let clf = ledger.op_cost(ExecutedOp::Classifier(1)) as f64;
        let layer = ledger.op_cost(ExecutedOp::EncoderLayer(1)) as f64;
        assert!((gate - clf).abs() / clf < 0.05);
        assert!(gate / layer < 0.03);
        assert!(clf / layer < 0.03);
        assert!((gate / 1e6 - 37.4).abs() / 37.4 < 0.25, "gate {}M", gate / 1e6);
        assert!((clf / 1e6 - 37.6).abs() / 37.6 < 0.25, "clf {}M", clf / 1e6);
    }

    #[test]
    fn doubling_sequence_length_is_superlinear_for_layers() {
        let mut cfg = ModelConfig::toy();
        let short = count_flops(&cfg).encoder_layer_macs;
        cfg.max_seq_len *= 2;
        let long = count_flops(&cfg).encoder_layer_macs;
        assert!(
            long > 2 * short,
            "quadratic attention term missing: {short} -> {long}"
        );
    }

    #[test]
    fn totals_are_additive_and_positive() {
        let cfg = ModelConfig::toy();
        let ledger = FlopsLedger::new(&cfg, FlopsConvention::Macs);
        let ops = vec![
            ExecutedOp::Embedding,
            ExecutedOp::Gate(1),
            ExecutedOp::EncoderLayer(1),
            ExecutedOp::Classifier(1),
        ];
        let total = ledger.total(&ops);
        let sum: u64 = ops.iter().map(|&o| ledger.op_cost(o)).sum();
        assert_eq!(total, sum);
        for op in ops {
            assert!(ledger.op_cost(op) > 0, "{op:?} must cost something");
        }
    }

    #[test]
    fn convention_factor_doubles_everything() {
        let cfg = ModelConfig::toy();
        let macs = FlopsLedger::new(&cfg, FlopsConvention::Macs);
        let flops = FlopsLedger::new(&cfg, FlopsConvention::TwoFlopsPerMac);
        assert_eq!(
            2 * macs.op_cost(ExecutedOp::EncoderLayer(1)),
            flops.op_cost(ExecutedOp::EncoderLayer(1))
        );
        assert_eq!(2 * macs.vanilla_full(), flops.vanilla_full());
    }
}
