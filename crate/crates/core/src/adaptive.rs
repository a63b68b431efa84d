//! Per-layer skipping gates, early-exit classifiers, the gated residual mix
//! and the normalized-entropy exit criterion.

use crate::config::ModelConfig;
use crate::encoder::PadMask;
use crate::error::{Error, Result};
use crate::params::PluginParams;
use crate::tensor::Value;

/// A gate's verdict for one layer. The hard decision is a pure function of
/// the soft probability with an inclusive 0.5 boundary.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GateDecision {
    /// 1-based encoder layer index.
    pub layer: usize,
    pub p_skip: f64,
    pub skip: bool,
}

impl GateDecision {
    pub fn from_prob(layer: usize, p_skip: f64) -> Self {
        GateDecision {
            layer,
            p_skip,
            skip: p_skip >= 0.5,
        }
    }
}

/// Single-head self-attention into the plugin's inner dim. Shared trunk of
/// gates and classifiers; the leading ([CLS]) row of the result acts as the
/// masked attention-pooled summary of the sequence.
fn plugin_attention(plugin: &PluginParams, x: &Value, mask_bias: &Value) -> Result<Value> {
    let q = x.matmul(&plugin.wq)?;
    let k = x.matmul(&plugin.wk)?;
    let v = x.matmul(&plugin.wv)?;
    let scale = 1.0 / (plugin.inner_dim as f64).sqrt();
    q.matmul(&k.transpose()?)?
        .scale(scale)
        .add(mask_bias)?
        .softmax(1)?
        .matmul(&v)
}

fn plugin_head(plugin: &PluginParams, h: &Value) -> Result<Value> {
    Ok(h.row(0)?
        .as_matrix_row()?
        .matmul(&plugin.head_w)?
        .add_bias(&plugin.head_b)?
        .flatten())
}

/// Gate forward: masked attention pooling over token positions, then a
/// linear head and a sigmoid. Returns the scalar skip probability, strictly
/// inside (0,1).
pub fn gate_forward(
    _cfg: &ModelConfig,
    gate: &PluginParams,
    x: &Value,
    mask: &PadMask,
) -> Result<Value> {
    if mask.num_real() == 0 {
        return Err(Error::AllPadding);
    }
    let h = plugin_attention(gate, x, &mask.attention_bias())?;
    let logit = plugin_head(gate, &h)?.row_scalar(0)?;
    Ok(logit.sigmoid())
}

/// Gated residual mix: `g * x_prev + (1 - g) * layer_out`, elementwise,
/// differentiable in all three arguments.
pub fn soft_skip_mix(x_prev: &Value, layer_out: &Value, g: &Value) -> Result<Value> {
    if x_prev.shape() != layer_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "soft_skip_mix",
            left: x_prev.shape(),
            right: layer_out.shape(),
        });
    }
    let one_minus_g = g.neg().add_scalar(1.0);
    x_prev
        .scale_by(g)?
        .add(&layer_out.scale_by(&one_minus_g)?)
}

/// Classifier forward: one self-attention layer into the inner dim plus a
/// linear head on the pooled row. Returns the class distribution and the
/// attention-layer hidden states kept for cross-layer contrastive training.
pub fn classifier_forward(
    cfg: &ModelConfig,
    clf: &PluginParams,
    x: &Value,
    mask: &PadMask,
) -> Result<(Value, Value)> {
    let (logits, h) = classifier_logits(cfg, clf, x, mask)?;
    Ok((logits.softmax(0)?, h))
}

/// Pre-softmax variant used by the training losses (log-sum-exp stability).
pub fn classifier_logits(
    _cfg: &ModelConfig,
    clf: &PluginParams,
    x: &Value,
    mask: &PadMask,
) -> Result<(Value, Value)> {
    if mask.num_real() == 0 {
        return Err(Error::AllPadding);
    }
    let h = plugin_attention(clf, x, &mask.attention_bias())?;
    let logits = plugin_head(clf, &h)?;
    Ok((logits, h))
}

/// Shannon entropy of a class distribution divided by ln(C), so thresholds
/// are comparable across class counts. `0 ln 0` is taken as 0.
pub fn normalized_entropy(z: &[f64]) -> Result<f64> {
    let c = z.len();
    if c < 2 {
        return Err(Error::InvalidArgument {
            op: "normalized_entropy",
            msg: format!("need at least 2 classes, got {c}"),
        });
    }
    let sum: f64 = z.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || z.iter().any(|&p| p < 0.0) {
        return Err(Error::NotNormalized { sum });
    }
    let mut h = 0.0;
    for &p in z {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h / (c as f64).ln())
}

pub fn normalized_entropy_value(z: &Value) -> Result<f64> {
    normalized_entropy(&z.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelParams;
    use crate::rng::RngStream;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            vocab_size: 12,
            max_seq_len: 4,
            num_classes: 3,
            classifier_inner_dim: 4,
            gate_inner_dim: 4,
            dropout_rate: 0.0,
        }
    }

    fn random_x(rng: &mut RngStream, n: usize, d: usize) -> Value {
        Value::constant((0..n * d).map(|_| rng.normal(0.0, 1.0)).collect(), vec![n, d])
    }

    #[test]
    fn zero_head_gate_outputs_half() {
        let cfg = small_cfg();
        let p = ModelParams::init(&cfg, 4, 1).unwrap();
        let mut rng = RngStream::new(2);
        let x = random_x(&mut rng, 4, 8);
        let mask = PadMask(vec![1.0, 1.0, 1.0, 0.0]);
        // Gates initialize with a zero head, so the output is sigmoid(0).
        let g = gate_forward(&cfg, &p.gates[0], &x, &mask).unwrap();
        assert!((g.item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gate_output_stays_in_open_unit_interval() {
        let cfg = small_cfg();
        let p = ModelParams::init(&cfg, 4, 1).unwrap();
        let gate = &p.gates[0];
        gate.head_w
            .set_data(&(0..gate.head_w.numel()).map(|i| (i as f64) - 1.5).collect::<Vec<_>>());
        let mut rng = RngStream::new(3);
        let mask = PadMask(vec![1.0; 4]);
        for _ in 0..50 {
            let x = random_x(&mut rng, 4, 8);
            let g = gate_forward(&cfg, gate, &x, &mask).unwrap().item();
            assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn gate_rejects_all_padding() {
        let cfg = small_cfg();
        let p = ModelParams::init(&cfg, 4, 1).unwrap();
        let mut rng = RngStream::new(4);
        let x = random_x(&mut rng, 4, 8);
        let mask = PadMask(vec![0.0; 4]);
        assert!(matches!(
            gate_forward(&cfg, &p.gates[0], &x, &mask),
            Err(Error::AllPadding)
        ));
    }

    #[test]
    fn gate_matches_manual_two_token_computation() {
        // 2-token sequence, hand-set weights, inner dim 2: replicate the
        // pooling + sigmoid arithmetic with plain floats.
        let cfg = ModelConfig {
            num_layers: 1,
            hidden_dim: 2,
            num_heads: 1,
            ffn_dim: 4,
            vocab_size: 8,
            max_seq_len: 2,
            num_classes: 2,
            classifier_inner_dim: 2,
            gate_inner_dim: 2,
            dropout_rate: 0.0,
        };
        let p = ModelParams::init(&cfg, 2, 7).unwrap();
        let gate = &p.gates[0];
        gate.wq.set_data(&[1.0, 0.0, 0.0, 1.0]);
        gate.wk.set_data(&[1.0, 0.0, 0.0, 1.0]);
        gate.wv.set_data(&[0.5, -0.25, 1.0, 0.75]);
        gate.head_w.set_data(&[2.0, -1.0]);
        gate.head_b.set_data(&[0.25]);
        let x = Value::constant(vec![0.6, -0.2, 0.1, 0.9], vec![2, 2]);
        let mask = PadMask(vec![1.0, 1.0]);
        let got = gate_forward(&cfg, gate, &x, &mask).unwrap().item();

        let xs = [[0.6, -0.2], [0.1, 0.9]];
        let wv = [[0.5, -0.25], [1.0, 0.75]];
        let scale = 1.0 / (2.0f64).sqrt();
        // q = k = x (identity projections); row 0 of the attention output.
        let dot = |a: &[f64; 2], b: &[f64; 2]| a[0] * b[0] + a[1] * b[1];
        let s0 = [dot(&xs[0], &xs[0]) * scale, dot(&xs[0], &xs[1]) * scale];
        let mx = s0[0].max(s0[1]);
        let e = [(s0[0] - mx).exp(), (s0[1] - mx).exp()];
        let z = e[0] + e[1];
        let a = [e[0] / z, e[1] / z];
        let v0 = [
            xs[0][0] * wv[0][0] + xs[0][1] * wv[1][0],
            xs[0][0] * wv[0][1] + xs[0][1] * wv[1][1],
        ];
        let v1 = [
            xs[1][0] * wv[0][0] + xs[1][1] * wv[1][0],
            xs[1][0] * wv[0][1] + xs[1][1] * wv[1][1],
        ];
        let pooled = [a[0] * v0[0] + a[1] * v1[0], a[0] * v0[1] + a[1] * v1[1]];
        let logit = pooled[0] * 2.0 + pooled[1] * (-1.0) + 0.25;
        let expect = 1.0 / (1.0 + (-logit).exp());
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn soft_skip_mix_boundaries_and_midpoint() {
        let a = Value::constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = Value::constant(vec![5.0, 6.0, 7.0, 8.0], vec![2, 2]);
        let one = Value::scalar(1.0);
        let zero = Value::scalar(0.0);
        let half = Value::scalar(0.5);
        assert_eq!(soft_skip_mix(&a, &b, &one).unwrap().to_vec(), a.to_vec());
        assert_eq!(soft_skip_mix(&a, &b, &zero).unwrap().to_vec(), b.to_vec());
        assert_eq!(
            soft_skip_mix(&a, &b, &half).unwrap().to_vec(),
            vec![3.0, 4.0, 5.0, 6.0]
        );
        let bad = Value::constant(vec![0.0; 2], vec![2]);
        assert!(soft_skip_mix(&a, &bad, &half).is_err());
    }

    #[test]
    fn classifier_distribution_normalizes_and_h_has_full_rows() {
        let cfg = small_cfg();
        let p = ModelParams::init(&cfg, 4, 5).unwrap();
        let mut rng = RngStream::new(6);
        let x = random_x(&mut rng, 4, 8);
        let mask = PadMask(vec![1.0, 1.0, 0.0, 0.0]);
        let (z, h) = classifier_forward(&cfg, &p.classifiers[0], &x, &mask).unwrap();
        assert_eq!(z.shape(), vec![3]);
        assert!((z.to_vec().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(h.shape(), vec![4, cfg.classifier_inner_dim]);
    }

    #[test]
    fn zero_head_classifier_is_uniform() {
        let cfg = small_cfg();
        let p = ModelParams::init(&cfg, 4, 5).unwrap();
        let clf = &p.classifiers[1];
        clf.head_w.set_data(&vec![0.0; clf.head_w.numel()]);
        clf.head_b.set_data(&vec![0.0; clf.head_b.numel()]);
        let mut rng = RngStream::new(7);
        let x = random_x(&mut rng, 4, 8);
        let mask = PadMask(vec![1.0; 4]);
        let (z, _) = classifier_forward(&cfg, clf, &x, &mask).unwrap();
        for v in z.to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn classifier_argmax_shift_invariant() {
        let cfg = small_cfg();
        let p = ModelParams::init(&cfg, 4, 5).unwrap();
        let mut rng = RngStream::new(9);
        let x = random_x(&mut rng, 4, 8);
        let mask = PadMask(vec![1.0; 4]);
        let (logits, _) = classifier_logits(&cfg, &p.classifiers[0], &x, &mask).unwrap();
        let z = logits.softmax(0).unwrap().to_vec();
        let zs = logits.add_scalar(42.0).softmax(0).unwrap().to_vec();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&z), argmax(&zs));
    }

    #[test]
    fn entropy_reference_points() {
        assert!((normalized_entropy(&[0.25; 4]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(normalized_entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        // -(0.9 ln 0.9 + 0.1 ln 0.1) / ln 2
        let expect = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln()) / 2.0f64.ln();
        assert!((normalized_entropy(&[0.9, 0.1]).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.469).abs() < 1e-3);
    }

    #[test]
    fn entropy_rejects_unnormalized_input() {
        assert!(matches!(
            normalized_entropy(&[0.7, 0.7]),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn hard_decision_threshold_is_inclusive() {
        assert!(GateDecision::from_prob(1, 0.5).skip);
        assert!(GateDecision::from_prob(1, 0.7).skip);
        assert!(!GateDecision::from_prob(1, 0.499_999).skip);
    }
}
