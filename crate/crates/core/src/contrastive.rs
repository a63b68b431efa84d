//! Cross-layer contrastive losses.
//!
//! The same token in two consecutive layers forms a positive pair; different
//! tokens of the same sequence form the negatives. Candidates are drawn only
//! from the adjacent layer within the same sequence, there is no data
//! augmentation, and padding positions are excluded from both anchors and
//! candidates.

use serde::{Deserialize, Serialize};

use crate::encoder::PadMask;
use crate::error::{Error, Result};
use crate::params::ProjectionParams;
use crate::tensor::{stack_rows, Value};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CclConfig {
    pub temperature: f64,
    pub proj_dim: usize,
    /// Drop [CLS] anchors in the final layer pair, where that token moves
    /// too much to act as its own positive.
    pub exclude_cls_last_layer: bool,
}

impl Default for CclConfig {
    fn default() -> Self {
        CclConfig {
            temperature: 0.1,
            proj_dim: 32,
            exclude_cls_last_layer: true,
        }
    }
}

impl CclConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "ccl",
                msg: format!("temperature must be positive, got {}", self.temperature),
            });
        }
        if self.proj_dim < 2 {
            return Err(Error::InvalidArgument {
                op: "ccl",
                msg: format!("proj_dim must be >= 2, got {}", self.proj_dim),
            });
        }
        Ok(())
    }
}

/// Project every row of `[K,in]` through the two-layer GELU MLP.
pub fn project_rows(proj: &ProjectionParams, x: &Value) -> Result<Value> {
    x.matmul(&proj.w1)?
        .add_bias(&proj.b1)?
        .gelu()
        .matmul(&proj.w2)?
        .add_bias(&proj.b2)
}

/// One InfoNCE term: cosine similarities of the anchor against all
/// candidates, scaled by 1/temperature, scored as the negative log-softmax
/// probability of the positive.
pub fn info_nce_row(
    anchor: &Value,
    candidates: &Value,
    positive_index: usize,
    temperature: f64,
) -> Result<Value> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "info_nce_row",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    let k = candidates.shape()[0];
    if positive_index >= k {
        return Err(Error::InvalidArgument {
            op: "info_nce_row",
            msg: format!("positive index {positive_index} out of {k} candidates"),
        });
    }
    anchor
        .cosine_rows(candidates)?
        .scale(1.0 / temperature)
        .nll_from_logits(positive_index)
}

/// Cross-layer InfoNCE over a stack of per-layer token representations for
/// one sequence. `reps[i]` holds the representations after layer i+1, shape
/// `[N, d]`. Anchors come from layer i, candidates from layer i+1; the
/// positive candidate is the same token index. The result is the flat mean
/// over all (layer pair, anchor) terms.
fn ccl_over_layers(
    reps: &[Value],
    mask: &PadMask,
    proj: &ProjectionParams,
    cfg: &CclConfig,
) -> Result<Value> {
    cfg.validate()?;
    if reps.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "ccl",
            msg: format!("need at least 2 layers, got {}", reps.len()),
        });
    }
    let real = mask.real_indices();
    if real.is_empty() {
        return Err(Error::AllPadding);
    }
    let projected: Vec<Value> = reps
        .iter()
        .map(|r| project_rows(proj, r))
        .collect::<Result<_>>()?;

    let last_pair = reps.len() - 2;
    let mut terms: Vec<Value> = Vec::new();
    for pair in 0..reps.len() - 1 {
        let cand_rows: Vec<Value> = real
            .iter()
            .map(|&m| projected[pair + 1].row(m))
            .collect::<Result<_>>()?;
        let candidates = stack_rows(&cand_rows)?;
        for (pos, &m) in real.iter().enumerate() {
            if cfg.exclude_cls_last_layer && pair == last_pair && m == 0 {
                continue;
            }
            let anchor = projected[pair].row(m)?;
            terms.push(info_nce_row(&anchor, &candidates, pos, cfg.temperature)?);
        }
    }
    if terms.is_empty() {
        return Ok(Value::scalar(0.0));
    }
    Ok(crate::tensor::concat_scalars(&terms)?.mean())
}

/// Stage-1 loss over the gated block outputs `X^i` (layers 1..=L).
pub fn ccl_loss_stage1(
    layer_outputs: &[Value],
    mask: &PadMask,
    proj: &ProjectionParams,
    cfg: &CclConfig,
) -> Result<Value> {
    ccl_over_layers(layer_outputs, mask, proj, cfg)
}

/// Stage-2 loss over the classifiers' attention hidden states `h^i`
/// (layers 1..=L). The encoder is frozen in stage 2, so gradients reach only
/// classifier and projection parameters.
pub fn ccl_loss_stage2(
    classifier_hiddens: &[Value],
    mask: &PadMask,
    proj: &ProjectionParams,
    cfg: &CclConfig,
) -> Result<Value> {
    ccl_over_layers(classifier_hiddens, mask, proj, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Projection that maps scaled one-hot rows to scaled one-hot rows:
    /// identity weight matrices and zero biases, so distinct one-hot tokens
    /// stay exactly orthogonal through the GELU.
    fn identity_proj(d: usize) -> ProjectionParams {
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        ProjectionParams {
            w1: Value::param(eye.clone(), vec![d, d]),
            b1: Value::param(vec![0.0; d], vec![d]),
            w2: Value::param(eye, vec![d, d]),
            b2: Value::param(vec![0.0; d], vec![d]),
        }
    }

    fn one_hot_rows(n: usize, d: usize, scale: f64) -> Value {
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            data[i * d + i] = scale;
        }
        Value::constant(data, vec![n, d])
    }

    #[test]
    fn single_candidate_gives_zero() {
        let anchor = Value::constant(vec![0.3, -0.4], vec![2]);
        let cands = Value::constant(vec![5.0, 1.0], vec![1, 2]);
        let loss = info_nce_row(&anchor, &cands, 0, 0.5).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn equal_similarities_give_ln_k() {
        // All candidates identical: every similarity equals the same value.
        let anchor = Value::constant(vec![1.0, 2.0], vec![2]);
        let c = vec![0.5, -0.1];
        let mut data = Vec::new();
        for _ in 0..7 {
            data.extend_from_slice(&c);
        }
        let cands = Value::constant(data, vec![7, 2]);
        let loss = info_nce_row(&anchor, &cands, 3, 0.07).unwrap();
        assert!((loss.item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn unit_positive_orthogonal_negatives_closed_form() {
        // positive sim 1, K-1 negatives sim 0, temperature 1:
        // loss = -ln(e / (e + K - 1)).
        let k = 5;
        let d = 6;
        let anchor = Value::constant(
            {
                let mut v = vec![0.0; d];
                v[0] = 2.0;
                v
            },
            vec![d],
        );
        let mut data = vec![0.0; k * d];
        data[0] = 3.0; // candidate 0 is parallel to the anchor
        for (r, item) in data.iter_mut().enumerate().take(k * d).skip(d) {
            let row = r / d;
            let col = r % d;
            if col == row {
                *item = 1.0;
            }
        }
        let cands = Value::constant(data, vec![k, d]);
        let loss = info_nce_row(&anchor, &cands, 0, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expect = -(e / (e + (k - 1) as f64)).ln();
        assert!((loss.item() - expect).abs() < 1e-12);
    }

    #[test]
    fn temperature_must_be_positive() {
        let anchor = Value::constant(vec![1.0], vec![1]);
        let cands = Value::constant(vec![1.0], vec![1, 1]);
        assert!(info_nce_row(&anchor, &cands, 0, 0.0).is_err());
        assert!(info_nce_row(&anchor, &cands, 0, -1.0).is_err());
    }

    #[test]
    fn identical_layers_orthogonal_tokens_closed_form() {
        // All layers identical, tokens mutually orthogonal after projection:
        // per-row loss is -ln(e^{1/tau} / (e^{1/tau} + N - 1)).
        let n = 4;
        let d = 8;
        let cfg = CclConfig {
            temperature: 0.25,
            proj_dim: d,
            exclude_cls_last_layer: false,
        };
        let proj = identity_proj(d);
        let x = one_hot_rows(n, d, 1.7);
        let layers = vec![x.clone(), x.clone(), x.clone()];
        let mask = PadMask(vec![1.0; n]);
        let loss = ccl_loss_stage1(&layers, &mask, &proj, &cfg).unwrap();
        let s = (1.0 / cfg.temperature).exp();
        let expect = -(s / (s + (n - 1) as f64)).ln();
        assert!(
            (loss.item() - expect).abs() < 1e-9,
            "{} vs {expect}",
            loss.item()
        );
    }

    #[test]
    fn single_real_token_gives_zero_loss() {
        let d = 4;
        let cfg = CclConfig {
            temperature: 0.5,
            proj_dim: d,
            exclude_cls_last_layer: false,
        };
        let proj = identity_proj(d);
        let x = one_hot_rows(3, d, 1.0);
        let mask = PadMask(vec![1.0, 0.0, 0.0]);
        let loss = ccl_loss_stage1(&[x.clone(), x], &mask, &proj, &cfg).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn fewer_than_two_layers_is_an_error() {
        let d = 4;
        let cfg = CclConfig::default();
        let proj = identity_proj(d);
        let x = one_hot_rows(2, d, 1.0);
        assert!(ccl_loss_stage1(&[x], &PadMask(vec![1.0, 1.0]), &proj, &cfg).is_err());
    }

    #[test]
    fn permuting_token_order_preserves_the_mean() {
        let n = 4;
        let d = 6;
        let mut rng = RngStream::new(3);
        let cfg = CclConfig {
            temperature: 0.3,
            proj_dim: d,
            exclude_cls_last_layer: false,
        };
        let proj = identity_proj(d);
        let a: Vec<f64> = (0..n * d).map(|_| rng.normal(0.0, 1.0)).collect();
        let b: Vec<f64> = (0..n * d).map(|_| rng.normal(0.0, 1.0)).collect();
        let mask = PadMask(vec![1.0; n]);
        let base = ccl_loss_stage1(
            &[
                Value::constant(a.clone(), vec![n, d]),
                Value::constant(b.clone(), vec![n, d]),
            ],
            &mask,
            &proj,
            &cfg,
        )
        .unwrap()
        .item();

        // Swap tokens 1 and 3 in both layers.
        let swap = |v: &[f64]| {
            let mut w = v.to_vec();
            for c in 0..d {
                w.swap(d + c, 3 * d + c);
            }
            w
        };
        let permuted = ccl_loss_stage1(
            &[
                Value::constant(swap(&a), vec![n, d]),
                Value::constant(swap(&b), vec![n, d]),
            ],
            &mask,
            &proj,
            &cfg,
        )
        .unwrap()
        .item();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn cls_exclusion_applies_only_to_last_pair() {
        let n = 3;
        let d = 5;
        let mut rng = RngStream::new(9);
        let proj = identity_proj(d);
        let mask = PadMask(vec![1.0; n]);
        let layers: Vec<Value> = (0..3)
            .map(|_| {
                Value::constant((0..n * d).map(|_| rng.normal(0.0, 1.0)).collect(), vec![n, d])
            })
            .collect();
        let with = ccl_loss_stage1(
            &layers,
            &mask,
            &proj,
            &CclConfig {
                temperature: 0.2,
                proj_dim: d,
                exclude_cls_last_layer: true,
            },
        )
        .unwrap()
        .item();
        let without = ccl_loss_stage1(
            &layers,
            &mask,
            &proj,
            &CclConfig {
                temperature: 0.2,
                proj_dim: d,
                exclude_cls_last_layer: false,
            },
        )
        .unwrap()
        .item();
        assert!((with - without).abs() > 1e-12, "exclusion must change the mean");
    }

    #[test]
    fn positive_rescaling_of_projections_is_invariant() {
        // Cosine similarity ignores positive rescaling of projected vectors;
        // scaling the projection output weights by a positive constant scales
        // every projected vector by it (biases zero, GELU applied before w2).
        let n = 3;
        let d = 4;
        let mut rng = RngStream::new(5);
        let mask = PadMask(vec![1.0; n]);
        let cfg = CclConfig {
            temperature: 0.4,
            proj_dim: d,
            exclude_cls_last_layer: false,
        };
        let layers: Vec<Value> = (0..2)
            .map(|_| {
                Value::constant((0..n * d).map(|_| rng.normal(0.0, 1.0)).collect(), vec![n, d])
            })
            .collect();
        let proj = identity_proj(d);
        let base = ccl_loss_stage1(&layers, &mask, &proj, &cfg).unwrap().item();
        let scaled = identity_proj(d);
        let w2: Vec<f64> = scaled.w2.to_vec().iter().map(|x| x * 37.5).collect();
        scaled.w2.set_data(&w2);
        let after = ccl_loss_stage1(&layers, &mask, &scaled, &cfg).unwrap().item();
        assert!((base - after).abs() < 1e-9);
    }
}
