//! Learnable parameters: encoder, embeddings, per-layer plugins, projection
//! heads. Parameters are graph leaves; training stages freeze and thaw whole
//! groups by toggling `requires_grad`.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Value;

const INIT_STD: f64 = 0.02;

fn normal_param(rng: &mut RngStream, shape: Vec<usize>) -> Value {
    let n: usize = shape.iter().product();
    Value::param((0..n).map(|_| rng.normal(0.0, INIT_STD)).collect(), shape)
}

fn zeros_param(shape: Vec<usize>) -> Value {
    let n: usize = shape.iter().product();
    Value::param(vec![0.0; n], shape)
}

fn ones_param(shape: Vec<usize>) -> Value {
    let n: usize = shape.iter().product();
    Value::param(vec![1.0; n], shape)
}

pub struct EmbeddingParams {
    pub token_table: Value,
    pub pos_table: Value,
    pub ln_gamma: Value,
    pub ln_beta: Value,
}

impl EmbeddingParams {
    fn init(rng: &mut RngStream, cfg: &ModelConfig) -> Self {
        EmbeddingParams {
            token_table: normal_param(rng, vec![cfg.vocab_size, cfg.hidden_dim]),
            pos_table: normal_param(rng, vec![cfg.max_seq_len, cfg.hidden_dim]),
            ln_gamma: ones_param(vec![cfg.hidden_dim]),
            ln_beta: zeros_param(vec![cfg.hidden_dim]),
        }
    }

    fn named(&self, out: &mut Vec<(String, Value)>) {
        out.push(("embedding.token_table".into(), self.token_table.clone()));
        out.push(("embedding.pos_table".into(), self.pos_table.clone()));
        out.push(("embedding.ln_gamma".into(), self.ln_gamma.clone()));
        out.push(("embedding.ln_beta".into(), self.ln_beta.clone()));
    }
}

pub struct LayerParams {
    pub wq: Value,
    pub bq: Value,
    pub wk: Value,
    pub bk: Value,
    pub wv: Value,
    pub bv: Value,
    pub wo: Value,
    pub bo: Value,
    pub ln1_gamma: Value,
    pub ln1_beta: Value,
    pub w_ffn1: Value,
    pub b_ffn1: Value,
    pub w_ffn2: Value,
    pub b_ffn2: Value,
    pub ln2_gamma: Value,
    pub ln2_beta: Value,
}

impl LayerParams {
    fn init(rng: &mut RngStream, cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        LayerParams {
            wq: normal_param(rng, vec![d, d]),
            bq: zeros_param(vec![d]),
            wk: normal_param(rng, vec![d, d]),
            bk: zeros_param(vec![d]),
            wv: normal_param(rng, vec![d, d]),
            bv: zeros_param(vec![d]),
            wo: normal_param(rng, vec![d, d]),
            bo: zeros_param(vec![d]),
            ln1_gamma: ones_param(vec![d]),
            ln1_beta: zeros_param(vec![d]),
            w_ffn1: normal_param(rng, vec![d, f]),
            b_ffn1: zeros_param(vec![f]),
            w_ffn2: normal_param(rng, vec![f, d]),
            b_ffn2: zeros_param(vec![d]),
            ln2_gamma: ones_param(vec![d]),
            ln2_beta: zeros_param(vec![d]),
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Value)>) {
        let pairs: [(&str, &Value); 16] = [
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("ffn.w1", &self.w_ffn1),
            ("ffn.b1", &self.b_ffn1),
            ("ffn.w2", &self.w_ffn2),
            ("ffn.b2", &self.b_ffn2),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
        ];
        for (name, v) in pairs {
            out.push((format!("{prefix}.{name}"), (*v).clone()));
        }
    }
}

/// Single-head self-attention pooling block shared by gates and classifiers:
/// Q/K/V projections from the hidden dim into an inner dim, plus a linear
/// head read off the leading ([CLS]) row.
pub struct PluginParams {
    pub wq: Value,
    pub wk: Value,
    pub wv: Value,
    pub head_w: Value,
    pub head_b: Value,
    pub inner_dim: usize,
    pub out_dim: usize,
}

impl PluginParams {
    /// `zero_head` starts the linear readout at zero; a gate then opens at
    /// sigmoid(0) = 0.5.
    fn init(
        rng: &mut RngStream,
        hidden_dim: usize,
        inner_dim: usize,
        out_dim: usize,
        zero_head: bool,
    ) -> Self {
        PluginParams {
            wq: normal_param(rng, vec![hidden_dim, inner_dim]),
            wk: normal_param(rng, vec![hidden_dim, inner_dim]),
            wv: normal_param(rng, vec![hidden_dim, inner_dim]),
            head_w: if zero_head {
                zeros_param(vec![inner_dim, out_dim])
            } else {
                normal_param(rng, vec![inner_dim, out_dim])
            },
            head_b: zeros_param(vec![out_dim]),
            inner_dim,
            out_dim,
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Value)>) {
        out.push((format!("{prefix}.attn.wq"), self.wq.clone()));
        out.push((format!("{prefix}.attn.wk"), self.wk.clone()));
        out.push((format!("{prefix}.attn.wv"), self.wv.clone()));
        out.push((format!("{prefix}.head.w"), self.head_w.clone()));
        out.push((format!("{prefix}.head.b"), self.head_b.clone()));
    }
}

pub type GateParams = PluginParams;
pub type ClassifierParams = PluginParams;

/// Two-layer GELU MLP mapping representations into the contrastive latent
/// space. One head per training stage, shared across layers within a stage.
pub struct ProjectionParams {
    pub w1: Value,
    pub b1: Value,
    pub w2: Value,
    pub b2: Value,
}

impl ProjectionParams {
    pub fn init(rng: &mut RngStream, in_dim: usize, proj_dim: usize) -> Self {
        ProjectionParams {
            w1: normal_param(rng, vec![in_dim, proj_dim]),
            b1: zeros_param(vec![proj_dim]),
            w2: normal_param(rng, vec![proj_dim, proj_dim]),
            b2: zeros_param(vec![proj_dim]),
        }
    }

    fn named(&self, prefix: &str, out: &mut Vec<(String, Value)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

/// The whole model: encoder stack, one gate and one classifier per layer,
/// and the two stage-specific projection heads.
pub struct ModelParams {
    pub config: ModelConfig,
    pub proj_dim: usize,
    pub embedding: EmbeddingParams,
    pub layers: Vec<LayerParams>,
    pub gates: Vec<GateParams>,
    pub classifiers: Vec<ClassifierParams>,
    pub proj_stage1: ProjectionParams,
    pub proj_stage2: ProjectionParams,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, proj_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::new(seed);
        let mut emb_rng = root.fork(1);
        let mut layer_rng = root.fork(2);
        let mut gate_rng = root.fork(3);
        let mut clf_rng = root.fork(4);
        let mut proj_rng = root.fork(5);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams::init(&mut layer_rng, cfg))
            .collect();
        let gates = (0..cfg.num_layers)
            .map(|_| PluginParams::init(&mut gate_rng, cfg.hidden_dim, cfg.gate_inner_dim, 1, true))
            .collect();
        let classifiers = (0..cfg.num_layers)
            .map(|_| {
                PluginParams::init(
                    &mut clf_rng,
                    cfg.hidden_dim,
                    cfg.classifier_inner_dim,
                    cfg.num_classes,
                    false,
                )
            })
            .collect();
        Ok(ModelParams {
            config: cfg.clone(),
            proj_dim,
            embedding: EmbeddingParams::init(&mut emb_rng, cfg),
            layers,
            gates,
            classifiers,
            proj_stage1: ProjectionParams::init(&mut proj_rng, cfg.hidden_dim, proj_dim),
            proj_stage2: ProjectionParams::init(&mut proj_rng, cfg.classifier_inner_dim, proj_dim),
        })
    }

    /// Index of the final ("last") classifier.
    pub fn last_classifier(&self) -> usize {
        self.config.num_layers - 1
    }

    /// All parameters in canonical order. The order is the serialization and
    /// optimizer-state order; keep it stable.
    pub fn named_params(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        self.embedding.named(&mut out);
        for (i, l) in self.layers.iter().enumerate() {
            l.named(&format!("encoder.{i}"), &mut out);
        }
        for (i, g) in self.gates.iter().enumerate() {
            g.named(&format!("gate.{i}"), &mut out);
        }
        for (i, c) in self.classifiers.iter().enumerate() {
            c.named(&format!("classifier.{i}"), &mut out);
        }
        self.proj_stage1.named("proj_stage1", &mut out);
        self.proj_stage2.named("proj_stage2", &mut out);
        out
    }

    /// Parameters trained in stage 1: encoder, embeddings, gates, the last
    /// classifier and the stage-1 projection head.
    pub fn stage1_trainable_names(&self) -> Vec<String> {
        let last = self.last_classifier();
        self.named_params()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| {
                n.starts_with("embedding.")
                    || n.starts_with("encoder.")
                    || n.starts_with("gate.")
                    || n.starts_with(&format!("classifier.{last}."))
                    || n.starts_with("proj_stage1.")
            })
            .collect()
    }

    /// Parameters trained in stage 2: intermediate classifiers and the
    /// stage-2 projection head.
    pub fn stage2_trainable_names(&self) -> Vec<String> {
        let last = self.last_classifier();
        self.named_params()
            .into_iter()
            .map(|(n, _)| n)
            .filter(|n| {
                (n.starts_with("classifier.") && !n.starts_with(&format!("classifier.{last}.")))
                    || n.starts_with("proj_stage2.")
            })
            .collect()
    }

    /// Freeze everything, then thaw exactly the given names.
    pub fn set_trainable(&self, names: &[String]) {
        let set: std::collections::HashSet<&str> = names.iter().map(String::as_str).collect();
        for (name, v) in self.named_params() {
            v.set_requires_grad(set.contains(name.as_str()));
        }
    }

    pub fn zero_grads(&self) {
        for (_, v) in self.named_params() {
            v.zero_grad();
        }
    }

    /// Deep copy of all parameter data (for best-epoch snapshots).
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.named_params()
            .into_iter()
            .map(|(n, v)| (n, v.to_vec()))
            .collect()
    }

    pub fn restore(&self, snap: &[(String, Vec<f64>)]) {
        let current = self.named_params();
        assert_eq!(current.len(), snap.len(), "snapshot arity mismatch");
        for ((name, v), (sname, data)) in current.iter().zip(snap) {
            assert_eq!(name, sname, "snapshot order mismatch");
            v.set_data(data);
        }
    }

    /// SHA-256 over the raw little-endian bytes of every parameter whose name
    /// matches `filter`, in canonical order. Bit-exact freeze contracts are
    /// asserted by comparing these digests.
    pub fn group_hash(&self, filter: impl Fn(&str) -> bool) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (name, v) in self.named_params() {
            if filter(&name) {
                hasher.update(name.as_bytes());
                for x in v.data().iter() {
                    hasher.update(x.to_le_bytes());
                }
            }
        }
        let digest = hasher.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    /// Error when any parameter is NaN or infinite.
    pub fn validate_finite(&self) -> Result<()> {
        for (name, v) in self.named_params() {
            if v.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("parameter {name}"),
                });
            }
        }
        Ok(())
    }
}
