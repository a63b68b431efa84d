//! Run configuration files.
//!
//! TOML with four fixed sections (`[model]`, `[train]`, `[ccl]`, `[data]`,
//! `[inference]`); every key is typed and unknown keys are rejected. All
//! sections have defaults, so an empty file is a valid toy-scale setup.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::contrastive::CclConfig;
use crate::data::{self, Dataset, SyntheticTaskSpec, TsvSchema};
use crate::error::{Error, Result};
use crate::flops::FlopsConvention;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Tsv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsvSettings {
    pub train_path: String,
    /// Optional; when empty, 10% of the training split is held out.
    pub val_path: String,
    pub test_path: String,
    pub text_columns: Vec<String>,
    pub label_column: String,
    pub tag_column: Option<String>,
}

impl Default for TsvSettings {
    fn default() -> Self {
        TsvSettings {
            train_path: String::new(),
            val_path: String::new(),
            test_path: String::new(),
            text_columns: vec!["text".into()],
            label_column: "label".into(),
            tag_column: None,
        }
    }
}

impl TsvSettings {
    fn schema(&self) -> TsvSchema {
        TsvSchema {
            text_columns: self.text_columns.clone(),
            label_column: self.label_column.clone(),
            tag_column: self.tag_column.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub source: DataSource,
    pub synthetic: SyntheticTaskSpec,
    pub tsv: TsvSettings,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            source: DataSource::Synthetic,
            synthetic: SyntheticTaskSpec::default(),
            tsv: TsvSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSettings {
    pub thresholds: Vec<f64>,
    pub mode: String,
    pub metric: String,
    pub convention: FlopsConvention,
}

impl Default for InferenceSettings {
    fn default() -> Self {
        InferenceSettings {
            thresholds: vec![0.1, 0.3, 0.5],
            mode: "full".into(),
            metric: "accuracy".into(),
            convention: FlopsConvention::TwoFlopsPerMac,
        }
    }
}

/// Everything a run needs, as parsed from one TOML file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ccl: CclConfig,
    pub data: DataSettings,
    pub inference: InferenceSettings,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigFile(format!("cannot read {}: {e}", path.display())))?;
        let s: Settings = toml::from_str(&text)
            .map_err(|e| Error::ConfigFile(format!("{}: {e}", path.display())))?;
        s.model.validate()?;
        s.train.validate()?;
        s.ccl.validate()?;
        Ok(s)
    }

    /// Resolve train/val/test per the `[data]` section.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset, Dataset)> {
        match self.data.source {
            DataSource::Synthetic => {
                let mut spec = self.data.synthetic.clone();
                // Synthetic sequences must fit the model's window.
                if spec.max_len + 1 > self.model.max_seq_len {
                    return Err(Error::Data(format!(
                        "synthetic max_len {} plus [CLS] exceeds model max_seq_len {}",
                        spec.max_len, self.model.max_seq_len
                    )));
                }
                if spec.vocab_size > self.model.vocab_size {
                    return Err(Error::Data(format!(
                        "synthetic vocab_size {} exceeds model vocab_size {}",
                        spec.vocab_size, self.model.vocab_size
                    )));
                }
                spec.num_classes = self.model.num_classes;
                data::generate_synthetic(&spec)
            }
            DataSource::Tsv => {
                let schema = self.data.tsv.schema();
                let max = self.model.max_seq_len;
                let train =
                    data::load_tsv_train(Path::new(&self.data.tsv.train_path), &schema, max)?;
                let test = data::load_tsv_with_vocab(
                    Path::new(&self.data.tsv.test_path),
                    &schema,
                    &train.vocab,
                    train.num_classes,
                    max,
                    "test",
                )?;
                let (train, val) = if self.data.tsv.val_path.is_empty() {
                    holdout_split(train, 0.1)
                } else {
                    let val = data::load_tsv_with_vocab(
                        Path::new(&self.data.tsv.val_path),
                        &schema,
                        &train.vocab,
                        train.num_classes,
                        max,
                        "val",
                    )?;
                    (train, val)
                };
                Ok((train, val, test))
            }
        }
    }
}

/// Deterministic tail holdout: the last `fraction` of samples become the
/// validation split.
fn holdout_split(mut train: Dataset, fraction: f64) -> (Dataset, Dataset) {
    let n = train.len();
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val_samples = train.samples.split_off(n - n_val);
    let val = Dataset {
        split: "val".into(),
        samples: val_samples,
        vocab: train.vocab.clone(),
        num_classes: train.num_classes,
    };
    (train, val)
}

/// Root directory for run outputs: `$SKIPGATE_RUN_ROOT` or `./runs`.
pub fn default_run_root() -> PathBuf {
    std::env::var_os("SKIPGATE_RUN_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
