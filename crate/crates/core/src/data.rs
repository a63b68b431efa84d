//! Datasets: vocabulary, whitespace tokenization, TSV loading and the
//! synthetic classification tasks used for desk-scale experiments.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[UNK]", "[SEP]"];

/// Token <-> id mapping with the four reserved specials at fixed ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            id_to_token: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for t in RESERVED {
            v.insert(t.to_string());
        }
        v
    }

    /// Rebuild the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    fn insert(&mut self, token: String) -> usize {
        if let Some(&id) = self.token_to_id.get(&token) {
            return id;
        }
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        id
    }

    pub fn lookup(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.id_to_token[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Placeholder vocabulary `tok0..tokV` for synthetic id-level datasets.
    pub fn synthetic(vocab_size: usize) -> Self {
        let mut v = Vocab::new();
        for i in v.len()..vocab_size {
            v.insert(format!("tok{i}"));
        }
        v
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::new()
    }
}

/// Lowercased whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub ids: Vec<usize>,
    pub label: usize,
    pub tag: Option<Difficulty>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: String,
    pub samples: Vec<Sample>,
    pub vocab: Vocab,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    fn validate(&self, max_seq_len: usize) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.ids.first() != Some(&CLS_ID) {
                return Err(Error::Data(format!(
                    "sample {i} of split {} does not start with [CLS]",
                    self.split
                )));
            }
            if s.ids.len() > max_seq_len {
                return Err(Error::Data(format!(
                    "sample {i} of split {} exceeds max_seq_len {max_seq_len}",
                    self.split
                )));
            }
            if s.label >= self.num_classes {
                return Err(Error::Data(format!(
                    "sample {i} of split {} has label {} >= {}",
                    self.split, s.label, self.num_classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    /// Label is carried by a single marker token; linearly separable from a
    /// bag of tokens.
    Keyword,
    /// Label is the agreement of two marker tokens placed in the two halves
    /// of the sequence; a bag of tokens cannot separate it linearly.
    Composition,
    /// Per-sample mix of the two with a configurable easy fraction.
    Mixture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub family: TaskFamily,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    /// Fraction of easy (keyword) samples in the mixture family.
    pub easy_fraction: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            family: TaskFamily::Mixture,
            min_len: 8,
            max_len: 31,
            vocab_size: 64,
            num_classes: 2,
            seed: 17,
            num_train: 10_000,
            num_val: 1_000,
            num_test: 2_000,
            easy_fraction: 0.6,
        }
    }
}

impl SyntheticTaskSpec {
    /// Marker token for class `c`. Keyword and composition samples share
    /// one marker family per class: a single occurrence carries the keyword
    /// label, a pair at two depths carries the agreement label. Sharing the
    /// tokens keeps sample difficulty out of trivial token-identity reach.
    pub fn keyword_marker(&self, class: usize) -> usize {
        4 + class
    }

    pub fn composition_markers(&self) -> (usize, usize) {
        (4, 5)
    }

    fn first_filler(&self) -> usize {
        4 + self.num_classes.max(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Data("num_classes must be >= 2".into()));
        }
        if self.vocab_size <= self.first_filler() {
            return Err(Error::Data(format!(
                "vocab_size {} too small: needs > {} for markers plus fillers",
                self.vocab_size,
                self.first_filler()
            )));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Data(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.easy_fraction) {
            return Err(Error::Data("easy_fraction must be in [0,1]".into()));
        }
        if matches!(self.family, TaskFamily::Composition | TaskFamily::Mixture)
            && self.num_classes != 2
        {
            return Err(Error::Data(
                "composition labels are binary; use num_classes = 2".into(),
            ));
        }
        Ok(())
    }

    /// Recompute the label from token ids alone. The generator and any
    /// re-verification share this single rule: exactly one marker is a
    /// keyword sample (label = its class), exactly two markers form a
    /// composition sample (label = the families agree).
    pub fn label_of(&self, ids: &[usize]) -> Option<usize> {
        let content = &ids[1..]; // skip [CLS]
        let marks: Vec<usize> = content
            .iter()
            .copied()
            .filter(|&t| (4..4 + self.num_classes.max(2)).contains(&t))
            .collect();
        match marks.len() {
            1 => Some(marks[0] - 4),
            2 => Some(usize::from(marks[0] == marks[1])),
            _ => None,
        }
    }
}

/// Deterministic synthetic dataset triple (train/val/test). Each split is
/// exactly class-balanced and, for the mixture family, contains exactly the
/// configured fraction of easy samples; ordering is shuffled per split.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let vocab = Vocab::synthetic(spec.vocab_size);
    let make = |name: &str, count: usize, stream: u64| -> Result<Dataset> {
        let mut rng = root.fork(stream);
        let mut samples = Vec::with_capacity(count);
        let easy_count = match spec.family {
            TaskFamily::Keyword => count,
            TaskFamily::Composition => 0,
            TaskFamily::Mixture => (count as f64 * spec.easy_fraction).round() as usize,
        };
        for i in 0..count {
            let easy = i < easy_count;
            let label = i % spec.num_classes;
            let sample = generate_sample(spec, &mut rng, easy, label)?;
            samples.push(sample);
        }
        rng.shuffle(&mut samples);
        let ds = Dataset {
            split: name.to_string(),
            samples,
            vocab: vocab.clone(),
            num_classes: spec.num_classes,
        };
        ds.validate(spec.max_len + 1)?;
        Ok(ds)
    };
    Ok((
        make("train", spec.num_train, 100)?,
        make("val", spec.num_val, 200)?,
        make("test", spec.num_test, 300)?,
    ))
}

fn generate_sample(
    spec: &SyntheticTaskSpec,
    rng: &mut RngStream,
    easy: bool,
    label: usize,
) -> Result<Sample> {
    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    let filler_lo = spec.first_filler();
    let filler_n = spec.vocab_size - filler_lo;
    let mut content: Vec<usize> = (0..len).map(|_| filler_lo + rng.below(filler_n)).collect();
    let tag;
    if easy {
        let pos = rng.below(len);
        content[pos] = spec.keyword_marker(label);
        tag = Difficulty::Easy;
    } else {
        let (ma, mb) = spec.composition_markers();
        let half = len / 2;
        let p1 = rng.below(half.max(1));
        let p2 = half + rng.below((len - half).max(1));
        let first = if rng.below(2) == 0 { ma } else { mb };
        let second = if label == 1 {
            first
        } else if first == ma {
            mb
        } else {
            ma
        };
        content[p1] = first;
        content[p2] = second;
        tag = Difficulty::Hard;
    }
    let mut ids = Vec::with_capacity(len + 1);
    ids.push(CLS_ID);
    ids.extend(content);
    debug_assert_eq!(spec.label_of(&ids), Some(label));
    Ok(Sample {
        ids,
        label,
        tag: Some(tag),
    })
}

/// Column layout of a TSV classification file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsvSchema {
    /// One column for single sentences, two for sentence pairs (joined with
    /// a [SEP] token).
    pub text_columns: Vec<String>,
    pub label_column: String,
    /// Optional difficulty tag column ("easy"/"hard").
    pub tag_column: Option<String>,
}

impl Default for TsvSchema {
    fn default() -> Self {
        TsvSchema {
            text_columns: vec!["text".into()],
            label_column: "label".into(),
            tag_column: None,
        }
    }
}

struct TsvRow {
    texts: Vec<String>,
    label: usize,
    tag: Option<Difficulty>,
}

fn read_tsv_rows(path: &Path, schema: &TsvSchema) -> Result<Vec<TsvRow>> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{} is empty", path.display())))?;
    let cols: Vec<&str> = header.split('\t').collect();
    let col_index = |name: &str| -> Result<usize> {
        cols.iter().position(|c| *c == name).ok_or_else(|| {
            Error::Data(format!(
                "{} is missing column '{name}' (found: {})",
                path.display(),
                cols.join(", ")
            ))
        })
    };
    let text_idx: Vec<usize> = schema
        .text_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;
    if text_idx.is_empty() {
        return Err(Error::Data("schema needs at least one text column".into()));
    }
    let label_idx = col_index(&schema.label_column)?;
    let tag_idx = schema
        .tag_column
        .as_ref()
        .map(|c| col_index(c))
        .transpose()?;

    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let need = text_idx
            .iter()
            .chain(std::iter::once(&label_idx))
            .chain(tag_idx.iter())
            .max()
            .copied()
            .unwrap_or(0);
        if fields.len() <= need {
            return Err(Error::Data(format!(
                "{} line {}: expected at least {} fields, got {}",
                path.display(),
                lineno + 1,
                need + 1,
                fields.len()
            )));
        }
        let label: usize = fields[label_idx].trim().parse().map_err(|_| {
            Error::Data(format!(
                "{} line {}: cannot parse label '{}' as a class index",
                path.display(),
                lineno + 1,
                fields[label_idx]
            ))
        })?;
        let tag = match tag_idx {
            None => None,
            Some(ti) => match fields[ti].trim() {
                "easy" => Some(Difficulty::Easy),
                "hard" => Some(Difficulty::Hard),
                "" => None,
                other => {
                    return Err(Error::Data(format!(
                        "{} line {}: unknown tag '{other}'",
                        path.display(),
                        lineno + 1
                    )))
                }
            },
        };
        rows.push(TsvRow {
            texts: text_idx.iter().map(|&i| fields[i].to_string()).collect(),
            label,
            tag,
        });
    }
    if rows.is_empty() {
        return Err(Error::Data(format!(
            "{} contains a header but no data rows",
            path.display()
        )));
    }
    Ok(rows)
}

fn encode_row(row: &TsvRow, vocab: &Vocab, max_seq_len: usize) -> Sample {
    let mut ids = vec![CLS_ID];
    for (i, text) in row.texts.iter().enumerate() {
        if i > 0 {
            ids.push(SEP_ID);
        }
        for tok in tokenize(text) {
            ids.push(vocab.lookup(&tok));
        }
    }
    ids.truncate(max_seq_len);
    Sample {
        ids,
        label: row.label,
        tag: row.tag,
    }
}

/// Load a training split, building the vocabulary from its text only.
pub fn load_tsv_train(path: &Path, schema: &TsvSchema, max_seq_len: usize) -> Result<Dataset> {
    let rows = read_tsv_rows(path, schema)?;
    let mut vocab = Vocab::new();
    for row in &rows {
        for text in &row.texts {
            for tok in tokenize(text) {
                vocab.insert(tok);
            }
        }
    }
    let num_classes = rows.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    let samples: Vec<Sample> = rows
        .iter()
        .map(|r| encode_row(r, &vocab, max_seq_len))
        .collect();
    let ds = Dataset {
        split: "train".into(),
        samples,
        vocab,
        num_classes: num_classes.max(2),
    };
    ds.validate(max_seq_len)?;
    Ok(ds)
}

/// Load a non-training split against an existing vocabulary; tokens unseen
/// in training map to [UNK].
pub fn load_tsv_with_vocab(
    path: &Path,
    schema: &TsvSchema,
    vocab: &Vocab,
    num_classes: usize,
    max_seq_len: usize,
    split: &str,
) -> Result<Dataset> {
    let rows = read_tsv_rows(path, schema)?;
    let samples: Vec<Sample> = rows
        .iter()
        .map(|r| encode_row(r, vocab, max_seq_len))
        .collect();
    let ds = Dataset {
        split: split.to_string(),
        samples,
        vocab: vocab.clone(),
        num_classes,
    };
    ds.validate(max_seq_len)?;
    Ok(ds)
}

/// Serialize a dataset back to TSV (token strings, class index, tag).
pub fn write_tsv(ds: &Dataset, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "text\tlabel\ttag")?;
    for s in &ds.samples {
        let text = ds.vocab.decode(&s.ids[1..]);
        let tag = match s.tag {
            Some(Difficulty::Easy) => "easy",
            Some(Difficulty::Hard) => "hard",
            None => "",
        };
        writeln!(f, "{text}\t{}\t{tag}", s.label)?;
    }
    Ok(())
}
