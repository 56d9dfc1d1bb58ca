//! Datasets: a whitespace-tokenized TSV loader and a synthetic cluster task.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenBatch;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];

/// Token ↔ id map with ids 0..3 reserved for `[PAD]`, `[CLS]`, `[UNK]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary whose first non-reserved id is `tokens[0]`.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (id, tok) in all.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("vocab token {id} is empty or contains whitespace")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocab token `{tok}`")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Reads one token per line; line `n` (0-based) gets id `n + 3`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let body: String = self.tokens[RESERVED.len()..].iter().map(|t| format!("{t}\n")).collect();
        write_atomic(path.as_ref(), body.as_bytes())
    }

    /// `w3 … w{size-1}`, the vocabulary of the synthetic task.
    pub fn synthetic(size: usize) -> Result<Self> {
        Self::from_tokens((RESERVED.len()..size).map(|i| format!("w{i}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// One padded sequence; position 0 is `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub label: usize,
}

impl Example {
    /// `[CLS]` + `tokens`, truncated or padded to `len`.
    pub fn from_tokens(tokens: &[usize], label: usize, len: usize) -> Self {
        let mut ids = Vec::with_capacity(len);
        ids.push(CLS);
        ids.extend(tokens.iter().take(len.saturating_sub(1)));
        let real = ids.len();
        ids.resize(len, PAD);
        let mask = (0..len).map(|i| i < real).collect();
        Self { ids, mask, label }
    }
}

/// Fixed-length examples plus the class count they are labelled over.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub seq_len: usize,
    pub n_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Stacks the examples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut ids = Vec::with_capacity(indices.len() * self.seq_len);
        let mut mask = Vec::with_capacity(ids.capacity());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = &self.examples[i];
            ids.extend_from_slice(&e.ids);
            mask.extend_from_slice(&e.mask);
            labels.push(e.label);
        }
        Batch {
            tokens: TokenBatch::new(indices.len(), self.seq_len, ids, mask).expect("uniform lengths"),
            labels,
        }
    }

    /// Writes `label<TAB>tokens` lines, dropping `[CLS]` and padding.
    pub fn write_tsv(&self, path: impl AsRef<Path>, vocab: &Vocab) -> Result<()> {
        let mut body = Vec::new();
        for e in &self.examples {
            let words: Vec<&str> = e
                .ids
                .iter()
                .zip(&e.mask)
                .skip(1)
                .filter(|(_, &m)| m)
                .map(|(&id, _)| vocab.token(id).unwrap_or(RESERVED[UNK]))
                .collect();
            writeln!(body, "{}\t{}", e.label, words.join(" ")).expect("in-memory write");
        }
        write_atomic(path.as_ref(), &body)
    }
}

/// Parses `label<TAB>text` lines. Labels must lie below `n_classes`.
pub fn load_tsv(path: impl AsRef<Path>, vocab: &Vocab, max_len: usize, n_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, vocab, max_len, n_classes).map_err(|(line, reason)| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    })
}

fn parse_tsv(
    text: &str,
    vocab: &Vocab,
    max_len: usize,
    n_classes: usize,
) -> std::result::Result<Dataset, (usize, String)> {
    if max_len == 0 {
        return Err((0, "max_len must be positive".into()));
    }
    let mut examples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| (line_no, "expected `label<TAB>text`".to_string()))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| (line_no, format!("label `{label}` is not a non-negative integer")))?;
        if label >= n_classes {
            return Err((line_no, format!("label {label} >= n_classes {n_classes}")));
        }
        let ids: Vec<usize> = body.split_whitespace().map(|w| vocab.id(w)).collect();
        examples.push(Example::from_tokens(&ids, label, max_len));
    }
    Ok(Dataset {
        seq_len: max_len,
        n_classes,
        examples,
    })
}

/// Parameters of the synthetic cluster task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub n_clusters: usize,
    pub n_classes: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_examples: usize,
    pub valid_examples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticTaskSpec {
    fn sub_vocab(&self) -> usize {
        (self.vocab_size.saturating_sub(RESERVED.len())) / self.n_clusters.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_clusters < self.n_classes {
            return Err(Error::Config(format!(
                "need n_clusters ({}) >= n_classes ({}) >= 1",
                self.n_clusters, self.n_classes
            )));
        }
        if self.sub_vocab() < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold {} disjoint sub-vocabularies of at least 4 tokens",
                self.vocab_size, self.n_clusters
            )));
        }
        if self.seq_len < 5 {
            return Err(Error::Config(format!(
                "seq_len {} leaves no room for [CLS] plus a trigram",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// Train and validation splits of the cluster task.
///
/// Cluster `c` owns tokens `3 + c·s .. 3 + (c+1)·s`. Its first three tokens
/// form a signature trigram placed at a random offset; the remaining
/// positions are noise drawn from the cluster's other tokens. Labels cycle
/// round-robin over classes and each class cycles over its clusters
/// (`cluster mod n_classes == label`).
pub fn gen_cluster_task(spec: &SyntheticTaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let split = |count: usize, stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let examples = (0..count).map(|i| cluster_example(spec, i, &mut rng)).collect();
        Dataset {
            seq_len: spec.seq_len,
            n_classes: spec.n_classes,
            examples,
        }
    };
    Ok((split(spec.train_examples, 0), split(spec.valid_examples, 1)))
}

fn cluster_example(spec: &SyntheticTaskSpec, i: usize, rng: &mut ChaCha8Rng) -> Example {
    let label = i % spec.n_classes;
    let per_class: Vec<usize> = (label..spec.n_clusters).step_by(spec.n_classes).collect();
    let cluster = per_class[(i / spec.n_classes) % per_class.len()];
    let s = spec.sub_vocab();
    let base = RESERVED.len() + cluster * s;
    let body_len = spec.seq_len - 1;
    let mut tokens: Vec<usize> = (0..body_len).map(|_| base + 3 + rng.random_range(0..s - 3)).collect();
    let at = rng.random_range(0..=body_len - 3);
    tokens[at..at + 3].copy_from_slice(&[base, base + 1, base + 2]);
    Example::from_tokens(&tokens, label, spec.seq_len)
}

/// One training/evaluation batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: TokenBatch,
    pub labels: Vec<usize>,
}

/// Batches in an order reshuffled from `(seed, epoch)`; the last one may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    let order = shuffled_order(dataset.len(), seed, epoch);
    sequential_batches(dataset, &order, batch_size)
}

/// Batches in dataset order, for evaluation.
pub fn eval_batches(dataset: &Dataset, batch_size: usize) -> Result<Vec<Batch>> {
    let order: Vec<usize> = (0..dataset.len()).collect();
    sequential_batches(dataset, &order, batch_size)
}

fn sequential_batches(dataset: &Dataset, order: &[usize], batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    Ok(order.chunks(batch_size).map(|idx| dataset.batch(idx)).collect())
}

/// Permutation of `0..n` drawn from a ChaCha stream keyed by `(seed, epoch)`.
pub fn shuffled_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1 << 32));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
