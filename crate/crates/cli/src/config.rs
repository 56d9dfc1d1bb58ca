use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use headroute::data::{gen_cluster_task, load_tsv, Dataset, SyntheticTaskSpec, Vocab};
use headroute::encoder::EncoderConfig;
use headroute::training::TrainConfig;
use headroute::Error;
use serde::{Deserialize, Serialize};

/// Labelled TSV files plus the vocabulary they are tokenized with.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvSource {
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub vocab: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticTaskSpec),
    Tsv(TsvSource),
}

/// The document `train` and `ablate` read.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Valid,
}

pub struct Splits {
    pub train: Dataset,
    pub valid: Option<Dataset>,
}

impl Splits {
    pub fn pick(self, split: Split) -> Result<Dataset> {
        match split {
            Split::Train => Ok(self.train),
            Split::Valid => self
                .valid
                .ok_or_else(|| Error::Config("data source has no validation split".into()).into()),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path)?;
        cfg.data.resolve(path);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        self.train.validate(self.model.n_layers, self.model.h).context("train")?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().context("data.synthetic")?;
            let mismatch = |what: String| Error::Config(format!("data.synthetic: {what}"));
            if spec.vocab_size > self.model.vocab_size {
                return Err(mismatch(format!(
                    "vocab_size {} exceeds model.vocab_size {}",
                    spec.vocab_size, self.model.vocab_size
                ))
                .into());
            }
            if spec.seq_len > self.model.max_len {
                return Err(mismatch(format!("seq_len {} exceeds model.max_len {}", spec.seq_len, self.model.max_len)).into());
            }
            if spec.n_classes > self.model.n_classes {
                return Err(mismatch(format!(
                    "n_classes {} exceeds model.n_classes {}",
                    spec.n_classes, self.model.n_classes
                ))
                .into());
            }
        }
        Ok(())
    }
}

impl DataSource {
    /// Makes TSV paths relative to the directory of the file that named them.
    fn resolve(&mut self, origin: &Path) {
        if let DataSource::Tsv(t) = self {
            let base = origin.parent().unwrap_or(Path::new(""));
            for p in [Some(&mut t.train), t.valid.as_mut(), Some(&mut t.vocab)].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    /// Reads a bare data-source document or the `data` field of a run config.
    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value = read_json(path)?;
        let mut source: DataSource = match value.get("data") {
            Some(data) => serde_json::from_value(data.clone()),
            None => serde_json::from_value(value),
        }
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        source.resolve(path);
        Ok(source)
    }

    pub fn splits(&self, max_len: usize, n_classes: usize) -> Result<Splits> {
        match self {
            DataSource::Synthetic(spec) => {
                let (train, valid) = gen_cluster_task(spec)?;
                Ok(Splits {
                    train,
                    valid: Some(valid),
                })
            }
            DataSource::Tsv(t) => {
                let vocab = Vocab::load(&t.vocab)?;
                let train = load_tsv(&t.train, &vocab, max_len, n_classes)?;
                let valid = t.valid.as_ref().map(|p| load_tsv(p, &vocab, max_len, n_classes)).transpose()?;
                Ok(Splits { train, valid })
            }
        }
    }
}
