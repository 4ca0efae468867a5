//! Reading and writing pipeline files with I/O errors kept distinguishable
//! from format errors, so the exit code can tell them apart.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use wchamfer::io::{atomic_write, parse_key_values};
use wchamfer::retrieval::{parse_qrels, parse_run, Qrels, Run};
use wchamfer::store::{decode_store, encode_store};
use wchamfer::trainer::{parse_training_set, QueryLabels};
use wchamfer::weights::{parse_weights, write_weights};
use wchamfer::{EmbeddingStore, TokenizedCorpus, WeightTable};

use crate::UsageError;

fn io_error(err: io::Error, what: &str, path: &Path) -> anyhow::Error {
    let message = if err.kind() == io::ErrorKind::NotFound {
        format!("{what} `{}`: file not found", path.display())
    } else {
        format!("{what} `{}`", path.display())
    };
    anyhow::Error::new(err).context(message)
}

pub fn read_bytes(path: &Path, what: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_error(e, what, path))
}

pub fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(e, what, path))
}

pub fn write_file<F>(path: &Path, what: &str, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
{
    atomic_write(path, write).map_err(|e| io_error(e, what, path))
}

pub fn load_store(path: &Path, what: &str) -> Result<EmbeddingStore> {
    let bytes = read_bytes(path, what)?;
    decode_store(&bytes).with_context(|| format!("decoding {what} `{}`", path.display()))
}

pub fn save_store(store: &EmbeddingStore, path: &Path, what: &str) -> Result<()> {
    let bytes = encode_store(store).with_context(|| format!("encoding {what}"))?;
    write_file(path, what, |w| w.write_all(&bytes))
}

pub fn load_corpus(path: &Path) -> Result<TokenizedCorpus> {
    let text = read_text(path, "corpus")?;
    TokenizedCorpus::parse(&text).with_context(|| format!("parsing corpus `{}`", path.display()))
}

pub fn save_corpus(corpus: &TokenizedCorpus, path: &Path) -> Result<()> {
    write_file(path, "corpus", |w| {
        for doc in &corpus.docs {
            let tokens: Vec<String> = doc.tokens.iter().map(|t| t.to_string()).collect();
            writeln!(w, "{}\t{}", doc.item_id, tokens.join(" "))?;
        }
        Ok(())
    })
}

pub fn load_weights(path: &Path) -> Result<WeightTable> {
    let text = read_text(path, "weights")?;
    parse_weights(&text).with_context(|| format!("parsing weights `{}`", path.display()))
}

pub fn save_weights(table: &WeightTable, path: &Path) -> Result<()> {
    write_file(path, "weights", |w| write_weights(table, w))
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let text = read_text(path, "qrels")?;
    parse_qrels(&text).with_context(|| format!("parsing qrels `{}`", path.display()))
}

pub fn load_run(path: &Path) -> Result<Run> {
    let text = read_text(path, "run")?;
    parse_run(&text).with_context(|| format!("parsing run `{}`", path.display()))
}

pub fn load_training_set(path: &Path, what: &str) -> Result<Vec<QueryLabels>> {
    let text = read_text(path, what)?;
    parse_training_set(&text).with_context(|| format!("parsing {what} `{}`", path.display()))
}

/// A `key=value` file whose relative paths resolve against its directory.
#[derive(Debug, Clone)]
pub struct ConfigFile {
    pub path: PathBuf,
    pub values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path, "config")?;
        let values = parse_key_values(&text).map_err(|(line, message)| {
            anyhow::Error::new(UsageError(format!("config `{}` line {line}: {message}", path.display())))
        })?;
        Ok(ConfigFile {
            path: path.to_owned(),
            values,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn path_value(&self, key: &str) -> Option<PathBuf> {
        let value = Path::new(self.get(key)?);
        Some(if value.is_absolute() {
            value.to_owned()
        } else {
            self.path.parent().unwrap_or(Path::new("")).join(value)
        })
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path_value(key).ok_or_else(|| {
            UsageError(format!("config `{}` is missing `{key}`", self.path.display())).into()
        })
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| UsageError(format!("invalid value `{v}` for `{key}`")).into()),
        }
    }

    /// Fails on any key outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(UsageError(format!(
                    "config `{}`: unknown key `{key}`",
                    self.path.display()
                ))
                .into());
            }
        }
        Ok(())
    }
}

/// Parses `1,2,3` style lists.
pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| UsageError(format!("invalid {what} `{s}`")).into())
        })
        .collect()
}
