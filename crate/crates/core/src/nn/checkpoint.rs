//! JSON-lines parameter checkpoints.
//!
//! Line 1 is a header object; every following line is one named tensor:
//! `{"name": "actor/layer0.weight", "shape": [36, 64], "values": [...]}`.
//! `serde_json` writes shortest round-trip representations, so `f64`
//! values reload bit-for-bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MlpDims, MlpParams};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "ofql-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Named groups of MLP parameters plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    groups: BTreeMap<String, Vec<(String, Tensor)>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, group: &str, params: &MlpParams) {
        let entries = params
            .names()
            .into_iter()
            .zip(params.tensors.iter().cloned())
            .collect();
        self.groups.insert(group.to_string(), entries);
    }

    pub fn groups(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    /// Parameters of `group`, checked against the expected architecture.
    pub fn get(&self, group: &str, expected: &MlpDims) -> Result<MlpParams> {
        let entries = self
            .groups
            .get(group)
            .ok_or_else(|| Error::UnknownName(format!("checkpoint group {group}")))?;
        let found: Vec<Vec<usize>> = entries
            .iter()
            .map(|(_, t)| matrix_shape(t.shape()))
            .collect();
        let want = expected.shapes();
        if found != want {
            return Err(Error::ArchitectureMismatch {
                checkpoint: found,
                expected: want,
            });
        }
        Ok(MlpParams {
            dims: expected.clone(),
            tensors: entries.iter().map(|(_, t)| t.clone()).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = Header {
            format: FORMAT.to_string(),
            version: VERSION,
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (group, entries) in &self.groups {
            for (name, t) in entries {
                let e = Entry {
                    name: format!("{group}/{name}"),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                };
                serde_json::to_writer(&mut w, &e)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty checkpoint".into()))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let mut ck = Checkpoint {
            meta: header.meta,
            groups: BTreeMap::new(),
        };
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Entry = serde_json::from_str(&line)?;
            let (group, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("entry name without group: {}", e.name)))?;
            if e.shape.iter().product::<usize>() != e.values.len() {
                return Err(Error::Format(format!("entry {} has inconsistent shape", e.name)));
            }
            ck.groups
                .entry(group.to_string())
                .or_default()
                .push((name.to_string(), Tensor::new(e.shape, e.values)));
        }
        Ok(ck)
    }
}

fn matrix_shape(shape: &[usize]) -> Vec<usize> {
    match shape.len() {
        0 => vec![1, 1],
        1 => vec![1, shape[0]],
        _ => shape.to_vec(),
    }
}
