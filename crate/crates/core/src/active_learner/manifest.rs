use std::collections::BTreeSet;
use std::path::Path;

use super::SelectionResult;
use crate::error::{Error, Result};
use crate::pool::SampleId;

/// Selected ids with their image-level labels, in selection order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<(SampleId, usize)>,
}

impl Manifest {
    pub fn from_selection(result: &SelectionResult, config_hash: &str, seed: u64) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            seed,
            entries: result
                .labeled_ids
                .iter()
                .cloned()
                .zip(result.labels.iter().map(|l| l.class_index()))
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn id_set(&self) -> BTreeSet<SampleId> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# config_hash={}\n# seed={}\n", self.config_hash, self.seed);
        for (id, label) in &self.entries {
            out.push_str(&format!("{id}\t{label}\n"));
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        parse_manifest(&std::fs::read_to_string(path)?).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse { path: path.to_path_buf(), line, msg },
            other => other,
        })
    }
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let err = |line: usize, msg: String| Error::Parse { path: "<manifest>".into(), line, msg };
    let mut config_hash = String::new();
    let mut seed = None;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            match comment.trim().split_once('=') {
                Some(("config_hash", v)) => config_hash = v.trim().to_string(),
                Some(("seed", v)) => seed = Some(v.trim().parse().map_err(|_| err(line_no, format!("bad seed {v:?}")))?),
                _ => {}
            }
            continue;
        }
        let (id, label) = line.split_once('\t').ok_or_else(|| err(line_no, "expected <id>\\t<label>".into()))?;
        let id = SampleId::new(id).map_err(|e| err(line_no, e.to_string()))?;
        let label = label.trim().parse().map_err(|_| err(line_no, format!("bad label {label:?}")))?;
        if !seen.insert(id.clone()) {
            return Err(err(line_no, format!("duplicate id {id}")));
        }
        entries.push((id, label));
    }
    let seed = seed.ok_or_else(|| err(0, "manifest header lacks a seed".into()))?;
    Ok(Manifest { config_hash, seed, entries })
}
