use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ProtocolError;
use crate::nn::Tensor2;

/// Samples aligned across parties: one row per id, same order everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedDataset {
    pub ids: Vec<u64>,
    pub task_features: Tensor2,
    pub data_features: Vec<Tensor2>,
    /// Held by the task party only; empty for unlabelled inference data.
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl AlignedDataset {
    pub fn new(
        ids: Vec<u64>,
        task_features: Tensor2,
        data_features: Vec<Tensor2>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self, ProtocolError> {
        let n = ids.len();
        if task_features.rows() != n || data_features.iter().any(|t| t.rows() != n) {
            return Err(ProtocolError::Dataset("feature blocks and ids disagree on row count".into()));
        }
        if !labels.is_empty() && labels.len() != n {
            return Err(ProtocolError::Dataset(format!("{} labels for {n} ids", labels.len())));
        }
        if data_features.is_empty() {
            return Err(ProtocolError::Dataset("at least one data party is required".into()));
        }
        if labels.iter().any(|&y| y >= classes) {
            return Err(ProtocolError::Dataset(format!("label outside {classes} classes")));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(ProtocolError::Dataset(format!("duplicate id {dup}")));
        }
        Ok(Self {
            ids,
            task_features,
            data_features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn party_count(&self) -> usize {
        self.data_features.len()
    }

    pub fn has_labels(&self) -> bool {
        !self.labels.is_empty() || self.ids.is_empty()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> AlignedDataset {
        AlignedDataset {
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            task_features: self.task_features.select_rows(indices),
            data_features: self.data_features.iter().map(|t| t.select_rows(indices)).collect(),
            labels: if self.labels.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.labels[i]).collect()
            },
            classes: self.classes,
        }
    }

    pub fn party_data(&self, party: usize) -> PartyData {
        PartyData::new(self.ids.clone(), self.data_features[party].clone())
            .expect("aligned dataset has unique ids")
    }
}

/// One data party's feature table.
#[derive(Clone, Debug, PartialEq)]
pub struct PartyData {
    ids: Vec<u64>,
    features: Tensor2,
    row_of: HashMap<u64, usize>,
}

pub const DATASET_MAGIC: &[u8; 4] = b"VFDS";
pub const DATASET_VERSION: u16 = 1;

impl PartyData {
    pub fn new(ids: Vec<u64>, features: Tensor2) -> Result<Self, ProtocolError> {
        if ids.len() != features.rows() {
            return Err(ProtocolError::Dataset("ids and feature rows differ".into()));
        }
        let row_of: HashMap<u64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if row_of.len() != ids.len() {
            return Err(ProtocolError::Dataset("duplicate id".into()));
        }
        Ok(Self {
            ids,
            features,
            row_of,
        })
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn features(&self) -> &Tensor2 {
        &self.features
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.row_of.contains_key(&id)
    }

    pub fn row(&self, id: u64) -> Result<&[f64], ProtocolError> {
        self.row_of
            .get(&id)
            .map(|&r| self.features.row(r))
            .ok_or(ProtocolError::UnknownId(id))
    }

    pub fn rows_for(&self, ids: &[u64]) -> Result<Tensor2, ProtocolError> {
        let idx = ids
            .iter()
            .map(|id| self.row_of.get(id).copied().ok_or(ProtocolError::UnknownId(*id)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.features.select_rows(&idx))
    }

    pub fn set_row(&mut self, id: u64, values: &[f64]) -> Result<(), ProtocolError> {
        let r = *self.row_of.get(&id).ok_or(ProtocolError::UnknownId(id))?;
        self.features.row_mut(r).copy_from_slice(values);
        Ok(())
    }

    /// Hash pre-image: `b"VFDS"`, `u16` version, `u64` rows, `u32` cols, then
    /// rows sorted by id, each as `u64` id followed by its binary64 values,
    /// all little-endian. Independent of storage order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by_key(|&i| self.ids[i]);
        let mut out = Vec::with_capacity(18 + order.len() * (8 + 8 * self.width()));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(order.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        for i in order {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            out.extend(self.features.row(i).iter().flat_map(|v| v.to_le_bytes()));
        }
        out
    }
}

/// Assignment of CSV columns to parties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeatureManifest {
    pub task_columns: Vec<String>,
    /// One list per data party, in party-index order.
    pub data_columns: Vec<Vec<String>>,
    #[serde(default = "default_label")]
    pub label_column: String,
}

fn default_label() -> String {
    "label".into()
}

impl FeatureManifest {
    pub fn from_json_file(path: &Path) -> Result<Self, ProtocolError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProtocolError::Dataset(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ProtocolError::Dataset(format!("manifest: {e}")))
    }
}

/// Read a CSV with an `id` column, feature columns and an optional label
/// column, splitting features by the manifest.
pub fn load_csv(path: &Path, manifest: &FeatureManifest) -> Result<AlignedDataset, ProtocolError> {
    let err = |e: csv::Error| ProtocolError::Dataset(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(err)?;
    let headers = reader.headers().map_err(err)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ProtocolError::Dataset(format!("missing column {name:?}")))
    };
    let id_col = col("id")?;
    let task_cols = manifest.task_columns.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>()?;
    let data_cols = manifest
        .data_columns
        .iter()
        .map(|cols| cols.iter().map(|c| col(c)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    if manifest
        .data_columns
        .iter()
        .flatten()
        .any(|c| *c == manifest.label_column || c == "id")
    {
        return Err(ProtocolError::Dataset("label or id column assigned to a data party".into()));
    }
    let label_col = headers.iter().position(|h| h == manifest.label_column);

    let mut ids = Vec::new();
    let mut task = Vec::new();
    let mut data: Vec<Vec<f64>> = vec![Vec::new(); data_cols.len()];
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(err)?;
        let num = |c: usize| -> Result<f64, ProtocolError> {
            rec.get(c)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ProtocolError::Dataset(format!("row {}: bad value in column {c}", line + 2)))
        };
        ids.push(
            rec.get(id_col)
                .unwrap_or("")
                .trim()
                .parse::<u64>()
                .map_err(|e| ProtocolError::Dataset(format!("row {}: id: {e}", line + 2)))?,
        );
        for &c in &task_cols {
            task.push(num(c)?);
        }
        for (d, cols) in data.iter_mut().zip(&data_cols) {
            for &c in cols {
                d.push(num(c)?);
            }
        }
        if let Some(c) = label_col {
            labels.push(
                rec.get(c)
                    .unwrap_or("")
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| ProtocolError::Dataset(format!("row {}: label: {e}", line + 2)))?,
            );
        }
    }
    let n = ids.len();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    AlignedDataset::new(
        ids,
        Tensor2::from_vec(n, task_cols.len(), task)?,
        data.into_iter()
            .zip(&data_cols)
            .map(|(v, cols)| Tensor2::from_vec(n, cols.len(), v))
            .collect::<Result<Vec<_>, _>>()?,
        labels,
        classes,
    )
}
