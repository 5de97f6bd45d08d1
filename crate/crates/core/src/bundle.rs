//! Embedding storage: the `VSEB` binary format, CSV import and the
//! classifier-head wrapper built on top of it.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VSEB" | version u32 = 1 | rows u64 | dim u64 | flags u32 (bit 0 = labels)
//! | rows*dim f32 payload, row-major
//! | rows u32 labels            (only when bit 0 is set)
//! | metadata length u64 | metadata JSON {ids, class_names, meta}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub const VSEB_MAGIC: &[u8; 4] = b"VSEB";
pub const VSEB_VERSION: u32 = 1;
const FLAG_LABELS: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 4;

/// A row-major matrix of embeddings with identifiers, optional labels and
/// free-form provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    labels: Option<Vec<u32>>,
    class_names: Vec<String>,
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    ids: Vec<String>,
    #[serde(default)]
    class_names: Vec<String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

impl EmbeddingBundle {
    /// Builds a bundle and checks every invariant. `class_names` declares the
    /// label space; it must be non-empty whenever labels are given.
    pub fn new(
        rows: usize,
        dim: usize,
        data: Vec<f32>,
        ids: Vec<String>,
        labels: Option<Vec<u32>>,
        class_names: Vec<String>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        let bundle = Self {
            rows,
            dim,
            data,
            ids,
            labels,
            class_names,
            meta,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Convenience constructor with synthesized `row_<i>` ids.
    pub fn from_rows(
        rows: &[Vec<f64>],
        labels: Option<Vec<u32>>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Format(format!(
                    "row {i} has {} values, expected {dim}",
                    r.len()
                )));
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        let ids = (0..rows.len()).map(|i| format!("row_{i}")).collect();
        Self::new(
            rows.len(),
            dim,
            data,
            ids,
            labels,
            class_names,
            BTreeMap::new(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self
            .rows
            .checked_mul(self.dim)
            .ok_or_else(|| Error::Format("rows * dim overflows".into()))?;
        if self.data.len() != expected {
            return Err(Error::shape(expected, self.data.len()));
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                row: pos / self.dim.max(1),
                col: pos % self.dim.max(1),
                msg: format!("non-finite value {}", self.data[pos]),
            });
        }
        if self.ids.len() != self.rows {
            return Err(Error::Invalid(format!(
                "{} ids for {} rows",
                self.ids.len(),
                self.rows
            )));
        }
        let mut seen = HashSet::with_capacity(self.ids.len());
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Invalid(format!("duplicate id {id:?}")));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.rows {
                return Err(Error::Invalid(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    self.rows
                )));
            }
            let num_classes = self.class_names.len();
            if let Some((row, &l)) = labels
                .iter()
                .enumerate()
                .find(|(_, &l)| l as usize >= num_classes)
            {
                return Err(Error::Data {
                    row,
                    col: self.dim,
                    msg: format!("label {l} outside {num_classes} declared classes"),
                });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.meta
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        linalg::to_f64(self.row(i))
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// A new bundle holding the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            ids.push(self.ids[i].clone());
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(
            indices.len(),
            self.dim,
            data,
            ids,
            labels,
            self.class_names.clone(),
            self.meta.clone(),
        )
    }

    /// Replaces the payload, keeping ids, labels and metadata.
    pub fn with_rows(&self, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != self.rows {
            return Err(Error::shape(self.rows, rows.len()));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for r in rows {
            if r.len() != self.dim {
                return Err(Error::shape(self.dim, r.len()));
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(
            self.rows,
            self.dim,
            data,
            self.ids.clone(),
            self.labels.clone(),
            self.class_names.clone(),
            self.meta.clone(),
        )
    }

    /// Same rows under new ids (must stay unique).
    pub fn with_ids(&self, ids: Vec<String>) -> Result<Self> {
        Self::new(
            self.rows,
            self.dim,
            self.data.clone(),
            ids,
            self.labels.clone(),
            self.class_names.clone(),
            self.meta.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = Metadata {
            ids: self.ids.clone(),
            class_names: self.class_names.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let label_bytes = self.labels.as_ref().map_or(0, |l| l.len() * 4);
        let mut out =
            Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + label_bytes + 8 + json.len());
        out.extend_from_slice(VSEB_MAGIC);
        out.extend_from_slice(&VSEB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        let flags = if self.labels.is_some() {
            FLAG_LABELS
        } else {
            0
        };
        out.extend_from_slice(&flags.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if bytes.len() < 4 || &bytes[..4] != VSEB_MAGIC {
            return Err(Error::Format("missing VSEB magic".into()));
        }
        r.take(4)?;
        let version = r.u32()?;
        if version != VSEB_VERSION {
            return Err(Error::Format(format!("unsupported VSEB version {version}")));
        }
        let rows = usize::try_from(r.u64()?).map_err(|_| Error::Format("row count".into()))?;
        let dim = usize::try_from(r.u64()?).map_err(|_| Error::Format("dim".into()))?;
        let flags = r.u32()?;
        if flags & !FLAG_LABELS != 0 {
            return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
        }
        let count = rows
            .checked_mul(dim)
            .filter(|c| c.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format("rows * dim overflows".into()))?;
        let payload = r.take(count * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let labels = if flags & FLAG_LABELS != 0 {
            let raw = r.take(
                rows.checked_mul(4)
                    .ok_or_else(|| Error::Format("label block overflows".into()))?,
            )?;
            Some(
                raw.chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        } else {
            None
        };
        let meta_len =
            usize::try_from(r.u64()?).map_err(|_| Error::Format("metadata length".into()))?;
        let json = r.take(meta_len)?;
        if !r.is_empty() {
            return Err(Error::Format(format!(
                "{} trailing bytes after metadata",
                r.remaining()
            )));
        }
        let meta: Metadata =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        Self::new(
            rows,
            dim,
            data,
            meta.ids,
            labels,
            meta.class_names,
            meta.meta,
        )
    }
}

pub fn save_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = bundle.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingBundle::from_bytes(&bytes)
}

/// Reads comma-separated numeric rows. With `has_labels` the last column is
/// an integer class id; class names are synthesized as `class_<i>`.
pub fn import_csv(path: impl AsRef<Path>, has_labels: bool) -> Result<EmbeddingBundle> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, has_labels)
}

pub fn parse_csv(text: &str, has_labels: bool) -> Result<EmbeddingBundle> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(Error::Format(format!(
                "row {row} has {} columns, expected {w}",
                record.len()
            )));
        }
        let values = if has_labels { w.saturating_sub(1) } else { w };
        if values == 0 {
            return Err(Error::Format(format!("row {row} has no embedding values")));
        }
        for (col, cell) in record.iter().take(values).enumerate() {
            let v: f32 = cell.parse().map_err(|_| Error::Data {
                row,
                col,
                msg: format!("not a number: {cell:?}"),
            })?;
            data.push(v);
        }
        if has_labels {
            let cell = &record[values];
            let l: u32 = cell.parse().map_err(|_| Error::Data {
                row,
                col: values,
                msg: format!("not a class id: {cell:?}"),
            })?;
            labels.push(l);
        }
        rows += 1;
    }
    let dim = width.map_or(0, |w| if has_labels { w - 1 } else { w });
    let ids = (0..rows).map(|i| format!("row_{i}")).collect();
    let (labels, class_names) = if has_labels {
        let n = labels.iter().max().map_or(0, |&m| m as usize + 1);
        (Some(labels), (0..n).map(|c| format!("class_{c}")).collect())
    } else {
        (None, Vec::new())
    };
    EmbeddingBundle::new(rows, dim, data, ids, labels, class_names, BTreeMap::new())
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncation {
                expected: (self.pos as u64).saturating_add(n as u64),
                found: self.bytes.len() as u64,
            }),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.remaining() == 0
    }
}

/// Per-class prototype matrix used for zero-shot cosine classification and
/// pseudo-labelling. Rows are kept both raw and unit-normalized.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    dim: usize,
    prototypes: Vec<f64>,
    unit: Vec<f64>,
    class_names: Vec<String>,
}

impl ClassifierHead {
    pub fn new(prototypes: Vec<Vec<f64>>, class_names: Vec<String>) -> Result<Self> {
        let num_classes = prototypes.len();
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier head needs at least 2 classes, got {num_classes}"
            )));
        }
        if class_names.len() != num_classes {
            return Err(Error::shape(num_classes, class_names.len()));
        }
        let dim = prototypes[0].len();
        let mut flat = Vec::with_capacity(num_classes * dim);
        let mut unit = Vec::with_capacity(num_classes * dim);
        for (c, p) in prototypes.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::shape(dim, p.len()));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data {
                    row: c,
                    col: 0,
                    msg: "non-finite prototype".into(),
                });
            }
            let n = linalg::norm(p);
            if n <= 0.0 {
                return Err(Error::DegenerateInput(format!(
                    "prototype for class {c} has zero norm"
                )));
            }
            flat.extend_from_slice(p);
            unit.extend(p.iter().map(|v| v / n));
        }
        Ok(Self {
            dim,
            prototypes: flat,
            unit,
            class_names,
        })
    }

    /// Reads a head stored as a bundle whose ids are the class names.
    pub fn from_bundle(bundle: &EmbeddingBundle) -> Result<Self> {
        let rows = (0..bundle.rows()).map(|i| bundle.row_f64(i)).collect();
        Self::new(rows, bundle.ids().to_vec())
    }

    pub fn to_bundle(&self) -> Result<EmbeddingBundle> {
        let data = self.prototypes.iter().map(|&v| v as f32).collect();
        EmbeddingBundle::new(
            self.num_classes(),
            self.dim,
            data,
            self.class_names.clone(),
            None,
            self.class_names.clone(),
            BTreeMap::new(),
        )
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.prototypes[c * self.dim..(c + 1) * self.dim]
    }

    pub fn unit_prototype(&self, c: usize) -> &[f64] {
        &self.unit[c * self.dim..(c + 1) * self.dim]
    }

    /// Cosine similarity of `x` against every class prototype.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape(self.dim, x.len()));
        }
        let n = linalg::norm(x);
        if n <= 0.0 || !n.is_finite() {
            return Err(Error::DegenerateInput("query has zero norm".into()));
        }
        Ok((0..self.num_classes())
            .map(|c| linalg::dot(x, self.unit_prototype(c)) / n)
            .collect())
    }
}

pub fn load_head(path: impl AsRef<Path>) -> Result<ClassifierHead> {
    ClassifierHead::from_bundle(&load_bundle(path)?)
}

pub fn save_head(head: &ClassifierHead, path: impl AsRef<Path>) -> Result<()> {
    save_bundle(&head.to_bundle()?, path)
}
