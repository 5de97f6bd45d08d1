//! Exhaustive cosine retrieval over a cached corpus, pseudo-labelling,
//! positive/negative grouping and contrastive steering.
//!
//! Two embedding spaces may be involved: the *retrieval* space used to find
//! neighbours and the *steering* space in which sparse codes, pseudo-labels
//! and steering vectors are computed. [`RetrievalCache`] joins them by id.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bundle::{load_bundle, ClassifierHead, EmbeddingBundle};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sae::SaeModel;
use crate::steering::{
    apply_steering, argmax_lowest, steering_vector_vs2, SteeringSource, SteeringVector,
};

pub const DEFAULT_NEIGHBORS: usize = 50;

/// Nearest neighbours of one query, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub query_id: Option<String>,
    /// Row indices into the corpus the set refers to.
    pub indices: Vec<usize>,
    pub ids: Vec<String>,
    pub similarities: Vec<f64>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Rows of a bundle widened to `f64` with their norms, validated once.
#[derive(Debug, Clone)]
pub struct CosineIndex {
    rows: Vec<Vec<f64>>,
    norms: Vec<f64>,
    ids: Vec<String>,
    by_id: HashMap<String, usize>,
}

impl CosineIndex {
    pub fn new(corpus: &EmbeddingBundle) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..corpus.rows()).map(|i| corpus.row_f64(i)).collect();
        let norms: Vec<f64> = rows.iter().map(|r| linalg::norm(r)).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::DegenerateInput(format!(
                "corpus row {i} ({}) has zero norm",
                corpus.ids()[i]
            )));
        }
        let by_id = corpus
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        Ok(Self {
            rows,
            norms,
            ids: corpus.ids().to_vec(),
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// Top-`n` rows by cosine similarity, ties to the lower row index. A row
    /// whose id equals `query_id` is skipped.
    pub fn knn(&self, query: &[f64], query_id: Option<&str>, n: usize) -> Result<NeighborSet> {
        if query.len() != self.dim() {
            return Err(Error::shape(self.dim(), query.len()));
        }
        if n == 0 {
            return Err(Error::Config(
                "number of neighbours must be at least 1".into(),
            ));
        }
        let q_norm = linalg::norm(query);
        if q_norm == 0.0 {
            return Err(Error::DegenerateInput("query has zero norm".into()));
        }
        let skip = query_id.and_then(|id| self.by_id.get(id).copied());
        let available = self.len() - usize::from(skip.is_some());
        if n > available {
            return Err(Error::Config(format!(
                "requested {n} neighbours from a corpus of {available}"
            )));
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| Some(i) != skip)
            .map(|i| {
                (
                    linalg::cosine_with_norm(query, q_norm, &self.rows[i], self.norms[i]),
                    i,
                )
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if n < scored.len() {
            scored.select_nth_unstable_by(n - 1, cmp);
            scored.truncate(n);
        }
        scored.sort_by(cmp);
        Ok(NeighborSet {
            query_id: query_id.map(str::to_owned),
            indices: scored.iter().map(|&(_, i)| i).collect(),
            ids: scored.iter().map(|&(_, i)| self.ids[i].clone()).collect(),
            similarities: scored.iter().map(|&(s, _)| s).collect(),
        })
    }
}

/// One-shot exhaustive kNN over `corpus`.
pub fn knn(
    corpus: &EmbeddingBundle,
    query: &[f64],
    query_id: Option<&str>,
    n: usize,
) -> Result<NeighborSet> {
    CosineIndex::new(corpus)?.knn(query, query_id, n)
}

/// Head argmax; ties go to the lowest class id.
pub fn pseudo_label(x: &[f64], head: &ClassifierHead) -> Result<u32> {
    Ok(argmax_lowest(&head.scores(x)?) as u32)
}

/// How neighbours are split into positives and negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupPolicy {
    /// Ground-truth labels: positives share the query's true class.
    Oracle,
    /// Positives share the query's pseudo-label.
    PseudoQuery,
    /// Positives carry the most frequent pseudo-label among the neighbours.
    PseudoMajority,
}

impl std::str::FromStr for GroupPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(GroupPolicy::Oracle),
            "pseudo_query" | "pseudo-query" => Ok(GroupPolicy::PseudoQuery),
            "pseudo_majority" | "pseudo-majority" => Ok(GroupPolicy::PseudoMajority),
            other => Err(Error::Config(format!("unknown group policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGroups {
    /// Corpus rows in the positive group, in neighbour order.
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub policy: GroupPolicy,
    /// Label that defined the positive group.
    pub positive_label: u32,
}

impl ContrastiveGroups {
    pub fn positives_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn negatives_empty(&self) -> bool {
        self.negatives.is_empty()
    }
}

/// Partitions `neighbors` (corpus rows) using per-row `labels`: true labels
/// for [`GroupPolicy::Oracle`], head pseudo-labels otherwise. `query_label`
/// is the query's label of the same kind; the majority policy ignores it.
pub fn split_groups(
    neighbors: &[usize],
    labels: &[u32],
    query_label: Option<u32>,
    policy: GroupPolicy,
) -> Result<ContrastiveGroups> {
    let label_of = |i: usize| -> Result<u32> {
        labels.get(i).copied().ok_or_else(|| {
            Error::Config(format!(
                "no label for corpus row {i} ({} labels)",
                labels.len()
            ))
        })
    };
    let positive_label = match policy {
        GroupPolicy::Oracle | GroupPolicy::PseudoQuery => query_label
            .ok_or_else(|| Error::Config(format!("{policy:?} grouping needs the query's label")))?,
        GroupPolicy::PseudoMajority => {
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for &i in neighbors {
                *counts.entry(label_of(i)?).or_default() += 1;
            }
            counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(l, _)| l)
                .ok_or(Error::EmptyGroups)?
        }
    };
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for &i in neighbors {
        if label_of(i)? == positive_label {
            positives.push(i);
        } else {
            negatives.push(i);
        }
    }
    Ok(ContrastiveGroups {
        positives,
        negatives,
        policy,
        positive_label,
    })
}

/// Mean of per-positive steering vectors minus mean of per-negative ones.
/// `vector_of(row)` supplies the steering vector of a corpus row.
pub fn contrastive_direction<F>(
    groups: &ContrastiveGroups,
    dim: usize,
    mut vector_of: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize) -> Result<Vec<f64>>,
{
    let mut mean = |rows: &[usize]| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; dim];
        if rows.is_empty() {
            return Ok(acc);
        }
        for &r in rows {
            let v = vector_of(r)?;
            if v.len() != dim {
                return Err(Error::shape(dim, v.len()));
            }
            linalg::axpy(1.0, &v, &mut acc);
        }
        let inv = 1.0 / rows.len() as f64;
        Ok(acc.into_iter().map(|a| a * inv).collect())
    };
    let pos = mean(&groups.positives)?;
    let neg = mean(&groups.negatives)?;
    Ok(linalg::sub(&pos, &neg))
}

/// Contrastive steering vector. With an empty positive group the query's own
/// steering vector is returned instead.
pub fn steering_vector_vs2pp(
    model: &SaeModel,
    query: &[f64],
    groups: &ContrastiveGroups,
    corpus: &EmbeddingBundle,
    gamma: f64,
) -> Result<SteeringVector> {
    if groups.positives_empty() && groups.negatives_empty() {
        return Err(Error::EmptyGroups);
    }
    if groups.positives_empty() {
        return steering_vector_vs2(model, query, gamma);
    }
    let direction = contrastive_direction(groups, model.dim(), |r| {
        steering_vector_vs2(model, &corpus.row_f64(r), gamma).map(|v| v.direction)
    })?;
    Ok(SteeringVector {
        direction,
        gamma,
        source: SteeringSource::Vs2pp,
    })
}

/// Normalized similarity weights `s_j / sum(s)`.
pub fn rag_weights(similarities: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = similarities.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(similarities.iter().map(|s| s / total).collect())
}

/// `alpha * q + (1 - alpha) * sum_j w_j r_j` over the neighbours' corpus rows.
pub fn weighted_rag(
    query: &[f64],
    neighbors: &NeighborSet,
    corpus: &EmbeddingBundle,
    alpha: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if query.len() != corpus.dim() {
        return Err(Error::shape(corpus.dim(), query.len()));
    }
    let weights = rag_weights(&neighbors.similarities)?;
    let mut out = linalg::scale(query, alpha);
    for (&r, w) in neighbors.indices.iter().zip(weights) {
        linalg::axpy((1.0 - alpha) * w, &corpus.row_f64(r), &mut out);
    }
    Ok(out)
}

/// A cached corpus in steering space plus an optional retrieval-space view
/// of the same items, joined by id.
#[derive(Debug, Clone)]
pub struct RetrievalCache {
    steering: EmbeddingBundle,
    index: CosineIndex,
    /// Retrieval-index row -> steering row.
    to_steering: Vec<usize>,
    dual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub steering_bundle: PathBuf,
    pub retrieval_bundle: Option<PathBuf>,
    /// Ids present in the retrieval index, in index order.
    pub ids: Vec<String>,
}

impl RetrievalCache {
    /// Retrieval and steering share one embedding space.
    pub fn single_space(steering: EmbeddingBundle) -> Result<Self> {
        let index = CosineIndex::new(&steering)?;
        let to_steering = (0..steering.rows()).collect();
        Ok(Self {
            steering,
            index,
            to_steering,
            dual: false,
        })
    }

    /// Neighbours are searched in `retrieval`; every retrieval id must
    /// exist in `steering`.
    pub fn dual_space(steering: EmbeddingBundle, retrieval: &EmbeddingBundle) -> Result<Self> {
        let pos: HashMap<&str, usize> = steering
            .ids()
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let to_steering = retrieval
            .ids()
            .iter()
            .map(|id| {
                pos.get(id.as_str()).copied().ok_or_else(|| {
                    Error::Config(format!("retrieval id {id:?} missing from steering bundle"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let index = CosineIndex::new(retrieval)?;
        Ok(Self {
            steering,
            index,
            to_steering,
            dual: true,
        })
    }

    pub fn steering(&self) -> &EmbeddingBundle {
        &self.steering
    }

    pub fn is_dual(&self) -> bool {
        self.dual
    }

    pub fn retrieval_dim(&self) -> usize {
        self.index.dim()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Neighbours of a retrieval-space query; indices refer to steering rows.
    pub fn neighbors(
        &self,
        query: &[f64],
        query_id: Option<&str>,
        n: usize,
    ) -> Result<NeighborSet> {
        let mut set = self.index.knn(query, query_id, n)?;
        for i in &mut set.indices {
            *i = self.to_steering[*i];
        }
        Ok(set)
    }

    pub fn manifest(&self, steering_path: &Path, retrieval_path: Option<&Path>) -> CacheManifest {
        CacheManifest {
            version: 1,
            steering_bundle: steering_path.to_path_buf(),
            retrieval_bundle: retrieval_path.map(Path::to_path_buf),
            ids: self.index.ids.clone(),
        }
    }

    /// Loads the bundles a manifest points at; relative paths resolve
    /// against the manifest's directory.
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CacheManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest.version != 1 {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let steering = load_bundle(base.join(&manifest.steering_bundle))?;
        let cache = match &manifest.retrieval_bundle {
            Some(r) => Self::dual_space(steering, &load_bundle(base.join(r))?)?,
            None => Self::single_space(steering)?,
        };
        if cache.index.ids != manifest.ids {
            return Err(Error::Format(
                "manifest ids do not match the retrieval bundle".into(),
            ));
        }
        Ok(cache)
    }

    pub fn save_manifest(
        &self,
        path: impl AsRef<Path>,
        steering_path: &Path,
        retrieval_path: Option<&Path>,
    ) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.manifest(steering_path, retrieval_path))
            .map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Settings for per-query contrastive steering over a cache.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub neighbors: usize,
    pub policy: GroupPolicy,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            policy: GroupPolicy::PseudoQuery,
            gamma: crate::steering::DEFAULT_GAMMA,
            lambda: crate::steering::DEFAULT_LAMBDA,
        }
    }
}

/// Precomputes per-row steering vectors and cache labels so many queries
/// can be steered cheaply.
pub struct ContrastiveSteerer<'a> {
    model: &'a SaeModel,
    cache: &'a RetrievalCache,
    head: &'a ClassifierHead,
    config: ContrastiveConfig,
    vectors: Vec<Vec<f64>>,
    labels: Vec<u32>,
}

impl<'a> ContrastiveSteerer<'a> {
    pub fn new(
        model: &'a SaeModel,
        cache: &'a RetrievalCache,
        head: &'a ClassifierHead,
        config: ContrastiveConfig,
    ) -> Result<Self> {
        let corpus = cache.steering();
        let vectors = (0..corpus.rows())
            .map(|i| {
                steering_vector_vs2(model, &corpus.row_f64(i), config.gamma).map(|v| v.direction)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = match config.policy {
            GroupPolicy::Oracle => corpus
                .labels()
                .ok_or_else(|| Error::Config("oracle grouping needs a labelled cache".into()))?
                .to_vec(),
            _ => (0..corpus.rows())
                .map(|i| pseudo_label(&corpus.row_f64(i), head))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(Self {
            model,
            cache,
            head,
            config,
            vectors,
            labels,
        })
    }

    pub fn config(&self) -> &ContrastiveConfig {
        &self.config
    }

    /// Groups for one query. `x` lives in steering space, `retrieval_query`
    /// (when the cache is dual-space) in retrieval space.
    pub fn groups(
        &self,
        x: &[f64],
        retrieval_query: Option<&[f64]>,
        query_id: Option<&str>,
        true_label: Option<u32>,
    ) -> Result<ContrastiveGroups> {
        let q = retrieval_query.unwrap_or(x);
        let neighbors = self.cache.neighbors(q, query_id, self.config.neighbors)?;
        let query_label = match self.config.policy {
            GroupPolicy::Oracle => Some(true_label.ok_or_else(|| {
                Error::Config("oracle grouping needs the query's true label".into())
            })?),
            _ => Some(pseudo_label(x, self.head)?),
        };
        split_groups(
            &neighbors.indices,
            &self.labels,
            query_label,
            self.config.policy,
        )
    }

    pub fn vector(&self, x: &[f64], groups: &ContrastiveGroups) -> Result<SteeringVector> {
        if groups.positives_empty() && groups.negatives_empty() {
            return Err(Error::EmptyGroups);
        }
        if groups.positives_empty() {
            return steering_vector_vs2(self.model, x, self.config.gamma);
        }
        let direction =
            contrastive_direction(groups, self.model.dim(), |r| Ok(self.vectors[r].clone()))?;
        Ok(SteeringVector {
            direction,
            gamma: self.config.gamma,
            source: SteeringSource::Vs2pp,
        })
    }

    pub fn steer(
        &self,
        x: &[f64],
        retrieval_query: Option<&[f64]>,
        query_id: Option<&str>,
        true_label: Option<u32>,
    ) -> Result<Vec<f64>> {
        let groups = self.groups(x, retrieval_query, query_id, true_label)?;
        let v = self.vector(x, &groups)?;
        apply_steering(x, &v, self.config.lambda)
    }
}
