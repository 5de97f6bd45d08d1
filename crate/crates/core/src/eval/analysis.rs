use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{evaluate, EvalReport};
use crate::bundle::{ClassifierHead, EmbeddingBundle};
use crate::error::{Error, Result};
use crate::linalg;
use crate::retrieval::{ContrastiveConfig, ContrastiveSteerer, RetrievalCache};
use crate::sae::SaeModel;
use crate::steering::{
    manipulation_variant, sae_steer, Manipulation, SteerMode, SteeringConfig, SteeringVector,
};

/// Top-1 accuracy over a (gamma, lambda) grid; `accuracy[i][j]` pairs
/// `gammas[i]` with `lambdas[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub gammas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub accuracy: Vec<Vec<f64>>,
    pub baseline: f64,
}

impl SweepGrid {
    /// Highest-accuracy cell, earliest on ties.
    pub fn best(&self) -> Option<(f64, f64, f64)> {
        let mut best: Option<(f64, f64, f64)> = None;
        for (i, row) in self.accuracy.iter().enumerate() {
            for (j, &acc) in row.iter().enumerate() {
                if best.is_none_or(|b| acc > b.2) {
                    best = Some((self.gammas[i], self.lambdas[j], acc));
                }
            }
        }
        best
    }
}

pub fn sweep(
    test: &EmbeddingBundle,
    head: &ClassifierHead,
    model: &SaeModel,
    gammas: &[f64],
    lambdas: &[f64],
) -> Result<SweepGrid> {
    if gammas.is_empty() || lambdas.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one gamma and one lambda".into(),
        ));
    }
    let baseline = evaluate(test, head, None, serde_json::Value::Null)?.top1;
    let mut accuracy = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let mut row = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let config = SteeringConfig {
                gamma,
                lambda,
                mode: SteerMode::Steering,
                k: None,
            };
            config.validate()?;
            let steer = |_: usize, x: &[f64]| sae_steer(model, x, &config);
            row.push(evaluate(test, head, Some(&steer), serde_json::Value::Null)?.top1);
        }
        accuracy.push(row);
    }
    Ok(SweepGrid {
        gammas: gammas.to_vec(),
        lambdas: lambdas.to_vec(),
        accuracy,
        baseline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub gamma: f64,
    pub lambda: f64,
    pub baseline: f64,
    pub vs2: f64,
    pub zero_out: f64,
    pub negate: f64,
    /// `negate <= zero_out < baseline`
    pub ordering_holds: bool,
}

pub fn manipulation_ablation(
    test: &EmbeddingBundle,
    head: &ClassifierHead,
    model: &SaeModel,
    gamma: f64,
    lambda: f64,
) -> Result<AblationReport> {
    let run = |f: Option<&super::report::SteerFn<'_>>| -> Result<EvalReport> {
        evaluate(test, head, f, serde_json::Value::Null)
    };
    let config = SteeringConfig {
        gamma,
        lambda,
        mode: SteerMode::Steering,
        k: None,
    };
    config.validate()?;
    let baseline = run(None)?.top1;
    let vs2 = run(Some(&|_, x: &[f64]| sae_steer(model, x, &config)))?.top1;
    let zero_out = run(Some(&|_, x: &[f64]| {
        manipulation_variant(model, x, Manipulation::ZeroOut, lambda)
    }))?
    .top1;
    let negate = run(Some(&|_, x: &[f64]| {
        manipulation_variant(model, x, Manipulation::Negate, lambda)
    }))?
    .top1;
    Ok(AblationReport {
        gamma,
        lambda,
        baseline,
        vs2,
        zero_out,
        negate,
        ordering_holds: negate <= zero_out && zero_out < baseline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPair {
    pub a: usize,
    pub b: usize,
    pub name_a: String,
    pub name_b: String,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub names: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub mean_off_diagonal: f64,
    /// Most similar pairs first.
    pub top_pairs: Vec<OverlapPair>,
}

/// Pairwise cosine similarity between per-class steering vectors.
pub fn prototype_orthogonality(
    vectors: &[(String, SteeringVector)],
    top: usize,
) -> Result<OrthogonalityReport> {
    if vectors.len() < 2 {
        return Err(Error::Config("need at least two classes".into()));
    }
    let norms: Vec<f64> = vectors
        .iter()
        .map(|(_, v)| linalg::norm(&v.direction))
        .collect();
    for ((name, _), &n) in vectors.iter().zip(&norms) {
        if n == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "class {name} has a zero steering vector"
            )));
        }
    }
    let c = vectors.len();
    let mut matrix = vec![vec![0.0; c]; c];
    let mut pairs = Vec::new();
    let mut off_sum = 0.0;
    for i in 0..c {
        matrix[i][i] = 1.0;
        for j in (i + 1)..c {
            let cos = linalg::dot(&vectors[i].1.direction, &vectors[j].1.direction)
                / (norms[i] * norms[j]);
            matrix[i][j] = cos;
            matrix[j][i] = cos;
            off_sum += 2.0 * cos;
            pairs.push(OverlapPair {
                a: i,
                b: j,
                name_a: vectors[i].0.clone(),
                name_b: vectors[j].0.clone(),
                cosine: cos,
            });
        }
    }
    pairs.sort_by(|x, y| {
        y.cosine
            .total_cmp(&x.cosine)
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });
    pairs.truncate(top);
    Ok(OrthogonalityReport {
        names: vectors.iter().map(|(n, _)| n.clone()).collect(),
        matrix,
        mean_off_diagonal: off_sum / (c * (c - 1)) as f64,
        top_pairs: pairs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageItem {
    pub row: usize,
    pub id: String,
    pub activation: f64,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub feature: usize,
    pub items: Vec<CoverageItem>,
    pub label_histogram: BTreeMap<u32, usize>,
    /// All top items share one activation value.
    pub degenerate: bool,
}

/// The `m` rows with the highest pre-activation on `feature`, ties to the
/// lower row index.
pub fn concept_coverage(
    model: &SaeModel,
    bundle: &EmbeddingBundle,
    feature: usize,
    m: usize,
) -> Result<CoverageReport> {
    if feature >= model.latent_dim() {
        return Err(Error::Config(format!(
            "feature {feature} out of range for {} latents",
            model.latent_dim()
        )));
    }
    if model.is_dead(feature) {
        return Err(Error::DeadFeature(feature));
    }
    if bundle.dim() != model.dim() {
        return Err(Error::shape(model.dim(), bundle.dim()));
    }
    let mut acts: Vec<(usize, f64)> = (0..bundle.rows())
        .into_par_iter()
        .map(|i| {
            let x = bundle.row_f64(i);
            let a = linalg::dot(
                model.encoder_row(feature),
                &linalg::sub(&x, model.pre_bias()),
            );
            (i, a)
        })
        .collect();
    acts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    acts.truncate(m);
    let labels = bundle.labels();
    let items: Vec<CoverageItem> = acts
        .iter()
        .map(|&(row, activation)| CoverageItem {
            row,
            id: bundle.ids()[row].clone(),
            activation,
            label: labels.map(|l| l[row]),
        })
        .collect();
    let mut label_histogram = BTreeMap::new();
    for item in &items {
        if let Some(l) = item.label {
            *label_histogram.entry(l).or_insert(0) += 1;
        }
    }
    let degenerate = items.len() > 1 && items.iter().all(|it| it.activation == items[0].activation);
    Ok(CoverageReport {
        feature,
        items,
        label_histogram,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNPoint {
    pub n: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopNCurve {
    pub baseline: f64,
    pub points: Vec<TopNPoint>,
}

/// Contrastive steering accuracy as a function of the neighbor count.
/// `test_retrieval` supplies retrieval-space queries for dual-space caches.
pub fn topn_ablation(
    test: &EmbeddingBundle,
    test_retrieval: Option<&EmbeddingBundle>,
    head: &ClassifierHead,
    model: &SaeModel,
    cache: &RetrievalCache,
    base: ContrastiveConfig,
    ns: &[usize],
) -> Result<TopNCurve> {
    if let Some(r) = test_retrieval {
        if r.rows() != test.rows() {
            return Err(Error::shape(test.rows(), r.rows()));
        }
    }
    let baseline = evaluate(test, head, None, serde_json::Value::Null)?.top1;
    let labels = test.labels();
    let mut points = Vec::with_capacity(ns.len());
    for &n in ns {
        let config = ContrastiveConfig {
            neighbors: n,
            ..base
        };
        let steerer = ContrastiveSteerer::new(model, cache, head, config)?;
        let steer = |i: usize, x: &[f64]| {
            let rq = test_retrieval.map(|r| r.row_f64(i));
            steerer.steer(x, rq.as_deref(), Some(&test.ids()[i]), labels.map(|l| l[i]))
        };
        let report = evaluate(test, head, Some(&steer), serde_json::Value::Null)?;
        points.push(TopNPoint {
            n,
            top1: report.top1,
            top5: report.top5,
        });
    }
    Ok(TopNCurve { baseline, points })
}
