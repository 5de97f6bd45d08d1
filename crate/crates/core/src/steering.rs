//! Steering vectors built from an embedding's own sparse code, plus the
//! reconstruction/amplification baselines, the zero-out and negation
//! manipulations, and class-prototype steering.
//!
//! The core construction: encode `x` to its top-k code `c`, then
//! `v = decode(gamma * c) - decode(c)`. Because the decoder is affine the
//! pre-bias cancels and `v = (gamma - 1) * W_dec c`. The steered embedding is
//! `x + lambda * v`, rescaled back to `||x||`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bundle::{ClassifierHead, EmbeddingBundle};
use crate::error::{Error, Result};
use crate::linalg;
use crate::sae::{SaeModel, SparseCode};

pub const DEFAULT_GAMMA: f64 = 1.5;
pub const DEFAULT_LAMBDA: f64 = 2.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteerMode {
    /// Return the plain SAE reconstruction.
    Reconstruction,
    /// Return the reconstruction of the amplified code.
    Amplified,
    /// Add the amplification delta to the input and restore its norm.
    Steering,
}

impl std::str::FromStr for SteerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(SteerMode::Reconstruction),
            "amplified" => Ok(SteerMode::Amplified),
            "steering" => Ok(SteerMode::Steering),
            other => Err(Error::Config(format!("unknown steering mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub mode: SteerMode,
    /// Sparsity override; `None` uses the model's own k.
    pub k: Option<usize>,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            mode: SteerMode::Steering,
            k: None,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == SteerMode::Steering && !(self.gamma.is_finite() && self.lambda.is_finite())
        {
            return Err(Error::Config(format!(
                "steering needs finite gamma and lambda, got {} and {}",
                self.gamma, self.lambda
            )));
        }
        if !self.gamma.is_finite() {
            return Err(Error::Config(format!(
                "gamma must be finite, got {}",
                self.gamma
            )));
        }
        if self.k == Some(0) {
            return Err(Error::Config("k override must be at least 1".into()));
        }
        Ok(())
    }
}

/// Where a steering vector came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringSource {
    Vs2,
    Vs2pp,
    Prototype { class: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub direction: Vec<f64>,
    pub gamma: f64,
    pub source: SteeringSource,
}

impl SteeringVector {
    pub fn zeros(dim: usize, gamma: f64, source: SteeringSource) -> Self {
        Self {
            direction: vec![0.0; dim],
            gamma,
            source,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.direction.iter().all(|&v| v == 0.0)
    }
}

fn code_for(model: &SaeModel, x: &[f64], k: Option<usize>) -> Result<SparseCode> {
    let acts = model.pre_activations(x)?;
    model.select_topk(&acts, k.unwrap_or(model.k()))
}

/// `decode(gamma * c) - decode(c)` for the top-k code `c` of `x`.
pub fn steering_vector_vs2(model: &SaeModel, x: &[f64], gamma: f64) -> Result<SteeringVector> {
    steering_vector_vs2_k(model, x, gamma, None)
}

pub fn steering_vector_vs2_k(
    model: &SaeModel,
    x: &[f64],
    gamma: f64,
    k: Option<usize>,
) -> Result<SteeringVector> {
    let code = code_for(model, x, k)?;
    if gamma == 1.0 {
        return Ok(SteeringVector::zeros(
            model.dim(),
            gamma,
            SteeringSource::Vs2,
        ));
    }
    Ok(SteeringVector {
        direction: amplification_delta(model, &code, gamma)?,
        gamma,
        source: SteeringSource::Vs2,
    })
}

fn amplification_delta(model: &SaeModel, code: &SparseCode, gamma: f64) -> Result<Vec<f64>> {
    let boosted = model.decode(&code.scaled(gamma))?;
    let base = model.decode(code)?;
    Ok(linalg::sub(&boosted, &base))
}

/// `x + lambda * v`, rescaled to the norm of `x`. Returns `x` unchanged
/// (bit for bit) when `lambda == 0` or `v == 0`.
pub fn apply_steering(x: &[f64], v: &SteeringVector, lambda: f64) -> Result<Vec<f64>> {
    if v.direction.len() != x.len() {
        return Err(Error::shape(x.len(), v.direction.len()));
    }
    let x_norm = linalg::norm(x);
    if x_norm == 0.0 {
        return Err(Error::DegenerateInput(
            "cannot steer a zero-norm embedding".into(),
        ));
    }
    if lambda == 0.0 || v.is_zero() {
        return Ok(x.to_vec());
    }
    let mut out = x.to_vec();
    linalg::axpy(lambda, &v.direction, &mut out);
    let out_norm = linalg::norm(&out);
    if out_norm == 0.0 {
        return Err(Error::Cancellation);
    }
    let s = x_norm / out_norm;
    for o in &mut out {
        *o *= s;
    }
    Ok(out)
}

/// The three SAE-based embedding modifications: reconstruction, amplified
/// reconstruction, and norm-preserving steering.
pub fn sae_steer(model: &SaeModel, x: &[f64], config: &SteeringConfig) -> Result<Vec<f64>> {
    config.validate()?;
    match config.mode {
        SteerMode::Reconstruction => model.decode(&code_for(model, x, config.k)?),
        SteerMode::Amplified => model.decode(&code_for(model, x, config.k)?.scaled(config.gamma)),
        SteerMode::Steering => {
            let v = steering_vector_vs2_k(model, x, config.gamma, config.k)?;
            apply_steering(x, &v, config.lambda)
        }
    }
}

/// Ablations of the dominant sparse features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manipulation {
    /// gamma = 0
    ZeroOut,
    /// gamma = -1
    Negate,
}

impl Manipulation {
    pub fn gamma(self) -> f64 {
        match self {
            Manipulation::ZeroOut => 0.0,
            Manipulation::Negate => -1.0,
        }
    }
}

pub fn manipulation_variant(
    model: &SaeModel,
    x: &[f64],
    manipulation: Manipulation,
    lambda: f64,
) -> Result<Vec<f64>> {
    let config = SteeringConfig {
        gamma: manipulation.gamma(),
        lambda,
        mode: SteerMode::Steering,
        k: None,
    };
    sae_steer(model, x, &config)
}

/// Per-class average dense code over the most confidently classified
/// exemplars of each class.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub m: usize,
    pub latent_dim: usize,
    pub class_names: Vec<String>,
    /// `num_classes x latent_dim`, row-major.
    pub codes: Vec<f64>,
    /// Bundle rows averaged into each prototype.
    pub exemplars: Vec<Vec<usize>>,
}

impl PrototypeTable {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn code(&self, class: usize) -> Option<&[f64]> {
        (class < self.num_classes())
            .then(|| &self.codes[class * self.latent_dim..(class + 1) * self.latent_dim])
    }

    /// Stores the table as a bundle: one row per class, ids = class names.
    pub fn to_bundle(&self) -> Result<EmbeddingBundle> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "prototype_table".into());
        meta.insert("m".into(), self.m.to_string());
        EmbeddingBundle::new(
            self.num_classes(),
            self.latent_dim,
            self.codes.iter().map(|&v| v as f32).collect(),
            self.class_names.clone(),
            None,
            self.class_names.clone(),
            meta,
        )
    }

    pub fn from_bundle(bundle: &EmbeddingBundle) -> Result<Self> {
        let m = bundle
            .meta()
            .get("m")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        Ok(Self {
            m,
            latent_dim: bundle.dim(),
            class_names: bundle.ids().to_vec(),
            codes: bundle.data().iter().map(|&v| f64::from(v)).collect(),
            exemplars: vec![Vec::new(); bundle.rows()],
        })
    }
}

/// Softmax of cosine scores at temperature 1.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// For each class, averages the dense top-k codes of its `m` members with
/// the highest head confidence for that class. Membership comes from the
/// true labels when `use_true_labels`, else from the head's argmax.
pub fn build_prototypes(
    model: &SaeModel,
    bundle: &EmbeddingBundle,
    head: &ClassifierHead,
    m: usize,
    use_true_labels: bool,
) -> Result<PrototypeTable> {
    if m == 0 {
        return Err(Error::Config("m must be at least 1".into()));
    }
    if bundle.dim() != model.dim() || head.dim() != model.dim() {
        return Err(Error::shape(model.dim(), bundle.dim()));
    }
    let labels = if use_true_labels {
        let l = bundle
            .labels()
            .ok_or_else(|| Error::Config("true-label prototypes need a labelled bundle".into()))?;
        if bundle.num_classes() > head.num_classes() {
            return Err(Error::Config(format!(
                "bundle declares {} classes, head has {}",
                bundle.num_classes(),
                head.num_classes()
            )));
        }
        Some(l)
    } else {
        None
    };

    let num_classes = head.num_classes();
    // (confidence, row) per class
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); num_classes];
    for i in 0..bundle.rows() {
        let probs = softmax(&head.scores(&bundle.row_f64(i))?);
        let class = match labels {
            Some(l) => l[i] as usize,
            None => argmax_lowest(&probs),
        };
        members[class].push((probs[class], i));
    }
    let missing: Vec<usize> = (0..num_classes)
        .filter(|&c| members[c].is_empty())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }

    let n = model.latent_dim();
    let mut codes = vec![0.0; num_classes * n];
    let mut exemplars = Vec::with_capacity(num_classes);
    for (c, list) in members.iter_mut().enumerate() {
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let chosen: Vec<usize> = list.iter().take(m).map(|&(_, i)| i).collect();
        let row = &mut codes[c * n..(c + 1) * n];
        for &i in &chosen {
            for &(j, v) in model.encode(&bundle.row_f64(i))?.entries() {
                row[j] += v;
            }
        }
        let inv = 1.0 / chosen.len() as f64;
        for v in row.iter_mut() {
            *v *= inv;
        }
        exemplars.push(chosen);
    }
    Ok(PrototypeTable {
        m,
        latent_dim: n,
        class_names: head.class_names().to_vec(),
        codes,
        exemplars,
    })
}

pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate().skip(1) {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// `decode(gamma * z) - decode(z)` for the class's prototype code `z`.
pub fn steering_vector_prototype(
    model: &SaeModel,
    class: usize,
    table: &PrototypeTable,
    gamma: f64,
) -> Result<SteeringVector> {
    let z = table.code(class).ok_or(Error::UnknownClass(class))?;
    let source = SteeringSource::Prototype { class };
    if gamma == 1.0 {
        return Ok(SteeringVector::zeros(model.dim(), gamma, source));
    }
    let boosted = model.decode_dense(&linalg::scale(z, gamma))?;
    let base = model.decode_dense(z)?;
    Ok(SteeringVector {
        direction: linalg::sub(&boosted, &base),
        gamma,
        source,
    })
}
