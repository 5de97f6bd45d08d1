//! Batch losses and their hand-derived gradients.
//!
//! All three objectives share the decoder `x_hat = W_dec z + b_pre` and the
//! centred input `c = x - b_pre`. With `g = 2 (x_hat - x) / B`:
//!
//! ```text
//! dW_dec[:, j] += z_j g
//! dz_j          = W_dec[:, j] . g   (+ objective-specific terms)
//! dW_enc[j, :] += dz_j c            (only where z_j depends on the encoder)
//! db_pre       += g - sum_j dz_j W_enc[j, :]
//! ```
//!
//! Top-k selection is treated as a fixed mask: gradients reach only the
//! selected latents.

use crate::error::{Error, Result};
use crate::linalg;
use crate::sae::{SaeModel, SparseCode};

use super::config::LossMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub alpha_l1: f64,
    pub w_aux: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            alpha_l1: 1e-3,
            w_aux: 0.8,
        }
    }
}

/// Parameter-shaped gradient buffers. `enc` and `dec` use the model's
/// latent-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub enc: Vec<f64>,
    pub dec: Vec<f64>,
    pub pre_bias: Vec<f64>,
    pub enc_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &SaeModel) -> Self {
        Self {
            enc: vec![0.0; model.enc.len()],
            dec: vec![0.0; model.dec.len()],
            pre_bias: vec![0.0; model.dim],
            enc_bias: vec![0.0; model.latent_dim],
        }
    }

    pub fn parts(&self) -> [&[f64]; 4] {
        [&self.enc, &self.dec, &self.pre_bias, &self.enc_bias]
    }

    pub fn max_abs(&self) -> f64 {
        self.parts()
            .iter()
            .flat_map(|p| p.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Running per-class mean of dense top-k codes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMeanState {
    num_classes: usize,
    latent_dim: usize,
    decay: f64,
    means: Vec<f64>,
    seen: Vec<bool>,
}

impl ClassMeanState {
    pub fn new(num_classes: usize, latent_dim: usize, decay: f64) -> Self {
        Self {
            num_classes,
            latent_dim,
            decay,
            means: vec![0.0; num_classes * latent_dim],
            seen: vec![false; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        &self.means[class * self.latent_dim..(class + 1) * self.latent_dim]
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen[class]
    }

    /// EMA update from one batch. A class seen for the first time takes the
    /// batch average directly; classes absent from the batch are untouched.
    pub fn update(&mut self, codes: &[SparseCode], labels: &[u32]) -> Result<()> {
        if codes.len() != labels.len() {
            return Err(Error::shape(codes.len(), labels.len()));
        }
        let n = self.latent_dim;
        let mut sums = vec![0.0; self.num_classes * n];
        let mut counts = vec![0usize; self.num_classes];
        for (row, (code, &label)) in codes.iter().zip(labels).enumerate() {
            let c = label as usize;
            if c >= self.num_classes {
                return Err(Error::Data {
                    row,
                    col: 0,
                    msg: format!("label {label} outside {} classes", self.num_classes),
                });
            }
            counts[c] += 1;
            for &(j, v) in code.entries() {
                if j >= n {
                    return Err(Error::shape(n, j + 1));
                }
                sums[c * n + j] += v;
            }
        }
        for c in 0..self.num_classes {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let mean = &mut self.means[c * n..(c + 1) * n];
            let batch = &sums[c * n..(c + 1) * n];
            if self.seen[c] {
                for (m, b) in mean.iter_mut().zip(batch) {
                    *m = self.decay * *m + (1.0 - self.decay) * (b * inv);
                }
            } else {
                for (m, b) in mean.iter_mut().zip(batch) {
                    *m = b * inv;
                }
                self.seen[c] = true;
            }
        }
        Ok(())
    }

    /// Bootstraps classes that have never been seen from `codes`, leaving
    /// classes already tracked unchanged.
    pub fn seed_unseen(&mut self, codes: &[SparseCode], labels: &[u32]) -> Result<()> {
        let keep: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| (l as usize) < self.num_classes && !self.seen[l as usize])
            .map(|(i, _)| i)
            .collect();
        if keep.is_empty() {
            return Ok(());
        }
        let codes: Vec<SparseCode> = keep.iter().map(|&i| codes[i].clone()).collect();
        let labels: Vec<u32> = keep.iter().map(|&i| labels[i]).collect();
        self.update(&codes, &labels)
    }
}

/// Loss value, gradients and the per-row codes that produced them.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub grads: Gradients,
    /// Top-k codes (or the non-zero ReLU code in l1 mode), one per row.
    pub codes: Vec<SparseCode>,
}

/// Mean per-row loss over `batch` and its gradient with respect to every
/// model parameter.
pub fn compute_loss(
    model: &SaeModel,
    batch: &[Vec<f64>],
    labels: Option<&[u32]>,
    mode: LossMode,
    params: LossParams,
    class_means: Option<&ClassMeanState>,
) -> Result<(f64, Gradients)> {
    batch_outcome(model, batch, labels, mode, params, class_means).map(|o| (o.loss, o.grads))
}

pub fn batch_outcome(
    model: &SaeModel,
    batch: &[Vec<f64>],
    labels: Option<&[u32]>,
    mode: LossMode,
    params: LossParams,
    class_means: Option<&ClassMeanState>,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let pass = if mode == LossMode::Pass {
        let labels =
            labels.ok_or_else(|| Error::Config("prototype alignment needs labels".into()))?;
        let means = class_means
            .ok_or_else(|| Error::Config("prototype alignment needs class means".into()))?;
        if labels.len() != batch.len() {
            return Err(Error::shape(batch.len(), labels.len()));
        }
        Some((labels, means))
    } else {
        None
    };

    let (d, n) = (model.dim, model.latent_dim);
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros(model);
    let mut codes = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    let mut g = vec![0.0; d];

    for (row, x) in batch.iter().enumerate() {
        if x.len() != d {
            return Err(Error::shape(d, x.len()));
        }
        let centered = linalg::sub(x, &model.pre_bias);
        // (latent, activation, encoder pre-activation is differentiable)
        let active: Vec<(usize, f64)> = match mode {
            LossMode::Topk | LossMode::Pass => {
                let acts = model.pre_activations(x)?;
                model.select_topk(&acts, model.k)?.entries().to_vec()
            }
            LossMode::L1 => model
                .encode_relu(x)?
                .into_iter()
                .enumerate()
                .filter(|&(j, z)| z > 0.0 && !model.dead[j])
                .collect(),
        };

        let mut x_hat = model.pre_bias.clone();
        for &(j, z) in &active {
            linalg::axpy(z, model.decoder_column(j), &mut x_hat);
        }
        let mut row_loss = linalg::sq_dist(&x_hat, x);
        for ((gi, xh), xi) in g.iter_mut().zip(&x_hat).zip(x) {
            *gi = 2.0 * (xh - xi) * inv_b;
        }
        linalg::axpy(1.0, &g, &mut grads.pre_bias);

        let mut dz: Vec<f64> = active
            .iter()
            .map(|&(j, _)| linalg::dot(model.decoder_column(j), &g))
            .collect();

        match mode {
            LossMode::Topk => {}
            LossMode::L1 => {
                let l1: f64 = active.iter().map(|&(_, z)| z).sum();
                row_loss += params.alpha_l1 * l1;
                for v in &mut dz {
                    *v += params.alpha_l1 * inv_b;
                }
            }
            LossMode::Pass => {
                let (labels, means) = pass.expect("checked above");
                let class = labels[row] as usize;
                if class >= means.num_classes() {
                    return Err(Error::Data {
                        row,
                        col: 0,
                        msg: format!("label {class} outside {} classes", means.num_classes()),
                    });
                }
                let target = means.mean(class);
                let mut z = vec![0.0; n];
                for &(j, v) in &active {
                    z[j] = v;
                }
                row_loss += params.w_aux * linalg::sq_dist(&z, target);
                for (slot, &(j, v)) in dz.iter_mut().zip(&active) {
                    *slot += 2.0 * params.w_aux * (v - target[j]) * inv_b;
                }
            }
        }
        loss += row_loss;

        for (&(j, z), &dzj) in active.iter().zip(&dz) {
            linalg::axpy(z, &g, &mut grads.dec[j * d..(j + 1) * d]);
            linalg::axpy(dzj, &centered, &mut grads.enc[j * d..(j + 1) * d]);
            linalg::axpy(-dzj, model.encoder_row(j), &mut grads.pre_bias);
            if mode == LossMode::L1 {
                grads.enc_bias[j] += dzj;
            }
        }
        codes.push(SparseCode::new(active));
    }

    Ok(BatchOutcome {
        loss: loss * inv_b,
        grads,
        codes,
    })
}

/// Compares every analytic partial derivative against a central difference
/// with step `epsilon` and returns the worst relative error.
///
/// Relative error is `|a - f| / max(|a|, |f|, 1e-6)`, so parameters whose
/// true derivative is zero contribute their absolute error scaled by 1e6.
pub fn gradient_check(
    model: &SaeModel,
    batch: &[Vec<f64>],
    labels: Option<&[u32]>,
    mode: LossMode,
    params: LossParams,
    class_means: Option<&ClassMeanState>,
    epsilon: f64,
) -> Result<f64> {
    let (_, analytic) = compute_loss(model, batch, labels, mode, params, class_means)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for part in 0..4 {
        let len = analytic.parts()[part].len();
        for i in 0..len {
            let original = param_mut(&mut probe, part)[i];
            param_mut(&mut probe, part)[i] = original + epsilon;
            let (up, _) = compute_loss(&probe, batch, labels, mode, params, class_means)?;
            param_mut(&mut probe, part)[i] = original - epsilon;
            let (down, _) = compute_loss(&probe, batch, labels, mode, params, class_means)?;
            param_mut(&mut probe, part)[i] = original;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.parts()[part][i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

pub(crate) fn param_mut(model: &mut SaeModel, part: usize) -> &mut [f64] {
    match part {
        0 => &mut model.enc,
        1 => &mut model.dec,
        2 => &mut model.pre_bias,
        3 => &mut model.enc_bias,
        _ => unreachable!("four parameter groups"),
    }
}
