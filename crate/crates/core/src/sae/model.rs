use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bundle::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::linalg;

/// Which pre-activations survive top-k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Largest absolute values.
    #[default]
    Magnitude,
    /// Largest signed values.
    Signed,
}

/// Sparse latent code: `(latent, value)` pairs ordered by descending
/// magnitude, ties by ascending latent index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCode {
    entries: Vec<(usize, f64)>,
}

impl SparseCode {
    pub fn new(mut entries: Vec<(usize, f64)>) -> Self {
        entries.sort_by(|a, b| cmp_desc(a.1.abs(), a.0, b.1.abs(), b.0));
        Self { entries }
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|&(i, _)| i).collect()
    }

    /// Multiplies every activation by `gamma`; the support is unchanged.
    pub fn scaled(&self, gamma: f64) -> Self {
        Self {
            entries: self.entries.iter().map(|&(i, v)| (i, v * gamma)).collect(),
        }
    }

    pub fn to_dense(&self, latent_dim: usize) -> Vec<f64> {
        let mut z = vec![0.0; latent_dim];
        for &(i, v) in &self.entries {
            z[i] = v;
        }
        z
    }

    /// Builds a code from a dense vector, keeping non-zero entries.
    pub fn from_dense(z: &[f64]) -> Self {
        Self::new(
            z.iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, &v)| (i, v))
                .collect(),
        )
    }
}

/// Descending by key, ascending by index on ties.
fn cmp_desc(ka: f64, ia: usize, kb: f64, ib: usize) -> Ordering {
    kb.total_cmp(&ka).then(ia.cmp(&ib))
}

/// Keeps the `k` strongest non-dead activations. Ties go to the lower index,
/// so the result is fully deterministic.
pub fn select_topk(acts: &[f64], k: usize, dead: &[bool], rule: Selection) -> Result<SparseCode> {
    if dead.len() != acts.len() {
        return Err(Error::shape(acts.len(), dead.len()));
    }
    let key = |v: f64| match rule {
        Selection::Magnitude => v.abs(),
        Selection::Signed => v,
    };
    let mut live: Vec<usize> = (0..acts.len()).filter(|&j| !dead[j]).collect();
    if k > live.len() {
        return Err(Error::Config(format!(
            "k = {k} exceeds {} live latents",
            live.len()
        )));
    }
    let cmp = |a: &usize, b: &usize| cmp_desc(key(acts[*a]), *a, key(acts[*b]), *b);
    if k < live.len() && k > 0 {
        live.select_nth_unstable_by(k - 1, cmp);
    }
    live.truncate(k);
    Ok(SparseCode::new(
        live.into_iter().map(|j| (j, acts[j])).collect(),
    ))
}

/// A sparse autoencoder. Parameters are held in `f64`; checkpoints store
/// them as `f32`.
///
/// Storage is latent-major for both matrices: row `j` of `enc` is the
/// encoder row for latent `j`, row `j` of `dec` is decoder column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub(crate) dim: usize,
    pub(crate) latent_dim: usize,
    pub(crate) k: usize,
    pub(crate) enc: Vec<f64>,
    pub(crate) dec: Vec<f64>,
    pub(crate) pre_bias: Vec<f64>,
    pub(crate) enc_bias: Vec<f64>,
    pub(crate) dead: Vec<bool>,
    pub(crate) selection: Selection,
}

impl SaeModel {
    /// Assembles a model from explicit parameters.
    ///
    /// `enc` is `latent_dim x dim` (W_enc, row-major) and `dec` is
    /// `dim x latent_dim` (W_dec, row-major).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dim: usize,
        latent_dim: usize,
        k: usize,
        enc: Vec<f64>,
        dec: Vec<f64>,
        pre_bias: Vec<f64>,
        enc_bias: Vec<f64>,
        dead: Vec<bool>,
    ) -> Result<Self> {
        let n = latent_dim;
        if dec.len() != dim * n {
            return Err(Error::shape(dim * n, dec.len()));
        }
        let mut dec_t = vec![0.0; n * dim];
        for r in 0..dim {
            for j in 0..n {
                dec_t[j * dim + r] = dec[r * n + j];
            }
        }
        let model = Self {
            dim,
            latent_dim,
            k,
            enc,
            dec: dec_t,
            pre_bias,
            enc_bias,
            dead,
            selection: Selection::Magnitude,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_selection(mut self, selection: Selection) -> Self {
        self.selection = selection;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = (self.dim, self.latent_dim);
        if d == 0 || n == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if n % d != 0 {
            return Err(Error::Config(format!(
                "latent_dim {n} is not a multiple of dim {d}"
            )));
        }
        for (len, want) in [
            (self.enc.len(), n * d),
            (self.dec.len(), n * d),
            (self.pre_bias.len(), d),
            (self.enc_bias.len(), n),
            (self.dead.len(), n),
        ] {
            if len != want {
                return Err(Error::shape(want, len));
            }
        }
        if self.k == 0 || self.k > n {
            return Err(Error::Config(format!("k = {} outside 1..={n}", self.k)));
        }
        if self.live_latents() < self.k {
            return Err(Error::Config(format!(
                "{} live latents cannot support k = {}",
                self.live_latents(),
                self.k
            )));
        }
        let mut all = self
            .enc
            .iter()
            .chain(&self.dec)
            .chain(&self.pre_bias)
            .chain(&self.enc_bias);
        if all.any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite model parameter".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn expansion_factor(&self) -> usize {
        self.latent_dim / self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn selection(&self) -> Selection {
        self.selection
    }

    pub fn pre_bias(&self) -> &[f64] {
        &self.pre_bias
    }

    pub fn enc_bias(&self) -> &[f64] {
        &self.enc_bias
    }

    pub fn dead_mask(&self) -> &[bool] {
        &self.dead
    }

    pub fn is_dead(&self, j: usize) -> bool {
        self.dead[j]
    }

    pub fn live_latents(&self) -> usize {
        self.dead.iter().filter(|d| !**d).count()
    }

    /// Encoder row for latent `j`.
    pub fn encoder_row(&self, j: usize) -> &[f64] {
        &self.enc[j * self.dim..(j + 1) * self.dim]
    }

    /// Decoder column for latent `j` (its dictionary atom).
    pub fn decoder_column(&self, j: usize) -> &[f64] {
        &self.dec[j * self.dim..(j + 1) * self.dim]
    }

    /// W_dec as a `dim x latent_dim` row-major matrix.
    pub fn decoder_matrix(&self) -> Vec<f64> {
        let (d, n) = (self.dim, self.latent_dim);
        let mut out = vec![0.0; d * n];
        for j in 0..n {
            for r in 0..d {
                out[r * n + j] = self.dec[j * d + r];
            }
        }
        out
    }

    pub fn encoder_matrix(&self) -> &[f64] {
        &self.enc
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(self.dim, x.len()));
        }
        Ok(())
    }

    /// `W_enc (x - b_pre)`, with dead latents forced to zero.
    pub fn pre_activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let centered = linalg::sub(x, &self.pre_bias);
        Ok((0..self.latent_dim)
            .map(|j| {
                if self.dead[j] {
                    0.0
                } else {
                    linalg::dot(self.encoder_row(j), &centered)
                }
            })
            .collect())
    }

    /// `ReLU(W_enc (x - b_pre) + b_enc)`, the encoder of the l1 objective.
    pub fn encode_relu(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.pre_activations(x)?;
        for (j, zj) in z.iter_mut().enumerate() {
            if !self.dead[j] {
                *zj = (*zj + self.enc_bias[j]).max(0.0);
            }
        }
        Ok(z)
    }

    pub fn select_topk(&self, acts: &[f64], k: usize) -> Result<SparseCode> {
        select_topk(acts, k, &self.dead, self.selection)
    }

    pub fn encode(&self, x: &[f64]) -> Result<SparseCode> {
        let acts = self.pre_activations(x)?;
        self.select_topk(&acts, self.k)
    }

    /// `W_dec z + b_pre`, accumulated over the code's support only.
    pub fn decode(&self, code: &SparseCode) -> Result<Vec<f64>> {
        let mut out = self.pre_bias.clone();
        for &(j, v) in code.entries() {
            if j >= self.latent_dim {
                return Err(Error::shape(self.latent_dim, j + 1));
            }
            linalg::axpy(v, self.decoder_column(j), &mut out);
        }
        Ok(out)
    }

    /// Dense-latent decode, used for averaged prototype codes. Non-zero
    /// entries are accumulated in the same order `decode` would use.
    pub fn decode_dense(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::shape(self.latent_dim, z.len()));
        }
        self.decode(&SparseCode::from_dense(z))
    }

    pub fn reconstruct(&self, x: &[f64]) -> Result<(Vec<f64>, SparseCode)> {
        let code = self.encode(x)?;
        let x_hat = self.decode(&code)?;
        Ok((x_hat, code))
    }

    /// Fraction of variance unexplained over a batch:
    /// `||X - X_hat||_F^2 / ||X - mean(X)||_F^2`.
    pub fn fvu(&self, batch: &EmbeddingBundle) -> Result<f64> {
        if batch.dim() != self.dim {
            return Err(Error::shape(self.dim, batch.dim()));
        }
        let rows: Vec<Vec<f64>> = (0..batch.rows()).map(|i| batch.row_f64(i)).collect();
        self.fvu_rows(&rows)
    }

    pub fn fvu_rows(&self, rows: &[Vec<f64>]) -> Result<f64> {
        let recon = rows
            .iter()
            .map(|x| self.reconstruct(x).map(|(xh, _)| xh))
            .collect::<Result<Vec<_>>>()?;
        fvu_of(rows, &recon)
    }
}

/// FVU of an arbitrary reconstruction of `rows`.
pub fn fvu_of(rows: &[Vec<f64>], recon: &[Vec<f64>]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "FVU needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        linalg::axpy(1.0, r, &mut mean);
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, xh) in rows.iter().zip(recon) {
        num += linalg::sq_dist(x, xh);
        den += linalg::sq_dist(x, &mean);
    }
    if den == 0.0 {
        return Err(Error::DegenerateBatch("batch has zero variance".into()));
    }
    Ok(num / den)
}
