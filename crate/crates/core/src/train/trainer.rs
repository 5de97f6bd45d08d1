use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::EmbeddingBundle;
use crate::error::{Error, Result};
use crate::linalg;
use crate::sae::{fvu_of, CheckpointInfo, SaeModel};

use super::config::{LossMode, LrSchedule, TrainConfig};
use super::loss::{batch_outcome, ClassMeanState, LossParams};
use super::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub fvu: f64,
    pub live_latents: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    /// One JSON object per line, in step order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let line = serde_json::to_string(r).expect("log records serialize");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

/// Result of a training run that may have stopped early on a non-finite
/// loss. `model` is always the last parameter state with finite loss.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub model: SaeModel,
    pub log: TrainingLog,
    pub steps: usize,
    pub aborted_at: Option<usize>,
}

impl TrainRun {
    pub fn checkpoint_info(&self, config: &TrainConfig) -> CheckpointInfo {
        CheckpointInfo {
            step: self.steps as u64,
            selection: config.selection,
            config: serde_json::to_value(config).ok(),
        }
    }
}

pub fn train(config: &TrainConfig, data: &EmbeddingBundle) -> Result<(SaeModel, TrainingLog)> {
    let run = train_run(config, data)?;
    match run.aborted_at {
        Some(step) => Err(Error::Numerics { step }),
        None => Ok((run.model, run.log)),
    }
}

/// Fresh model: uniform(-1/sqrt(d), 1/sqrt(d)) encoder, decoder equal to its
/// transpose, zero encoder bias, pre-bias at the data mean.
pub fn init_model(
    config: &TrainConfig,
    rows: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
) -> Result<SaeModel> {
    let d = rows.first().map_or(0, Vec::len);
    let n = d * config.expansion_factor;
    let bound = 1.0 / (d as f64).sqrt();
    let enc: Vec<f64> = (0..n * d)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let mut mean = vec![0.0; d];
    for r in rows {
        linalg::axpy(1.0, r, &mut mean);
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    let mut model = SaeModel::from_parts(
        d,
        n,
        config.k,
        enc.clone(),
        vec![0.0; d * n],
        mean,
        vec![0.0; n],
        vec![false; n],
    )?
    .with_selection(config.selection);
    // latent-major decoder rows equal encoder rows: W_dec = W_enc^T
    model.dec = enc;
    Ok(model)
}

pub fn train_run(config: &TrainConfig, data: &EmbeddingBundle) -> Result<TrainRun> {
    config.validate()?;
    if data.rows() < config.batch_size.max(2) {
        return Err(Error::Config(format!(
            "{} rows cannot fill a batch of {} (need at least 2)",
            data.rows(),
            config.batch_size
        )));
    }
    let labels = match config.mode {
        LossMode::Pass => Some(data.labels().ok_or_else(|| {
            Error::Config("prototype-alignment training needs labelled data".into())
        })?),
        _ => None,
    };
    let rows: Vec<Vec<f64>> = (0..data.rows()).map(|i| data.row_f64(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init_model(config, &rows, &mut rng)?;
    let n = model.latent_dim;

    let eval_rows = &rows[..config.eval_rows.clamp(2, rows.len())];
    let batches_per_epoch = rows.len() / config.batch_size;
    let total = batches_per_epoch * config.epochs;
    let log_every = if config.log_every == 0 {
        batches_per_epoch
    } else {
        config.log_every
    };
    let schedule = LrSchedule::new(config.lr_peak, config.warmup_fraction, total);
    let params = LossParams {
        alpha_l1: config.alpha_l1,
        w_aux: config.w_aux,
    };
    let mut means =
        labels.map(|_| ClassMeanState::new(data.num_classes(), n, config.class_mean_decay));
    let mut adam = Adam::new(&model);
    let mut idle = vec![0usize; n];
    let mut log = TrainingLog::default();

    let fvu_now = |m: &SaeModel| -> Result<f64> {
        let recon = eval_rows
            .iter()
            .map(|x| fvu_recon(m, config.mode, x))
            .collect::<Result<Vec<_>>>()?;
        fvu_of(eval_rows, &recon)
    };

    {
        let first = &rows[..config.batch_size];
        let first_labels = labels.map(|l| &l[..config.batch_size]);
        let mut probe = means.clone();
        if let (Some(p), Some(l)) = (probe.as_mut(), first_labels) {
            let codes = first
                .iter()
                .map(|x| model.encode(x))
                .collect::<Result<Vec<_>>>()?;
            p.seed_unseen(&codes, l)?;
        }
        let o = batch_outcome(
            &model,
            first,
            first_labels,
            config.mode,
            params,
            probe.as_ref(),
        )?;
        log.records.push(LogRecord {
            step: 0,
            lr: 0.0,
            loss: o.loss,
            fvu: fvu_now(&model)?,
            live_latents: model.live_latents(),
        });
    }

    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut step = 0usize;
    let mut loss_acc = 0.0;
    let mut loss_count = 0usize;
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut batch_labels = Vec::with_capacity(config.batch_size);

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(config.batch_size) {
            step += 1;
            batch.clear();
            batch.extend(chunk.iter().map(|&i| rows[i].clone()));
            batch_labels.clear();
            if let Some(l) = labels {
                batch_labels.extend(chunk.iter().map(|&i| l[i]));
            }
            let batch_labels_opt = labels.map(|_| batch_labels.as_slice());
            if let Some(state) = means.as_mut() {
                let codes = batch
                    .iter()
                    .map(|x| model.encode(x))
                    .collect::<Result<Vec<_>>>()?;
                state.seed_unseen(&codes, &batch_labels)?;
            }

            let outcome = batch_outcome(
                &model,
                &batch,
                batch_labels_opt,
                config.mode,
                params,
                means.as_ref(),
            )?;
            if !outcome.loss.is_finite() {
                return Ok(TrainRun {
                    model,
                    log,
                    steps: step - 1,
                    aborted_at: Some(step),
                });
            }
            let last_good = model.clone();
            let lr = schedule.lr(step);
            adam.step(&mut model, &outcome.grads, lr);
            if config.mode == LossMode::L1 {
                normalize_decoder(&mut model);
            }
            if model.validate().is_err() {
                return Ok(TrainRun {
                    model: last_good,
                    log,
                    steps: step - 1,
                    aborted_at: Some(step),
                });
            }
            if let Some(state) = means.as_mut() {
                state.update(&outcome.codes, &batch_labels)?;
            }
            track_dead(&mut model, &outcome.codes, &mut idle, config.dead_threshold);

            loss_acc += outcome.loss;
            loss_count += 1;
            if step.is_multiple_of(log_every) || step == total {
                log.records.push(LogRecord {
                    step,
                    lr,
                    loss: loss_acc / loss_count as f64,
                    fvu: fvu_now(&model)?,
                    live_latents: model.live_latents(),
                });
                loss_acc = 0.0;
                loss_count = 0;
            }
        }
    }

    Ok(TrainRun {
        model,
        log,
        steps: step,
        aborted_at: None,
    })
}

fn fvu_recon(model: &SaeModel, mode: LossMode, x: &[f64]) -> Result<Vec<f64>> {
    match mode {
        LossMode::L1 => model.decode_dense(&model.encode_relu(x)?),
        _ => model.reconstruct(x).map(|(xh, _)| xh),
    }
}

fn normalize_decoder(model: &mut SaeModel) {
    let d = model.dim;
    for col in model.dec.chunks_exact_mut(d) {
        let n = linalg::norm(col);
        if n > 0.0 {
            for v in col {
                *v /= n;
            }
        }
    }
}

/// Marks latents that went `threshold` consecutive batches without being
/// selected. Never drops the live count below `k`.
fn track_dead(
    model: &mut SaeModel,
    codes: &[crate::sae::SparseCode],
    idle: &mut [usize],
    threshold: usize,
) {
    let mut fired = vec![false; idle.len()];
    for code in codes {
        for &(j, _) in code.entries() {
            fired[j] = true;
        }
    }
    let mut live = model.live_latents();
    for j in 0..idle.len() {
        if model.dead[j] {
            continue;
        }
        if fired[j] {
            idle[j] = 0;
            continue;
        }
        idle[j] += 1;
        if threshold > 0 && idle[j] >= threshold && live > model.k {
            model.dead[j] = true;
            live -= 1;
        }
    }
}
