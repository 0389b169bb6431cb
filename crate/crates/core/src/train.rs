//! Mini-batch Adam ascent on the objective, with metrics logging,
//! checkpointing, and deterministic resume.
//!
//! All per-epoch randomness (shuffling, latent noise) derives from
//! (seed, epoch), so resuming from a checkpoint reproduces the exact
//! losses the uninterrupted run would have produced.

use crate::config::ExperimentConfig;
use crate::data::{train_sequence, DataLayout, SequenceDataset};
use crate::elbo::{elbo_with_grad, iw_nll, EvalSequence, TrainSequence};
use crate::error::{Error, Result};
use crate::model::{Model, StBatch};
use crate::nn::{adam_step, AdamConfig, AdamState, Checkpoint, CHECKPOINT_VERSION};
use crate::stats::derive_rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

const TAG_SHUFFLE: u64 = 0x5F1E;
const TAG_EPOCH: u64 = 0xE70C;
const TAG_EVAL: u64 = 0xEA1;

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub elbo: f64,
    pub e1: f64,
    pub e2: f64,
    pub e3: f64,
    pub wall_s: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub params: Vec<f64>,
    pub metrics: Vec<EpochMetrics>,
    /// Held-out IW-NLL per epoch when evaluation data was supplied.
    pub eval_nll: Vec<f64>,
}

fn fisher_yates(indices: &mut [usize], seed: u64, epoch: usize) {
    let mut rng = derive_rng(seed, &[TAG_SHUFFLE, epoch as u64]);
    for i in (1..indices.len()).rev() {
        let j = (crate::stats::draw_uniform(&mut rng) * (i + 1) as f64) as usize;
        indices.swap(i, j.min(i));
    }
}

/// Deterministic components of one metrics row, formatted for the log.
fn metrics_line(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{:.3}",
        m.epoch, m.elbo, m.e1, m.e2, m.e3, m.wall_s
    )
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,elbo,e1,e2,e3,wall_s")?;
    for m in rows {
        writeln!(f, "{}", metrics_line(m))?;
    }
    f.flush()?;
    Ok(())
}

fn write_eval_csv(path: &Path, rows: &[f64]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,iw_nll")?;
    for (e, v) in rows.iter().enumerate() {
        writeln!(f, "{},{}", e + 1, v)?;
    }
    f.flush()?;
    Ok(())
}

/// Mean held-out IW-NLL with common random numbers across epochs: the same
/// evaluation seed every time, so epoch-to-epoch differences reflect
/// parameter movement rather than fresh sampling noise.
pub fn heldout_nll(
    model: &Model,
    params: &[f64],
    eval_data: &SequenceDataset,
    k: usize,
    seed: u64,
) -> Result<f64> {
    let views: Vec<crate::data::PreparedEval> = (0..eval_data.sequences.len())
        .map(|i| crate::data::eval_view(eval_data, i))
        .collect();
    let nlls: Vec<Result<f64>> = views
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let seq = EvalSequence {
                times: &v.times,
                y_target: &v.y_target,
                y_input: &v.y_input,
                missing: &v.missing,
            };
            iw_nll(model, params, &seq, k, seed ^ (TAG_EVAL + i as u64))
        })
        .collect();
    let mut total = 0.0;
    for n in nlls {
        total += n?;
    }
    Ok(total / eval_data.sequences.len() as f64)
}

/// Trains per the configuration and writes `metrics.csv`,
/// `checkpoint.json`, and (given eval data) `eval_nll.csv` into `out_dir`.
pub fn train(
    cfg: &ExperimentConfig,
    data: &SequenceDataset,
    eval_data: Option<&SequenceDataset>,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    data.validate()?;
    if data.sequences.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    let model = cfg.build_model(data.meta.d_y, data.time_span())?;
    let seed = cfg.run.seed;

    let (mut params, mut adam, start_epoch) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ck.check_layout(model.layout())?;
            (ck.params.clone(), ck.adam.clone(), ck.epoch)
        }
        None => (
            model.init_params(seed),
            AdamState::new(model.layout().total()),
            0,
        ),
    };

    let adam_cfg = AdamConfig {
        lr: cfg.train.learning_rate,
        clip_norm: cfg.train.clip_norm,
        ..Default::default()
    };
    let meta = serde_json::to_value(cfg).map_err(|e| Error::Parse(e.to_string()))?;

    // Spatiotemporal training uses the whole grid as one batch.
    let st_batch_data = if data.meta.layout == DataLayout::Spatiotemporal {
        Some(build_st_arrays(data)?)
    } else {
        None
    };

    let mut metrics = Vec::new();
    let mut eval_nll = Vec::new();
    let mut last_good: Option<Checkpoint> = None;
    let n_seq = data.sequences.len();

    for epoch in start_epoch..cfg.train.epochs {
        let t0 = Instant::now();
        let epoch_seed = seed
            .wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15))
            .wrapping_add(TAG_EPOCH);
        let (sum_e1, sum_e2, sum_e3) = match &st_batch_data {
            None => {
                let mut order: Vec<usize> = (0..n_seq).collect();
                fisher_yates(&mut order, seed, epoch);
                let mut sums = (0.0, 0.0, 0.0);
                for (batch_no, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
                    let batch: Vec<TrainSequence> =
                        chunk.iter().map(|&i| train_sequence(data, i)).collect();
                    let batch_seed = epoch_seed ^ (batch_no as u64).wrapping_mul(0x100000001B3);
                    let (b, mut grad) =
                        elbo_with_grad(&model, &params, &batch, cfg.train.k_train, batch_seed)?;
                    if !b.elbo.is_finite() {
                        return abort_nan(out_dir, last_good, epoch);
                    }
                    // Ascend on the per-sequence mean.
                    let scale = -1.0 / chunk.len() as f64;
                    grad.iter_mut().for_each(|g| *g *= scale);
                    if adam_step(&mut params, &mut grad, &mut adam, &adam_cfg, model.layout())
                        .is_err()
                    {
                        return abort_nan(out_dir, last_good, epoch);
                    }
                    sums.0 += b.e1;
                    sums.1 += b.e2;
                    sums.2 += b.e3;
                }
                sums
            }
            Some((coords, times, y)) => {
                let batch = StBatch {
                    coords,
                    times,
                    y,
                };
                let mut rng = derive_rng(seed, &[TAG_EPOCH, epoch as u64, 0x57]);
                let mut grad = vec![0.0; model.layout().total()];
                let b = model.st_elbo_grad(&params, &batch, cfg.train.k_train, &mut rng, &mut grad)?;
                let elbo_val = b.e3 + b.e2 - b.e1;
                if !elbo_val.is_finite() {
                    return abort_nan(out_dir, last_good, epoch);
                }
                grad.iter_mut().for_each(|g| *g = -*g);
                if adam_step(&mut params, &mut grad, &mut adam, &adam_cfg, model.layout()).is_err() {
                    return abort_nan(out_dir, last_good, epoch);
                }
                (b.e1, b.e2, b.e3)
            }
        };

        let denom = n_seq as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            e1: sum_e1 / denom,
            e2: sum_e2 / denom,
            e3: sum_e3 / denom,
            elbo: (sum_e3 + sum_e2 - sum_e1) / denom,
            wall_s: t0.elapsed().as_secs_f64(),
        };
        metrics.push(m);

        if let Some(eval) = eval_data {
            eval_nll.push(heldout_nll(&model, &params, eval, cfg.train.k_eval, seed)?);
        }

        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            segments: model.layout().segments().to_vec(),
            params: params.clone(),
            adam: adam.clone(),
            epoch: epoch + 1,
            meta: meta.clone(),
        };
        if let Some(dir) = out_dir {
            ck.save(&dir.join("checkpoint.json"))?;
            write_metrics_csv(&dir.join("metrics.csv"), &metrics)?;
            if eval_data.is_some() {
                write_eval_csv(&dir.join("eval_nll.csv"), &eval_nll)?;
            }
        }
        last_good = Some(ck);
    }

    Ok(TrainOutcome {
        model,
        params,
        metrics,
        eval_nll,
    })
}

fn abort_nan(
    out_dir: Option<&Path>,
    last_good: Option<Checkpoint>,
    epoch: usize,
) -> Result<TrainOutcome> {
    if let (Some(dir), Some(ck)) = (out_dir, &last_good) {
        let _ = ck.save(&dir.join("checkpoint_last_good.json"));
    }
    Err(Error::Numerical(format!(
        "non-finite loss at epoch {}; last good checkpoint {}",
        epoch + 1,
        if last_good.is_some() {
            "saved"
        } else {
            "unavailable (first epoch)"
        }
    )))
}

/// Gathers a spatiotemporal dataset into grid arrays: shared times,
/// per-location coordinates, and y[t][r].
pub fn build_st_arrays(
    data: &SequenceDataset,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<Vec<f64>>>)> {
    if data.sequences.is_empty() {
        return Err(Error::InvalidArgument("empty spatiotemporal dataset".into()));
    }
    let times = data.sequences[0].times.clone();
    let mut coords = Vec::with_capacity(data.sequences.len());
    for s in &data.sequences {
        if s.times != times {
            return Err(Error::InvalidArgument(
                "spatiotemporal sequences must share one time grid".into(),
            ));
        }
        let loc = s.loc.as_ref().ok_or_else(|| {
            Error::InvalidArgument("spatiotemporal sequences need location records".into())
        })?;
        coords.push(loc.coords.clone());
    }
    let y: Vec<Vec<Vec<f64>>> = (0..times.len())
        .map(|t| data.sequences.iter().map(|s| s.y[t].clone()).collect())
        .collect();
    Ok((coords, times, y))
}
