use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{GruVae, Noise, Sample};
use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamVector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Embeddings, encoder and decoder on the VAE loss alone.
    Vae,
    /// VAE frozen, recurrent cell and head on the forecast loss.
    Recurrent,
    /// Everything on the weighted joint loss.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub vae_epochs: usize,
    pub recurrent_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            vae_epochs: 10,
            recurrent_epochs: 10,
            joint_epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub phase: Phase,
    pub epoch: usize,
    pub total: f64,
    pub vae: f64,
    pub gru: f64,
    pub min_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
}

impl TrainReport {
    pub fn last(&self, phase: Phase) -> Option<&EpochLoss> {
        self.epochs.iter().rev().find(|e| e.phase == phase)
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochLoss> {
        self.epochs.iter().filter(move |e| e.phase == phase)
    }
}

/// Runs the three training phases in order and returns the per-epoch
/// batch-averaged losses. `params` is updated in place.
pub fn train_predictor<T: Scalar>(
    model: &GruVae,
    params: &mut ParamVector<T>,
    dataset: &[Sample],
    schedule: &TrainSchedule,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    if schedule.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let lr = T::lit(schedule.lr);
    let lambda = T::lit(cfg.lambda);
    let beta = cfg.beta_kl;

    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        by_len.entry(s.frames.len()).or_default().push(i);
    }

    let mut report = TrainReport::default();
    let phases = [
        (Phase::Vae, schedule.vae_epochs),
        (Phase::Recurrent, schedule.recurrent_epochs),
        (Phase::Joint, schedule.joint_epochs),
    ];
    for (phase, epochs) in phases {
        let mut adam = AdamState::for_params(params);
        for epoch in 0..epochs {
            let (lam, beta_e) = match phase {
                Phase::Vae => (T::one(), T::lit(beta)),
                Phase::Recurrent => (T::zero(), T::lit(beta)),
                Phase::Joint => {
                    let ramp = if cfg.kl_warmup_epochs == 0 {
                        1.0
                    } else {
                        ((epoch + 1) as f64 / cfg.kl_warmup_epochs as f64).min(1.0)
                    };
                    (lambda, T::lit(beta * ramp))
                }
            };
            let mut batches: Vec<Vec<usize>> = Vec::new();
            for idx in by_len.values() {
                let mut idx = idx.clone();
                idx.shuffle(&mut rng);
                batches.extend(idx.chunks(schedule.batch_size).map(<[usize]>::to_vec));
            }
            batches.shuffle(&mut rng);

            let (mut tot, mut vae, mut gru) = (0.0, 0.0, 0.0);
            let mut min_sigma = f64::INFINITY;
            for batch in &batches {
                let samples: Vec<&Sample> = batch.iter().map(|&i| &dataset[i]).collect();
                params.zero_grad();
                let mut noise = Noise::Sampled(&mut rng);
                let (parts, ms) =
                    model.accumulate_gradient(&samples, params, &mut noise, lam, beta_e, T::one())?;
                match phase {
                    Phase::Vae => adam.update_where(params, lr, GruVae::is_vae_segment)?,
                    Phase::Recurrent => adam.update_where(params, lr, |n| !GruVae::is_vae_segment(n))?,
                    Phase::Joint => adam.update(params, lr)?,
                }
                tot += parts.total.to_f64_lossy();
                vae += parts.vae.to_f64_lossy();
                gru += parts.gru.to_f64_lossy();
                min_sigma = min_sigma.min(ms.to_f64_lossy());
            }
            let n = batches.len() as f64;
            let row = EpochLoss {
                phase,
                epoch,
                total: tot / n,
                vae: vae / n,
                gru: gru / n,
                min_sigma,
            };
            log::debug!("predictor {:?} epoch {} loss {:.6}", phase, epoch, row.total);
            report.epochs.push(row);
        }
    }
    params.zero_grad();
    Ok(report)
}
