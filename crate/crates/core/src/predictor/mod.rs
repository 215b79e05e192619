//! GRU-VAE content popularity model.
//!
//! Each slot's request vector is concatenated with location/time embeddings
//! and context, passed through a VAE (tanh hidden layers, softplus σ head),
//! and the reconstruction (or the latent sample) is fed to a recurrent cell
//! whose final state goes through a softmax head over the catalog.

mod model;
mod train;

pub mod synthetic;

pub use model::{reparameterize, vae_loss, 
    CellKind, FeatureFrame, GruInput, GruVae, LossParts, Noise, PopularityForecast,
    PredictorConfig, Sample,
};
pub use train::{train_predictor, EpochLoss, Phase, TrainReport, TrainSchedule};

#[cfg(test)]
mod tests;
