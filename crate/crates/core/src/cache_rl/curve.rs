use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One row of the SAC training-curve CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub episode: usize,
    pub mean_reward: f64,
    pub value_loss: f64,
    pub q_loss: f64,
    pub policy_loss: f64,
}

pub fn write_training_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["episode", "mean_reward", "value_loss", "q_loss", "policy_loss"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
