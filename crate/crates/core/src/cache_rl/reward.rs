use serde::{Deserialize, Serialize};

use crate::comms::PathClass;
use crate::error::{Error, Result};

/// Whether the hit-fraction term keeps its own `λ_p` factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerLambda {
    #[default]
    AsWritten,
    Omit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    /// Local, neighbour-RSU and base-station weights.
    pub lambda: [f64; 3],
    pub xi: f64,
    pub zeta: f64,
    pub inner_lambda: InnerLambda,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            lambda: [0.1, 0.2, 0.7],
            xi: 0.5,
            zeta: 0.5,
            inner_lambda: InnerLambda::AsWritten,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let [l1, l2, l3] = self.lambda;
        if (l1 + l2 + l3 - 1.0).abs() > 1e-9 || !(0.0 < l1 && l1 < l2 && l2 < l3) {
            return Err(Error::Config(format!(
                "reward lambdas must satisfy 0 < l1 < l2 < l3 and sum to 1, got {:?}",
                self.lambda
            )));
        }
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.xi) || !open(self.zeta) || (self.xi + self.zeta - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "xi and zeta must lie in (0,1) and sum to 1, got {} and {}",
                self.xi, self.zeta
            )));
        }
        Ok(())
    }

    pub fn lambda_for(&self, class: PathClass) -> f64 {
        match class {
            PathClass::Local => self.lambda[0],
            PathClass::NeighborRsu => self.lambda[1],
            PathClass::BaseStation => self.lambda[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServedRequest {
    pub class: PathClass,
    pub delay_s: f64,
}

fn class_index(c: PathClass) -> usize {
    match c {
        PathClass::Local => 0,
        PathClass::NeighborRsu => 1,
        PathClass::BaseStation => 2,
    }
}

/// Slot reward: sum over requests of `−λ_p(ξ·t − ζ·(1 − λ_p·hits_p/total))`,
/// where `hits_p` counts the slot's requests served over path class `p`.
pub fn reward(events: &[ServedRequest], w: &RewardWeights) -> Result<f64> {
    w.validate()?;
    if events.is_empty() {
        return Ok(0.0);
    }
    let mut hits = [0usize; 3];
    for e in events {
        if !(e.delay_s >= 0.0) {
            return Err(Error::invalid(format!("delay {} must be a finite value >= 0", e.delay_s)));
        }
        hits[class_index(e.class)] += 1;
    }
    let total = events.len() as f64;
    Ok(events
        .iter()
        .map(|e| {
            let lam = w.lambda_for(e.class);
            let inner = match w.inner_lambda {
                InnerLambda::AsWritten => lam,
                InnerLambda::Omit => 1.0,
            };
            let frac = hits[class_index(e.class)] as f64 / total;
            -lam * (w.xi * e.delay_s - w.zeta * (1.0 - inner * frac))
        })
        .sum())
}
