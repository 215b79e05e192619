use serde::{Deserialize, Serialize};

use super::action::Candidate;
use crate::cache::{CacheState, ContentId};
use crate::error::{Error, Result};

/// Encoded MDP state; every entry lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlState(pub Vec<f64>);

impl RlState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Fixed layout of the state vector:
/// `[resident × 4 | utilization | candidate × 4 | top-k forecast | heatmap]`.
///
/// Resident slot: present, size/capacity, hit share, predicted popularity.
/// Candidate slot: request share, size/capacity, predicted popularity, cached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateEncoder {
    pub resident_slots: usize,
    pub candidates: usize,
    pub top_k: usize,
    pub heatmap_bins: usize,
}

pub struct StateInputs<'a> {
    pub cache: &'a CacheState,
    pub candidates: &'a [Candidate],
    /// Predicted popularity per content id (already normalized to `[0,1]`).
    pub popularity: &'a dyn Fn(ContentId) -> f64,
    /// Forecast probabilities sorted descending; only the first `top_k` are used.
    pub forecast_top: &'a [f64],
    pub heatmap: &'a [f64],
}

const RESIDENT: usize = 4;
const CANDIDATE: usize = 4;

fn clip(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

impl StateEncoder {
    pub fn dim(&self) -> usize {
        RESIDENT * self.resident_slots + 1 + CANDIDATE * self.candidates + self.top_k + self.heatmap_bins
    }

    pub fn utilization_index(&self) -> usize {
        RESIDENT * self.resident_slots
    }

    pub fn encode(&self, x: &StateInputs<'_>) -> Result<RlState> {
        if x.candidates.len() != self.candidates {
            return Err(Error::shape(
                "build_state",
                format!("{} candidates, encoder expects {}", x.candidates.len(), self.candidates),
            ));
        }
        if x.heatmap.len() != self.heatmap_bins {
            return Err(Error::shape(
                "build_state",
                format!("heatmap has {} bins, encoder expects {}", x.heatmap.len(), self.heatmap_bins),
            ));
        }
        if x.forecast_top.len() < self.top_k {
            return Err(Error::shape(
                "build_state",
                format!("forecast has {} entries, need {}", x.forecast_top.len(), self.top_k),
            ));
        }
        let cap = x.cache.capacity_bytes().max(1) as f64;
        let mut v = Vec::with_capacity(self.dim());

        let mut residents: Vec<_> = x.cache.items().map(|it| ((x.popularity)(it.id), it)).collect();
        residents.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.id.cmp(&b.1.id))
        });
        residents.truncate(self.resident_slots);
        let total_hits: u64 = x.cache.items().map(|it| it.hits).sum();
        for k in 0..self.resident_slots {
            match residents.get(k) {
                Some((pop, it)) => {
                    v.push(1.0);
                    v.push(clip(it.size_bytes as f64 / cap));
                    v.push(if total_hits > 0 { clip(it.hits as f64 / total_hits as f64) } else { 0.0 });
                    v.push(clip(*pop));
                }
                None => v.extend([0.0; RESIDENT]),
            }
        }
        v.push(clip(x.cache.utilization()));

        let total_req: u64 = x.candidates.iter().map(|c| c.requests as u64).sum();
        for c in x.candidates {
            v.push(if total_req > 0 { clip(c.requests as f64 / total_req as f64) } else { 0.0 });
            v.push(clip(c.size_bytes as f64 / cap));
            v.push(clip(c.score));
            v.push(if x.cache.contains(c.id) { 1.0 } else { 0.0 });
        }
        v.extend(x.forecast_top[..self.top_k].iter().map(|&p| clip(p)));
        v.extend(x.heatmap.iter().map(|&h| clip(h)));
        debug_assert_eq!(v.len(), self.dim());
        Ok(RlState(v))
    }
}
