use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheState, ContentId};
use crate::cache_rl::Candidate;
use crate::error::{Error, Result};
use crate::twin::{CacheDirective, NodeRef};

/// Caching policy run by every RSU in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Dapr,
    EpsGreedy,
    Lfu,
    Lru,
    Random,
    /// DAPR with uniformly random admission in place of the learned policy.
    DaprNoDrl,
    /// DAPR with synchronous equal-weight averaging in place of asynchronous aggregation.
    DaprNoAfl,
    /// DAPR forecasting from windowed request frequency.
    DaprNoGruVae,
    /// DAPR deciding from last-slot state without twin snapshots.
    DaprNoDt,
}

impl Policy {
    pub const ALL: [Policy; 9] = [
        Policy::Dapr,
        Policy::EpsGreedy,
        Policy::Lfu,
        Policy::Lru,
        Policy::Random,
        Policy::DaprNoDrl,
        Policy::DaprNoAfl,
        Policy::DaprNoGruVae,
        Policy::DaprNoDt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Dapr => "dapr",
            Policy::EpsGreedy => "eps_greedy",
            Policy::Lfu => "lfu",
            Policy::Lru => "lru",
            Policy::Random => "random",
            Policy::DaprNoDrl => "dapr_no_drl",
            Policy::DaprNoAfl => "dapr_no_afl",
            Policy::DaprNoGruVae => "dapr_no_gruvae",
            Policy::DaprNoDt => "dapr_no_dt",
        }
    }

    pub fn is_dapr(self) -> bool {
        matches!(
            self,
            Policy::Dapr | Policy::DaprNoDrl | Policy::DaprNoAfl | Policy::DaprNoGruVae | Policy::DaprNoDt
        )
    }

    pub fn uses_sac(self) -> bool {
        self.is_dapr() && self != Policy::DaprNoDrl
    }

    pub fn uses_predictor(self) -> bool {
        self.is_dapr() && self != Policy::DaprNoGruVae
    }

    pub fn uses_twin(self) -> bool {
        self != Policy::DaprNoDt
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Policy::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown policy `{s}`, expected one of {}", names.join(", ")))
        })
    }
}

/// What one RSU observed in a slot, as the baselines see it.
pub struct SlotView<'a> {
    pub region: u32,
    pub slot: u64,
    pub cache: &'a CacheState,
    /// Requests per content in this slot.
    pub counts: &'a BTreeMap<ContentId, u32>,
    pub size_of: &'a dyn Fn(ContentId) -> u64,
}

fn candidates(view: &SlotView<'_>, only_missed: bool) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = view
        .counts
        .iter()
        .filter(|(&id, _)| !only_missed || !view.cache.contains(id))
        .map(|(&id, &n)| Candidate {
            id,
            size_bytes: (view.size_of)(id),
            requests: n,
            score: n as f64,
        })
        .collect();
    out.sort_by(|a, b| b.requests.cmp(&a.requests).then(a.id.cmp(&b.id)));
    out
}

fn directive(view: &SlotView<'_>, candidates: Vec<Candidate>, action: Vec<bool>, scores: BTreeMap<ContentId, f64>) -> CacheDirective {
    CacheDirective {
        target: NodeRef::Rsu(view.region),
        candidates,
        action,
        scores,
    }
}

/// Admit every missed content, evicting the least recently accessed.
pub fn lru(view: &SlotView<'_>) -> CacheDirective {
    let c = candidates(view, true);
    let scores = view.cache.items().map(|it| (it.id, it.last_access as f64)).collect();
    let action = vec![true; c.len()];
    directive(view, c, action, scores)
}

/// Admit every missed content, evicting the resident with the fewest hits.
pub fn lfu(view: &SlotView<'_>) -> CacheDirective {
    let c = candidates(view, true);
    let scores = view.cache.items().map(|it| (it.id, it.hits as f64)).collect();
    let action = vec![true; c.len()];
    directive(view, c, action, scores)
}

/// Admit a uniformly random subset of missed contents, evicting in random order.
pub fn random(view: &SlotView<'_>, rng: &mut ChaCha8Rng) -> CacheDirective {
    let c = candidates(view, true);
    let action = (0..c.len()).map(|_| rng.random_bool(0.5)).collect();
    let scores = view.cache.items().map(|it| (it.id, rng.random::<f64>())).collect();
    directive(view, c, action, scores)
}

/// ε-greedy admission over the contents requested this slot.
#[derive(Debug, Clone)]
pub struct EpsilonGreedy {
    pub epsilon: f64,
    explored: u64,
    decisions: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheAction {
    pub directive: CacheDirective,
    /// Whether the random branch was taken.
    pub explored: bool,
}

impl EpsilonGreedy {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1], got {epsilon}")));
        }
        Ok(Self {
            epsilon,
            explored: 0,
            decisions: 0,
        })
    }

    pub fn explored(&self) -> u64 {
        self.explored
    }

    pub fn decisions(&self) -> u64 {
        self.decisions
    }

    /// With probability `1 − ε` admits the most requested contents that fit
    /// in capacity together (ties by id); otherwise a uniformly random
    /// subset of the requested contents. Residents not requested this slot
    /// are evicted first.
    pub fn decide(&mut self, view: &SlotView<'_>, rng: &mut ChaCha8Rng) -> CacheAction {
        let c = candidates(view, false);
        let explored = rng.random::<f64>() < self.epsilon;
        let action = if explored {
            (0..c.len()).map(|_| rng.random_bool(0.5)).collect()
        } else {
            let mut room = view.cache.capacity_bytes();
            c.iter()
                .map(|cand| {
                    let fits = cand.size_bytes <= room;
                    if fits {
                        room -= cand.size_bytes;
                    }
                    fits
                })
                .collect()
        };
        self.decisions += 1;
        self.explored += explored as u64;
        let scores = view
            .cache
            .items()
            .map(|it| (it.id, view.counts.get(&it.id).copied().unwrap_or(0) as f64))
            .collect();
        CacheAction {
            directive: directive(view, c, action, scores),
            explored,
        }
    }
}
