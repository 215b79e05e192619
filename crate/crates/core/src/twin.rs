//! Digital twin: per-slot mirror of vehicles, caches and links, a
//! spatio-temporal request heatmap, dwell estimates for client selection,
//! and a delayed command channel back to the physical caches.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::{CacheState, ContentId};
use crate::cache_rl::{apply_action, ActionOutcome, Candidate};
use crate::error::{Error, Result};
use crate::mobility::{dwell_time, VehicleState};

pub type RegionId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkQuality {
    pub mean_rate_bps: f64,
    pub vehicles: usize,
}

/// Requests for one content in one region during a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionRequests {
    pub region: RegionId,
    pub content: ContentId,
    pub count: u32,
}

/// What the physical layer reports at the end of a slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub slot: u64,
    pub vehicles: Vec<VehicleState>,
    pub caches: BTreeMap<RegionId, CacheState>,
    pub links: BTreeMap<RegionId, LinkQuality>,
    /// Coverage length per segment, used for dwell estimates.
    pub coverage_m: BTreeMap<u32, f64>,
    pub requests: Vec<RegionRequests>,
}

/// Published mirror of one slot. Shared as `Arc` and never mutated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinSnapshot {
    pub slot: u64,
    pub vehicles: BTreeMap<u64, VehicleState>,
    pub caches: BTreeMap<RegionId, CacheState>,
    pub links: BTreeMap<RegionId, LinkQuality>,
    pub coverage_m: BTreeMap<u32, f64>,
    pub requests: Vec<RegionRequests>,
}

impl TwinSnapshot {
    /// FNV-1a over the JSON encoding; stable across runs and platforms.
    pub fn digest(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("snapshot serializes");
        bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub region: RegionId,
    pub content: ContentId,
    pub count: u64,
    pub decay_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeRef {
    Rsu(RegionId),
    Vehicle(u64),
}

/// An admission decision to be carried out on a node's cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheDirective {
    pub target: NodeRef,
    pub candidates: Vec<Candidate>,
    pub action: Vec<bool>,
    /// Predicted popularity of residents, for eviction order.
    pub scores: BTreeMap<ContentId, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppliedDirective {
    pub target: NodeRef,
    pub issued_slot: u64,
    pub outcome: ActionOutcome,
}

#[derive(Debug, Clone)]
pub struct DigitalTwin {
    history: VecDeque<Arc<TwinSnapshot>>,
    bound: usize,
    delay_slots: u64,
    pending: Vec<(u64, u64, CacheDirective)>,
}

impl Default for DigitalTwin {
    fn default() -> Self {
        Self::new(100, 1)
    }
}

impl DigitalTwin {
    /// `delay_slots` is 1 for normal actuation, 0 to apply in the issuing slot.
    pub fn new(history_bound: usize, delay_slots: u64) -> Self {
        Self {
            history: VecDeque::new(),
            bound: history_bound.max(1),
            delay_slots,
            pending: Vec::new(),
        }
    }

    pub fn history(&self) -> impl Iterator<Item = &Arc<TwinSnapshot>> {
        self.history.iter()
    }

    pub fn latest(&self) -> Option<&Arc<TwinSnapshot>> {
        self.history.back()
    }

    pub fn sync_state(&mut self, obs: Observation) -> Result<Arc<TwinSnapshot>> {
        if let Some(last) = self.latest() {
            if obs.slot <= last.slot {
                return Err(Error::OutOfOrderSlot {
                    got: obs.slot,
                    last: last.slot,
                });
            }
        }
        let mut requests = obs.requests;
        requests.sort();
        let snap = Arc::new(TwinSnapshot {
            slot: obs.slot,
            vehicles: obs.vehicles.into_iter().map(|v| (v.id, v)).collect(),
            caches: obs.caches,
            links: obs.links,
            coverage_m: obs.coverage_m,
            requests,
        });
        if self.history.len() == self.bound {
            self.history.pop_front();
        }
        self.history.push_back(snap.clone());
        Ok(snap)
    }

    /// Decay-weighted request counts per (region, content) over the last
    /// `window` slots, ages measured from the latest snapshot.
    pub fn heatmap(&self, window: u64, decay: f64) -> Result<Vec<HeatmapCell>> {
        if window == 0 {
            return Err(Error::invalid("heatmap window must be >= 1"));
        }
        if !(decay >= 0.0) {
            return Err(Error::invalid("heatmap decay must be >= 0"));
        }
        let Some(latest) = self.latest() else {
            return Ok(Vec::new());
        };
        let mut cells: BTreeMap<(RegionId, ContentId), (u64, f64)> = BTreeMap::new();
        for snap in self.history.iter().rev() {
            let age = latest.slot - snap.slot;
            if age >= window {
                break;
            }
            let w = (-decay * age as f64).exp();
            for r in &snap.requests {
                let e = cells.entry((r.region, r.content)).or_default();
                e.0 += r.count as u64;
                e.1 += r.count as f64 * w;
            }
        }
        Ok(cells
            .into_iter()
            .map(|((region, content), (count, decay_score))| HeatmapCell {
                region,
                content,
                count,
                decay_score,
            })
            .collect())
    }

    /// `(T_stay, T_train, T_trans)` for a vehicle in the latest snapshot.
    pub fn predicted_dwell(&self, vehicle: u64) -> Result<(f64, f64, f64)> {
        let snap = self.latest().ok_or(Error::UnknownVehicle(vehicle))?;
        let v = snap.vehicles.get(&vehicle).ok_or(Error::UnknownVehicle(vehicle))?;
        let cov = snap
            .coverage_m
            .get(&v.segment)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no coverage for segment {}", v.segment)))?;
        Ok((dwell_time(cov, v.position_m, v.speed_mps)?, v.t_train_s, v.t_trans_s))
    }

    /// Queues directives issued in `slot`; they become due `delay_slots` later.
    pub fn emit_commands(&mut self, slot: u64, directives: Vec<CacheDirective>) {
        for d in directives {
            self.pending.push((slot + self.delay_slots, slot, d));
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// Applies every directive due at or before `slot`, in issue order.
    /// Directives for nodes that no longer exist are dropped with a log.
    pub fn apply_due(
        &mut self,
        slot: u64,
        caches: &mut BTreeMap<NodeRef, CacheState>,
    ) -> Result<Vec<AppliedDirective>> {
        let (due, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|(at, _, _)| *at <= slot);
        self.pending = keep;
        let live_vehicle = |id: u64| self.latest().map(|s| s.vehicles.contains_key(&id)).unwrap_or(false);
        let mut out = Vec::new();
        for (_, issued, d) in due {
            if let NodeRef::Vehicle(id) = d.target {
                if !live_vehicle(id) {
                    log::info!("dropping directive for departed vehicle {id}");
                    continue;
                }
            }
            let Some(cache) = caches.get_mut(&d.target) else {
                log::info!("dropping directive for unknown node {:?}", d.target);
                continue;
            };
            let outcome = apply_action(
                cache,
                &d.action,
                &d.candidates,
                |id| d.scores.get(&id).copied().unwrap_or(0.0),
                slot,
            )?;
            out.push(AppliedDirective {
                target: d.target,
                issued_slot: issued,
                outcome,
            });
        }
        Ok(out)
    }
}

/// Writes heatmap cells as `slot,region,content,count,decay_score`.
pub fn write_heatmap_csv(path: &Path, slot: u64, cells: &[HeatmapCell]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        slot: u64,
        region: RegionId,
        content: ContentId,
        count: u64,
        decay_score: f64,
    }
    let mut w = csv::Writer::from_path(path)?;
    if cells.is_empty() {
        w.write_record(["slot", "region", "content", "count", "decay_score"])?;
    }
    for c in cells {
        w.serialize(Row {
            slot,
            region: c.region,
            content: c.content,
            count: c.count,
            decay_score: c.decay_score,
        })?;
    }
    w.flush()?;
    Ok(())
}
