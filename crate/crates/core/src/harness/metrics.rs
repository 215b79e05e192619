use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    /// One region in one slot.
    Slot,
    /// Episode totals; region 0 covers every region.
    Summary,
}

/// One CSV line of simulation output. Column order is the field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub policy: String,
    pub seed: u64,
    pub episode: u32,
    pub kind: RowKind,
    /// Slot index, or the number of slots on a summary row.
    pub slot: u64,
    pub region: u32,
    pub requests: u64,
    pub local_hits: u64,
    pub neighbor_hits: u64,
    pub bs_fetches: u64,
    pub reward: f64,
    pub cumulative_reward: f64,
    /// Local hits over requests; neighbour serves count as misses.
    pub hit_ratio: f64,
    pub mean_delay_ms: f64,
    pub total_delay_ms: f64,
}

/// Request and delay tallies that rows and reports are built from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub requests: u64,
    pub local_hits: u64,
    pub neighbor_hits: u64,
    pub bs_fetches: u64,
    pub total_delay_ms: f64,
    pub reward: f64,
}

impl Tally {
    pub fn add(&mut self, o: &Tally) {
        self.requests += o.requests;
        self.local_hits += o.local_hits;
        self.neighbor_hits += o.neighbor_hits;
        self.bs_fetches += o.bs_fetches;
        self.total_delay_ms += o.total_delay_ms;
        self.reward += o.reward;
    }

    pub fn hit_ratio(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.local_hits as f64 / self.requests as f64
        }
    }

    pub fn mean_delay_ms(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.total_delay_ms / self.requests as f64
        }
    }

    fn of_row(r: &MetricsRow) -> Self {
        Self {
            requests: r.requests,
            local_hits: r.local_hits,
            neighbor_hits: r.neighbor_hits,
            bs_fetches: r.bs_fetches,
            total_delay_ms: r.total_delay_ms,
            reward: r.reward,
        }
    }
}

pub fn write_metrics_csv(w: impl Write, rows: &[MetricsRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_metrics_csv(r: impl Read) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        out.push(rec.map_err(|e: csv::Error| Error::Trace {
            line: i + 2,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub requests: u64,
    pub hit_ratio: f64,
    pub mean_delay_ms: f64,
    pub total_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub episode: u32,
    pub slots: u64,
    pub requests: u64,
    pub local_hits: u64,
    pub neighbor_hits: u64,
    pub bs_fetches: u64,
    pub total_reward: f64,
    /// Total reward over all regions divided by the number of slots.
    pub mean_reward: f64,
    pub hit_ratio: f64,
    pub mean_delay_ms: f64,
    pub per_region: BTreeMap<u32, RegionSummary>,
}

/// Aggregates the slot rows of the latest episode present. Summary rows are
/// ignored so the report can be rebuilt from any CSV the harness writes.
pub fn metrics_report(rows: &[MetricsRow]) -> Result<Report> {
    let slot_rows: Vec<&MetricsRow> = rows.iter().filter(|r| r.kind == RowKind::Slot).collect();
    let episode = slot_rows
        .iter()
        .map(|r| r.episode)
        .max()
        .ok_or(Error::Empty("metrics rows"))?;
    let mut total = Tally::default();
    let mut regions: BTreeMap<u32, Tally> = BTreeMap::new();
    let mut slots = BTreeSet::new();
    for r in slot_rows.into_iter().filter(|r| r.episode == episode) {
        let t = Tally::of_row(r);
        total.add(&t);
        regions.entry(r.region).or_default().add(&t);
        slots.insert(r.slot);
    }
    let n_slots = slots.len() as u64;
    Ok(Report {
        episode,
        slots: n_slots,
        requests: total.requests,
        local_hits: total.local_hits,
        neighbor_hits: total.neighbor_hits,
        bs_fetches: total.bs_fetches,
        total_reward: total.reward,
        mean_reward: total.reward / n_slots as f64,
        hit_ratio: total.hit_ratio(),
        mean_delay_ms: total.mean_delay_ms(),
        per_region: regions
            .into_iter()
            .map(|(id, t)| {
                (
                    id,
                    RegionSummary {
                        requests: t.requests,
                        hit_ratio: t.hit_ratio(),
                        mean_delay_ms: t.mean_delay_ms(),
                        total_reward: t.reward,
                    },
                )
            })
            .collect(),
    })
}
