use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, Zipf};
use serde::{Deserialize, Serialize};

use crate::cache::ContentId;
use crate::error::{Error, Result};

/// One content request. Content ids are 1-based and dense.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestEvent {
    pub slot: u64,
    pub vehicle_id: u64,
    pub content_id: ContentId,
    pub size_bytes: u64,
    pub region_id: u32,
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    slot: u64,
    vehicle_id: u64,
    content_id: u64,
    size_bytes: u64,
    region_id: u32,
}

/// Reads `slot,vehicle_id,content_id,size_bytes,region_id` rows. Events are
/// stably sorted by slot; content ids are interned to `1..=n` in order of
/// first appearance after sorting.
pub fn load_trace(path: &Path) -> Result<Vec<RequestEvent>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let expected = ["slot", "vehicle_id", "content_id", "size_bytes", "region_id"];
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != expected {
        return Err(Error::Trace {
            line: 1,
            msg: format!("expected header {}, got {}", expected.join(","), header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<TraceRow>().enumerate() {
        // Line 1 is the header.
        let row = rec.map_err(|e| Error::Trace {
            line: i + 2,
            msg: e.to_string(),
        })?;
        if row.region_id == 0 {
            return Err(Error::Trace {
                line: i + 2,
                msg: "region ids start at 1".into(),
            });
        }
        rows.push(row);
    }
    rows.sort_by_key(|r| r.slot);
    let mut interned: HashMap<u64, ContentId> = HashMap::new();
    Ok(rows
        .into_iter()
        .map(|r| {
            let next = interned.len() as ContentId + 1;
            let content_id = *interned.entry(r.content_id).or_insert(next);
            RequestEvent {
                slot: r.slot,
                vehicle_id: r.vehicle_id,
                content_id,
                size_bytes: r.size_bytes,
                region_id: r.region_id,
            }
        })
        .collect())
}

/// Content sizes, index `id − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    sizes: Vec<u64>,
}

impl Catalog {
    /// Sizes log-uniform on `[min_mb, max_mb]` (1 MB = 10^6 bytes).
    pub fn log_uniform(n: u32, min_mb: f64, max_mb: f64, rng: &mut impl Rng) -> Self {
        let (lo, hi) = (min_mb.ln(), max_mb.ln());
        let sizes = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                ((lo + u * (hi - lo)).exp() * 1e6).round() as u64
            })
            .collect();
        Self { sizes }
    }

    pub fn from_sizes(sizes: Vec<u64>) -> Self {
        Self { sizes }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn size_of(&self, id: ContentId) -> u64 {
        self.sizes[id as usize - 1]
    }
}

/// Zipf over ranks `1..=n`, with rank `k` mapped to content
/// `((k − 1 + offset) mod n) + 1`.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    n: u32,
    offset: u32,
    dist: Option<Zipf<f64>>,
}

impl ZipfSampler {
    pub fn new(n: u32, s: f64, offset: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("Zipf catalog must be non-empty"));
        }
        let dist = if n > 1 {
            Some(Zipf::new(n as f64, s).map_err(|e| Error::invalid(format!("Zipf({n}, {s}): {e}")))?)
        } else {
            None
        };
        Ok(Self { n, offset, dist })
    }

    /// `P(content)` under this sampler.
    pub fn prob(&self, id: ContentId, s: f64) -> f64 {
        let rank = (id - 1 + self.n - self.offset % self.n) % self.n + 1;
        let z: f64 = (1..=self.n).map(|k| (k as f64).powf(-s)).sum();
        (rank as f64).powf(-s) / z
    }

    pub fn sample(&self, rng: &mut impl Rng) -> ContentId {
        let rank = match &self.dist {
            Some(d) => d.sample(rng) as u32,
            None => 1,
        };
        (rank - 1 + self.offset) % self.n + 1
    }
}

/// Poisson draw that accepts a zero mean.
pub fn poisson(mean: f64, rng: &mut impl Rng) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// `k` requests with content `i` drawn with probability `i^{−s}/Σ j^{−s}`.
/// Event `j` lands in slot `j`, region 1, vehicle 0, with log-uniform
/// 1–50 MB catalog sizes.
pub fn synth_zipf(n: u32, s: f64, k: usize, seed: u64) -> Result<Vec<RequestEvent>> {
    if !(s >= 0.0) {
        return Err(Error::invalid(format!("Zipf exponent must be >= 0, got {s}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog = Catalog::log_uniform(n, 1.0, 50.0, &mut rng);
    let sampler = ZipfSampler::new(n, s, 0)?;
    Ok((0..k)
        .map(|j| {
            let id = sampler.sample(&mut rng);
            RequestEvent {
                slot: j as u64,
                vehicle_id: 0,
                content_id: id,
                size_bytes: catalog.size_of(id),
                region_id: 1,
            }
        })
        .collect())
}
