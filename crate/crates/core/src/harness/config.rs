use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::afl::AflConfig;
use crate::cache_rl::{RewardWeights, SacConfig};
use crate::error::{Error, Result};
use crate::predictor::{PredictorConfig, TrainSchedule};
use serde_json::Value;

/// Scenario description loaded from JSON. Every section has defaults, so
/// `{}` is a valid scenario; unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Slots per episode.
    pub slots: u64,
    /// Episodes run before the measured one; learners carry over.
    pub warmup_episodes: u32,
    pub slot_s: f64,
    /// Federated round duration `T(r)`.
    pub round_s: f64,
    pub regions: RegionConfig,
    pub traffic: TrafficConfig,
    pub content: ContentConfig,
    pub radio: RadioConfig,
    pub cache: CacheConfig,
    pub reward: RewardWeights,
    pub afl: AflConfig,
    pub predictor: PredictorConfig,
    pub forecast: ForecastConfig,
    pub sac: SacConfig,
    pub twin: TwinConfig,
    /// Exploration rate of the ε-greedy baseline.
    pub epsilon: f64,
    /// Standardize each RSU's rewards by its running mean and deviation before
    /// they enter the replay buffer. Reported rewards stay raw.
    pub normalize_rewards: bool,
    /// All RSUs act with and train one SAC agent on their pooled transitions.
    pub share_agent: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            slots: 200,
            warmup_episodes: 0,
            slot_s: 1.0,
            round_s: 10.0,
            regions: RegionConfig::default(),
            traffic: TrafficConfig::default(),
            content: ContentConfig::default(),
            radio: RadioConfig::default(),
            cache: CacheConfig::default(),
            reward: RewardWeights::default(),
            afl: AflConfig::default(),
            // Per-slot frames are sparse; a unit KL weight collapses the latent
            // and erases the location signal the forecast depends on.
            predictor: PredictorConfig {
                beta_kl: 1e-4,
                ..PredictorConfig::default()
            },
            forecast: ForecastConfig::default(),
            sac: SacConfig::default(),
            twin: TwinConfig::default(),
            epsilon: 0.1,
            normalize_rewards: true,
            share_agent: true,
        }
    }
}

/// A grid of square regions, one RSU segment each, ids 1.. in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub rows: u32,
    pub cols: u32,
    pub segment_length_m: f64,
    /// Per-region coverage overrides, keyed by region id.
    pub segment_lengths_m: BTreeMap<u32, f64>,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            rows: 3,
            cols: 3,
            segment_length_m: 1000.0,
            segment_lengths_m: BTreeMap::new(),
        }
    }
}

impl RegionConfig {
    pub fn count(&self) -> u32 {
        self.rows * self.cols
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> {
        1..=self.count()
    }

    pub fn length_of(&self, id: u32) -> f64 {
        self.segment_lengths_m.get(&id).copied().unwrap_or(self.segment_length_m)
    }

    /// Row-adjacent and column-adjacent regions, ascending.
    pub fn neighbors(&self, id: u32) -> Vec<u32> {
        let (r, c) = ((id - 1) / self.cols, (id - 1) % self.cols);
        let mut out = Vec::new();
        if r > 0 {
            out.push(id - self.cols);
        }
        if c > 0 {
            out.push(id - 1);
        }
        if c + 1 < self.cols {
            out.push(id + 1);
        }
        if r + 1 < self.rows {
            out.push(id + self.cols);
        }
        out
    }

    /// Boustrophedon order: consecutive regions in the returned ring share an edge.
    pub fn ring(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.count() as usize);
        for r in 0..self.rows {
            let row: Vec<u32> = (0..self.cols).map(|c| r * self.cols + c + 1).collect();
            if r % 2 == 0 {
                out.extend(row);
            } else {
                out.extend(row.into_iter().rev());
            }
        }
        out
    }
}

/// Poisson arrivals per region and geometric residence keep the mean
/// population at `vehicles_per_region` in every region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    pub vehicles_per_region: f64,
    /// Per-slot probability that a vehicle leaves the road.
    pub departure_prob: f64,
    pub free_flow_kmh: f64,
    pub rho_max: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            vehicles_per_region: 10.0,
            departure_prob: 0.02,
            free_flow_kmh: 60.0,
            rho_max: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentConfig {
    pub catalog_size: u32,
    pub size_min_mb: f64,
    pub size_max_mb: f64,
    pub zipf_exponent: f64,
    /// Poisson mean of requests per vehicle per slot.
    pub requests_per_vehicle: f64,
    /// Region `r` ranks the catalog rotated by `(r − 1)·region_rotation`.
    pub region_rotation: u32,
    /// Replay a request trace instead of the synthetic workload.
    pub trace: Option<PathBuf>,
}

impl Default for ContentConfig {
    fn default() -> Self {
        Self {
            catalog_size: 500,
            size_min_mb: 1.0,
            size_max_mb: 50.0,
            zipf_exponent: 1.0,
            requests_per_vehicle: 0.5,
            region_rotation: 3,
            trace: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FadingMode {
    #[default]
    Deterministic,
    Rayleigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PathSelection {
    /// Local, then neighbour RSU, then base station.
    #[default]
    Priority,
    /// Smallest delivery delay among every holder.
    Fastest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub bandwidth_hz: f64,
    pub noise_dbm: f64,
    pub vehicle_power_dbm: f64,
    pub rsu_power_dbm: f64,
    pub bs_power_dbm: f64,
    pub path_loss_exp: f64,
    pub fading: FadingMode,
    /// Perpendicular distance from the road to its RSU.
    pub rsu_offset_m: f64,
    pub bs_distance_m: f64,
    /// RSU-to-RSU hop length used for neighbour fetches.
    pub rsu_spacing_m: f64,
    pub path_selection: PathSelection,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            bandwidth_hz: 540e3,
            noise_dbm: -114.0,
            vehicle_power_dbm: 3.0,
            rsu_power_dbm: 30.0,
            bs_power_dbm: 43.0,
            path_loss_exp: 4.0,
            fading: FadingMode::Deterministic,
            rsu_offset_m: 10.0,
            bs_distance_m: 5000.0,
            rsu_spacing_m: 1000.0,
            path_selection: PathSelection::Priority,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub capacity_mb: f64,
    pub resident_slots: usize,
    pub candidates: usize,
    pub top_k: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            capacity_mb: 250.0,
            resident_slots: 16,
            candidates: 8,
            top_k: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// Frames per predictor input sequence.
    pub window: usize,
    /// Slots of workload generated before the run to pretrain the predictor centrally.
    pub pretrain_slots: u64,
    pub pretrain: TrainSchedule,
    /// Newest windows a vehicle keeps as its local dataset.
    pub client_max_samples: usize,
    /// Stable clients admitted per round, most samples first (ties by id).
    pub max_clients: usize,
    /// Modelled on-board training cost per sample and iteration.
    pub per_sample_train_s: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            window: 5,
            pretrain_slots: 200,
            pretrain: TrainSchedule {
                vae_epochs: 2,
                recurrent_epochs: 2,
                joint_epochs: 10,
                ..TrainSchedule::default()
            },
            client_max_samples: 4,
            max_clients: 8,
            per_sample_train_s: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinConfig {
    pub history: usize,
    /// Slots between a directive and its effect on the physical cache.
    pub delay_slots: u64,
    pub heatmap_window: u64,
    pub heatmap_decay: f64,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            history: 100,
            delay_slots: 1,
            heatmap_window: 10,
            heatmap_decay: 0.1,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    check(v.is_finite() && v > 0.0, || format!("{name} must be a positive number, got {v}"))
}

/// Overlays `top` onto `base`; objects merge key by key, anything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

impl ScenarioConfig {
    /// Parses a scenario, with every omitted field taken from
    /// `ScenarioConfig::default()` at any nesting depth. Omitted
    /// `predictor.catalog` and `predictor.locations` follow the content
    /// catalog and the region grid.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !user.is_object() {
            return Err(Error::Config("scenario must be a JSON object".into()));
        }
        let pred = user.get("predictor");
        let derive_catalog = pred.and_then(|p| p.get("catalog")).is_none();
        let derive_locations = pred.and_then(|p| p.get("locations")).is_none();
        let mut merged = serde_json::to_value(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        let mut cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        if derive_catalog {
            cfg.predictor.catalog = cfg.content.catalog_size as usize;
        }
        if derive_locations {
            cfg.predictor.locations = cfg.regions.count() as usize;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn capacity_bytes(&self) -> u64 {
        (self.cache.capacity_mb * 1e6).round() as u64
    }

    pub fn round_slots(&self) -> u64 {
        ((self.round_s / self.slot_s).round() as u64).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        positive("slot_s", self.slot_s)?;
        positive("round_s", self.round_s)?;
        check(self.slots > 0, || "slots must be at least 1".into())?;
        let r = &self.regions;
        check(r.rows > 0 && r.cols > 0, || "regions need at least one row and column".into())?;
        positive("regions.segment_length_m", r.segment_length_m)?;
        for (&id, &len) in &r.segment_lengths_m {
            check(id >= 1 && id <= r.count(), || format!("segment override for unknown region {id}"))?;
            positive("regions.segment_lengths_m", len)?;
        }
        let t = &self.traffic;
        check(t.vehicles_per_region.is_finite() && t.vehicles_per_region >= 0.0, || {
            "traffic.vehicles_per_region must be >= 0".into()
        })?;
        check(t.departure_prob > 0.0 && t.departure_prob <= 1.0, || {
            "traffic.departure_prob must lie in (0, 1]".into()
        })?;
        positive("traffic.free_flow_kmh", t.free_flow_kmh)?;
        positive("traffic.rho_max", t.rho_max)?;
        let c = &self.content;
        check(c.catalog_size >= 1, || "content.catalog_size must be >= 1".into())?;
        positive("content.size_min_mb", c.size_min_mb)?;
        check(c.size_max_mb >= c.size_min_mb, || "content.size_max_mb below size_min_mb".into())?;
        check(c.zipf_exponent.is_finite() && c.zipf_exponent >= 0.0, || {
            "content.zipf_exponent must be >= 0".into()
        })?;
        check(c.requests_per_vehicle.is_finite() && c.requests_per_vehicle >= 0.0, || {
            "content.requests_per_vehicle must be >= 0".into()
        })?;
        let rd = &self.radio;
        positive("radio.bandwidth_hz", rd.bandwidth_hz)?;
        positive("radio.path_loss_exp", rd.path_loss_exp)?;
        positive("radio.rsu_offset_m", rd.rsu_offset_m)?;
        positive("radio.bs_distance_m", rd.bs_distance_m)?;
        positive("radio.rsu_spacing_m", rd.rsu_spacing_m)?;
        check(self.cache.capacity_mb.is_finite() && self.cache.capacity_mb >= 0.0, || {
            "cache.capacity_mb must be >= 0".into()
        })?;
        check(self.cache.candidates >= 1, || "cache.candidates must be >= 1".into())?;
        check(self.cache.top_k as u32 <= c.catalog_size, || "cache.top_k exceeds the catalog".into())?;
        check((0.0..=1.0).contains(&self.epsilon), || format!("epsilon must lie in [0, 1], got {}", self.epsilon))?;
        self.reward.validate()?;
        self.afl.validate()?;
        self.predictor.validate()?;
        check(self.predictor.catalog == c.catalog_size as usize, || {
            format!(
                "predictor.catalog ({}) must equal content.catalog_size ({})",
                self.predictor.catalog, c.catalog_size
            )
        })?;
        check(self.predictor.locations == r.count() as usize, || {
            format!(
                "predictor.locations ({}) must equal the region count ({})",
                self.predictor.locations,
                r.count()
            )
        })?;
        check(self.predictor.context_dim == 1, || "predictor.context_dim must be 1 (region density)".into())?;
        check(self.forecast.window >= 1, || "forecast.window must be >= 1".into())?;
        check(self.forecast.max_clients >= 1, || "forecast.max_clients must be >= 1".into())?;
        check(self.forecast.client_max_samples >= 1, || "forecast.client_max_samples must be >= 1".into())?;
        check(self.forecast.per_sample_train_s >= 0.0, || "forecast.per_sample_train_s must be >= 0".into())?;
        check(self.forecast.pretrain.batch_size >= 1, || "forecast.pretrain.batch_size must be >= 1".into())?;
        self.sac.validate()?;
        check(self.twin.history >= 1 && self.twin.heatmap_window >= 1, || {
            "twin.history and twin.heatmap_window must be >= 1".into()
        })?;
        check(self.twin.heatmap_decay >= 0.0, || "twin.heatmap_decay must be >= 0".into())?;
        Ok(())
    }
}
