use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::baselines::{self, EpsilonGreedy, Policy, SlotView};
use super::config::{FadingMode, PathSelection, ScenarioConfig};
use super::metrics::{MetricsRow, RowKind, Tally};
use super::workload::{load_trace, poisson, Catalog, RequestEvent, ZipfSampler};
use crate::afl::{run_round, run_sync_round, ClientRecord, PredictorObjective, RoundClient, RoundLog};
use crate::cache::{CacheState, ContentId};
use crate::cache_rl::{
    reward, ActionMode, Candidate, CurveRow, ReplayBuffer, SacAgent, ServedRequest, StateEncoder, StateInputs,
    Transition,
};
use crate::comms::{delivery_delay, link_rate, resolve_fastest, resolve_fetch_path, FetchPath, FetchSource, LinkParams};
use crate::error::{Error, Result};
use crate::mobility::{dwell_time, estimate_train_time, estimate_upload_time, is_stable_client, Road, RsuSegment, TrafficParams, VehicleState};
use crate::nn::ParamVector;
use crate::predictor::{train_predictor, FeatureFrame, GruVae, Noise, Sample, TrainReport};
use crate::twin::{CacheDirective, DigitalTwin, LinkQuality, NodeRef, Observation, RegionRequests};

// Independent random streams, so that e.g. a policy's exploration never
// shifts the workload seen by another policy under the same seed.
const STREAM_CATALOG: u64 = 1;
const STREAM_MOBILITY: u64 = 2;
const STREAM_REQUESTS: u64 = 3;
const STREAM_RADIO: u64 = 4;
const STREAM_POLICY: u64 = 5;
const STREAM_SAC: u64 = 6;
const STREAM_AFL: u64 = 7;
const STREAM_PRETRAIN: u64 = 8;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Everything a run produces.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    /// One row per episode for learning policies.
    pub curve: Vec<CurveRow>,
    pub rounds: Vec<RoundLog>,
    /// Twin heatmap at the end of the last episode (empty without a twin).
    pub heatmap: Vec<crate::twin::HeatmapCell>,
    pub final_slot: u64,
}

/// Per-slot metrics rows for every region plus per-episode summary rows.
pub fn run_episode(cfg: &ScenarioConfig, policy: Policy, seed: u64) -> Result<Vec<MetricsRow>> {
    Ok(run(cfg, policy, seed)?.rows)
}

/// Runs `warmup_episodes + 1` episodes; learners persist across episodes,
/// vehicles and caches do not.
pub fn run(cfg: &ScenarioConfig, policy: Policy, seed: u64) -> Result<RunOutput> {
    cfg.validate()?;
    let mut sim = Simulation::new(cfg.clone(), policy, seed)?;
    let mut out = RunOutput::default();
    for ep in 0..=cfg.warmup_episodes {
        sim.run_episode(ep, &mut out)?;
    }
    Ok(out)
}

/// A SAC agent with its replay buffer; one per RSU, or one for all when shared.
struct AgentSlot {
    agent: SacAgent<f64>,
    buffer: ReplayBuffer,
}

/// Per-RSU learner state.
struct Learner {
    agent: usize,
    open: Option<(Vec<f64>, Vec<f64>)>,
    stats: RunningStats,
}

/// Welford mean and variance of the raw rewards an RSU has seen.
#[derive(Debug, Clone, Default)]
struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// `x` standardized by the statistics so far; identity until two samples exist.
    fn standardize(&self, x: f64) -> f64 {
        if self.n < 2 {
            return x - self.mean;
        }
        let sd = (self.m2 / (self.n - 1) as f64).sqrt();
        if sd > 0.0 {
            (x - self.mean) / sd
        } else {
            x - self.mean
        }
    }
}

/// A centrally pretrained predictor and its training history.
pub struct Predictor {
    pub model: GruVae,
    pub params: ParamVector<f64>,
    pub report: TrainReport,
}

/// Pretrains the scenario's predictor exactly as a DAPR run would before its first slot.
pub fn pretrain_predictor(cfg: &ScenarioConfig, seed: u64) -> Result<Predictor> {
    cfg.validate()?;
    let sim = Simulation::new(cfg.clone(), Policy::DaprNoDrl, seed)?;
    Ok(sim.predictor.expect("no-DRL ablation pretrains the predictor"))
}

/// Request counts of one region in one slot, with the frame built from them.
#[derive(Clone)]
struct RegionSlot {
    counts: Vec<f64>,
    frame: FeatureFrame,
}

struct Simulation {
    cfg: ScenarioConfig,
    policy: Policy,
    seed: u64,
    run_id: String,
    regions: Vec<u32>,
    catalog: Catalog,
    samplers: BTreeMap<u32, ZipfSampler>,
    trace: Option<Vec<Vec<RequestEvent>>>,
    rng_mobility: ChaCha8Rng,
    rng_requests: ChaCha8Rng,
    rng_radio: ChaCha8Rng,
    rng_policy: ChaCha8Rng,
    rng_sac: ChaCha8Rng,
    rng_afl: ChaCha8Rng,
    predictor: Option<Predictor>,
    model_bytes: usize,
    agents: Vec<AgentSlot>,
    learners: BTreeMap<u32, Learner>,
    encoder: StateEncoder,
    eps: EpsilonGreedy,
    global_slot: u64,
    round: u64,
}

/// Per-episode physical and twin state.
struct World {
    road: Road,
    next_vehicle: u64,
    caches: BTreeMap<NodeRef, CacheState>,
    twin: DigitalTwin,
    direct: Vec<(u64, CacheDirective)>,
    history: BTreeMap<u32, VecDeque<RegionSlot>>,
    vehicle_frames: BTreeMap<u64, VecDeque<FeatureFrame>>,
    stale_vehicles: Vec<VehicleState>,
    stale_caches: BTreeMap<NodeRef, CacheState>,
}

impl Simulation {
    fn new(mut cfg: ScenarioConfig, policy: Policy, seed: u64) -> Result<Self> {
        cfg.seed = seed;
        let n = cfg.content.catalog_size;
        let trace = match &cfg.content.trace {
            Some(path) => {
                let events = load_trace(path)?;
                if let Some(e) = events.iter().find(|e| e.content_id > n || e.region_id > cfg.regions.count()) {
                    return Err(Error::Config(format!(
                        "trace references content {} / region {} outside the scenario",
                        e.content_id, e.region_id
                    )));
                }
                let mut by_slot: BTreeMap<u64, Vec<RequestEvent>> = BTreeMap::new();
                for e in events {
                    by_slot.entry(e.slot).or_default().push(e);
                }
                Some(by_slot.into_values().collect::<Vec<_>>())
            }
            None => None,
        };
        let mut rng_catalog = stream(seed, STREAM_CATALOG);
        let mut catalog = Catalog::log_uniform(n, cfg.content.size_min_mb, cfg.content.size_max_mb, &mut rng_catalog);
        if let Some(tr) = &trace {
            let mut sizes: Vec<u64> = (1..=n).map(|id| catalog.size_of(id)).collect();
            for e in tr.iter().flatten() {
                sizes[e.content_id as usize - 1] = e.size_bytes;
            }
            catalog = Catalog::from_sizes(sizes);
        }
        let regions: Vec<u32> = cfg.regions.ids().collect();
        let samplers = regions
            .iter()
            .map(|&r| {
                let offset = ((r - 1) as u64 * cfg.content.region_rotation as u64 % n as u64) as u32;
                Ok((r, ZipfSampler::new(n, cfg.content.zipf_exponent, offset)?))
            })
            .collect::<Result<_>>()?;

        let encoder = StateEncoder {
            resident_slots: cfg.cache.resident_slots,
            candidates: cfg.cache.candidates,
            top_k: cfg.cache.top_k,
            heatmap_bins: regions.len(),
        };
        let model = GruVae::new(cfg.predictor.clone())?;
        let model_bytes = model.layout().total() * 8;
        let mut sim = Self {
            eps: EpsilonGreedy::new(cfg.epsilon)?,
            run_id: format!("{}-s{}", policy, seed),
            rng_mobility: stream(seed, STREAM_MOBILITY),
            rng_requests: stream(seed, STREAM_REQUESTS),
            rng_radio: stream(seed, STREAM_RADIO),
            rng_policy: stream(seed, STREAM_POLICY),
            rng_sac: stream(seed, STREAM_SAC),
            rng_afl: stream(seed, STREAM_AFL),
            predictor: None,
            model_bytes,
            agents: Vec::new(),
            learners: BTreeMap::new(),
            encoder,
            global_slot: 0,
            round: 0,
            regions,
            catalog,
            samplers,
            trace,
            policy,
            seed,
            cfg,
        };
        if policy.uses_predictor() {
            sim.predictor = Some(sim.pretrain(model)?);
        }
        if policy.uses_sac() {
            let n_agents = if sim.cfg.share_agent { 1 } else { sim.regions.len() };
            for _ in 0..n_agents {
                let agent = SacAgent::new(sim.cfg.sac.clone(), sim.encoder.dim(), sim.cfg.cache.candidates, &mut sim.rng_sac)?;
                let buffer = ReplayBuffer::new(sim.cfg.sac.buffer_capacity)?;
                sim.agents.push(AgentSlot { agent, buffer });
            }
            for (i, &r) in sim.regions.iter().enumerate() {
                let learner = Learner {
                    agent: if sim.cfg.share_agent { 0 } else { i },
                    open: None,
                    stats: RunningStats::default(),
                };
                sim.learners.insert(r, learner);
            }
        }
        Ok(sim)
    }

    fn time_bucket(&self, slot: u64) -> usize {
        ((slot as f64 * self.cfg.slot_s / 3600.0) as usize) % self.cfg.predictor.time_buckets
    }

    fn frame(&self, region: u32, counts: &[f64], slot: u64, vehicles: usize) -> FeatureFrame {
        let rho = crate::mobility::density(vehicles, self.cfg.regions.length_of(region));
        let ctx = (rho / self.cfg.traffic.rho_max).clamp(0.0, 1.0);
        FeatureFrame::from_counts(counts, (region - 1) as usize, self.time_bucket(slot), vec![ctx])
    }

    /// Windows of `frames` ending at each of the newest `max` targets.
    fn windows(&self, frames: &[&FeatureFrame], max: usize) -> Vec<Sample> {
        let w = self.cfg.forecast.window;
        let mut out = Vec::new();
        if frames.len() <= w {
            return out;
        }
        for end in (w..frames.len()).rev() {
            if out.len() == max {
                break;
            }
            let target = &frames[end].requests;
            if target.iter().all(|&v| v == 0.0) {
                continue;
            }
            out.push(Sample {
                frames: frames[end - w..end].iter().map(|f| (*f).clone()).collect(),
                target: target.clone(),
            });
        }
        out.reverse();
        out
    }

    /// Central pretraining on a synthetic (or trace) prefix of the workload.
    fn pretrain(&self, model: GruVae) -> Result<Predictor> {
        let mut rng = stream(self.seed, STREAM_PRETRAIN);
        let mut params = model.init_params::<f64>(&mut rng);
        let n = self.cfg.content.catalog_size as usize;
        let slots = self.cfg.forecast.pretrain_slots;
        let mean_vehicles = self.cfg.traffic.vehicles_per_region;
        let mut per_region: BTreeMap<u32, Vec<FeatureFrame>> = BTreeMap::new();
        for t in 0..slots {
            for &r in &self.regions {
                let mut counts = vec![0.0; n];
                match &self.trace {
                    Some(tr) if !tr.is_empty() => {
                        for e in tr[(t as usize) % tr.len()].iter().filter(|e| e.region_id == r) {
                            counts[e.content_id as usize - 1] += 1.0;
                        }
                    }
                    _ => {
                        let k = poisson(mean_vehicles * self.cfg.content.requests_per_vehicle, &mut rng);
                        for _ in 0..k {
                            counts[self.samplers[&r].sample(&mut rng) as usize - 1] += 1.0;
                        }
                    }
                }
                let f = self.frame(r, &counts, t, mean_vehicles.round() as usize);
                per_region.entry(r).or_default().push(f);
            }
        }
        let mut dataset = Vec::new();
        for frames in per_region.values() {
            let refs: Vec<&FeatureFrame> = frames.iter().collect();
            dataset.extend(self.windows(&refs, usize::MAX));
        }
        let mut report = TrainReport::default();
        if dataset.is_empty() {
            log::info!("no pretraining windows; predictor starts from its initialization");
        } else {
            let mut schedule = self.cfg.forecast.pretrain.clone();
            schedule.seed = rng.next_u64();
            report = train_predictor(&model, &mut params, &dataset, &schedule)?;
            if let Some(last) = report.epochs.last() {
                log::debug!("pretrained predictor on {} windows, final loss {:.4}", dataset.len(), last.total);
            }
        }
        Ok(Predictor { model, params, report })
    }

    fn new_world(&mut self) -> Result<World> {
        let ring = self.cfg.regions.ring();
        let segs = ring
            .iter()
            .enumerate()
            .map(|(i, &id)| RsuSegment::new(id, self.cfg.regions.length_of(id), ring[(i + 1) % ring.len()]))
            .collect::<Result<Vec<_>>>()?;
        let mut world = World {
            road: Road::new(segs)?,
            next_vehicle: 1,
            caches: self.regions.iter().map(|&r| (NodeRef::Rsu(r), CacheState::new(self.cfg.capacity_bytes()))).collect(),
            twin: DigitalTwin::new(self.cfg.twin.history, self.cfg.twin.delay_slots),
            direct: Vec::new(),
            history: BTreeMap::new(),
            vehicle_frames: BTreeMap::new(),
            stale_vehicles: Vec::new(),
            stale_caches: BTreeMap::new(),
        };
        for &r in &self.regions.clone() {
            let k = poisson(self.cfg.traffic.vehicles_per_region, &mut self.rng_mobility);
            for _ in 0..k {
                self.spawn(&mut world, r)?;
            }
        }
        world.stale_caches = world.caches.clone();
        Ok(world)
    }

    fn spawn(&mut self, w: &mut World, region: u32) -> Result<()> {
        let len = self.cfg.regions.length_of(region);
        let pos = self.rng_mobility.random::<f64>() * len;
        let id = w.next_vehicle;
        w.next_vehicle += 1;
        w.road.insert(VehicleState {
            id,
            segment: region,
            position_m: pos,
            speed_mps: 0.0,
            samples: 0,
            t_train_s: 0.0,
            t_trans_s: 0.0,
        })
    }

    fn move_vehicles(&mut self, w: &mut World) -> Result<()> {
        let p = self.cfg.traffic.departure_prob;
        let ids: Vec<u64> = w.road.vehicles().map(|v| v.id).collect();
        for id in ids {
            if self.rng_mobility.random::<f64>() < p {
                w.road.remove(id);
                w.vehicle_frames.remove(&id);
            }
        }
        for &r in &self.regions.clone() {
            let k = poisson(self.cfg.traffic.vehicles_per_region * p, &mut self.rng_mobility);
            for _ in 0..k {
                self.spawn(w, r)?;
            }
        }
        w.road.update_speeds(&TrafficParams {
            free_flow_kmh: self.cfg.traffic.free_flow_kmh,
            rho_max: self.cfg.traffic.rho_max,
        });
        w.road.advance(self.cfg.slot_s);
        Ok(())
    }

    fn fading(&mut self) -> f64 {
        match self.cfg.radio.fading {
            FadingMode::Deterministic => 1.0,
            FadingMode::Rayleigh => crate::comms::sample_rayleigh_fading(&mut self.rng_radio),
        }
    }

    fn link(&self, power_dbm: f64, distance_m: f64, fading: f64) -> LinkParams<f64> {
        let r = &self.cfg.radio;
        LinkParams {
            bandwidth_hz: r.bandwidth_hz,
            tx_power_dbm: power_dbm,
            distance_m,
            path_loss_exp: r.path_loss_exp,
            fading,
            noise_dbm: r.noise_dbm,
        }
    }

    /// Vehicle-to-RSU distance with the RSU at the segment midpoint.
    fn rsu_distance(&self, region: u32, position_m: f64) -> f64 {
        let half = self.cfg.regions.length_of(region) / 2.0;
        (position_m - half).hypot(self.cfg.radio.rsu_offset_m)
    }

    fn requests(&mut self, w: &World, slot: u64) -> BTreeMap<u32, Vec<(f64, ContentId)>> {
        let mut out: BTreeMap<u32, Vec<(f64, ContentId)>> = self.regions.iter().map(|&r| (r, Vec::new())).collect();
        if let Some(tr) = &self.trace {
            if tr.is_empty() {
                return out;
            }
            for e in &tr[(slot as usize) % tr.len()] {
                let pos = w
                    .road
                    .vehicle(e.vehicle_id)
                    .filter(|v| v.segment == e.region_id)
                    .map(|v| v.position_m)
                    .unwrap_or(self.cfg.regions.length_of(e.region_id) / 2.0);
                out.get_mut(&e.region_id).expect("validated region").push((pos, e.content_id));
            }
            return out;
        }
        let lambda = self.cfg.content.requests_per_vehicle;
        for v in w.road.vehicles() {
            let k = poisson(lambda, &mut self.rng_requests);
            for _ in 0..k {
                let id = self.samplers[&v.segment].sample(&mut self.rng_requests);
                out.get_mut(&v.segment).expect("known segment").push((v.position_m, id));
            }
        }
        out
    }

    fn serve(
        &mut self,
        w: &mut World,
        slot: u64,
        requests: &BTreeMap<u32, Vec<(f64, ContentId)>>,
    ) -> Result<BTreeMap<u32, (Tally, f64)>> {
        let mut out = BTreeMap::new();
        for (&r, reqs) in requests {
            let mut tally = Tally::default();
            let mut events = Vec::with_capacity(reqs.len());
            let mut rate_sum = 0.0;
            for &(pos, id) in reqs {
                let h = self.fading();
                let first = self.link(self.cfg.radio.rsu_power_dbm, self.rsu_distance(r, pos), h);
                let second = self.link(self.cfg.radio.rsu_power_dbm, self.cfg.radio.rsu_spacing_m, h);
                let bs = self.link(self.cfg.radio.bs_power_dbm, self.cfg.radio.bs_distance_m, h);
                rate_sum += link_rate(&first);
                let path_of = |src: FetchSource| match src {
                    FetchSource::Local => FetchPath::Local(first),
                    FetchSource::Neighbor(_) => FetchPath::NeighborRsu { first, second },
                    FetchSource::BaseStation => FetchPath::BaseStation(bs),
                };
                let bits = self.catalog.size_of(id) as f64 * 8.0;
                let local = &w.caches[&NodeRef::Rsu(r)];
                let neighbors: Vec<(u32, &CacheState)> = self
                    .cfg
                    .regions
                    .neighbors(r)
                    .into_iter()
                    .map(|n| (n, &w.caches[&NodeRef::Rsu(n)]))
                    .collect();
                let (src, delay) = match self.cfg.radio.path_selection {
                    PathSelection::Priority => {
                        let src = resolve_fetch_path(id, local, &neighbors);
                        (src, delivery_delay(bits, &path_of(src))?)
                    }
                    PathSelection::Fastest => resolve_fastest(id, bits, local, &neighbors, path_of)?,
                };
                match src {
                    FetchSource::Local => {
                        tally.local_hits += 1;
                        w.caches.get_mut(&NodeRef::Rsu(r)).expect("rsu cache").record_access(id, slot);
                    }
                    FetchSource::Neighbor(n) => {
                        tally.neighbor_hits += 1;
                        w.caches.get_mut(&NodeRef::Rsu(n)).expect("rsu cache").record_access(id, slot);
                    }
                    FetchSource::BaseStation => tally.bs_fetches += 1,
                }
                tally.requests += 1;
                tally.total_delay_ms += delay * 1e3;
                events.push(ServedRequest {
                    class: src.class(),
                    delay_s: delay,
                });
            }
            tally.reward = reward(&events, &self.cfg.reward)?;
            let mean_rate = if reqs.is_empty() { 0.0 } else { rate_sum / reqs.len() as f64 };
            out.insert(r, (tally, mean_rate));
        }
        Ok(out)
    }

    /// Refreshes each vehicle's dataset size and its train/upload estimates.
    fn refresh_vehicles(&mut self, w: &mut World) {
        let per_sample = self.cfg.forecast.per_sample_train_s;
        let iters = self.cfg.afl.local_iters;
        let max = self.cfg.forecast.client_max_samples;
        let win = self.cfg.forecast.window;
        let ids: Vec<(u64, u32, f64)> = w.road.vehicles().map(|v| (v.id, v.segment, v.position_m)).collect();
        for (id, seg, pos) in ids {
            let frames = w.vehicle_frames.get(&id).map_or(0, |f| f.len());
            let samples = frames.saturating_sub(win).min(max);
            let uplink = link_rate(&self.link(self.cfg.radio.vehicle_power_dbm, self.rsu_distance(seg, pos), 1.0));
            let v = w.road.vehicle_mut(id).expect("listed vehicle");
            v.samples = samples;
            v.t_train_s = estimate_train_time(samples, per_sample, iters);
            v.t_trans_s = estimate_upload_time(self.model_bytes, uplink);
        }
    }

    fn forecast(&self, w: &World, region: u32) -> Result<Vec<f64>> {
        let n = self.cfg.content.catalog_size as usize;
        let hist = w.history.get(&region);
        let recent: Vec<&RegionSlot> = hist
            .map(|h| h.iter().rev().take(self.cfg.forecast.window).collect::<Vec<_>>())
            .unwrap_or_default()
            .into_iter()
            .rev()
            .collect();
        match &self.predictor {
            Some(p) if self.policy.uses_predictor() && !recent.is_empty() => {
                let frames: Vec<FeatureFrame> = recent.iter().map(|s| s.frame.clone()).collect();
                let f = p.model.predict_popularity(&frames, &p.params, &mut Noise::zero(), self.global_slot)?;
                Ok(f.probs)
            }
            _ => {
                let mut sum = vec![0.0; n];
                for s in &recent {
                    for (a, c) in sum.iter_mut().zip(&s.counts) {
                        *a += c;
                    }
                }
                let total: f64 = sum.iter().sum();
                Ok(if total > 0.0 {
                    sum.into_iter().map(|v| v / total).collect()
                } else {
                    vec![1.0 / n as f64; n]
                })
            }
        }
    }

    /// Share of each region's decayed demand that `cache` could serve.
    fn heatmap_bins(&self, w: &World, cache: &CacheState) -> Result<Vec<f64>> {
        let mut bins = vec![0.0; self.regions.len()];
        if !self.policy.uses_twin() {
            return Ok(bins);
        }
        let cells = w.twin.heatmap(self.cfg.twin.heatmap_window, self.cfg.twin.heatmap_decay)?;
        let mut tot = vec![0.0; self.regions.len()];
        for c in cells {
            let i = (c.region - 1) as usize;
            tot[i] += c.decay_score;
            if cache.contains(c.content) {
                bins[i] += c.decay_score;
            }
        }
        for (b, t) in bins.iter_mut().zip(tot) {
            *b = if t > 0.0 { *b / t } else { 0.0 };
        }
        Ok(bins)
    }

    fn dapr_decision(
        &mut self,
        w: &World,
        region: u32,
        counts: &BTreeMap<ContentId, u32>,
        reward_now: f64,
        losses: &mut Vec<[f64; 3]>,
    ) -> Result<CacheDirective> {
        let probs = self.forecast(w, region)?;
        let node = NodeRef::Rsu(region);
        let cache = if self.policy.uses_twin() {
            &w.twin.latest().expect("synced this slot").caches[&region]
        } else {
            &w.stale_caches[&node]
        };
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let max_p = probs[order[0]].max(f64::MIN_POSITIVE);
        let candidates: Vec<Candidate> = order
            .iter()
            .take(self.cfg.cache.candidates)
            .map(|&i| {
                let id = i as ContentId + 1;
                Candidate {
                    id,
                    size_bytes: self.catalog.size_of(id),
                    requests: counts.get(&id).copied().unwrap_or(0),
                    score: probs[i],
                }
            })
            .collect();
        let scores: BTreeMap<ContentId, f64> = cache.items().map(|it| (it.id, probs[it.id as usize - 1])).collect();

        let action = if self.learners.contains_key(&region) {
            let top: Vec<f64> = order.iter().take(self.cfg.cache.top_k).map(|&i| probs[i] / max_p).collect();
            let heat = self.heatmap_bins(w, cache)?;
            let pop = |id: ContentId| probs[id as usize - 1] / max_p;
            let state = self
                .encoder
                .encode(&StateInputs {
                    cache,
                    candidates: &candidates,
                    popularity: &pop,
                    forecast_top: &top,
                    heatmap: &heat,
                })?
                .0;
            let l = self.learners.get_mut(&region).expect("checked");
            let slot = &mut self.agents[l.agent];
            if let Some((s, a)) = l.open.take() {
                let reward = if self.cfg.normalize_rewards {
                    l.stats.push(reward_now);
                    l.stats.standardize(reward_now)
                } else {
                    reward_now
                };
                slot.buffer.push(Transition {
                    state: s,
                    action: a,
                    reward,
                    next_state: state.clone(),
                })?;
            }
            if let Some(rep) = slot.agent.train_step(&slot.buffer, &mut self.rng_sac)? {
                losses.push([rep.value_loss, rep.q_loss, rep.policy_loss]);
            }
            let a = slot.agent.sample_action(&state, ActionMode::Stochastic, &mut self.rng_sac)?;
            l.open = Some((state, a.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()));
            a
        } else {
            (0..candidates.len()).map(|_| self.rng_policy.random_bool(0.5)).collect()
        };
        Ok(CacheDirective {
            target: node,
            candidates,
            action,
            scores,
        })
    }

    fn afl_round(&mut self, w: &World) -> Result<Option<RoundLog>> {
        let Some(pred) = self.predictor.as_ref() else {
            return Ok(None);
        };
        let mut records: Vec<ClientRecord> = Vec::new();
        if self.policy.uses_twin() {
            let snap = w.twin.latest().expect("synced this slot").clone();
            for v in snap.vehicles.values() {
                let (stay, train, trans) = w.twin.predicted_dwell(v.id)?;
                if v.samples > 0 && is_stable_client(stay, train, trans) {
                    records.push(ClientRecord {
                        vehicle_id: v.id,
                        samples: v.samples,
                        position_m: v.position_m,
                        coverage_m: snap.coverage_m[&v.segment],
                        dwell_s: stay,
                        t_train_s: train,
                        t_trans_s: trans,
                        last_round: None,
                    });
                }
            }
        } else {
            for v in &w.stale_vehicles {
                let cov = self.cfg.regions.length_of(v.segment);
                let stay = dwell_time(cov, v.position_m, v.speed_mps)?;
                if v.samples > 0 && is_stable_client(stay, v.t_train_s, v.t_trans_s) {
                    // Selected from stale state; a vehicle that has since left cannot report back.
                    if w.road.vehicle(v.id).is_none() {
                        log::debug!("stale selection of departed vehicle {}", v.id);
                        continue;
                    }
                    records.push(ClientRecord::from_vehicle(v, cov)?);
                }
            }
        }
        records.sort_by(|a, b| b.samples.cmp(&a.samples).then(a.vehicle_id.cmp(&b.vehicle_id)));
        records.truncate(self.cfg.forecast.max_clients);
        records.sort_by_key(|r| r.vehicle_id);

        let datasets: Vec<Vec<Sample>> = records
            .iter()
            .map(|r| {
                let frames: Vec<&FeatureFrame> = w.vehicle_frames.get(&r.vehicle_id).map(|f| f.iter().collect()).unwrap_or_default();
                self.windows(&frames, self.cfg.forecast.client_max_samples)
            })
            .collect();
        let mut objectives: Vec<PredictorObjective<'_>> = datasets
            .iter()
            .map(|d| PredictorObjective::new(&pred.model, d, self.rng_afl.next_u64()))
            .collect();
        let clients: Vec<RoundClient<'_, f64>> = records
            .iter()
            .zip(objectives.iter_mut())
            .zip(&datasets)
            .map(|((r, o), d)| RoundClient {
                record: ClientRecord {
                    samples: d.len(),
                    ..r.clone()
                },
                objective: o,
            })
            .collect();
        let mut params = pred.params.clone();
        let round = self.round;
        let log = if self.policy == Policy::DaprNoAfl {
            run_sync_round(round, &mut params, clients, &self.cfg.afl)?
        } else {
            run_round(round, &mut params, clients, &self.cfg.afl)?
        };
        drop(objectives);
        self.predictor.as_mut().expect("checked").params = params;
        self.round += 1;
        Ok(Some(log))
    }

    fn run_episode(&mut self, episode: u32, out: &mut RunOutput) -> Result<()> {
        let mut w = self.new_world()?;
        for l in self.learners.values_mut() {
            l.open = None;
        }
        let n = self.cfg.content.catalog_size as usize;
        let hist_len = self.cfg.forecast.window + self.cfg.forecast.client_max_samples + 1;
        let mut cumulative: BTreeMap<u32, f64> = BTreeMap::new();
        let mut totals: BTreeMap<u32, Tally> = BTreeMap::new();
        let mut losses: Vec<[f64; 3]> = Vec::new();
        let mut reward_sum = 0.0;

        for s in 0..self.cfg.slots {
            let g = self.global_slot;
            if self.policy.uses_twin() {
                w.twin.apply_due(g, &mut w.caches)?;
            } else {
                let due: Vec<CacheDirective> = {
                    let (due, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut w.direct).into_iter().partition(|(at, _)| *at <= g);
                    w.direct = keep;
                    due.into_iter().map(|(_, d)| d).collect()
                };
                for d in due {
                    if let Some(c) = w.caches.get_mut(&d.target) {
                        crate::cache_rl::apply_action(c, &d.action, &d.candidates, |id| d.scores.get(&id).copied().unwrap_or(0.0), g)?;
                    }
                }
            }
            if s > 0 {
                self.move_vehicles(&mut w)?;
            } else {
                w.road.update_speeds(&TrafficParams {
                    free_flow_kmh: self.cfg.traffic.free_flow_kmh,
                    rho_max: self.cfg.traffic.rho_max,
                });
            }
            let requests = self.requests(&w, s);
            let served = self.serve(&mut w, g, &requests)?;

            // Region frames, and the same frame logged by every vehicle in the region.
            let mut slot_counts: BTreeMap<u32, BTreeMap<ContentId, u32>> = BTreeMap::new();
            let mut new_slots: BTreeMap<u32, RegionSlot> = BTreeMap::new();
            for (&r, reqs) in &requests {
                let mut counts = vec![0.0; n];
                let mut by_id: BTreeMap<ContentId, u32> = BTreeMap::new();
                for &(_, id) in reqs {
                    counts[id as usize - 1] += 1.0;
                    *by_id.entry(id).or_default() += 1;
                }
                let frame = self.frame(r, &counts, g, w.road.count_on(r));
                slot_counts.insert(r, by_id);
                new_slots.insert(r, RegionSlot { counts, frame });
            }
            for v in w.road.vehicles() {
                let log = w.vehicle_frames.entry(v.id).or_default();
                log.push_back(new_slots[&v.segment].frame.clone());
                while log.len() > hist_len {
                    log.pop_front();
                }
            }
            self.refresh_vehicles(&mut w);

            let fresh = self.policy.uses_twin();
            let push_history = |w: &mut World, new_slots: &BTreeMap<u32, RegionSlot>| {
                for (&r, rs) in new_slots {
                    let h = w.history.entry(r).or_default();
                    h.push_back(rs.clone());
                    while h.len() > hist_len {
                        h.pop_front();
                    }
                }
            };
            if fresh {
                let coverage = self.regions.iter().map(|&r| (r, self.cfg.regions.length_of(r))).collect();
                let obs = Observation {
                    slot: g,
                    vehicles: w.road.vehicles().cloned().collect(),
                    caches: self.regions.iter().map(|&r| (r, w.caches[&NodeRef::Rsu(r)].clone())).collect(),
                    links: served
                        .iter()
                        .map(|(&r, (_, rate))| {
                            (
                                r,
                                LinkQuality {
                                    mean_rate_bps: *rate,
                                    vehicles: w.road.count_on(r),
                                },
                            )
                        })
                        .collect(),
                    coverage_m: coverage,
                    requests: slot_counts
                        .iter()
                        .flat_map(|(&region, m)| m.iter().map(move |(&content, &count)| RegionRequests { region, content, count }))
                        .collect(),
                };
                w.twin.sync_state(obs)?;
                push_history(&mut w, &new_slots);
            }

            for (&r, (t, _)) in &served {
                let c = cumulative.entry(r).or_default();
                *c += t.reward;
                reward_sum += t.reward;
                totals.entry(r).or_default().add(t);
                out.rows.push(MetricsRow {
                    run_id: self.run_id.clone(),
                    policy: self.policy.name().into(),
                    seed: self.seed,
                    episode,
                    kind: RowKind::Slot,
                    slot: s,
                    region: r,
                    requests: t.requests,
                    local_hits: t.local_hits,
                    neighbor_hits: t.neighbor_hits,
                    bs_fetches: t.bs_fetches,
                    reward: t.reward,
                    cumulative_reward: *c,
                    hit_ratio: t.hit_ratio(),
                    mean_delay_ms: t.mean_delay_ms(),
                    total_delay_ms: t.total_delay_ms,
                });
            }

            if self.policy.uses_predictor() && (s + 1) % self.cfg.round_slots() == 0 {
                if let Some(log) = self.afl_round(&w)? {
                    out.rounds.push(log);
                }
            }

            let mut directives = Vec::with_capacity(self.regions.len());
            for r in self.regions.clone() {
                let counts = &slot_counts[&r];
                let node = NodeRef::Rsu(r);
                let d = match self.policy {
                    p if p.is_dapr() => self.dapr_decision(&w, r, counts, served[&r].0.reward, &mut losses)?,
                    _ => {
                        let cache = &w.caches[&node];
                        let size_of = |id: ContentId| self.catalog.size_of(id);
                        let view = SlotView {
                            region: r,
                            slot: g,
                            cache,
                            counts,
                            size_of: &size_of,
                        };
                        match self.policy {
                            Policy::Lru => baselines::lru(&view),
                            Policy::Lfu => baselines::lfu(&view),
                            Policy::Random => baselines::random(&view, &mut self.rng_policy),
                            _ => self.eps.decide(&view, &mut self.rng_policy).directive,
                        }
                    }
                };
                directives.push(d);
            }
            if fresh {
                w.twin.emit_commands(g, directives);
            } else {
                let due = g + self.cfg.twin.delay_slots;
                w.direct.extend(directives.into_iter().map(|d| (due, d)));
                push_history(&mut w, &new_slots);
                w.stale_vehicles = w.road.vehicles().cloned().collect();
                w.stale_caches = w.caches.clone();
            }
            self.global_slot += 1;
        }

        let slots = self.cfg.slots;
        let mut all = Tally::default();
        for t in totals.values() {
            all.add(t);
        }
        for (region, t) in std::iter::once((0u32, all)).chain(totals) {
            out.rows.push(MetricsRow {
                run_id: self.run_id.clone(),
                policy: self.policy.name().into(),
                seed: self.seed,
                episode,
                kind: RowKind::Summary,
                slot: slots,
                region,
                requests: t.requests,
                local_hits: t.local_hits,
                neighbor_hits: t.neighbor_hits,
                bs_fetches: t.bs_fetches,
                reward: t.reward,
                cumulative_reward: t.reward,
                hit_ratio: t.hit_ratio(),
                mean_delay_ms: t.mean_delay_ms(),
                total_delay_ms: t.total_delay_ms,
            });
        }
        if self.policy.is_dapr() {
            let k = losses.len().max(1) as f64;
            let mean = |i: usize| losses.iter().map(|l| l[i]).sum::<f64>() / k;
            out.curve.push(CurveRow {
                episode: episode as usize,
                mean_reward: reward_sum / slots as f64,
                value_loss: mean(0),
                q_loss: mean(1),
                policy_loss: mean(2),
            });
        }
        if self.policy.uses_twin() {
            out.heatmap = w.twin.heatmap(self.cfg.twin.heatmap_window, self.cfg.twin.heatmap_decay)?;
        }
        out.final_slot = self.global_slot.saturating_sub(1);
        Ok(())
    }
}
