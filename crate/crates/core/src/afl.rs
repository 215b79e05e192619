//! Asynchronous federated learning over vehicles.
//!
//! Clients are the vehicles expected to stay in coverage long enough to
//! train and upload. Each trains from the round's dispatched model with a
//! proximal term, then folds into the *current* global model in
//! simulated-completion-time order with a data/position weight ϱ.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::{dwell_time, is_stable_client, Road, VehicleState};
use crate::nn::ParamVector;
use crate::predictor::{GruVae, Noise, Sample};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// `ω ← (1−ϱ)ω + ϱω_client`.
    #[default]
    Convex,
    /// `ω ← ω + ϱω_client`.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocationWeightMode {
    /// `L_i / L_s`.
    #[default]
    AsWritten,
    /// `1 − L_i / L_s`.
    Remaining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AflConfig {
    pub eta: f64,
    pub kappa: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub local_iters: usize,
    pub rounds: usize,
    pub aggregation: AggregationMode,
    pub location_weight_mode: LocationWeightMode,
}

impl Default for AflConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            kappa: 0.1,
            alpha1: 0.7,
            alpha2: 0.3,
            local_iters: 5,
            rounds: 10,
            aggregation: AggregationMode::Convex,
            location_weight_mode: LocationWeightMode::AsWritten,
        }
    }
}

impl AflConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.alpha1) || !unit(self.alpha2) || (self.alpha1 + self.alpha2 - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "alpha1 + alpha2 must equal 1 with both in [0,1], got {} and {}",
                self.alpha1, self.alpha2
            )));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config("eta must be > 0".into()));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Config("kappa must be >= 0".into()));
        }
        if self.local_iters == 0 {
            return Err(Error::Config("local_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub vehicle_id: u64,
    pub samples: usize,
    pub position_m: f64,
    pub coverage_m: f64,
    pub dwell_s: f64,
    pub t_train_s: f64,
    pub t_trans_s: f64,
    pub last_round: Option<u64>,
}

impl ClientRecord {
    pub fn from_vehicle(v: &VehicleState, coverage_m: f64) -> Result<Self> {
        Ok(Self {
            vehicle_id: v.id,
            samples: v.samples,
            position_m: v.position_m,
            coverage_m,
            dwell_s: dwell_time(coverage_m, v.position_m, v.speed_mps)?,
            t_train_s: v.t_train_s,
            t_trans_s: v.t_trans_s,
            last_round: None,
        })
    }

    pub fn completion_s(&self) -> f64 {
        self.t_train_s + self.t_trans_s
    }

    pub fn is_stable(&self) -> bool {
        is_stable_client(self.dwell_s, self.t_train_s, self.t_trans_s)
    }
}

/// Vehicles whose dwell exceeds their train + upload time, sorted by id.
pub fn select_clients<'a>(
    vehicles: impl IntoIterator<Item = &'a VehicleState>,
    coverage_of: impl Fn(u32) -> Option<f64>,
) -> Result<Vec<ClientRecord>> {
    let mut out = Vec::new();
    for v in vehicles {
        let cov = coverage_of(v.segment).ok_or_else(|| Error::invalid(format!("unknown segment {}", v.segment)))?;
        let rec = ClientRecord::from_vehicle(v, cov)?;
        if rec.is_stable() {
            out.push(rec);
        }
    }
    out.sort_by_key(|c| c.vehicle_id);
    if out.is_empty() {
        log::info!("no stable clients this round");
    }
    Ok(out)
}

pub fn select_clients_on(road: &Road) -> Result<Vec<ClientRecord>> {
    select_clients(road.vehicles(), |s| road.segment(s).map(|seg| seg.length_m))
}

/// A client's training objective `f(ω)`.
pub trait LocalObjective<T: Scalar> {
    fn num_samples(&self) -> usize;

    /// Returns `f(ω)` and adds `∇f(ω)` into `p.grads` (which the caller zeroes).
    fn loss_and_grad(&mut self, p: &mut ParamVector<T>) -> Result<T>;
}

#[derive(Debug, Clone)]
pub struct LocalResult<T> {
    pub params: ParamVector<T>,
    /// Mean of `f` over the local iterations (evaluated before each step).
    pub mean_loss: T,
}

/// `J` steps of `ω ← ω − η(∇f(ω) + κ(ω − ω_global))`.
pub fn local_update<T: Scalar>(
    global: &ParamVector<T>,
    objective: &mut dyn LocalObjective<T>,
    cfg: &AflConfig,
) -> Result<LocalResult<T>> {
    if objective.num_samples() == 0 {
        return Err(Error::Empty("local dataset"));
    }
    let eta = T::lit(cfg.eta);
    let kappa = T::lit(cfg.kappa);
    let mut p = global.clone();
    let mut total = T::zero();
    for _ in 0..cfg.local_iters {
        p.zero_grad();
        total += objective.loss_and_grad(&mut p)?;
        let g = p.grads().to_vec();
        for ((w, gk), &wg) in p.values_mut().iter_mut().zip(g).zip(global.values()) {
            *w -= eta * (gk + kappa * (*w - wg));
        }
        if p.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "local_update" });
        }
    }
    p.zero_grad();
    Ok(LocalResult {
        params: p,
        mean_loss: total / T::lit(cfg.local_iters as f64),
    })
}

/// `ϱ = α1·n_k/Σn + α2·loc`, with `loc = L_i/L_s` or `1 − L_i/L_s`.
pub fn aggregation_weight<T: Scalar>(
    n_k: T,
    sum_n: T,
    position_m: T,
    coverage_m: T,
    alpha1: T,
    alpha2: T,
    mode: LocationWeightMode,
) -> Result<T> {
    if !(sum_n > T::zero()) {
        return Err(Error::invalid("total data volume must be > 0"));
    }
    if !(n_k >= T::zero() && n_k <= sum_n) {
        return Err(Error::invalid(format!("n_k {n_k} outside [0, {sum_n}]")));
    }
    if !(coverage_m > T::zero()) || !(position_m >= T::zero() && position_m <= coverage_m) {
        return Err(Error::invalid(format!("position {position_m} outside [0, {coverage_m}]")));
    }
    let frac = position_m / coverage_m;
    let loc = match mode {
        LocationWeightMode::AsWritten => frac,
        LocationWeightMode::Remaining => T::one() - frac,
    };
    let rho = alpha1 * n_k / sum_n + alpha2 * loc;
    Ok(rho.max(T::zero()).min(T::one()))
}

pub fn async_aggregate<T: Scalar>(
    global: &ParamVector<T>,
    client: &ParamVector<T>,
    rho: T,
    mode: AggregationMode,
) -> Result<ParamVector<T>> {
    global.check_layout(client)?;
    if !(rho >= T::zero() && rho <= T::one()) {
        return Err(Error::invalid(format!("rho {rho} outside [0,1]")));
    }
    let values = global
        .values()
        .iter()
        .zip(client.values())
        .map(|(&g, &c)| match mode {
            AggregationMode::Convex => (T::one() - rho) * g + rho * c,
            AggregationMode::Literal => g + rho * c,
        })
        .collect();
    ParamVector::from_values(global.layout().clone(), values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: u64,
    /// In fold order.
    pub client_ids: Vec<u64>,
    pub rho_values: Vec<f64>,
    pub mean_local_loss: Option<f64>,
    pub wall_ms: f64,
}

pub struct RoundClient<'a, T: Scalar> {
    pub record: ClientRecord,
    pub objective: &'a mut dyn LocalObjective<T>,
}

/// One asynchronous round. Every client trains from the dispatched `ω^r`;
/// updates are folded into the running global in nondecreasing
/// `T_train + T_trans` order (ties by vehicle id). Client models travel
/// through the wire format as they would on upload.
pub fn run_round<T: Scalar>(
    round: u64,
    global: &mut ParamVector<T>,
    mut clients: Vec<RoundClient<'_, T>>,
    cfg: &AflConfig,
) -> Result<RoundLog> {
    cfg.validate()?;
    let start = Instant::now();
    clients.sort_by(|a, b| {
        a.record
            .completion_s()
            .total_cmp(&b.record.completion_s())
            .then(a.record.vehicle_id.cmp(&b.record.vehicle_id))
    });
    let sum_n: usize = clients.iter().map(|c| c.record.samples).sum();
    let dispatched = global.clone();
    let mut log = RoundLog {
        round,
        client_ids: Vec::new(),
        rho_values: Vec::new(),
        mean_local_loss: None,
        wall_ms: 0.0,
    };
    let mut loss_sum = 0.0;
    for c in clients.iter_mut() {
        let r = &c.record;
        if r.samples == 0 {
            log::warn!("vehicle {} has no samples, skipped", r.vehicle_id);
            continue;
        }
        let local = local_update(&dispatched, c.objective, cfg)?;
        let uploaded = ParamVector::<T>::from_bytes(&local.params.to_bytes())?;
        let rho = aggregation_weight(
            r.samples as f64,
            sum_n as f64,
            r.position_m.min(r.coverage_m),
            r.coverage_m,
            cfg.alpha1,
            cfg.alpha2,
            cfg.location_weight_mode,
        )?;
        *global = async_aggregate(global, &uploaded, T::lit(rho), cfg.aggregation)?;
        log.client_ids.push(r.vehicle_id);
        log.rho_values.push(rho);
        loss_sum += local.mean_loss.to_f64_lossy();
        c.record.last_round = Some(round);
    }
    if log.client_ids.is_empty() {
        log::info!("round {round}: no clients, global unchanged");
    } else {
        log.mean_local_loss = Some(loss_sum / log.client_ids.len() as f64);
    }
    log.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(log)
}

/// Barrier round with equal-weight averaging of client models; the
/// non-asynchronous comparison baseline.
pub fn run_sync_round<T: Scalar>(
    round: u64,
    global: &mut ParamVector<T>,
    clients: Vec<RoundClient<'_, T>>,
    cfg: &AflConfig,
) -> Result<RoundLog> {
    cfg.validate()?;
    let start = Instant::now();
    let dispatched = global.clone();
    let mut acc = vec![T::zero(); global.len()];
    let mut log = RoundLog {
        round,
        client_ids: Vec::new(),
        rho_values: Vec::new(),
        mean_local_loss: None,
        wall_ms: 0.0,
    };
    let mut loss_sum = 0.0;
    for c in clients {
        if c.record.samples == 0 {
            continue;
        }
        let local = local_update(&dispatched, c.objective, cfg)?;
        for (a, &v) in acc.iter_mut().zip(local.params.values()) {
            *a += v;
        }
        loss_sum += local.mean_loss.to_f64_lossy();
        log.client_ids.push(c.record.vehicle_id);
    }
    let k = log.client_ids.len();
    if k > 0 {
        let inv = T::one() / T::lit(k as f64);
        let values = acc.into_iter().map(|a| a * inv).collect();
        *global = ParamVector::from_values(global.layout().clone(), values)?;
        log.rho_values = vec![1.0 / k as f64; k];
        log.mean_local_loss = Some(loss_sum / k as f64);
    }
    log.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(log)
}

/// Mean joint predictor loss over a client's samples, with ε drawn from the
/// client's own seeded stream.
pub struct PredictorObjective<'a> {
    pub model: &'a GruVae,
    pub samples: &'a [Sample],
    pub rng: ChaCha8Rng,
    pub lambda: f64,
    pub beta: f64,
}

impl<'a> PredictorObjective<'a> {
    pub fn new(model: &'a GruVae, samples: &'a [Sample], seed: u64) -> Self {
        let cfg = model.config();
        Self {
            model,
            samples,
            rng: ChaCha8Rng::seed_from_u64(seed),
            lambda: cfg.lambda,
            beta: cfg.beta_kl,
        }
    }
}

impl<T: Scalar> LocalObjective<T> for PredictorObjective<'_> {
    fn num_samples(&self) -> usize {
        self.samples.len()
    }

    fn loss_and_grad(&mut self, p: &mut ParamVector<T>) -> Result<T> {
        let k = self.samples.len();
        if k == 0 {
            return Err(Error::Empty("local dataset"));
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<&Sample>> = Default::default();
        for s in self.samples {
            groups.entry(s.frames.len()).or_default().push(s);
        }
        let mut total = T::zero();
        for batch in groups.values() {
            let w = T::lit(batch.len() as f64 / k as f64);
            let mut noise = Noise::Sampled(&mut self.rng);
            let (parts, _) = self.model.accumulate_gradient(
                batch,
                p,
                &mut noise,
                T::lit(self.lambda),
                T::lit(self.beta),
                w,
            )?;
            total += w * parts.total;
        }
        Ok(total)
    }
}
