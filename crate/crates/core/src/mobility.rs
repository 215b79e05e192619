//! Greenshields traffic flow: density, speed, dwell time, client stability and
//! position advance with handover between consecutive RSU segments.
//!
//! Speeds are m/s internally; km/h appears only in [`speed_kmh`] and the
//! conversion helpers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsuSegment {
    pub id: u32,
    pub length_m: f64,
    pub successor: u32,
}

impl RsuSegment {
    pub fn new(id: u32, length_m: f64, successor: u32) -> Result<Self> {
        if !(length_m > 0.0) {
            return Err(Error::invalid(format!("segment {id}: coverage length must be > 0")));
        }
        Ok(Self {
            id,
            length_m,
            successor,
        })
    }
}

/// A vehicle as seen by mobility, the twin and federated client selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u64,
    pub segment: u32,
    pub position_m: f64,
    pub speed_mps: f64,
    pub samples: usize,
    pub t_train_s: f64,
    pub t_trans_s: f64,
}

pub fn kmh_to_mps<T: Scalar>(v: T) -> T {
    v / T::lit(3.6)
}

pub fn mps_to_kmh<T: Scalar>(v: T) -> T {
    v * T::lit(3.6)
}

/// Vehicles per kilometre of coverage.
pub fn density<T: Scalar>(n_vehicles: usize, coverage_m: T) -> T {
    T::lit(n_vehicles as f64) / (coverage_m / T::lit(1000.0))
}

/// `v = v_f (1 − ρ/ρ_max)`, clamped at zero past jam density.
pub fn speed_kmh<T: Scalar>(rho: T, free_flow_kmh: T, rho_max: T) -> T {
    (free_flow_kmh * (T::one() - rho / rho_max)).max(T::zero())
}

/// Remaining time inside coverage, `+∞` for a stopped vehicle.
pub fn dwell_time<T: Scalar>(coverage_m: T, position_m: T, speed_mps: T) -> Result<T> {
    if position_m > coverage_m {
        return Err(Error::invalid(format!(
            "position {position_m} beyond coverage {coverage_m}"
        )));
    }
    if speed_mps <= T::zero() {
        return Ok(T::infinity());
    }
    Ok((coverage_m - position_m) / speed_mps)
}

/// A vehicle can finish a round iff `T_stay > T_train + T_trans`.
pub fn is_stable_client<T: Scalar>(t_stay: T, t_train: T, t_trans: T) -> bool {
    t_stay > t_train + t_trans
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Advance<T> {
    pub position_m: T,
    pub handover: bool,
}

/// `L' = L + v·T`; past the coverage end the position wraps onto the successor.
pub fn advance_position<T: Scalar>(
    position_m: T,
    speed_mps: T,
    duration_s: T,
    coverage_m: T,
) -> Advance<T> {
    let mut next = position_m + speed_mps * duration_s;
    let mut handover = false;
    while next > coverage_m {
        next = next - coverage_m;
        handover = true;
    }
    Advance {
        position_m: next,
        handover,
    }
}

/// Local training time: samples × per-sample step cost × local iterations.
pub fn estimate_train_time(samples: usize, per_sample_s: f64, iterations: usize) -> f64 {
    samples as f64 * per_sample_s * iterations as f64
}

/// Upload time of a serialized model over the current link.
pub fn estimate_upload_time(model_bytes: usize, rate_bps: f64) -> f64 {
    if rate_bps <= 0.0 {
        return f64::INFINITY;
    }
    model_bytes as f64 * 8.0 / rate_bps
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficParams {
    pub free_flow_kmh: f64,
    pub rho_max: f64,
}

impl Default for TrafficParams {
    fn default() -> Self {
        Self {
            free_flow_kmh: 60.0,
            rho_max: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Handover {
    pub vehicle: u64,
    pub from: u32,
    pub to: u32,
}

/// Segments plus the vehicles currently on them. Single writer: the simulation loop.
#[derive(Debug, Clone, Default)]
pub struct Road {
    segments: BTreeMap<u32, RsuSegment>,
    vehicles: BTreeMap<u64, VehicleState>,
}

impl Road {
    pub fn new(segments: Vec<RsuSegment>) -> Result<Self> {
        let map: BTreeMap<u32, RsuSegment> = segments.into_iter().map(|s| (s.id, s)).collect();
        for s in map.values() {
            if !map.contains_key(&s.successor) {
                return Err(Error::invalid(format!(
                    "segment {} has unknown successor {}",
                    s.id, s.successor
                )));
            }
        }
        Ok(Self {
            segments: map,
            vehicles: BTreeMap::new(),
        })
    }

    pub fn segments(&self) -> impl Iterator<Item = &RsuSegment> {
        self.segments.values()
    }

    pub fn segment(&self, id: u32) -> Option<&RsuSegment> {
        self.segments.get(&id)
    }

    pub fn vehicles(&self) -> impl Iterator<Item = &VehicleState> {
        self.vehicles.values()
    }

    pub fn vehicle(&self, id: u64) -> Option<&VehicleState> {
        self.vehicles.get(&id)
    }

    pub fn vehicle_mut(&mut self, id: u64) -> Option<&mut VehicleState> {
        self.vehicles.get_mut(&id)
    }

    pub fn insert(&mut self, v: VehicleState) -> Result<()> {
        let seg = self
            .segments
            .get(&v.segment)
            .ok_or_else(|| Error::invalid(format!("vehicle {} on unknown segment", v.id)))?;
        if v.position_m < 0.0 || v.position_m > seg.length_m || v.speed_mps < 0.0 {
            return Err(Error::invalid(format!("vehicle {} state out of range", v.id)));
        }
        self.vehicles.insert(v.id, v);
        Ok(())
    }

    pub fn remove(&mut self, id: u64) -> Option<VehicleState> {
        self.vehicles.remove(&id)
    }

    pub fn count_on(&self, segment: u32) -> usize {
        self.vehicles.values().filter(|v| v.segment == segment).count()
    }

    pub fn density_on(&self, segment: u32) -> f64 {
        match self.segments.get(&segment) {
            Some(s) => density(self.count_on(segment), s.length_m),
            None => 0.0,
        }
    }

    /// Refreshes every vehicle's speed from its segment density.
    pub fn update_speeds(&mut self, traffic: &TrafficParams) {
        let speeds: BTreeMap<u32, f64> = self
            .segments
            .keys()
            .map(|&id| {
                let rho = self.density_on(id);
                (
                    id,
                    kmh_to_mps(speed_kmh(rho, traffic.free_flow_kmh, traffic.rho_max)),
                )
            })
            .collect();
        for v in self.vehicles.values_mut() {
            v.speed_mps = speeds[&v.segment];
        }
    }

    /// Moves every vehicle forward by `duration_s`; vehicles leaving coverage
    /// continue on the successor segment with their state untouched.
    pub fn advance(&mut self, duration_s: f64) -> Vec<Handover> {
        let mut out = Vec::new();
        for v in self.vehicles.values_mut() {
            let mut remaining = v.position_m + v.speed_mps * duration_s;
            loop {
                let len = self.segments[&v.segment].length_m;
                if remaining <= len {
                    break;
                }
                let step = advance_position(len, 0.0, 0.0, len);
                debug_assert!(!step.handover);
                remaining -= len;
                let from = v.segment;
                v.segment = self.segments[&from].successor;
                out.push(Handover {
                    vehicle: v.id,
                    from,
                    to: v.segment,
                });
            }
            v.position_m = remaining;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_cases() {
        assert_eq!(density(0, 1000.0), 0.0);
        assert_eq!(density(100, 1000.0), 100.0);
        assert_eq!(density(37, 1000.0), 37.0);
    }

    #[test]
    fn speed_cases() {
        assert_eq!(speed_kmh(0.0, 60.0, 100.0), 60.0);
        assert_eq!(speed_kmh(100.0, 60.0, 100.0), 0.0);
        assert!((speed_kmh(50.0f64, 60.0, 100.0) - 30.0).abs() < 1e-12);
        assert_eq!(speed_kmh(150.0, 60.0, 100.0), 0.0);
    }

    #[test]
    fn dwell_cases() {
        assert_eq!(dwell_time(1000.0, 1000.0, 5.0).unwrap(), 0.0);
        let v = kmh_to_mps(30.0f64);
        assert!((dwell_time(1000.0, 400.0, v).unwrap() - 72.0).abs() < 1e-9);
        assert!(dwell_time(1000.0f64, 400.0, 0.0).unwrap().is_infinite());
        assert!(dwell_time(1000.0, 1000.1, 5.0).is_err());
    }

    #[test]
    fn stability_cases() {
        assert!(is_stable_client(72.0, 30.0, 10.0));
        assert!(!is_stable_client(40.0, 30.0, 10.0));
        assert!(is_stable_client(f64::INFINITY, 1e9, 1e9));
    }

    #[test]
    fn advance_cases() {
        let a = advance_position(120.0, 0.0, 10.0, 1000.0);
        assert_eq!(a, Advance { position_m: 120.0, handover: false });
        let v = 30.0f64 / 3.6;
        let a = advance_position(990.0, v, 10.0, 1000.0);
        assert!(a.handover);
        assert!((a.position_m - 73.333_333_333).abs() < 1e-6);
        let a = advance_position(0.0, v, 60.0, 1000.0);
        assert!(!a.handover);
        assert!((a.position_m - 500.0).abs() < 1e-9);
    }

    #[test]
    fn road_handover_keeps_vehicle_state() {
        let segs = vec![
            RsuSegment::new(0, 1000.0, 1).unwrap(),
            RsuSegment::new(1, 1000.0, 0).unwrap(),
        ];
        let mut road = Road::new(segs).unwrap();
        road.insert(VehicleState {
            id: 7,
            segment: 0,
            position_m: 990.0,
            speed_mps: 30.0 / 3.6,
            samples: 12,
            t_train_s: 3.0,
            t_trans_s: 1.0,
        })
        .unwrap();
        let h = road.advance(10.0);
        assert_eq!(h, vec![Handover { vehicle: 7, from: 0, to: 1 }]);
        let v = road.vehicle(7).unwrap();
        assert_eq!(v.segment, 1);
        assert_eq!(v.samples, 12);
        assert!((v.position_m - 73.333_333).abs() < 1e-3);
    }

    #[test]
    fn road_rejects_bad_successor_and_state() {
        assert!(Road::new(vec![RsuSegment::new(0, 1000.0, 5).unwrap()]).is_err());
        assert!(RsuSegment::new(0, 0.0, 0).is_err());
        let mut road = Road::new(vec![RsuSegment::new(0, 1000.0, 0).unwrap()]).unwrap();
        let bad = VehicleState {
            id: 1,
            segment: 0,
            position_m: 1200.0,
            speed_mps: 1.0,
            samples: 0,
            t_train_s: 0.0,
            t_trans_s: 0.0,
        };
        assert!(road.insert(bad).is_err());
    }

    #[test]
    fn update_speeds_follows_density() {
        let mut road = Road::new(vec![RsuSegment::new(0, 1000.0, 0).unwrap()]).unwrap();
        for id in 0..50 {
            road.insert(VehicleState {
                id,
                segment: 0,
                position_m: id as f64,
                speed_mps: 0.0,
                samples: 0,
                t_train_s: 0.0,
                t_trans_s: 0.0,
            })
            .unwrap();
        }
        road.update_speeds(&TrafficParams::default());
        assert!((road.vehicle(3).unwrap().speed_mps - 30.0 / 3.6).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn speed_decreasing_in_density(a in 0.0f64..100.0, b in 0.0f64..100.0) {
                prop_assume!((a - b).abs() > 1e-9);
                let (sa, sb) = (speed_kmh(a, 60.0, 100.0), speed_kmh(b, 60.0, 100.0));
                prop_assert_eq!(sa > sb, a < b);
            }

            #[test]
            fn dwell_decreasing(l in 0.0f64..999.0, v1 in 0.1f64..40.0, v2 in 0.1f64..40.0) {
                prop_assume!((v1 - v2).abs() > 1e-6);
                let (d1, d2) = (dwell_time(1000.0, l, v1).unwrap(), dwell_time(1000.0, l, v2).unwrap());
                prop_assert_eq!(d1 > d2, v1 < v2);
                let d3 = dwell_time(1000.0, l + 0.5, v1).unwrap();
                prop_assert!(d3 < d1);
            }

            #[test]
            fn handover_conserves_distance(l in 0.0f64..1000.0, v in 0.0f64..30.0, t in 0.1f64..30.0) {
                let a = advance_position(l, v, t, 1000.0);
                let raw = l + v * t;
                if a.handover {
                    prop_assert!((a.position_m + 1000.0 - raw).abs() < 1e-9);
                } else {
                    prop_assert_eq!(a.position_m, raw);
                }
            }
        }
    }
}
