//! Shannon-rate links and three-tier delivery delay (local RSU, neighbour RSU
//! via two hops, base station).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheState, ContentId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams<T> {
    pub bandwidth_hz: T,
    pub tx_power_dbm: T,
    pub distance_m: T,
    pub path_loss_exp: T,
    pub fading: T,
    pub noise_dbm: T,
}

impl<T: Scalar> LinkParams<T> {
    pub fn validate(&self) -> Result<()> {
        let z = T::zero();
        if !(self.bandwidth_hz > z && self.distance_m > z && self.path_loss_exp > z && self.fading > z)
        {
            return Err(Error::invalid(format!(
                "link needs W, d, β, h > 0: {:?}",
                (self.bandwidth_hz, self.distance_m, self.path_loss_exp, self.fading)
            )));
        }
        Ok(())
    }

    /// Received SNR (linear).
    pub fn snr(&self) -> T {
        let p = dbm_to_watts(self.tx_power_dbm);
        let n = dbm_to_watts(self.noise_dbm);
        p * self.distance_m.powf(-self.path_loss_exp) * self.fading * self.fading / n
    }
}

pub fn dbm_to_watts<T: Scalar>(dbm: T) -> T {
    T::lit(10.0).powf((dbm - T::lit(30.0)) / T::lit(10.0))
}

/// `W log2(1 + P d^{-β} h² / σ²)` in bit/s.
pub fn link_rate<T: Scalar>(lp: &LinkParams<T>) -> T {
    lp.bandwidth_hz * (T::one() + lp.snr()).log2()
}

/// Rayleigh-distributed fading amplitude with unit mean.
pub fn sample_rayleigh_fading(rng: &mut impl Rng) -> f64 {
    let scale = 1.0 / (std::f64::consts::PI / 2.0).sqrt();
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    scale * (-2.0 * u.ln()).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathClass {
    Local,
    NeighborRsu,
    BaseStation,
}

/// Where a request is served from, before any link is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchSource {
    Local,
    Neighbor(u32),
    BaseStation,
}

impl FetchSource {
    pub fn class(self) -> PathClass {
        match self {
            FetchSource::Local => PathClass::Local,
            FetchSource::Neighbor(_) => PathClass::NeighborRsu,
            FetchSource::BaseStation => PathClass::BaseStation,
        }
    }
}

/// A delivery route. The neighbour variant carries the serving-RSU hop
/// followed by the neighbour hop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FetchPath<T> {
    Local(LinkParams<T>),
    NeighborRsu {
        first: LinkParams<T>,
        second: LinkParams<T>,
    },
    BaseStation(LinkParams<T>),
}

impl<T: Scalar> FetchPath<T> {
    pub fn class(&self) -> PathClass {
        match self {
            FetchPath::Local(_) => PathClass::Local,
            FetchPath::NeighborRsu { .. } => PathClass::NeighborRsu,
            FetchPath::BaseStation(_) => PathClass::BaseStation,
        }
    }
}

fn hop_delay<T: Scalar>(size_bits: T, lp: &LinkParams<T>) -> Result<T> {
    let r = link_rate(lp);
    if !(r > T::zero()) {
        return Err(Error::Unreachable);
    }
    Ok(size_bits / r)
}

/// Seconds to deliver `size_bits` over `path`.
pub fn delivery_delay<T: Scalar>(size_bits: T, path: &FetchPath<T>) -> Result<T> {
    if size_bits < T::zero() {
        return Err(Error::invalid("content size must be non-negative"));
    }
    match path {
        FetchPath::Local(lp) | FetchPath::BaseStation(lp) => hop_delay(size_bits, lp),
        FetchPath::NeighborRsu { first, second } => {
            Ok(hop_delay(size_bits, first)? + hop_delay(size_bits, second)?)
        }
    }
}

/// Local cache first, then neighbours in ascending id order, then the base
/// station (which holds every content).
pub fn resolve_fetch_path(
    content: ContentId,
    local: &CacheState,
    neighbors: &[(u32, &CacheState)],
) -> FetchSource {
    if local.contains(content) {
        return FetchSource::Local;
    }
    neighbors
        .iter()
        .filter(|(_, c)| c.contains(content))
        .map(|(id, _)| *id)
        .min()
        .map(FetchSource::Neighbor)
        .unwrap_or(FetchSource::BaseStation)
}

/// Among every source holding `content`, the one with the smallest delivery
/// delay; ties keep the priority order.
pub fn resolve_fastest<T: Scalar>(
    content: ContentId,
    size_bits: T,
    local: &CacheState,
    neighbors: &[(u32, &CacheState)],
    path_of: impl Fn(FetchSource) -> FetchPath<T>,
) -> Result<(FetchSource, T)> {
    let mut options = Vec::new();
    if local.contains(content) {
        options.push(FetchSource::Local);
    }
    let mut ids: Vec<u32> = neighbors
        .iter()
        .filter(|(_, c)| c.contains(content))
        .map(|(id, _)| *id)
        .collect();
    ids.sort_unstable();
    options.extend(ids.into_iter().map(FetchSource::Neighbor));
    options.push(FetchSource::BaseStation);
    let mut best: Option<(FetchSource, T)> = None;
    for src in options {
        let d = delivery_delay(size_bits, &path_of(src))?;
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((src, d));
        }
    }
    Ok(best.expect("base station always present"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_link() -> LinkParams<f64> {
        LinkParams {
            bandwidth_hz: 540e3,
            tx_power_dbm: 30.0,
            distance_m: 100.0,
            path_loss_exp: 2.0,
            fading: 1.0,
            noise_dbm: -114.0,
        }
    }

    #[test]
    fn dbm_cases() {
        assert!((dbm_to_watts(30.0f64) - 1.0).abs() < 1e-15);
        assert!((dbm_to_watts(0.0f64) - 1e-3).abs() < 1e-18);
        assert!((dbm_to_watts(-114.0f64) / 3.981e-15 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rate_reference_value() {
        // 1 W · 100^-2 / 10^-14.4 W = 10^10.4, so r = 540e3 · log2(1 + 10^10.4).
        let oracle = 540e3 * (1.0 + 10f64.powf(10.4)).log2();
        let r = link_rate(&table_link());
        assert!((r - oracle).abs() / oracle < 1e-12);
        assert!((r - 1.866e7).abs() / 1.866e7 < 1e-3);
    }

    #[test]
    fn rate_limits() {
        let mut lp = table_link();
        lp.tx_power_dbm = -300.0;
        assert!(link_rate(&lp) < 1e-6);
        let base = link_rate(&table_link());
        let mut wide = table_link();
        wide.bandwidth_hz *= 2.0;
        assert!((link_rate(&wide) - 2.0 * base).abs() < 1e-6);
    }

    #[test]
    fn delay_cases() {
        let lp = table_link();
        let r = link_rate(&lp);
        let d = delivery_delay(r, &FetchPath::Local(lp)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        let d = delivery_delay(r, &FetchPath::NeighborRsu { first: lp, second: lp }).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        assert_eq!(delivery_delay(0.0, &FetchPath::BaseStation(lp)).unwrap(), 0.0);
        let mut dead = lp;
        dead.tx_power_dbm = -1e6;
        assert!(matches!(
            delivery_delay(1.0, &FetchPath::Local(dead)),
            Err(Error::Unreachable)
        ));
    }

    #[test]
    fn resolve_priority() {
        let mut local = CacheState::new(100);
        let mut n1 = CacheState::new(100);
        let mut n3 = CacheState::new(100);
        local.insert(5, 1, 0).unwrap();
        n1.insert(5, 1, 0).unwrap();
        n1.insert(7, 1, 0).unwrap();
        n3.insert(7, 1, 0).unwrap();
        let nb = [(3, &n3), (1, &n1)];
        assert_eq!(resolve_fetch_path(5, &local, &nb), FetchSource::Local);
        assert_eq!(resolve_fetch_path(7, &local, &nb), FetchSource::Neighbor(1));
        assert_eq!(resolve_fetch_path(9, &local, &nb), FetchSource::BaseStation);
    }

    #[test]
    fn fastest_prefers_lowest_delay() {
        let local = CacheState::new(100);
        let mut n = CacheState::new(100);
        n.insert(1, 1, 0).unwrap();
        let near = table_link();
        let mut far = table_link();
        far.distance_m = 1e6;
        let path_of = |s: FetchSource| match s {
            FetchSource::Local => FetchPath::Local(near),
            FetchSource::Neighbor(_) => FetchPath::NeighborRsu { first: near, second: near },
            FetchSource::BaseStation => FetchPath::BaseStation(far),
        };
        let (src, _) = resolve_fastest(1, 8e6, &local, &[(2, &n)], path_of).unwrap();
        assert_eq!(src, FetchSource::Neighbor(2));
    }

    #[test]
    fn rayleigh_mean_is_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let m: f64 = (0..n).map(|_| sample_rayleigh_fading(&mut rng)).sum::<f64>() / n as f64;
        assert!((m - 1.0).abs() < 0.01);
    }

    proptest! {
        #[test]
        fn rate_monotone(p1 in -10.0f64..50.0, p2 in -10.0f64..50.0,
                         d1 in 1.0f64..2000.0, d2 in 1.0f64..2000.0,
                         h1 in 0.1f64..3.0, h2 in 0.1f64..3.0,
                         n1 in -130.0f64..-90.0, n2 in -130.0f64..-90.0) {
            let base = table_link();
            let rate = |f: &dyn Fn(&mut LinkParams<f64>)| { let mut l = base; f(&mut l); link_rate(&l) };
            if (p1 - p2).abs() > 1e-3 {
                prop_assert_eq!(rate(&|l| l.tx_power_dbm = p1) > rate(&|l| l.tx_power_dbm = p2), p1 > p2);
            }
            if (d1 - d2).abs() > 1e-3 {
                prop_assert_eq!(rate(&|l| l.distance_m = d1) < rate(&|l| l.distance_m = d2), d1 > d2);
            }
            if (h1 - h2).abs() > 1e-3 {
                prop_assert_eq!(rate(&|l| l.fading = h1) > rate(&|l| l.fading = h2), h1 > h2);
            }
            if (n1 - n2).abs() > 1e-3 {
                prop_assert_eq!(rate(&|l| l.noise_dbm = n1) < rate(&|l| l.noise_dbm = n2), n1 > n2);
            }
        }

        #[test]
        fn delay_linear_in_size(s in 1.0f64..1e9, k in 0.1f64..10.0) {
            let p = FetchPath::Local(table_link());
            let a = delivery_delay(s, &p).unwrap();
            let b = delivery_delay(s * k, &p).unwrap();
            prop_assert!((b - k * a).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}
