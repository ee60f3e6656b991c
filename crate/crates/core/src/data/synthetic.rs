//! Synthetic markets with planted structure.
//!
//! Two kinds of structure can be planted:
//! * cointegration: `p_target = Σ β_j p_source_j + u` with `u` an AR(1)
//!   process, so the residual mean-reverts while prices wander;
//! * market sentiment: on event periods every stock moves in the same
//!   direction by `magnitude · sensitivity_i`, and the period before an event
//!   carries a directional precursor in log-volume.
//!
//! Free stocks follow geometric random walks. Each stock's base log-volume
//! level encodes its event sensitivity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, MarketPanel};
use crate::diffcore::Tensor;
use crate::rng::{normal, stage_rng, stream, uniform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CointPlant {
    pub target: usize,
    pub sources: Vec<usize>,
    pub weights: Vec<f64>,
    /// AR(1) coefficient of the residual.
    pub rho: f64,
    /// Innovation scale of the residual, in price units.
    pub noise_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentimentPlant {
    pub event_prob: f64,
    /// Mean percent move of a unit-sensitivity stock on an event period.
    pub event_magnitude: f64,
    /// Log-volume shift one period before an event, signed by its direction.
    pub precursor_strength: f64,
    /// Sensitivities are drawn from `1 ± sensitivity_spread`.
    pub sensitivity_spread: f64,
}

impl Default for SentimentPlant {
    fn default() -> Self {
        Self {
            event_prob: 0.75,
            event_magnitude: 3.0,
            precursor_strength: 0.5,
            sensitivity_spread: 0.5,
        }
    }
}

impl SentimentPlant {
    pub fn off() -> Self {
        Self {
            event_prob: 0.0,
            event_magnitude: 0.0,
            precursor_strength: 0.0,
            sensitivity_spread: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_stocks: usize,
    pub n_periods: usize,
    /// Leading columns kept from open, close, high, low, vwap, volume.
    pub n_features: usize,
    pub plants: Vec<CointPlant>,
    pub sentiment: SentimentPlant,
    /// Daily percent volatility of free stocks.
    pub base_volatility: f64,
    /// Per-stock log-volume noise.
    pub volume_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// 20 stocks in 10 pairs.
    fn default() -> Self {
        let plants = pair_plants(10, 0.6, 1.0);
        Self {
            n_stocks: 20,
            n_periods: 400,
            n_features: 6,
            plants,
            sentiment: SentimentPlant::default(),
            base_volatility: 1.0,
            volume_noise: 0.3,
            seed: 7,
        }
    }
}

/// `pairs` plants where stock `2k` tracks `β_k · stock 2k+1`, with
/// `β_k = 0.6 + 0.03 k`.
pub fn pair_plants(pairs: usize, rho: f64, noise_scale: f64) -> Vec<CointPlant> {
    (0..pairs)
        .map(|k| CointPlant {
            target: 2 * k,
            sources: vec![2 * k + 1],
            weights: vec![0.6 + 0.03 * k as f64],
            rho,
            noise_scale,
        })
        .collect()
}

impl SyntheticSpec {
    /// One plant `stock 0 ← weight · stock 1`, no sentiment events.
    pub fn single_pair(n_stocks: usize, n_periods: usize, weight: f64, rho: f64, seed: u64) -> Self {
        Self {
            n_stocks,
            n_periods,
            plants: vec![CointPlant {
                target: 0,
                sources: vec![1],
                weights: vec![weight],
                rho,
                noise_scale: 1.0,
            }],
            sentiment: SentimentPlant::off(),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::BadSpec(m));
        if self.n_stocks < 2 {
            return bad(format!("need at least 2 stocks, got {}", self.n_stocks));
        }
        if self.n_periods < 2 {
            return bad(format!("need at least 2 periods, got {}", self.n_periods));
        }
        if !(1..=6).contains(&self.n_features) {
            return bad(format!("n_features must be in 1..=6, got {}", self.n_features));
        }
        if !(self.base_volatility >= 0.0) || !(self.volume_noise >= 0.0) {
            return bad("volatilities must be non-negative".into());
        }
        let s = &self.sentiment;
        if !(0.0..=1.0).contains(&s.event_prob) {
            return bad(format!("event_prob must be in [0, 1], got {}", s.event_prob));
        }
        if !(0.0..1.0).contains(&s.sensitivity_spread) {
            return bad(format!("sensitivity_spread must be in [0, 1), got {}", s.sensitivity_spread));
        }
        let targets: Vec<usize> = self.plants.iter().map(|p| p.target).collect();
        for (k, p) in self.plants.iter().enumerate() {
            if !(p.rho.abs() < 1.0) {
                return bad(format!("plant {k}: |rho| must be < 1, got {}", p.rho));
            }
            if p.target >= self.n_stocks || p.sources.iter().any(|&s| s >= self.n_stocks) {
                return bad(format!("plant {k}: stock index out of range"));
            }
            if p.sources.is_empty() || p.sources.len() != p.weights.len() {
                return bad(format!("plant {k}: sources and weights must be non-empty and aligned"));
            }
            if p.sources.iter().any(|s| targets.contains(s)) {
                return bad(format!("plant {k}: a source is itself a planted target"));
            }
            if targets.iter().filter(|&&t| t == p.target).count() > 1 {
                return bad(format!("plant {k}: stock {} is planted twice", p.target));
            }
            if !(p.noise_scale >= 0.0) {
                return bad(format!("plant {k}: noise_scale must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Builds a panel from `spec`; identical specs give bit-identical panels.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MarketPanel, DataError> {
    spec.validate()?;
    let mut rng = stage_rng(spec.seed, stream::SYNTH);
    let (n, t_len) = (spec.n_stocks, spec.n_periods);
    let sent = &spec.sentiment;

    let mut sensitivity: Vec<f64> = (0..n)
        .map(|_| 1.0 + sent.sensitivity_spread * uniform(&mut rng, -1.0, 1.0))
        .collect();
    for p in &spec.plants {
        let wsum: f64 = p.weights.iter().map(|w| w.abs()).sum();
        sensitivity[p.target] = p
            .sources
            .iter()
            .zip(&p.weights)
            .map(|(&s, w)| sensitivity[s] * w.abs() / wsum)
            .sum();
    }

    // Direction of the sentiment event at each period (0 = none).
    let events: Vec<f64> = (0..t_len)
        .map(|t| {
            let hit = rng.random::<f64>() < sent.event_prob;
            let up = rng.random::<bool>();
            match (t > 0 && hit, up) {
                (false, _) => 0.0,
                (true, true) => 1.0,
                (true, false) => -1.0,
            }
        })
        .collect();

    let is_target: Vec<bool> = (0..n)
        .map(|i| spec.plants.iter().any(|p| p.target == i))
        .collect();
    let mut prices = vec![vec![0.0; t_len]; n];
    for i in 0..n {
        let p0 = uniform(&mut rng, 20.0, 200.0);
        let shocks: Vec<f64> = (0..t_len).map(|_| normal(&mut rng)).collect();
        if is_target[i] {
            continue;
        }
        prices[i][0] = p0;
        for t in 1..t_len {
            let r = spec.base_volatility * shocks[t] + events[t] * sent.event_magnitude * sensitivity[i];
            prices[i][t] = prices[i][t - 1] * (1.0 + r / 100.0);
        }
    }
    for (k, p) in spec.plants.iter().enumerate() {
        let mut u = p.noise_scale * normal(&mut rng) / (1.0 - p.rho * p.rho).sqrt();
        for t in 0..t_len {
            if t > 0 {
                u = p.rho * u + p.noise_scale * normal(&mut rng);
            }
            let base: f64 = p.sources.iter().zip(&p.weights).map(|(&s, w)| w * prices[s][t]).sum();
            prices[p.target][t] = base + u;
        }
        if prices[p.target].iter().any(|&v| !(v > 0.0)) {
            return Err(DataError::BadSpec(format!(
                "plant {k} drives stock {} to a non-positive price; lower noise_scale",
                p.target
            )));
        }
    }
    for (i, row) in prices.iter().enumerate() {
        if row.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(DataError::BadSpec(format!(
                "stock {i} reaches a non-positive price; lower volatility or event magnitude"
            )));
        }
    }

    let d = spec.n_features;
    let mut features = Vec::with_capacity(n * t_len * d);
    for i in 0..n {
        let level = sensitivity[i] - 1.0;
        for t in 0..t_len {
            let close = prices[i][t];
            let prev = if t > 0 { prices[i][t - 1] } else { close };
            let open = prev * (1.0 + 0.002 * normal(&mut rng));
            let high = open.max(close) * (1.0 + 0.003 * normal(&mut rng).abs());
            let low = open.min(close) * (1.0 - 0.003 * normal(&mut rng).abs());
            let vwap = (open + high + low + close) / 4.0 * (1.0 + 0.001 * normal(&mut rng));
            let next_event = if t + 1 < t_len { events[t + 1] } else { 0.0 };
            let log_vol = level
                + spec.volume_noise * normal(&mut rng)
                + sent.precursor_strength * next_event;
            let volume = 1.0e6 * log_vol.exp();
            let row = [open, close, high, low, vwap, volume];
            features.extend_from_slice(&row[..d]);
        }
    }

    let stock_ids = (0..n).map(|i| format!("S{i:03}")).collect();
    let periods = (0..t_len).map(|t| format!("{t:05}")).collect();
    let to_err = |e: crate::diffcore::DiffError| DataError::BadSpec(e.to_string());
    MarketPanel::new(
        stock_ids,
        periods,
        Tensor::new(vec![n, t_len, d], features).map_err(to_err)?,
        Tensor::new(vec![n, t_len], prices.concat()).map_err(to_err)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{compute_deltas, compute_synchronism_labels, SynchronismConfig, SynchronismLabel};

    fn ols_ar1(x: &[f64]) -> f64 {
        let num: f64 = x.windows(2).map(|w| w[0] * w[1]).sum();
        let den: f64 = x[..x.len() - 1].iter().map(|v| v * v).sum();
        num / den
    }

    #[test]
    fn planted_residual_is_mean_reverting() {
        let spec = SyntheticSpec::single_pair(8, 500, 0.7, 0.6, 3);
        let p = generate_synthetic(&spec).unwrap();
        let resid: Vec<f64> = (0..500).map(|t| p.price(0, t) - 0.7 * p.price(1, t)).collect();
        assert!(ols_ar1(&resid).abs() < 0.9);
    }

    #[test]
    fn no_events_means_no_synchronous_labels() {
        let spec = SyntheticSpec {
            n_periods: 500,
            sentiment: SentimentPlant::off(),
            ..SyntheticSpec::default()
        };
        let p = generate_synthetic(&spec).unwrap();
        let cfg = SynchronismConfig::default();
        let labels = compute_synchronism_labels(&compute_deltas(p.returns(), &cfg), &cfg);
        assert!(labels.iter().all(|&l| l == SynchronismLabel::Neutral));
    }

    #[test]
    fn events_make_labels_balanced_enough() {
        let p = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let cfg = SynchronismConfig::default();
        let labels = compute_synchronism_labels(&compute_deltas(p.returns(), &cfg), &cfg);
        let neutral = labels.iter().filter(|&&l| l == SynchronismLabel::Neutral).count();
        assert!((neutral as f64) / (labels.len() as f64) <= 0.5);
    }

    #[test]
    fn same_seed_same_panel() {
        let a = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let b = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(a.prices().data(), b.prices().data());
        assert_eq!(a.features().data(), b.features().data());
        let mut other = SyntheticSpec::default();
        other.seed += 1;
        let c = generate_synthetic(&other).unwrap();
        assert_ne!(a.prices().data(), c.prices().data());
    }

    #[test]
    fn unstable_plant_rejected() {
        let mut spec = SyntheticSpec::single_pair(4, 50, 0.7, 1.0, 1);
        assert!(matches!(generate_synthetic(&spec), Err(DataError::BadSpec(_))));
        spec.plants[0].rho = -1.2;
        assert!(matches!(generate_synthetic(&spec), Err(DataError::BadSpec(_))));
        let mut spec = SyntheticSpec::default();
        spec.sentiment.event_prob = 1.5;
        assert!(matches!(generate_synthetic(&spec), Err(DataError::BadSpec(_))));
    }

    #[test]
    fn residual_window_means_vary_less_than_price() {
        for seed in [1, 2, 3] {
            let spec = SyntheticSpec::single_pair(6, 600, 0.7, 0.6, seed);
            let p = generate_synthetic(&spec).unwrap();
            let resid: Vec<f64> = (0..600).map(|t| p.price(0, t) - 0.7 * p.price(1, t)).collect();
            let raw: Vec<f64> = (0..600).map(|t| p.price(0, t)).collect();
            let spread = |x: &[f64]| {
                let means: Vec<f64> = x.chunks(100).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
                let m = means.iter().sum::<f64>() / means.len() as f64;
                means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / means.len() as f64
            };
            assert!(spread(&resid) < spread(&raw), "seed {seed}");
        }
    }
}
