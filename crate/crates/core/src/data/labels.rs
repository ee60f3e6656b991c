use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynchronismConfig {
    /// Percent move beyond which a stock counts as a mover.
    pub delta_threshold: f64,
    /// Fraction of the universe that sets the market threshold `H_m`.
    pub hm_ratio: f64,
}

impl Default for SynchronismConfig {
    fn default() -> Self {
        Self {
            delta_threshold: 0.5,
            hm_ratio: 0.7,
        }
    }
}

impl SynchronismConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.delta_threshold > 0.0) {
            return Err(format!("delta_threshold must be > 0, got {}", self.delta_threshold));
        }
        if !(self.hm_ratio > 0.0 && self.hm_ratio < 1.0) {
            return Err(format!("hm_ratio must lie in (0, 1), got {}", self.hm_ratio));
        }
        Ok(())
    }
}

/// Market synchronism class for one period.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SynchronismLabel {
    Up,
    Down,
    Neutral,
}

impl SynchronismLabel {
    pub const ALL: [SynchronismLabel; 3] = [Self::Up, Self::Down, Self::Neutral];

    /// Position of the hot entry: UP = 0, DOWN = 1, NEUTRAL = 2.
    pub fn index(self) -> usize {
        match self {
            Self::Up => 0,
            Self::Down => 1,
            Self::Neutral => 2,
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Up => "UP",
            Self::Down => "DOWN",
            Self::Neutral => "NEUTRAL",
        }
    }
}

/// `+1` above the threshold, `-1` below its negative, else `0`. `NaN`
/// returns (period 0) map to `0`.
pub fn compute_deltas(returns: &Tensor, cfg: &SynchronismConfig) -> Vec<Vec<i8>> {
    let (n_stocks, n_periods) = (returns.shape()[0], returns.shape()[1]);
    (0..n_stocks)
        .map(|i| {
            (0..n_periods)
                .map(|t| {
                    let r = returns.at2(i, t);
                    if r > cfg.delta_threshold {
                        1
                    } else if r < -cfg.delta_threshold {
                        -1
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect()
}

/// `H_m = ceil(hm_ratio * I)`.
pub fn market_threshold(n_stocks: usize, cfg: &SynchronismConfig) -> i64 {
    (cfg.hm_ratio * n_stocks as f64).ceil() as i64
}

pub fn compute_synchronism_labels(
    deltas: &[Vec<i8>],
    cfg: &SynchronismConfig,
) -> Vec<SynchronismLabel> {
    let n_stocks = deltas.len();
    let n_periods = deltas.first().map_or(0, Vec::len);
    let hm = market_threshold(n_stocks, cfg);
    (0..n_periods)
        .map(|t| {
            let total: i64 = deltas.iter().map(|d| d[t] as i64).sum();
            if total > hm {
                SynchronismLabel::Up
            } else if total < -hm {
                SynchronismLabel::Down
            } else {
                SynchronismLabel::Neutral
            }
        })
        .collect()
}
