//! Market panels: aligned per-stock, per-period features, prices and returns.

mod io;
mod labels;
mod scale;
mod synthetic;

pub use io::{load_panel, write_panel, ColumnMap};
pub use labels::{
    compute_deltas, compute_synchronism_labels, market_threshold, SynchronismConfig,
    SynchronismLabel,
};
pub use scale::FeatureScaler;
pub use synthetic::{generate_synthetic, pair_plants, CointPlant, SentimentPlant, SyntheticSpec};

use crate::diffcore::Tensor;

/// Feature order produced by the CSV loader and the generator.
pub const FEATURE_NAMES: [&str; 6] = ["open", "close", "high", "low", "vwap", "volume"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("panel has no row for stock {stock} on {date}")]
    HoleInPanel { stock: String, date: String },
    #[error("non-positive price {value} for stock {stock} on {date}")]
    BadPrice {
        stock: String,
        date: String,
        value: f64,
    },
    #[error("duplicate row for stock {stock} on {date}")]
    DuplicateRow { stock: String, date: String },
    #[error("need at least 2 periods to compute returns, got {0}")]
    TooShort(usize),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: cannot parse `{field}` value `{value}`")]
    Parse {
        line: u64,
        field: String,
        value: String,
    },
    #[error("inconsistent panel: {0}")]
    Inconsistent(String),
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Full (stock × period) panel. Period 0 has no return and stores `NaN`.
#[derive(Clone, Debug)]
pub struct MarketPanel {
    stock_ids: Vec<String>,
    periods: Vec<String>,
    features: Tensor,
    prices: Tensor,
    returns: Tensor,
}

impl MarketPanel {
    /// `features` is `[I, T, D]`, `prices` is `[I, T]`.
    pub fn new(
        stock_ids: Vec<String>,
        periods: Vec<String>,
        features: Tensor,
        prices: Tensor,
    ) -> Result<Self, DataError> {
        let (i, t) = (stock_ids.len(), periods.len());
        if prices.shape() != [i, t] {
            return Err(DataError::Inconsistent(format!(
                "prices shape {:?} does not match {i} stocks x {t} periods",
                prices.shape()
            )));
        }
        let fs = features.shape();
        if fs.len() != 3 || fs[0] != i || fs[1] != t || fs[2] == 0 {
            return Err(DataError::Inconsistent(format!(
                "features shape {fs:?} does not match {i} stocks x {t} periods"
            )));
        }
        for s in 0..i {
            for p in 0..t {
                let v = prices.at2(s, p);
                if !(v > 0.0 && v.is_finite()) {
                    return Err(DataError::BadPrice {
                        stock: stock_ids[s].clone(),
                        date: periods[p].clone(),
                        value: v,
                    });
                }
            }
        }
        if !features.is_finite() {
            return Err(DataError::Inconsistent("non-finite feature value".into()));
        }
        let returns = compute_returns(&prices)?;
        Ok(Self {
            stock_ids,
            periods,
            features,
            prices,
            returns,
        })
    }

    pub fn n_stocks(&self) -> usize {
        self.stock_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.periods.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn stock_ids(&self) -> &[String] {
        &self.stock_ids
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn prices(&self) -> &Tensor {
        &self.prices
    }

    /// Percent returns `[I, T]`; column 0 is `NaN`.
    pub fn returns(&self) -> &Tensor {
        &self.returns
    }

    pub fn feature(&self, stock: usize, period: usize) -> &[f64] {
        let d = self.n_features();
        let base = (stock * self.n_periods() + period) * d;
        &self.features.data()[base..base + d]
    }

    pub fn price(&self, stock: usize, period: usize) -> f64 {
        self.prices.at2(stock, period)
    }

    pub fn ret(&self, stock: usize, period: usize) -> f64 {
        self.returns.at2(stock, period)
    }

    /// Cross-section of returns at `period`.
    pub fn returns_at(&self, period: usize) -> Vec<f64> {
        (0..self.n_stocks()).map(|i| self.ret(i, period)).collect()
    }

    /// Replaces one price and re-derives the affected returns.
    pub fn set_price(&mut self, stock: usize, period: usize, value: f64) -> Result<(), DataError> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(DataError::BadPrice {
                stock: self.stock_ids[stock].clone(),
                date: self.periods[period].clone(),
                value,
            });
        }
        self.prices.set2(stock, period, value);
        self.returns = compute_returns(&self.prices)?;
        Ok(())
    }

    pub fn set_feature(&mut self, stock: usize, period: usize, feature: usize, value: f64) {
        let d = self.n_features();
        let idx = (stock * self.n_periods() + period) * d + feature;
        self.features.data_mut()[idx] = value;
    }

    /// Keeps periods `start..end`.
    pub fn window(&self, start: usize, end: usize) -> Result<Self, DataError> {
        let (i, d) = (self.n_stocks(), self.n_features());
        let t = end - start;
        let mut feats = Vec::with_capacity(i * t * d);
        let mut prices = Vec::with_capacity(i * t);
        for s in 0..i {
            for p in start..end {
                feats.extend_from_slice(self.feature(s, p));
                prices.push(self.price(s, p));
            }
        }
        Self::new(
            self.stock_ids.clone(),
            self.periods[start..end].to_vec(),
            Tensor::new(vec![i, t, d], feats).map_err(|e| DataError::Inconsistent(e.to_string()))?,
            Tensor::new(vec![i, t], prices).map_err(|e| DataError::Inconsistent(e.to_string()))?,
        )
    }
}

// Returns are derived from prices and hold NaN in column 0.
impl PartialEq for MarketPanel {
    fn eq(&self, other: &Self) -> bool {
        self.stock_ids == other.stock_ids
            && self.periods == other.periods
            && self.features == other.features
            && self.prices == other.prices
    }
}

/// Percent simple returns; column 0 is `NaN`.
pub fn compute_returns(prices: &Tensor) -> Result<Tensor, DataError> {
    let shape = prices.shape();
    if shape.len() != 2 {
        return Err(DataError::Inconsistent(format!("prices must be [I, T], got {shape:?}")));
    }
    let (n_stocks, n_periods) = (shape[0], shape[1]);
    if n_periods < 2 {
        return Err(DataError::TooShort(n_periods));
    }
    let mut out = Tensor::zeros(&[n_stocks, n_periods]);
    for i in 0..n_stocks {
        out.set2(i, 0, f64::NAN);
        for t in 1..n_periods {
            let prev = prices.at2(i, t - 1);
            out.set2(i, t, (prices.at2(i, t) - prev) / prev * 100.0);
        }
    }
    Ok(out)
}
