//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, sections are dotted key
//! prefixes (`market.lr = 0.003`). Unknown keys are rejected by name.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{pair_plants, SentimentPlant, SynchronismConfig, SyntheticSpec};
use crate::evaluation::PortfolioConfig;
use crate::exec::Exec;
use crate::forecaster::{Ablation, ForecasterHyper};
use crate::marketfactor::MarketHyper;
use crate::pipeline::PipelineConfig;
use crate::stockfactor::StockFactorHyper;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot use `{value}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic,
}

/// A split boundary given as a period index or a period label.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitPoint {
    Index(usize),
    /// First period whose label sorts at or after this one.
    Date(String),
    /// Share of the panel's periods.
    Fraction(f64),
}

impl SplitPoint {
    fn parse(value: &str) -> Self {
        match value.parse() {
            Ok(i) => Self::Index(i),
            Err(_) => Self::Date(value.to_string()),
        }
    }

    /// Period index on a panel with the given labels.
    pub fn resolve(&self, periods: &[String]) -> usize {
        match self {
            Self::Index(i) => *i,
            Self::Date(d) => periods.iter().position(|p| p.as_str() >= d.as_str()).unwrap_or(periods.len()),
            Self::Fraction(f) => (periods.len() as f64 * f).round() as usize,
        }
    }

    fn render(&self) -> String {
        match self {
            Self::Index(i) => i.to_string(),
            Self::Date(d) => d.clone(),
            Self::Fraction(f) => format!("{f}"),
        }
    }
}

/// Knobs of the synthetic market.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSettings {
    pub n_stocks: usize,
    pub n_periods: usize,
    pub n_features: usize,
    /// Cointegrated pairs `(0, 1), (2, 3), ...`.
    pub pairs: usize,
    pub rho: f64,
    pub noise_scale: f64,
    pub base_volatility: f64,
    pub volume_noise: f64,
    pub sentiment: SentimentPlant,
}

impl Default for SyntheticSettings {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        let first = &spec.plants[0];
        Self {
            n_stocks: spec.n_stocks,
            n_periods: spec.n_periods,
            n_features: spec.n_features,
            pairs: spec.plants.len(),
            rho: first.rho,
            noise_scale: first.noise_scale,
            base_volatility: spec.base_volatility,
            volume_noise: spec.volume_noise,
            sentiment: spec.sentiment,
        }
    }
}

impl SyntheticSettings {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_stocks: self.n_stocks,
            n_periods: self.n_periods,
            n_features: self.n_features,
            plants: pair_plants(self.pairs, self.rho, self.noise_scale),
            sentiment: self.sentiment.clone(),
            base_volatility: self.base_volatility,
            volume_noise: self.volume_noise,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub source: DataSource,
    pub synthetic: SyntheticSettings,
    pub train_end: SplitPoint,
    /// Defaults to `train_end`.
    pub test_start: Option<SplitPoint>,
    pub synchronism: SynchronismConfig,
    pub stock: StockFactorHyper,
    pub market: MarketHyper,
    pub forecaster: ForecasterHyper,
    pub portfolio: PortfolioConfig,
    pub ablation: Ablation,
    pub seed: u64,
    pub out: PathBuf,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SyntheticSettings::default(),
            train_end: SplitPoint::Fraction(0.7),
            test_start: None,
            synchronism: SynchronismConfig::default(),
            stock: StockFactorHyper::default(),
            market: MarketHyper::default(),
            forecaster: ForecasterHyper::default(),
            portfolio: PortfolioConfig::default(),
            ablation: Ablation::FULL,
            seed: 0,
            out: PathBuf::from("run"),
            exec: Exec::Parallel,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: Display,
{
    raw.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: raw.to_string(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    /// Defaults overridden by every line of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut source_keys = Vec::new();
        let mut synthetic_keys = false;
        let mut train_keys = 0;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: line.to_string(),
            })?;
            let (key, raw) = (key.trim(), raw.trim());
            match key {
                "data.csv" | "data.synthetic" => source_keys.push(key.to_string()),
                "split.train_end" | "split.train_fraction" => train_keys += 1,
                _ => {}
            }
            synthetic_keys |= key.starts_with("synthetic.");
            cfg.set(key, raw)?;
        }
        if source_keys.len() > 1 {
            return Err(ConfigError::Invalid(format!(
                "exactly one data source is allowed, got {}",
                source_keys.join(" and ")
            )));
        }
        if train_keys > 1 {
            return Err(ConfigError::Invalid(
                "give either split.train_end or split.train_fraction, not both".into(),
            ));
        }
        if synthetic_keys && matches!(cfg.source, DataSource::Csv(_)) {
            return Err(ConfigError::Invalid("synthetic.* keys given but the data source is a CSV file".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Applies one setting.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let syn = &mut self.synthetic;
        let (st, mk, fc, pf) = (&mut self.stock, &mut self.market, &mut self.forecaster, &mut self.portfolio);
        match key {
            "seed" => self.seed = value(key, raw)?,
            "out" => self.out = PathBuf::from(raw),
            "exec" => {
                self.exec = match raw {
                    "parallel" => Exec::Parallel,
                    "sequential" => Exec::Sequential,
                    _ => return Err(bad(key, raw, "expected `parallel` or `sequential`")),
                }
            }
            "ablation" => self.ablation = Ablation::parse(raw).ok_or_else(|| bad(key, raw, "expected NS, NM, NR, ND or full"))?,
            "data.csv" => self.source = DataSource::Csv(PathBuf::from(raw)),
            "data.synthetic" => {
                if !value::<bool>(key, raw)? {
                    return Err(bad(key, raw, "set data.csv instead of turning the generator off"));
                }
                self.source = DataSource::Synthetic;
            }
            "synthetic.n_stocks" => syn.n_stocks = value(key, raw)?,
            "synthetic.n_periods" => syn.n_periods = value(key, raw)?,
            "synthetic.n_features" => syn.n_features = value(key, raw)?,
            "synthetic.pairs" => syn.pairs = value(key, raw)?,
            "synthetic.rho" => syn.rho = value(key, raw)?,
            "synthetic.noise_scale" => syn.noise_scale = value(key, raw)?,
            "synthetic.base_volatility" => syn.base_volatility = value(key, raw)?,
            "synthetic.volume_noise" => syn.volume_noise = value(key, raw)?,
            "synthetic.event_prob" => syn.sentiment.event_prob = value(key, raw)?,
            "synthetic.event_magnitude" => syn.sentiment.event_magnitude = value(key, raw)?,
            "synthetic.precursor_strength" => syn.sentiment.precursor_strength = value(key, raw)?,
            "synthetic.sensitivity_spread" => syn.sentiment.sensitivity_spread = value(key, raw)?,
            "split.train_end" => self.train_end = SplitPoint::parse(raw),
            "split.train_fraction" => self.train_end = SplitPoint::Fraction(value(key, raw)?),
            "split.test_start" => self.test_start = Some(SplitPoint::parse(raw)),
            "synchronism.delta_threshold" => self.synchronism.delta_threshold = value(key, raw)?,
            "synchronism.hm_ratio" => self.synchronism.hm_ratio = value(key, raw)?,
            "stock.lambda1" => st.lambda1 = value(key, raw)?,
            "stock.lr" => st.lr = value(key, raw)?,
            "stock.steps" => st.steps = value(key, raw)?,
            "stock.scale_prices" => st.scale_prices = value(key, raw)?,
            "market.window" => mk.window = value(key, raw)?,
            "market.lambda2" => mk.lambda2 = value(key, raw)?,
            "market.lr" => mk.lr = value(key, raw)?,
            "market.epochs" => mk.epochs = value(key, raw)?,
            "market.batch" => mk.batch = value(key, raw)?,
            "market.hidden" => mk.hidden = Some(value(key, raw)?),
            "forecaster.window" => fc.window = value(key, raw)?,
            "forecaster.width" => fc.width = value(key, raw)?,
            "forecaster.blocks" => fc.blocks = value(key, raw)?,
            "forecaster.heads" => fc.heads = value(key, raw)?,
            "forecaster.head_hidden" => fc.head_hidden = value(key, raw)?,
            "forecaster.lambda3" => fc.lambda3 = value(key, raw)?,
            "forecaster.lr" => fc.lr = value(key, raw)?,
            "forecaster.max_epochs" => fc.max_epochs = value(key, raw)?,
            "forecaster.patience" => fc.patience = value(key, raw)?,
            "forecaster.val_fraction" => fc.val_fraction = value(key, raw)?,
            "forecaster.periods_per_step" => fc.periods_per_step = value(key, raw)?,
            "portfolio.n_fraction" => pf.n_fraction = value(key, raw)?,
            "portfolio.cost_rate" => pf.cost_rate = value(key, raw)?,
            "portfolio.trading_days" => pf.trading_days = value(key, raw)?,
            "portfolio.gross_wealth" => pf.gross_wealth = value(key, raw)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Checks that need no data.
    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [
            ("stock.lambda1", self.stock.lambda1),
            ("market.lambda2", self.market.lambda2),
            ("forecaster.lambda3", self.forecaster.lambda3),
        ] {
            if !(v >= 0.0) {
                return invalid(format!("{name} must be >= 0, got {v}"));
            }
        }
        if let SplitPoint::Fraction(f) = self.train_end {
            if !(f > 0.0 && f < 1.0) {
                return invalid(format!("split.train_fraction must lie in (0, 1), got {f}"));
            }
        }
        match (&self.train_end, &self.test_start) {
            (SplitPoint::Index(a), Some(SplitPoint::Index(b))) if b < a => {
                return invalid(format!("test split starts at period {b}, before the training split ends at {a}"));
            }
            (SplitPoint::Date(a), Some(SplitPoint::Date(b))) if b < a => {
                return invalid(format!("test split starts at {b}, before the training split ends at {a}"));
            }
            _ => {}
        }
        self.synchronism.validate().map_err(ConfigError::Invalid)?;
        self.forecaster.validate().map_err(ConfigError::Invalid)?;
        self.portfolio.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.market.window == 0 || self.market.epochs == 0 || self.market.batch == 0 {
            return invalid("market.window, market.epochs and market.batch must be positive".into());
        }
        if self.stock.steps == 0 {
            return invalid("stock.steps must be positive".into());
        }
        Ok(())
    }

    /// Every setting that affects results, one `key = value` per entry, in
    /// a fixed order. The output directory and execution mode are left out.
    pub fn canonical(&self) -> Vec<(&'static str, String)> {
        let mut v: Vec<(&'static str, String)> = Vec::new();
        let mut put = |k: &'static str, x: String| v.push((k, x));
        put("seed", self.seed.to_string());
        put("ablation", self.ablation.label());
        match &self.source {
            DataSource::Csv(p) => put("data.csv", p.display().to_string()),
            DataSource::Synthetic => {
                let s = &self.synthetic;
                put("data.synthetic", "true".into());
                put("synthetic.n_stocks", s.n_stocks.to_string());
                put("synthetic.n_periods", s.n_periods.to_string());
                put("synthetic.n_features", s.n_features.to_string());
                put("synthetic.pairs", s.pairs.to_string());
                put("synthetic.rho", s.rho.to_string());
                put("synthetic.noise_scale", s.noise_scale.to_string());
                put("synthetic.base_volatility", s.base_volatility.to_string());
                put("synthetic.volume_noise", s.volume_noise.to_string());
                put("synthetic.event_prob", s.sentiment.event_prob.to_string());
                put("synthetic.event_magnitude", s.sentiment.event_magnitude.to_string());
                put("synthetic.precursor_strength", s.sentiment.precursor_strength.to_string());
                put("synthetic.sensitivity_spread", s.sentiment.sensitivity_spread.to_string());
            }
        }
        match &self.train_end {
            SplitPoint::Fraction(f) => put("split.train_fraction", f.to_string()),
            p => put("split.train_end", p.render()),
        }
        if let Some(p) = &self.test_start {
            put("split.test_start", p.render());
        }
        put("synchronism.delta_threshold", self.synchronism.delta_threshold.to_string());
        put("synchronism.hm_ratio", self.synchronism.hm_ratio.to_string());
        let st = &self.stock;
        put("stock.lambda1", st.lambda1.to_string());
        put("stock.lr", st.lr.to_string());
        put("stock.steps", st.steps.to_string());
        put("stock.scale_prices", st.scale_prices.to_string());
        let mk = &self.market;
        put("market.window", mk.window.to_string());
        put("market.lambda2", mk.lambda2.to_string());
        put("market.lr", mk.lr.to_string());
        put("market.epochs", mk.epochs.to_string());
        put("market.batch", mk.batch.to_string());
        if let Some(h) = mk.hidden {
            put("market.hidden", h.to_string());
        }
        let fc = &self.forecaster;
        put("forecaster.window", fc.window.to_string());
        put("forecaster.width", fc.width.to_string());
        put("forecaster.blocks", fc.blocks.to_string());
        put("forecaster.heads", fc.heads.to_string());
        put("forecaster.head_hidden", fc.head_hidden.to_string());
        put("forecaster.lambda3", fc.lambda3.to_string());
        put("forecaster.lr", fc.lr.to_string());
        put("forecaster.max_epochs", fc.max_epochs.to_string());
        put("forecaster.patience", fc.patience.to_string());
        put("forecaster.val_fraction", fc.val_fraction.to_string());
        put("forecaster.periods_per_step", fc.periods_per_step.to_string());
        let pf = &self.portfolio;
        put("portfolio.n_fraction", pf.n_fraction.to_string());
        put("portfolio.cost_rate", pf.cost_rate.to_string());
        put("portfolio.trading_days", pf.trading_days.to_string());
        put("portfolio.gross_wealth", pf.gross_wealth.to_string());
        v
    }

    /// Hex SHA-256 of the canonical settings whose keys start with one of
    /// `prefixes`; all settings when `prefixes` is empty.
    pub fn hash_of(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.canonical() {
            if prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)) {
                h.update(format!("{k} = {v}\n"));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn config_hash(&self) -> String {
        self.hash_of(&[])[..16].to_string()
    }

    /// First line of every artifact.
    pub fn stamp(&self) -> String {
        format!("config_hash={} seed={}", self.config_hash(), self.seed)
    }

    /// Pipeline settings for a panel with the given period labels, all
    /// stages seeded from the root seed.
    pub fn pipeline_config(&self, periods: &[String]) -> Result<PipelineConfig> {
        let train_end = self.train_end.resolve(periods);
        let test_start = self.test_start.as_ref().map_or(train_end, |p| p.resolve(periods));
        if test_start < train_end {
            return Err(ConfigError::Invalid(format!(
                "test split starts at period {test_start}, before the training split ends at {train_end}"
            )));
        }
        let cfg = PipelineConfig {
            train_end,
            test_start,
            synchronism: self.synchronism,
            stock: self.stock.clone(),
            market: MarketHyper {
                seed: self.seed,
                ..self.market.clone()
            },
            forecaster: ForecasterHyper {
                seed: self.seed,
                ..self.forecaster.clone()
            },
            portfolio: self.portfolio.clone(),
            ablation: self.ablation,
        };
        cfg.check_split(periods.len()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

fn bad(key: &str, raw: &str, reason: &str) -> ConfigError {
    ConfigError::BadValue {
        key: key.to_string(),
        value: raw.to_string(),
        reason: reason.to_string(),
    }
}
