//! End-to-end training and evaluation on one panel.
//!
//! Stage 1 fits the cointegration model on the training periods and freezes
//! the stock factor `u`. Stage 2 fits the market encoder and freezes `m`.
//! Stage 3 trains the forecaster on the training periods and predicts every
//! later period. Stage 4 backtests those predictions.

use serde::{Deserialize, Serialize};

use crate::data::{
    compute_deltas, compute_synchronism_labels, DataError, FeatureScaler, MarketPanel, SynchronismConfig,
    SynchronismLabel,
};
use crate::diffcore::Tensor;
use crate::evaluation::{self, BacktestReport, EvalError, PortfolioConfig};
use crate::exec::Exec;
use crate::forecaster::{
    self, Ablation, FactorScaler, ForecastError, ForecastInputs, ForecasterFit, ForecasterHyper, ForecasterParams,
};
use crate::marketfactor::{self, MarketEncoderParams, MarketError, MarketFit, MarketHyper, MarketSeries};
use crate::stockfactor::{self, CointegrationParams, StockFactorError, StockFactorHyper, StockFactorSeries};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("stock factor stage: {0}")]
    Stock(#[from] StockFactorError),
    #[error("market factor stage: {0}")]
    Market(#[from] MarketError),
    #[error("forecaster stage: {0}")]
    Forecast(#[from] ForecastError),
    #[error("evaluation stage: {0}")]
    Eval(#[from] EvalError),
    #[error("invalid split: {0}")]
    Split(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Periods before this one are used for training.
    pub train_end: usize,
    /// First forecast period; at least `train_end`.
    pub test_start: usize,
    pub synchronism: SynchronismConfig,
    pub stock: StockFactorHyper,
    pub market: MarketHyper,
    pub forecaster: ForecasterHyper,
    pub portfolio: PortfolioConfig,
    pub ablation: Ablation,
}

impl PipelineConfig {
    /// Defaults with every stage seeded from `seed` and the first
    /// `train_fraction` of `n_periods` used for training.
    pub fn with_seed(seed: u64, n_periods: usize, train_fraction: f64) -> Self {
        let train_end = (n_periods as f64 * train_fraction).round() as usize;
        Self {
            train_end,
            test_start: train_end,
            synchronism: SynchronismConfig::default(),
            stock: StockFactorHyper::default(),
            market: MarketHyper {
                seed,
                ..MarketHyper::default()
            },
            forecaster: ForecasterHyper {
                seed,
                ..ForecasterHyper::default()
            },
            portfolio: PortfolioConfig::default(),
            ablation: Ablation::FULL,
        }
    }

    /// Periods `t` that get a forecast: `test_start..T`.
    pub fn check_split(&self, n_periods: usize) -> Result<()> {
        let need = self.market.window.max(self.forecaster.window);
        if self.train_end <= need + 2 {
            return Err(PipelineError::Split(format!(
                "training split ends at period {} but the input windows alone need {need}",
                self.train_end
            )));
        }
        if self.test_start < self.train_end {
            return Err(PipelineError::Split(format!(
                "test split starts at period {} before the training split ends at {}",
                self.test_start, self.train_end
            )));
        }
        if self.test_start >= n_periods {
            return Err(PipelineError::Split(format!(
                "test split starts at period {} but the panel has only {n_periods} periods",
                self.test_start
            )));
        }
        Ok(())
    }
}

/// Every frozen piece needed to forecast from a raw panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub feature_scaler: FeatureScaler,
    pub factor_scaler: FactorScaler,
    pub coint: CointegrationParams,
    pub market: MarketEncoderParams,
    pub market_window: usize,
    pub forecaster: ForecasterParams,
    pub forecaster_window: usize,
    pub ablation: Ablation,
}

impl FittedModel {
    /// Forecasts `[I, P]` for `periods` of `panel`. Each forecast for `t`
    /// reads only periods before `t`.
    pub fn predict(&self, panel: &MarketPanel, periods: &[usize], exec: Exec) -> Result<Tensor> {
        let feats = self.feature_scaler.transform(panel);
        let u = stockfactor::residual(panel, &self.coint)?.u;
        let u = self.factor_scaler.transform(&u);
        let series = marketfactor::encode_market(&feats, &self.market, self.market_window, exec)?;
        let inputs = build_inputs(panel, &feats, &u, &self.market, &series, self.market_window, self.forecaster_window, self.ablation, exec)?;
        Ok(forecaster::predict(&self.forecaster, &inputs, periods, self.ablation, exec)?)
    }
}

#[allow(clippy::too_many_arguments)]
fn build_inputs(
    panel: &MarketPanel,
    feats: &Tensor,
    u_scaled: &Tensor,
    market: &MarketEncoderParams,
    series: &MarketSeries,
    market_window: usize,
    window: usize,
    ablation: Ablation,
    exec: Exec,
) -> Result<ForecastInputs> {
    Ok(ForecastInputs::new(
        feats,
        (!ablation.no_stock_factor).then_some(u_scaled),
        panel.returns(),
        market,
        (!ablation.no_market_factor).then_some(series),
        market_window,
        window,
        exec,
    )?)
}

/// Optional pre-fitted parameters that replace training of a stage.
#[derive(Clone, Debug, Default)]
pub struct Checkpoints {
    pub coint: Option<CointegrationParams>,
    pub market: Option<MarketEncoderParams>,
    pub forecaster: Option<ForecasterParams>,
}

/// Outputs of stages 1 and 2, shared by every forecaster variant.
#[derive(Clone, Debug)]
pub struct Factors {
    pub coint: CointegrationParams,
    /// Factor series over the whole panel.
    pub stock: StockFactorSeries,
    pub stock_losses: Vec<f64>,
    pub labels: Vec<SynchronismLabel>,
    pub feature_scaler: FeatureScaler,
    pub features: Tensor,
    pub market: MarketEncoderParams,
    pub series: MarketSeries,
    pub market_fit: Option<MarketFit>,
    pub factor_scaler: FactorScaler,
    pub u_scaled: Tensor,
}

/// Stages 1 and 2.
pub fn fit_factors(panel: &MarketPanel, cfg: &PipelineConfig, ckpt: &Checkpoints, exec: Exec) -> Result<Factors> {
    cfg.check_split(panel.n_periods())?;
    let train = panel.window(0, cfg.train_end)?;
    let (coint, stock_losses) = match &ckpt.coint {
        Some(p) => (p.clone(), Vec::new()),
        None => {
            let fit = stockfactor::train_stock_factors(&train, &cfg.stock)?;
            (fit.params, fit.losses)
        }
    };
    let stock = stockfactor::residual(panel, &coint)?;

    let labels = compute_synchronism_labels(&compute_deltas(panel.returns(), &cfg.synchronism), &cfg.synchronism);
    let feature_scaler = FeatureScaler::fit(panel, cfg.train_end);
    let features = feature_scaler.transform(panel);
    let (market, series, market_fit) = match &ckpt.market {
        Some(p) => {
            let series = marketfactor::encode_market(&features, p, cfg.market.window, exec)?;
            (p.clone(), series, None)
        }
        None => {
            let fit = marketfactor::train_market_factors(&features, &labels, cfg.train_end, &cfg.market, exec)?;
            (fit.params.clone(), fit.series.clone(), Some(fit))
        }
    };
    let factor_scaler = FactorScaler::fit(&stock.u, cfg.train_end);
    let u_scaled = factor_scaler.transform(&stock.u);
    Ok(Factors {
        coint,
        stock,
        stock_losses,
        labels,
        feature_scaler,
        features,
        market,
        series,
        market_fit,
        factor_scaler,
        u_scaled,
    })
}

#[derive(Clone, Debug)]
pub struct Forecast {
    pub model: FittedModel,
    pub fit: Option<ForecasterFit>,
    pub test_periods: Vec<usize>,
    /// `[I, P]` over `test_periods`.
    pub predictions: Tensor,
    pub report: BacktestReport,
}

/// Stages 3 and 4 for the ablation in `cfg`.
pub fn forecast(
    panel: &MarketPanel,
    factors: &Factors,
    cfg: &PipelineConfig,
    ckpt: &Checkpoints,
    exec: Exec,
) -> Result<Forecast> {
    let ablation = cfg.ablation;
    let inputs = build_inputs(
        panel,
        &factors.features,
        &factors.u_scaled,
        &factors.market,
        &factors.series,
        cfg.market.window,
        cfg.forecaster.window,
        ablation,
        exec,
    )?;
    let (params, fit) = match &ckpt.forecaster {
        Some(p) => (p.clone(), None),
        None => {
            let fit = forecaster::train_forecaster(&inputs, cfg.train_end, &cfg.forecaster, ablation, exec)?;
            (fit.params.clone(), Some(fit))
        }
    };
    let test_periods: Vec<usize> = (cfg.test_start.max(inputs.first_period())..panel.n_periods()).collect();
    assert!(
        test_periods.iter().all(|&t| t >= cfg.train_end),
        "test periods must come after every training period"
    );
    let predictions = forecaster::predict(&params, &inputs, &test_periods, ablation, exec)?;
    let report = backtest_predictions(panel, &test_periods, &predictions, &cfg.portfolio)?;
    let model = FittedModel {
        feature_scaler: factors.feature_scaler.clone(),
        factor_scaler: factors.factor_scaler.clone(),
        coint: factors.coint.clone(),
        market: factors.market.clone(),
        market_window: cfg.market.window,
        forecaster: params,
        forecaster_window: cfg.forecaster.window,
        ablation,
    };
    Ok(Forecast {
        model,
        fit,
        test_periods,
        predictions,
        report,
    })
}

/// Backtest of `[I, P]` predictions against the panel's returns.
pub fn backtest_predictions(
    panel: &MarketPanel,
    periods: &[usize],
    predictions: &Tensor,
    cfg: &PortfolioConfig,
) -> Result<BacktestReport> {
    let n = panel.n_stocks();
    let dates: Vec<String> = periods.iter().map(|&t| panel.periods()[t].clone()).collect();
    let y_hat: Vec<Vec<f64>> = (0..periods.len())
        .map(|k| (0..n).map(|i| predictions.at2(i, k)).collect())
        .collect();
    let y_true: Vec<Vec<f64>> = periods.iter().map(|&t| panel.returns_at(t)).collect();
    Ok(evaluation::backtest(&dates, &y_hat, &y_true, cfg)?)
}

/// All four stages with fresh training.
pub fn run(panel: &MarketPanel, cfg: &PipelineConfig, exec: Exec) -> Result<(Factors, Forecast)> {
    let none = Checkpoints::default();
    let factors = fit_factors(panel, cfg, &none, exec)?;
    let out = forecast(panel, &factors, cfg, &none, exec)?;
    Ok((factors, out))
}
