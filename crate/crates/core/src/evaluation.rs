//! Long-short backtest with turnover costs, and forecast/investment metrics.
//!
//! Strategy arithmetic runs on fractional returns. Percent returns from the
//! panel are divided by 100 on the way in.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{n_stocks} stocks cannot hold {n} long and {n} short positions")]
    UniverseTooSmall { n_stocks: usize, n: usize },
    #[error("bad portfolio config: {0}")]
    BadConfig(String),
    #[error("mismatched inputs: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioConfig {
    /// Book size as a share of the universe.
    pub n_fraction: f64,
    /// Cost per transacted stock, as a fraction.
    pub cost_rate: f64,
    pub trading_days: usize,
    /// Compound gross instead of net returns into wealth.
    pub gross_wealth: bool,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        Self {
            n_fraction: 0.10,
            cost_rate: 0.001,
            trading_days: 252,
            gross_wealth: false,
        }
    }
}

impl PortfolioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.n_fraction > 0.0 && self.n_fraction <= 0.5) {
            return Err(EvalError::BadConfig(format!("n_fraction must be in (0, 0.5], got {}", self.n_fraction)));
        }
        if !(self.cost_rate >= 0.0) {
            return Err(EvalError::BadConfig(format!("cost_rate must be >= 0, got {}", self.cost_rate)));
        }
        if self.trading_days == 0 {
            return Err(EvalError::BadConfig("trading_days must be positive".into()));
        }
        Ok(())
    }

    /// `N = max(1, floor(n_fraction · I))`.
    pub fn book_size(&self, n_stocks: usize) -> usize {
        ((self.n_fraction * n_stocks as f64).floor() as usize).max(1)
    }
}

/// Long and short books for one period, as stock indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Membership {
    pub long: Vec<usize>,
    pub short: Vec<usize>,
}

/// Top-`n` and bottom-`n` stocks by forecast; ties keep index order, so the
/// lower index ranks higher.
pub fn select_books(y_hat: &[f64], n: usize) -> Result<Membership> {
    if y_hat.len() < 2 * n {
        return Err(EvalError::UniverseTooSmall {
            n_stocks: y_hat.len(),
            n,
        });
    }
    let mut order: Vec<usize> = (0..y_hat.len()).collect();
    // Adding 0.0 folds -0.0 into 0.0 so signed zeros tie.
    order.sort_by(|&a, &b| (y_hat[b] + 0.0).total_cmp(&(y_hat[a] + 0.0)));
    Ok(Membership {
        long: order[..n].to_vec(),
        short: order[order.len() - n..].to_vec(),
    })
}

/// Equal-weight long-short return (fraction) from percent true returns.
pub fn long_short_return(y_hat: &[f64], y_true_pct: &[f64], cfg: &PortfolioConfig) -> Result<f64> {
    if y_hat.len() != y_true_pct.len() {
        return Err(EvalError::Mismatch(format!("{} forecasts vs {} returns", y_hat.len(), y_true_pct.len())));
    }
    let n = cfg.book_size(y_hat.len());
    let books = select_books(y_hat, n)?;
    Ok(book_return(&books, y_true_pct))
}

fn book_return(books: &Membership, y_true_pct: &[f64]) -> f64 {
    let long: f64 = books.long.iter().map(|&i| y_true_pct[i] / 100.0).sum();
    let short: f64 = books.short.iter().map(|&i| y_true_pct[i] / 100.0).sum();
    (long - short) / books.long.len() as f64
}

/// Stocks opened plus stocks closed across both books; the first period
/// opens `2N`.
pub fn turnover(prev: Option<&Membership>, cur: &Membership) -> usize {
    let Some(prev) = prev else {
        return cur.long.len() + cur.short.len();
    };
    let changed = |a: &[usize], b: &[usize]| {
        let (a, b): (BTreeSet<_>, BTreeSet<_>) = (a.iter().collect(), b.iter().collect());
        a.symmetric_difference(&b).count()
    };
    changed(&prev.long, &cur.long) + changed(&prev.short, &cur.short)
}

/// `R_t = y_t − cost_rate · TC_t / N`, with the turnover counts alongside.
pub fn apply_costs(gross: &[f64], books: &[Membership], cfg: &PortfolioConfig) -> Result<(Vec<f64>, Vec<usize>)> {
    if gross.len() != books.len() {
        return Err(EvalError::Mismatch(format!("{} returns vs {} portfolios", gross.len(), books.len())));
    }
    let mut net = Vec::with_capacity(gross.len());
    let mut tcs = Vec::with_capacity(gross.len());
    for (t, (y, cur)) in gross.iter().zip(books).enumerate() {
        let tc = turnover(t.checked_sub(1).map(|p| &books[p]), cur);
        net.push(y - cfg.cost_rate * tc as f64 / cur.long.len() as f64);
        tcs.push(tc);
    }
    Ok((net, tcs))
}

pub fn cumulative_wealth(returns: &[f64]) -> Vec<f64> {
    returns
        .iter()
        .scan(1.0, |w, r| {
            *w *= 1.0 + r;
            Some(*w)
        })
        .collect()
}

/// Annualized return, volatility and Sharpe ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskReturn {
    pub ar: f64,
    pub av: f64,
    /// 0 when `av` is 0.
    pub sr: f64,
    pub sr_defined: bool,
}

pub fn ar_av_sr(returns: &[f64], cfg: &PortfolioConfig) -> RiskReturn {
    let ny = cfg.trading_days as f64;
    let ar = stats::mean(returns) * ny;
    let av = stats::pop_std(returns) * ny.sqrt();
    let sr_defined = av > 0.0;
    RiskReturn {
        ar,
        av,
        sr: if sr_defined { ar / av } else { 0.0 },
        sr_defined,
    }
}

/// Largest drop of the running sum of returns from an earlier (or equal)
/// point of the same series.
pub fn mdd(returns: &[f64]) -> f64 {
    let (mut sum, mut peak, mut worst) = (0.0, f64::NEG_INFINITY, 0.0f64);
    for r in returns {
        sum += r;
        peak = peak.max(sum);
        worst = worst.max(peak - sum);
    }
    worst
}

/// `AR / MDD`, or `(0, false)` when `MDD = 0`.
pub fn calmar(ar: f64, mdd: f64) -> (f64, bool) {
    if mdd > 0.0 {
        (ar / mdd, true)
    } else {
        (0.0, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub ic: f64,
    pub icir: f64,
    pub rank_ic: f64,
    pub rank_icir: f64,
    pub icir_defined: bool,
    pub rank_icir_defined: bool,
}

fn ratio(x: &[f64]) -> (f64, bool) {
    let s = stats::pop_std(x);
    if s > 0.0 {
        (stats::mean(x) / s, true)
    } else {
        (0.0, false)
    }
}

/// Metrics over forecasts and true returns (same units), one row per period.
pub fn forecast_metrics(y_hat: &[Vec<f64>], y_true: &[Vec<f64>]) -> Result<ForecastMetrics> {
    if y_hat.len() != y_true.len() || y_hat.is_empty() {
        return Err(EvalError::Mismatch("forecasts and returns need the same non-zero period count".into()));
    }
    let (mut se, mut ae, mut count) = (0.0, 0.0, 0usize);
    let mut ics = Vec::with_capacity(y_hat.len());
    let mut rank_ics = Vec::with_capacity(y_hat.len());
    for (p, y) in y_hat.iter().zip(y_true) {
        if p.len() != y.len() {
            return Err(EvalError::Mismatch(format!("{} forecasts vs {} returns", p.len(), y.len())));
        }
        for (a, b) in p.iter().zip(y) {
            se += (a - b).powi(2);
            ae += (a - b).abs();
            count += 1;
        }
        let z = stats::average_ranks(y);
        ics.push(stats::pearson(p, &z).unwrap_or(0.0));
        rank_ics.push(stats::pearson(&stats::average_ranks(p), &z).unwrap_or(0.0));
    }
    let (icir, icir_defined) = ratio(&ics);
    let (rank_icir, rank_icir_defined) = ratio(&rank_ics);
    Ok(ForecastMetrics {
        rmse: (se / count as f64).sqrt(),
        mae: ae / count as f64,
        ic: stats::mean(&ics),
        icir,
        rank_ic: stats::mean(&rank_ics),
        rank_icir,
        icir_defined,
        rank_icir_defined,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BacktestReport {
    pub dates: Vec<String>,
    pub gross: Vec<f64>,
    pub net: Vec<f64>,
    pub turnover: Vec<usize>,
    pub wealth: Vec<f64>,
    pub risk: RiskReturn,
    pub mdd: f64,
    pub cr: f64,
    pub cr_defined: bool,
    pub forecast: ForecastMetrics,
}

/// Runs the strategy over cross-sections of forecasts and percent returns,
/// one entry per period.
pub fn backtest(
    dates: &[String],
    y_hat: &[Vec<f64>],
    y_true_pct: &[Vec<f64>],
    cfg: &PortfolioConfig,
) -> Result<BacktestReport> {
    cfg.validate()?;
    if dates.len() != y_hat.len() || dates.len() != y_true_pct.len() {
        return Err(EvalError::Mismatch(format!(
            "{} dates, {} forecast rows, {} return rows",
            dates.len(),
            y_hat.len(),
            y_true_pct.len()
        )));
    }
    let mut books = Vec::with_capacity(dates.len());
    let mut gross = Vec::with_capacity(dates.len());
    for (p, y) in y_hat.iter().zip(y_true_pct) {
        if p.len() != y.len() {
            return Err(EvalError::Mismatch(format!("{} forecasts vs {} returns", p.len(), y.len())));
        }
        let b = select_books(p, cfg.book_size(p.len()))?;
        gross.push(book_return(&b, y));
        books.push(b);
    }
    let (net, turnover) = apply_costs(&gross, &books, cfg)?;
    let wealth = cumulative_wealth(if cfg.gross_wealth { &gross } else { &net });
    let risk = ar_av_sr(&net, cfg);
    let drawdown = mdd(&net);
    let (cr, cr_defined) = calmar(risk.ar, drawdown);
    Ok(BacktestReport {
        dates: dates.to_vec(),
        gross,
        net,
        turnover,
        wealth,
        risk,
        mdd: drawdown,
        cr,
        cr_defined,
        forecast: forecast_metrics(y_hat, y_true_pct)?,
    })
}

impl BacktestReport {
    /// Metric names and values in report order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let f = &self.forecast;
        vec![
            ("RMSE", f.rmse),
            ("MAE", f.mae),
            ("IC", f.ic),
            ("ICIR", f.icir),
            ("RankIC", f.rank_ic),
            ("RankICIR", f.rank_icir),
            ("AR", self.risk.ar),
            ("AV", self.risk.av),
            ("SR", self.risk.sr),
            ("MDD", self.mdd),
            ("CR", self.cr),
        ]
    }

    /// Names of metrics reported as 0 because they are undefined.
    pub fn undefined(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.forecast.icir_defined {
            out.push("ICIR");
        }
        if !self.forecast.rank_icir_defined {
            out.push("RankICIR");
        }
        if !self.risk.sr_defined {
            out.push("SR");
        }
        if !self.cr_defined {
            out.push("CR");
        }
        out
    }
}

/// Flat `key: value` metrics file, with extra leading lines (e.g. config).
pub fn write_metrics<W: Write>(
    report: &BacktestReport,
    extra: &[(String, String)],
    out: W,
    stamp: Option<&str>,
) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    if let Some(s) = stamp {
        writeln!(out, "# {s}")?;
    }
    for (k, v) in extra {
        writeln!(out, "{k}: {v}")?;
    }
    writeln!(out, "periods: {}", report.dates.len())?;
    for (k, v) in report.metrics() {
        writeln!(out, "{k}: {v}")?;
    }
    writeln!(out, "undefined: {}", report.undefined().join(","))?;
    out.flush()
}

/// Per-period `date,y_str,r,cw`.
pub fn write_series<W: Write>(report: &BacktestReport, out: W, stamp: Option<&str>) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    if let Some(s) = stamp {
        writeln!(out, "# {s}")?;
    }
    writeln!(out, "date,y_str,r,cw")?;
    for k in 0..report.dates.len() {
        writeln!(
            out,
            "{},{},{},{}",
            report.dates[k], report.gross[k], report.net[k], report.wealth[k]
        )?;
    }
    out.flush()
}
