//! The `synth`, `pipeline` and `report` commands.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{ConfigError, DataSource, RunConfig};
use crate::data::{self, ColumnMap, DataError, MarketPanel};
use crate::evaluation::{self, BacktestReport, EvalError, PortfolioConfig};
use crate::marketfactor;
use crate::pipeline::{self, Checkpoints, PipelineError};
use crate::stockfactor;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data stage: {0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Pipeline(#[from] PipelineError),
    #[error("report stage: {0}")]
    Eval(#[from] EvalError),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("malformed artifact {}: {reason}", path.display())]
    BadArtifact { path: PathBuf, reason: String },
    #[error("{stage} stage: cannot write {}: {source}", path.display())]
    Write {
        stage: &'static str,
        path: PathBuf,
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CliError>;

pub const PANEL_FILE: &str = "panel.csv";
pub const FACTORS_FILE: &str = "factors.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MARKET_FILE: &str = "market_repr.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const SERIES_FILE: &str = "series.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Config prefixes each stage's checkpoint depends on.
const STOCK_INPUTS: &[&str] = &["seed", "data.", "synthetic.", "split.", "stock."];
const MARKET_INPUTS: &[&str] = &["seed", "data.", "synthetic.", "split.", "synchronism.", "market."];
const FORECASTER_INPUTS: &[&str] = &[
    "seed",
    "ablation",
    "data.",
    "synthetic.",
    "split.",
    "synchronism.",
    "stock.",
    "market.",
    "forecaster.",
];

fn write_error<'a>(stage: &'static str, path: &'a Path) -> impl Fn(std::io::Error) -> CliError + 'a {
    move |source| CliError::Write {
        stage,
        path: path.to_path_buf(),
        source,
    }
}

fn create_file(stage: &'static str, path: &Path) -> Result<File> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(write_error(stage, path))?;
    }
    File::create(path).map_err(write_error(stage, path))
}

fn write_artifact(stage: &'static str, path: &Path, f: impl FnOnce(File) -> std::io::Result<()>) -> Result<()> {
    f(create_file(stage, path)?).map_err(write_error(stage, path))
}

/// The configured panel.
pub fn load_data(cfg: &RunConfig) -> Result<MarketPanel> {
    Ok(match &cfg.source {
        DataSource::Csv(path) => data::load_panel(path, &ColumnMap::default())?,
        DataSource::Synthetic => data::generate_synthetic(&cfg.synthetic.spec(cfg.seed))?,
    })
}

/// Writes the synthetic panel to `<out>/panel.csv` and returns its path.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.source != DataSource::Synthetic {
        return Err(ConfigError::Invalid("`synth` needs the synthetic data source".into()).into());
    }
    let panel = load_data(cfg)?;
    let path = cfg.out.join(PANEL_FILE);
    let stamp = cfg.stamp();
    data::write_panel(&panel, create_file("synth", &path)?, Some(&stamp))?;
    Ok(path)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    key: String,
    params: T,
}

fn load_checkpoint<T: DeserializeOwned>(path: &Path, key: &str) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    match serde_json::from_str::<Checkpoint<T>>(&text) {
        Ok(c) if c.key == key => {
            log::info!("resuming from {}", path.display());
            Some(c.params)
        }
        Ok(_) => {
            log::info!("ignoring {}: written for other settings", path.display());
            None
        }
        Err(e) => {
            log::warn!("ignoring unreadable checkpoint {}: {e}", path.display());
            None
        }
    }
}

fn save_checkpoint<T: Serialize>(stage: &'static str, path: &Path, key: &str, params: &T) -> Result<()> {
    let c = Checkpoint {
        key: key.to_string(),
        params,
    };
    write_artifact(stage, path, |mut f| {
        serde_json::to_writer(&mut f, &c).map_err(std::io::Error::from)?;
        f.write_all(b"\n")
    })
}

/// Runs every stage and writes the run directory. Stages whose checkpoint
/// in `<out>/checkpoints` matches the current settings are not retrained.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<BacktestReport> {
    let panel = load_data(cfg)?;
    let pcfg = cfg.pipeline_config(panel.periods())?;
    let stamp = cfg.stamp();
    let ckpt_dir = cfg.out.join(CHECKPOINT_DIR);
    let keys = [
        cfg.hash_of(STOCK_INPUTS),
        cfg.hash_of(MARKET_INPUTS),
        cfg.hash_of(FORECASTER_INPUTS),
    ];
    let paths = ["stock.json", "market.json", "forecaster.json"].map(|f| ckpt_dir.join(f));
    let mut ckpt = Checkpoints {
        coint: load_checkpoint(&paths[0], &keys[0]),
        market: load_checkpoint(&paths[1], &keys[1]),
        forecaster: None,
    };

    log::info!("stages 1-2: factors");
    let factors = pipeline::fit_factors(&panel, &pcfg, &ckpt, cfg.exec)?;
    if ckpt.coint.is_none() {
        save_checkpoint("stock factor", &paths[0], &keys[0], &factors.coint)?;
    }
    if ckpt.market.is_none() {
        save_checkpoint("market factor", &paths[1], &keys[1], &factors.market)?;
    }
    let dates = panel.periods();
    write_artifact("stock factor", &cfg.out.join(FACTORS_FILE), |f| {
        stockfactor::write_factors(&factors.stock, &panel, f, Some(&stamp))
    })?;
    write_artifact("market factor", &cfg.out.join(LABELS_FILE), |f| {
        marketfactor::write_labels(&factors.labels, dates, f, Some(&stamp))
    })?;
    write_artifact("market factor", &cfg.out.join(MARKET_FILE), |f| {
        marketfactor::write_market_repr(&factors.series, dates, f, Some(&stamp))
    })?;

    log::info!("stages 3-4: forecaster and backtest");
    ckpt.forecaster = load_checkpoint(&paths[2], &keys[2]);
    let out = pipeline::forecast(&panel, &factors, &pcfg, &ckpt, cfg.exec)?;
    if ckpt.forecaster.is_none() {
        save_checkpoint("forecaster", &paths[2], &keys[2], &out.model.forecaster)?;
    }
    write_artifact("forecaster", &cfg.out.join(PREDICTIONS_FILE), |f| {
        write_predictions(&panel, &out.test_periods, &out.predictions, f, &stamp)
    })?;
    let mut extra = vec![
        ("config_hash".to_string(), cfg.config_hash()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("ablation".to_string(), cfg.ablation.label()),
        ("train_end".to_string(), pcfg.train_end.to_string()),
        ("test_start".to_string(), pcfg.test_start.to_string()),
    ];
    extra.extend(portfolio_lines(&cfg.portfolio));
    write_artifact("evaluation", &cfg.out.join(REPORT_FILE), |f| {
        evaluation::write_metrics(&out.report, &extra, f, Some(&stamp))
    })?;
    write_artifact("evaluation", &cfg.out.join(SERIES_FILE), |f| {
        evaluation::write_series(&out.report, f, Some(&stamp))
    })?;
    Ok(out.report)
}

fn portfolio_lines(p: &PortfolioConfig) -> Vec<(String, String)> {
    vec![
        ("portfolio.n_fraction".into(), p.n_fraction.to_string()),
        ("portfolio.cost_rate".into(), p.cost_rate.to_string()),
        ("portfolio.trading_days".into(), p.trading_days.to_string()),
        ("portfolio.gross_wealth".into(), p.gross_wealth.to_string()),
    ]
}

/// `date,stock_id,y_hat,y_true` for every test period and stock.
fn write_predictions(
    panel: &MarketPanel,
    periods: &[usize],
    predictions: &crate::diffcore::Tensor,
    out: File,
    stamp: &str,
) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    writeln!(out, "# {stamp}")?;
    writeln!(out, "date,stock_id,y_hat,y_true")?;
    for (k, &t) in periods.iter().enumerate() {
        for (i, id) in panel.stock_ids().iter().enumerate() {
            writeln!(out, "{},{id},{},{}", panel.periods()[t], predictions.at2(i, k), panel.ret(i, t))?;
        }
    }
    out.flush()
}

fn read_artifact(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingArtifact(path.to_path_buf()),
        _ => CliError::BadArtifact {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
    })
}

/// Recomputes the backtest of a run directory from its predictions and
/// the portfolio settings recorded in its report.
pub fn recompute_report(dir: &Path) -> Result<BacktestReport> {
    let report_path = dir.join(REPORT_FILE);
    let pred_path = dir.join(PREDICTIONS_FILE);
    let report_text = read_artifact(&report_path)?;
    let pred_text = read_artifact(&pred_path)?;
    let bad = |path: &Path, reason: String| CliError::BadArtifact {
        path: path.to_path_buf(),
        reason,
    };

    let fields: BTreeMap<&str, &str> = report_text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect();
    let mut cfg = RunConfig::default();
    for (key, _) in portfolio_lines(&PortfolioConfig::default()) {
        let raw = fields
            .get(key.as_str())
            .ok_or_else(|| bad(&report_path, format!("no `{key}` line")))?;
        cfg.set(&key, raw).map_err(|e| bad(&report_path, e.to_string()))?;
    }
    let portfolio = cfg.portfolio;

    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(pred_text.as_bytes());
    let mut dates: Vec<String> = Vec::new();
    let mut stocks: Vec<Vec<String>> = Vec::new();
    let (mut y_hat, mut y_true): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (Vec::new(), Vec::new());
    for row in reader.records() {
        let row = row.map_err(|e| bad(&pred_path, e.to_string()))?;
        if row.len() != 4 {
            return Err(bad(&pred_path, format!("expected 4 columns, got {}", row.len())));
        }
        let num = |k: usize| {
            row[k]
                .parse::<f64>()
                .map_err(|e| bad(&pred_path, format!("`{}`: {e}", &row[k])))
        };
        if dates.last().map(String::as_str) != Some(&row[0]) {
            dates.push(row[0].to_string());
            stocks.push(Vec::new());
            y_hat.push(Vec::new());
            y_true.push(Vec::new());
        }
        stocks.last_mut().expect("pushed").push(row[1].to_string());
        y_hat.last_mut().expect("pushed").push(num(2)?);
        y_true.last_mut().expect("pushed").push(num(3)?);
    }
    if dates.is_empty() {
        return Err(bad(&pred_path, "no predictions".into()));
    }
    if stocks.iter().any(|s| s != &stocks[0]) {
        return Err(bad(&pred_path, "periods list different stocks".into()));
    }
    Ok(evaluation::backtest(&dates, &y_hat, &y_true, &portfolio)?)
}

/// The 11-metric block, three decimals per value.
pub fn format_report(report: &BacktestReport) -> String {
    let undefined = report.undefined();
    let mut s = String::new();
    for (name, v) in report.metrics() {
        let note = if undefined.contains(&name) { "  (undefined)" } else { "" };
        s.push_str(&format!("{name:<9}{v:>10.3}{note}\n"));
    }
    s
}

pub fn cmd_report(dir: &Path) -> Result<String> {
    Ok(format_report(&recompute_report(dir)?))
}
