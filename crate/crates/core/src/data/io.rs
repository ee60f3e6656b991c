use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use super::{DataError, MarketPanel};
use crate::diffcore::Tensor;

/// Header names of the panel CSV columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColumnMap {
    pub date: String,
    pub stock_id: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub vwap: String,
    pub volume: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            date: "date".into(),
            stock_id: "stock_id".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            vwap: "vwap".into(),
            volume: "volume".into(),
        }
    }
}

/// Reads a long-format panel CSV. Lines starting with `#` are skipped.
///
/// Features come out in the order open, close, high, low, vwap, volume and
/// the close column doubles as the price.
pub fn load_panel(path: &Path, schema: &ColumnMap) -> Result<MarketPanel, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let date_col = col(&schema.date)?;
    let stock_col = col(&schema.stock_id)?;
    let value_cols = [
        (schema.open.as_str(), col(&schema.open)?),
        (schema.close.as_str(), col(&schema.close)?),
        (schema.high.as_str(), col(&schema.high)?),
        (schema.low.as_str(), col(&schema.low)?),
        (schema.vwap.as_str(), col(&schema.vwap)?),
        (schema.volume.as_str(), col(&schema.volume)?),
    ];

    let mut rows: BTreeMap<(String, String), [f64; 6]> = BTreeMap::new();
    let mut stocks = BTreeSet::new();
    let mut dates = BTreeSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let stock = record.get(stock_col).unwrap_or_default().to_string();
        let date = record.get(date_col).unwrap_or_default().to_string();
        let mut values = [0.0; 6];
        for (k, (name, c)) in value_cols.iter().enumerate() {
            let raw = record.get(*c).unwrap_or_default();
            values[k] = raw.parse::<f64>().map_err(|_| DataError::Parse {
                line,
                field: name.to_string(),
                value: raw.to_string(),
            })?;
        }
        if !(values[1] > 0.0 && values[1].is_finite()) {
            return Err(DataError::BadPrice {
                stock,
                date,
                value: values[1],
            });
        }
        stocks.insert(stock.clone());
        dates.insert(date.clone());
        if rows.insert((stock.clone(), date.clone()), values).is_some() {
            return Err(DataError::DuplicateRow { stock, date });
        }
    }

    let stocks: Vec<String> = stocks.into_iter().collect();
    let dates: Vec<String> = dates.into_iter().collect();
    let (n_stocks, n_periods) = (stocks.len(), dates.len());
    let mut features = Vec::with_capacity(n_stocks * n_periods * 6);
    let mut prices = Vec::with_capacity(n_stocks * n_periods);
    for s in &stocks {
        for d in &dates {
            let values = rows
                .remove(&(s.clone(), d.clone()))
                .ok_or_else(|| DataError::HoleInPanel {
                    stock: s.clone(),
                    date: d.clone(),
                })?;
            features.extend_from_slice(&values);
            prices.push(values[1]);
        }
    }
    let to_err = |e: crate::diffcore::DiffError| DataError::Inconsistent(e.to_string());
    MarketPanel::new(
        stocks,
        dates,
        Tensor::new(vec![n_stocks, n_periods, 6], features).map_err(to_err)?,
        Tensor::new(vec![n_stocks, n_periods], prices).map_err(to_err)?,
    )
}

/// Writes the panel in the loader's format, sorted by stock then date.
/// `stamp` becomes a leading `#` comment line.
pub fn write_panel<W: Write>(
    panel: &MarketPanel,
    out: W,
    stamp: Option<&str>,
) -> Result<(), DataError> {
    if panel.n_features() != 6 {
        return Err(DataError::Inconsistent(format!(
            "CSV export needs the 6 standard features, panel has {}",
            panel.n_features()
        )));
    }
    let mut out = std::io::BufWriter::new(out);
    if let Some(s) = stamp {
        writeln!(out, "# {s}")?;
    }
    writeln!(out, "date,stock_id,open,high,low,close,vwap,volume")?;
    for (i, stock) in panel.stock_ids().iter().enumerate() {
        for (t, date) in panel.periods().iter().enumerate() {
            let f = panel.feature(i, t);
            writeln!(
                out,
                "{date},{stock},{},{},{},{},{},{}",
                f[0], f[2], f[3], f[1], f[4], f[5]
            )?;
        }
    }
    out.flush()?;
    Ok(())
}
