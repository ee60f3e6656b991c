//! Stock-level irrationality factor.
//!
//! For every stock `i` a virtual rational price is built from the other
//! stocks' prices through learned scale factors `β_ij` and a row softmax over
//! learned logits `w_ij` (`j ≠ i`). The factor is the gap between that price
//! and the actual one, `u = p̃ − p`. Training minimizes the regression error
//! plus an AR(1) penalty whose coefficient is kept inside `(-1, 1)` by a tanh
//! reparameterization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::MarketPanel;
use crate::diffcore::{Adam, AdamConfig, DiffError, ParamSet, Tape, Tensor, Var};
use crate::exec::Exec;

#[derive(Debug, thiserror::Error)]
pub enum StockFactorError {
    #[error("need at least 2 stocks, got {0}")]
    TooFewStocks(usize),
    #[error("series too short: need {need}, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("all-zero series has no AR(1) coefficient")]
    Degenerate,
    #[error("parameters are sized for {expected} stocks, panel has {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, StockFactorError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CointegrationParams {
    /// `β_ij`, `[I, I]`; the diagonal is never read.
    pub beta: Tensor,
    /// Attention logits `w_ij`, `[I, I]`; the diagonal is masked out.
    pub logits: Tensor,
    /// `ρ_i = tanh(rho_raw_i)`, `[I]`.
    pub rho_raw: Tensor,
    /// Fixed per-stock divisor applied to prices before anything else.
    pub price_scale: Vec<f64>,
}

impl CointegrationParams {
    /// `β = 1`, `w = 0`, `rho_raw = 0`, unit price scale.
    pub fn init(n_stocks: usize) -> Self {
        Self {
            beta: Tensor::full(&[n_stocks, n_stocks], 1.0),
            logits: Tensor::zeros(&[n_stocks, n_stocks]),
            rho_raw: Tensor::zeros(&[n_stocks]),
            price_scale: vec![1.0; n_stocks],
        }
    }

    pub fn n_stocks(&self) -> usize {
        self.rho_raw.len()
    }

    pub fn rho(&self) -> Vec<f64> {
        self.rho_raw.data().iter().map(|r| r.tanh()).collect()
    }

    /// Row-softmax attention over `j ≠ i`; zero on the diagonal.
    pub fn attention(&self) -> Tensor {
        let n = self.n_stocks();
        let mut att = Tensor::zeros(&[n, n]);
        for i in 0..n {
            let row = self.logits.row(i);
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let e = (row[j] - max).exp();
                att.set2(i, j, e);
                z += e;
            }
            for j in (0..n).filter(|&j| j != i) {
                att.set2(i, j, att.at2(i, j) / z);
            }
        }
        att
    }
}

impl ParamSet for CointegrationParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.beta, &self.logits, &self.rho_raw]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.beta, &mut self.logits, &mut self.rho_raw]
    }
}

/// Factor `u` and virtual price `p̃`, both `[I, T]`, with `u = p̃ − p`.
#[derive(Clone, Debug, PartialEq)]
pub struct StockFactorSeries {
    pub u: Tensor,
    pub p_tilde: Tensor,
}

impl StockFactorSeries {
    pub fn series(&self, stock: usize) -> &[f64] {
        self.u.row(stock)
    }
}

fn scaled_prices(panel: &MarketPanel, params: &CointegrationParams) -> Result<Tensor> {
    let n = panel.n_stocks();
    if n < 2 {
        return Err(StockFactorError::TooFewStocks(n));
    }
    if params.n_stocks() != n {
        return Err(StockFactorError::SizeMismatch {
            expected: params.n_stocks(),
            got: n,
        });
    }
    let mut p = panel.prices().clone();
    let t_len = panel.n_periods();
    for (k, v) in p.data_mut().iter_mut().enumerate() {
        *v /= params.price_scale[k / t_len];
    }
    Ok(p)
}

/// `p̃_i(t) = Σ_{j≠i} ATT_ij β_ij p_j(t)`, evaluated stock by stock.
pub fn virtual_price_with(panel: &MarketPanel, params: &CointegrationParams, exec: Exec) -> Result<Tensor> {
    let prices = scaled_prices(panel, params)?;
    let (n, t_len) = (panel.n_stocks(), panel.n_periods());
    let att = params.attention();
    let rows = exec.map_range(n, |i| {
        let coef: Vec<f64> = (0..n).map(|j| att.at2(i, j) * params.beta.at2(i, j)).collect();
        (0..t_len)
            .map(|t| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| coef[j] * prices.at2(j, t))
                    .sum::<f64>()
            })
            .collect::<Vec<f64>>()
    });
    Ok(Tensor::new(vec![n, t_len], rows.concat())?)
}

pub fn virtual_price(panel: &MarketPanel, params: &CointegrationParams) -> Result<Tensor> {
    virtual_price_with(panel, params, Exec::default())
}

/// `u = p̃ − p` in the (possibly rescaled) price units the parameters use.
pub fn residual(panel: &MarketPanel, params: &CointegrationParams) -> Result<StockFactorSeries> {
    let p_tilde = virtual_price(panel, params)?;
    let prices = scaled_prices(panel, params)?;
    let u = p_tilde
        .data()
        .iter()
        .zip(prices.data())
        .map(|(a, b)| a - b)
        .collect();
    Ok(StockFactorSeries {
        u: Tensor::new(p_tilde.shape().to_vec(), u)?,
        p_tilde,
    })
}

/// Tape handles for [`CointegrationParams`], in `ParamSet` order.
pub struct CointVars<'t> {
    pub beta: Var<'t>,
    pub logits: Var<'t>,
    pub rho_raw: Var<'t>,
}

impl<'t> CointVars<'t> {
    pub fn from_slice(v: &[Var<'t>]) -> Self {
        Self {
            beta: v[0],
            logits: v[1],
            rho_raw: v[2],
        }
    }
}

fn diagonal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        m.set2(i, i, f64::NEG_INFINITY);
    }
    m
}

/// `u = p̃ − p` on the tape; `prices` is a constant `[I, T]`.
pub fn residual_var<'t>(vars: &CointVars<'t>, prices: Var<'t>) -> std::result::Result<Var<'t>, DiffError> {
    let tape = prices.tape();
    let n = prices.shape()[0];
    let mask = tape.constant(diagonal_mask(n));
    let att = vars.logits.add(&mask)?.softmax_row();
    let coef = att.mul(&vars.beta)?;
    coef.matmul(&prices)?.sub(&prices)
}

/// Regression loss `mean((p − p̃)²)` over all stocks and periods.
pub fn loss_beta_var<'t>(u: Var<'t>) -> std::result::Result<Var<'t>, DiffError> {
    Ok(u.square()?.mean())
}

/// AR(1) penalty `mean_{t≥1}((u_t − ρ u_{t−1})²)`, normalized by `(T−1)·I`.
pub fn loss_rho_var<'t>(u: Var<'t>, rho_raw: Var<'t>) -> std::result::Result<Var<'t>, DiffError> {
    let shape = u.shape();
    let (n, t_len) = (shape[0], shape[1]);
    if t_len < 2 {
        return Err(DiffError::Shape(format!("AR(1) penalty needs T >= 2, got {t_len}")));
    }
    let rho = rho_raw.tanh().reshape(&[n, 1])?;
    let prev = u.slice(1, 0, t_len - 1)?;
    let next = u.slice(1, 1, t_len)?;
    Ok(next.sub(&rho.mul(&prev)?)?.square()?.mean())
}

pub fn loss_s_var<'t>(
    vars: &CointVars<'t>,
    prices: Var<'t>,
    lambda1: f64,
) -> std::result::Result<Var<'t>, DiffError> {
    let u = residual_var(vars, prices)?;
    let lb = loss_beta_var(u)?;
    if lambda1 == 0.0 {
        return Ok(lb);
    }
    let lr = loss_rho_var(u, vars.rho_raw)?;
    lb.add(&lr.scale(lambda1))
}

fn with_tape<F>(panel: &MarketPanel, params: &CointegrationParams, f: F) -> Result<f64>
where
    F: for<'t> Fn(&CointVars<'t>, Var<'t>) -> std::result::Result<Var<'t>, DiffError>,
{
    let prices = scaled_prices(panel, params)?;
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.tensors().into_iter().map(|t| tape.constant(t.clone())).collect();
    let cv = CointVars::from_slice(&vars);
    let p = tape.constant(prices);
    Ok(f(&cv, p)?.item())
}

pub fn loss_beta(panel: &MarketPanel, params: &CointegrationParams) -> Result<f64> {
    with_tape(panel, params, |v, p| loss_beta_var(residual_var(v, p)?))
}

/// AR(1) penalty of a given factor series under the parameters' `ρ`.
pub fn loss_rho(factors: &StockFactorSeries, params: &CointegrationParams) -> Result<f64> {
    let shape = factors.u.shape();
    if shape[1] < 2 {
        return Err(StockFactorError::TooShort { need: 2, got: shape[1] });
    }
    let tape = Tape::new();
    let u = tape.constant(factors.u.clone());
    let rho = tape.constant(params.rho_raw.clone());
    Ok(loss_rho_var(u, rho)?.item())
}

pub fn loss_s(panel: &MarketPanel, params: &CointegrationParams, lambda1: f64) -> Result<f64> {
    if panel.n_periods() < 2 {
        return Err(StockFactorError::TooShort {
            need: 2,
            got: panel.n_periods(),
        });
    }
    with_tape(panel, params, |v, p| loss_s_var(v, p, lambda1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StockFactorHyper {
    pub lambda1: f64,
    pub lr: f64,
    pub steps: usize,
    /// Divide each stock's prices by its first price before fitting.
    pub scale_prices: bool,
}

impl Default for StockFactorHyper {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lr: 0.1,
            steps: 2000,
            scale_prices: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StockFactorFit {
    pub params: CointegrationParams,
    pub factors: StockFactorSeries,
    /// `L_S` before every step, followed by the final value.
    pub losses: Vec<f64>,
}

/// Full-batch Adam on `L_S` over the given (training) panel.
pub fn train_stock_factors(panel: &MarketPanel, hyper: &StockFactorHyper) -> Result<StockFactorFit> {
    let n = panel.n_stocks();
    if n < 2 {
        return Err(StockFactorError::TooFewStocks(n));
    }
    if panel.n_periods() < 2 {
        return Err(StockFactorError::TooShort {
            need: 2,
            got: panel.n_periods(),
        });
    }
    let mut params = CointegrationParams::init(n);
    if hyper.scale_prices {
        params.price_scale = (0..n).map(|i| panel.price(i, 0)).collect();
    }
    let prices = scaled_prices(panel, &params)?;
    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut losses = Vec::with_capacity(hyper.steps + 1);
    for _ in 0..hyper.steps {
        let tape = Tape::new();
        let leaves = tape.leaves(&params.tensors());
        let vars = CointVars::from_slice(&leaves);
        let loss = loss_s_var(&vars, tape.constant(prices.clone()), hyper.lambda1)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(DiffError::NumericalFailure(format!("L_S became {value}")).into());
        }
        losses.push(value);
        tape.backward(loss)?;
        let grads: Vec<Tensor> = leaves.iter().map(|v| tape.grad(*v)).collect();
        opt.step(params.tensors_mut(), &grads)?;
    }
    let final_loss = loss_s(panel, &params, hyper.lambda1)?;
    if !final_loss.is_finite() {
        return Err(DiffError::NumericalFailure(format!("L_S became {final_loss}")).into());
    }
    losses.push(final_loss);
    let factors = residual(panel, &params)?;
    Ok(StockFactorFit {
        params,
        factors,
        losses,
    })
}

/// Least-squares AR(1) coefficient without intercept,
/// `Σ u_t u_{t−1} / Σ u_{t−1}²`.
pub fn stationarity_diagnostic(series: &[f64]) -> Result<f64> {
    if series.len() < 10 {
        return Err(StockFactorError::TooShort {
            need: 10,
            got: series.len(),
        });
    }
    let num: f64 = series.windows(2).map(|w| w[1] * w[0]).sum();
    let den: f64 = series[..series.len() - 1].iter().map(|v| v * v).sum();
    if den == 0.0 {
        return Err(StockFactorError::Degenerate);
    }
    Ok(num / den)
}

/// Writes `stock_id,date,u,p_tilde` rows, sorted by stock then date.
pub fn write_factors<W: Write>(
    factors: &StockFactorSeries,
    panel: &MarketPanel,
    out: W,
    stamp: Option<&str>,
) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    if let Some(s) = stamp {
        writeln!(out, "# {s}")?;
    }
    writeln!(out, "stock_id,date,u,p_tilde")?;
    for (i, stock) in panel.stock_ids().iter().enumerate() {
        for (t, date) in panel.periods().iter().enumerate() {
            writeln!(out, "{stock},{date},{},{}", factors.u.at2(i, t), factors.p_tilde.at2(i, t))?;
        }
    }
    out.flush()
}
