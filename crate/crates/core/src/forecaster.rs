//! Next-period return forecaster.
//!
//! For each stock the last `L` input vectors `g = e ‖ u` go through a small
//! transformer encoder whose final position gives `c`. A relation layer
//! attends across stocks with scores built from `P_c c + r`, where `r` is the
//! stock's dynamic representation at `t−1` from the frozen market encoder,
//! and mixes the encodings into `d`. An MLP head reads `c ‖ d ‖ m_{t−1}`.
//! Training minimizes MSE minus `λ3` times the mean cross-sectional IC
//! against return ranks.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, DiffError, ParamSet, Tape, Tensor, Var};
use crate::exec::Exec;
use crate::marketfactor::{self, MarketEncoderParams, MarketError, MarketSeries};
use crate::rng::{stage_rng, stream, sub_rng, uniform};
use crate::stats;

#[derive(Debug, thiserror::Error)]
pub enum ForecastError {
    #[error("period {period} needs {window} earlier periods of inputs")]
    TooEarly { period: usize, window: usize },
    #[error("misaligned inputs: {0}")]
    AlignmentError(String),
    #[error("need at least 2 stocks, got {0}")]
    TooFewStocks(usize),
    #[error("not enough training periods: {0}")]
    NotEnoughPeriods(String),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

type Result<T> = std::result::Result<T, ForecastError>;

/// Model variants with one component removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// NS: no stock-level factor column in the inputs.
    pub no_stock_factor: bool,
    /// NM: market representation replaced by zeros.
    pub no_market_factor: bool,
    /// NR: no rank-correlation term in the loss.
    pub no_rank_loss: bool,
    /// ND: no relation layer; the head reads `c ‖ m`.
    pub no_relation: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_stock_factor: false,
        no_market_factor: false,
        no_rank_loss: false,
        no_relation: false,
    };

    /// Accepts `NS`, `NM`, `NR`, `ND` (any case) or `none`/`full`.
    pub fn parse(s: &str) -> Option<Self> {
        let mut a = Self::FULL;
        match s.to_ascii_uppercase().as_str() {
            "NS" => a.no_stock_factor = true,
            "NM" => a.no_market_factor = true,
            "NR" => a.no_rank_loss = true,
            "ND" => a.no_relation = true,
            "NONE" | "FULL" | "" => {}
            _ => return None,
        }
        Some(a)
    }

    pub fn label(&self) -> String {
        let tags: Vec<&str> = [
            (self.no_stock_factor, "NS"),
            (self.no_market_factor, "NM"),
            (self.no_rank_loss, "NR"),
            (self.no_relation, "ND"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, t)| *t)
        .collect();
        if tags.is_empty() {
            "full".into()
        } else {
            tags.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterHyper {
    /// Input window `L`.
    pub window: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub lambda3: f64,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a better validation RankIC before stopping.
    pub patience: usize,
    /// Trailing share of the training periods held out for early stopping.
    pub val_fraction: f64,
    /// Cross-sections per optimizer step.
    pub periods_per_step: usize,
    pub seed: u64,
}

impl Default for ForecasterHyper {
    fn default() -> Self {
        Self {
            window: 20,
            width: 64,
            blocks: 2,
            heads: 4,
            head_hidden: 64,
            lambda3: 0.1,
            lr: 1e-3,
            max_epochs: 50,
            patience: 10,
            val_fraction: 0.2,
            periods_per_step: 1,
            seed: 0,
        }
    }
}

impl ForecasterHyper {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.window == 0 || self.width == 0 || self.blocks == 0 || self.head_hidden == 0 {
            return Err("window, width, blocks and head_hidden must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if !(self.lambda3 >= 0.0) {
            return Err(format!("lambda3 must be >= 0, got {}", self.lambda3));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.periods_per_step == 0 {
            return Err("periods_per_step must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl BlockParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ff_w1,
            &self.ff_b1,
            &self.ff_w2,
            &self.ff_b2,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecasterParams {
    pub heads: usize,
    pub relation: bool,
    /// Input projection `[Dg, H]` and bias `[H]`.
    pub in_w: Tensor,
    pub in_b: Tensor,
    pub blocks: Vec<BlockParams>,
    /// Projection of `c` into the representation space, `[H, 2D]`.
    pub p_c: Tensor,
    /// Relation score matrix `W_Y`, `[2D, 2D]`.
    pub w_y: Tensor,
    pub head_w1: Tensor,
    pub head_b1: Tensor,
    pub head_w2: Tensor,
    pub head_b2: Tensor,
}

fn glorot(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| uniform(rng, -a, a)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

impl ForecasterParams {
    pub fn init(input_dim: usize, repr_dim: usize, hyper: &ForecasterHyper, relation: bool) -> Self {
        let h = hyper.width;
        let mut rng = stage_rng(hyper.seed, stream::FORECASTER_INIT);
        let blocks = (0..hyper.blocks)
            .map(|_| BlockParams {
                wq: glorot(&mut rng, h, h),
                wk: glorot(&mut rng, h, h),
                wv: glorot(&mut rng, h, h),
                wo: glorot(&mut rng, h, h),
                ln1_gain: Tensor::full(&[h], 1.0),
                ln1_bias: Tensor::zeros(&[h]),
                ff_w1: glorot(&mut rng, h, 2 * h),
                ff_b1: Tensor::zeros(&[2 * h]),
                ff_w2: glorot(&mut rng, 2 * h, h),
                ff_b2: Tensor::zeros(&[h]),
                ln2_gain: Tensor::full(&[h], 1.0),
                ln2_bias: Tensor::zeros(&[h]),
            })
            .collect();
        let head_in = if relation { 2 * h } else { h } + repr_dim;
        Self {
            heads: hyper.heads,
            relation,
            in_w: glorot(&mut rng, input_dim, h),
            in_b: Tensor::zeros(&[h]),
            blocks,
            p_c: glorot(&mut rng, h, repr_dim),
            w_y: glorot(&mut rng, repr_dim, repr_dim),
            head_w1: glorot(&mut rng, head_in, hyper.head_hidden),
            head_b1: Tensor::zeros(&[hyper.head_hidden]),
            head_w2: glorot(&mut rng, hyper.head_hidden, 1),
            head_b2: Tensor::zeros(&[1]),
        }
    }

    pub fn width(&self) -> usize {
        self.in_b.len()
    }

    pub fn input_dim(&self) -> usize {
        self.in_w.shape()[0]
    }

    pub fn repr_dim(&self) -> usize {
        self.w_y.shape()[0]
    }
}

impl ParamSet for ForecasterParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.in_w, &self.in_b];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([
            &self.p_c,
            &self.w_y,
            &self.head_w1,
            &self.head_b1,
            &self.head_w2,
            &self.head_b2,
        ]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.in_w, &mut self.in_b];
        for b in &mut self.blocks {
            v.extend(b.tensors_mut());
        }
        v.extend([
            &mut self.p_c,
            &mut self.w_y,
            &mut self.head_w1,
            &mut self.head_b1,
            &mut self.head_w2,
            &mut self.head_b2,
        ]);
        v
    }
}

struct BlockVars<'t> {
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
    ln1: (Var<'t>, Var<'t>),
    ff_w1: Var<'t>,
    ff_b1: Var<'t>,
    ff_w2: Var<'t>,
    ff_b2: Var<'t>,
    ln2: (Var<'t>, Var<'t>),
}

/// Tape handles for [`ForecasterParams`], in `tensors()` order.
pub struct ForecasterVars<'t> {
    heads: usize,
    relation: bool,
    in_w: Var<'t>,
    in_b: Var<'t>,
    blocks: Vec<BlockVars<'t>>,
    p_c: Var<'t>,
    w_y: Var<'t>,
    head_w1: Var<'t>,
    head_b1: Var<'t>,
    head_w2: Var<'t>,
    head_b2: Var<'t>,
}

impl<'t> ForecasterVars<'t> {
    pub fn from_slice(params: &ForecasterParams, v: &[Var<'t>]) -> Self {
        let mut it = v.iter().copied();
        let mut next = || it.next().expect("one var per parameter tensor");
        let (in_w, in_b) = (next(), next());
        let blocks = (0..params.blocks.len())
            .map(|_| BlockVars {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln1: (next(), next()),
                ff_w1: next(),
                ff_b1: next(),
                ff_w2: next(),
                ff_b2: next(),
                ln2: (next(), next()),
            })
            .collect();
        Self {
            heads: params.heads,
            relation: params.relation,
            in_w,
            in_b,
            blocks,
            p_c: next(),
            w_y: next(),
            head_w1: next(),
            head_b1: next(),
            head_w2: next(),
            head_b2: next(),
        }
    }

    pub fn constants(tape: &'t Tape, params: &ForecasterParams) -> Self {
        let v: Vec<Var<'t>> = params.tensors().into_iter().map(|t| tape.constant(t.clone())).collect();
        Self::from_slice(params, &v)
    }
}

/// Sinusoidal position table `[L, H]`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, width]);
    for pos in 0..len {
        for k in 0..width {
            let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / width as f64);
            let angle = pos as f64 * freq;
            pe.set2(pos, k, if k % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

fn layer_norm<'t>(x: Var<'t>, (gain, bias): (Var<'t>, Var<'t>)) -> Result<Var<'t>> {
    let mut s = x.shape();
    *s.last_mut().expect("rank >= 1") = 1;
    let mean = x.mean_last()?.reshape(&s)?;
    let std = x.std_last()?.reshape(&s)?;
    Ok(x.sub(&mean)?.div(&std)?.mul(&gain)?.add(&bias)?)
}

/// Attention of the positions in `query` over every position of `x`.
fn self_attention<'t>(b: &BlockVars<'t>, query: Var<'t>, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let width = *x.shape().last().expect("rank 3");
    let dh = width / heads;
    let (q, k, v) = (query.matmul(&b.wq)?, x.matmul(&b.wk)?, x.matmul(&b.wv)?);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let scores = q
            .slice(2, lo, hi)?
            .bmm(&k.slice(2, lo, hi)?.transpose()?)?
            .scale(1.0 / (dh as f64).sqrt());
        outs.push(scores.softmax_row().bmm(&v.slice(2, lo, hi)?)?);
    }
    Ok(Var::concat(&outs, 2)?.matmul(&b.wo)?)
}

/// Encoder output at the final position for windows `[N, L, Dg]` -> `[N, H]`.
pub fn temporal_encode_var<'t>(vars: &ForecasterVars<'t>, windows: Var<'t>) -> Result<Var<'t>> {
    let s = windows.shape();
    let (n, l) = (s[0], s[1]);
    let width = vars.in_b.shape()[0];
    let pe = windows.tape().constant(positional_encoding(l, width));
    let mut x = windows.matmul(&vars.in_w)?.add(&vars.in_b)?.add(&pe)?;
    for (k, b) in vars.blocks.iter().enumerate() {
        // Only the final position is read out, so the last block skips the rest.
        let query = if k + 1 == vars.blocks.len() { x.slice(1, l - 1, l)? } else { x };
        let attended = self_attention(b, query, x, vars.heads)?;
        x = layer_norm(query.add(&attended)?, b.ln1)?;
        let ff = x
            .matmul(&b.ff_w1)?
            .add(&b.ff_b1)?
            .relu()
            .matmul(&b.ff_w2)?
            .add(&b.ff_b2)?;
        x = layer_norm(x.add(&ff)?, b.ln2)?;
    }
    Ok(x.reshape(&[n, width])?)
}

/// Relation layer over each cross-section. `c` is `[B, I, H]`, `r` is
/// `[B, I, 2D]`; returns `d` `[B, I, H]` and the attention `[B, I, I]`.
pub fn relation_var<'t>(vars: &ForecasterVars<'t>, c: Var<'t>, r: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let keys = c.matmul(&vars.p_c)?.add(&r)?.matmul(&vars.w_y.transpose()?)?;
    let att = keys.bmm(&keys.transpose()?)?.softmax_row();
    Ok((att.bmm(&c)?, att))
}

/// Head over `c ‖ d ‖ m` (or `c ‖ m`); `m` is `[B, 2D]`. Returns `[B, I]`.
pub fn head_var<'t>(vars: &ForecasterVars<'t>, c: Var<'t>, d: Option<Var<'t>>, m: Var<'t>) -> Result<Var<'t>> {
    let s = c.shape();
    let (b, i) = (s[0], s[1]);
    let dm = m.shape()[1];
    let m = m.reshape(&[b, 1, dm])?.broadcast_to(&[b, i, dm])?;
    let mut parts = vec![c];
    parts.extend(d);
    parts.push(m);
    let hidden = Var::concat(&parts, 2)?.matmul(&vars.head_w1)?.add(&vars.head_b1)?.relu();
    Ok(hidden.matmul(&vars.head_w2)?.add(&vars.head_b2)?.reshape(&[b, i])?)
}

/// Per-stock input windows `g_{t−L..t−1}` with `g = e ‖ u`, `[I, L, Dg]`.
/// Without `factors` the `u` column is left out.
pub fn build_inputs(features: &Tensor, factors: Option<&Tensor>, t: usize, window: usize) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(ForecastError::AlignmentError(format!("features must be [I, T, D], got {s:?}")));
    }
    let (n, t_len, d) = (s[0], s[1], s[2]);
    if let Some(u) = factors {
        if u.shape() != [n, t_len] {
            return Err(ForecastError::AlignmentError(format!(
                "factors {:?} vs features {s:?}",
                u.shape()
            )));
        }
    }
    if t < window || window == 0 {
        return Err(ForecastError::TooEarly { period: t, window });
    }
    if t > t_len {
        return Err(ForecastError::AlignmentError(format!("period {t} beyond {t_len} periods")));
    }
    let dg = d + usize::from(factors.is_some());
    let mut data = Vec::with_capacity(n * window * dg);
    for i in 0..n {
        for p in t - window..t {
            let base = (i * t_len + p) * d;
            data.extend_from_slice(&features.data()[base..base + d]);
            if let Some(u) = factors {
                data.push(u.at2(i, p));
            }
        }
    }
    Ok(Tensor::new(vec![n, window, dg], data)?)
}

/// Per-stock z-score of the factor series, fitted on the training periods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FactorScaler {
    pub fn fit(u: &Tensor, fit_end: usize) -> Self {
        let n = u.shape()[0];
        let (mut mean, mut std) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let row = &u.row(i)[..fit_end];
            let s = stats::pop_std(row);
            mean.push(stats::mean(row));
            std.push(if s > 0.0 { s } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn transform(&self, u: &Tensor) -> Tensor {
        let t_len = u.shape()[1];
        let mut out = u.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let i = k / t_len;
            *v = (*v - self.mean[i]) / self.std[i];
        }
        out
    }
}

/// Everything the forecaster reads, aligned so that row `t` holds only
/// information available before period `t`.
#[derive(Clone, Debug)]
pub struct ForecastInputs {
    features: Tensor,
    factors: Option<Tensor>,
    /// `[T, I, 2D]`; row `t` is the stock representation at `t−1`.
    r_prev: Tensor,
    /// `[T, 2D]`; row `t` is `m_{t−1}`.
    m_prev: Tensor,
    /// Percent returns `[I, T]`.
    returns: Tensor,
    window: usize,
    first: usize,
}

impl ForecastInputs {
    /// `features` are scaled `[I, T, D]`, `factors` scaled `[I, T]` (or
    /// `None` for NS), `market` the frozen `m_t` series (or `None` for
    /// zeros).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        features: &Tensor,
        factors: Option<&Tensor>,
        returns: &Tensor,
        market_params: &MarketEncoderParams,
        market: Option<&MarketSeries>,
        market_window: usize,
        window: usize,
        exec: Exec,
    ) -> Result<Self> {
        let s = features.shape();
        let (n, t_len) = (s[0], s[1]);
        if n < 2 {
            return Err(ForecastError::TooFewStocks(n));
        }
        if returns.shape() != [n, t_len] {
            return Err(ForecastError::AlignmentError(format!(
                "returns {:?} vs features {s:?}",
                returns.shape()
            )));
        }
        if let Some(u) = factors {
            if u.shape() != [n, t_len] {
                return Err(ForecastError::AlignmentError(format!("factors {:?} vs features {s:?}", u.shape())));
            }
        }
        let d2 = market_params.repr_dim();
        let first = window.max(market_window).max(1);
        let prev: Vec<usize> = (first.min(t_len)..t_len).map(|t| t - 1).collect();
        let reprs = marketfactor::encode_stocks(features, market_params, &prev, market_window, exec)?;
        let mut r_prev = vec![0.0; first.min(t_len) * n * d2];
        r_prev.extend_from_slice(reprs.data());
        let mut m_prev = Tensor::zeros(&[t_len, d2]);
        if let Some(series) = market {
            if series.m.shape() != [t_len, d2] {
                return Err(ForecastError::AlignmentError(format!(
                    "market series {:?} vs {t_len} periods x {d2}",
                    series.m.shape()
                )));
            }
            for t in first.min(t_len)..t_len {
                let m = series.at(t - 1).ok_or(ForecastError::TooEarly {
                    period: t,
                    window: market_window,
                })?;
                m_prev.data_mut()[t * d2..(t + 1) * d2].copy_from_slice(m);
            }
        }
        Ok(Self {
            features: features.clone(),
            factors: factors.cloned(),
            r_prev: Tensor::new(vec![t_len, n, d2], r_prev)?,
            m_prev,
            returns: returns.clone(),
            window,
            first,
        })
    }

    pub fn n_stocks(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn n_periods(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[2] + usize::from(self.factors.is_some())
    }

    pub fn repr_dim(&self) -> usize {
        self.m_prev.shape()[1]
    }

    /// Earliest period with a full set of inputs.
    pub fn first_period(&self) -> usize {
        self.first
    }

    pub fn returns(&self) -> &Tensor {
        &self.returns
    }

    fn check(&self, t: usize) -> Result<()> {
        if t < self.first || t >= self.n_periods() {
            return Err(ForecastError::TooEarly {
                period: t,
                window: self.first,
            });
        }
        Ok(())
    }

    fn windows(&self, periods: &[usize]) -> Result<Tensor> {
        let (n, l, dg) = (self.n_stocks(), self.window, self.input_dim());
        let mut data = Vec::with_capacity(periods.len() * n * l * dg);
        for &t in periods {
            self.check(t)?;
            data.extend(build_inputs(&self.features, self.factors.as_ref(), t, l)?.into_data());
        }
        Ok(Tensor::new(vec![periods.len() * n, l, dg], data)?)
    }

    fn rows(src: &Tensor, periods: &[usize]) -> Result<Tensor> {
        let row: usize = src.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(periods.len() * row);
        for &t in periods {
            data.extend_from_slice(&src.data()[t * row..(t + 1) * row]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = periods.len();
        Ok(Tensor::new(shape, data)?)
    }

    /// True returns `[B, I]` at the listed periods.
    pub fn targets(&self, periods: &[usize]) -> Tensor {
        let n = self.n_stocks();
        let mut out = Tensor::zeros(&[periods.len(), n]);
        for (b, &t) in periods.iter().enumerate() {
            for i in 0..n {
                out.set2(b, i, self.returns.at2(i, t));
            }
        }
        out
    }
}

/// Forecasts `[B, I]` for the listed periods.
pub fn forward_var<'t>(
    vars: &ForecasterVars<'t>,
    inputs: &ForecastInputs,
    periods: &[usize],
    ablation: Ablation,
) -> Result<Var<'t>> {
    let tape = vars.in_w.tape();
    let (b, n) = (periods.len(), inputs.n_stocks());
    let windows = tape.constant(inputs.windows(periods)?);
    let width = vars.in_b.shape()[0];
    let c = temporal_encode_var(vars, windows)?.reshape(&[b, n, width])?;
    let d = if vars.relation && !ablation.no_relation {
        let r = tape.constant(ForecastInputs::rows(&inputs.r_prev, periods)?);
        Some(relation_var(vars, c, r)?.0)
    } else {
        None
    };
    let m = if ablation.no_market_factor {
        Tensor::zeros(&[b, inputs.repr_dim()])
    } else {
        ForecastInputs::rows(&inputs.m_prev, periods)?
    };
    head_var(vars, c, d, tape.constant(m))
}

/// Mean over rows of the Pearson correlation between `y_hat` `[B, I]` and
/// fixed rank targets `z` `[B, I]`.
pub fn mean_ic_var<'t>(y_hat: Var<'t>, z: &Tensor) -> Result<Var<'t>> {
    let b = z.shape()[0];
    let tape = y_hat.tape();
    let mut zc = z.clone();
    let mut z_std = Vec::with_capacity(b);
    for r in 0..b {
        let row = z.row(r).to_vec();
        let m = stats::mean(&row);
        for (k, v) in row.iter().enumerate() {
            zc.set2(r, k, v - m);
        }
        z_std.push((stats::pop_std(&row).powi(2) + crate::diffcore::STD_EPS).sqrt());
    }
    let centered = y_hat.sub(&y_hat.mean_last()?.reshape(&[b, 1])?)?;
    let cov = centered.mul(&tape.constant(zc))?.mean_last()?;
    let denom = y_hat.std_last()?.mul(&tape.constant(Tensor::vector(z_std)))?;
    Ok(cov.div(&denom)?.mean())
}

/// `MSE + λ3 · (−mean IC)`; `z` holds the ascending average ranks of `y`.
pub fn loss_total_var<'t>(y_hat: Var<'t>, y: &Tensor, z: &Tensor, lambda3: f64) -> Result<Var<'t>> {
    let tape = y_hat.tape();
    let mse = y_hat.sub(&tape.constant(y.clone()))?.square()?.mean();
    if lambda3 == 0.0 {
        return Ok(mse);
    }
    Ok(mse.sub(&mean_ic_var(y_hat, z)?.scale(lambda3))?)
}

/// Rank targets `[B, I]` for returns `[B, I]`.
pub fn rank_targets(y: &Tensor) -> Tensor {
    let (b, n) = (y.shape()[0], y.shape()[1]);
    let data = (0..b).flat_map(|r| stats::average_ranks(y.row(r))).collect();
    Tensor::new(vec![b, n], data).expect("same shape")
}

/// Pearson correlation of forecasts with return ranks; 0 for a constant
/// forecast or constant ranks.
pub fn ic_t(y_hat: &[f64], z: &[f64]) -> f64 {
    stats::pearson(y_hat, z).unwrap_or(0.0)
}

/// Value of [`loss_total_var`] for plain tensors.
pub fn loss_total(y_hat: &Tensor, y: &Tensor, z: &Tensor, lambda3: f64) -> Result<f64> {
    let tape = Tape::new();
    Ok(loss_total_var(tape.constant(y_hat.clone()), y, z, lambda3)?.item())
}

/// Encoder output `[N, H]` for input windows `[N, L, Dg]`.
pub fn temporal_encode(params: &ForecasterParams, windows: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = ForecasterVars::constants(&tape, params);
    let c = temporal_encode_var(&vars, tape.constant(windows.clone()))?;
    let out = c.value().clone();
    Ok(out)
}

/// `d` `[I, H]` and attention `[I, I]` for one cross-section.
pub fn relation_attention(params: &ForecasterParams, c: &Tensor, r: &Tensor) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let vars = ForecasterVars::constants(&tape, params);
    let (n, h) = (c.shape()[0], c.shape()[1]);
    let c3 = tape.constant(c.clone()).reshape(&[1, n, h])?;
    let r3 = tape.constant(r.clone()).reshape(&[1, n, r.shape()[1]])?;
    let (d, att) = relation_var(&vars, c3, r3)?;
    let (d, att) = (d.value().clone(), att.value().clone());
    Ok((d.reshaped(vec![n, h])?, att.reshaped(vec![n, n])?))
}

/// Forecasts `[I, P]` for the listed periods with frozen parameters.
pub fn predict(
    params: &ForecasterParams,
    inputs: &ForecastInputs,
    periods: &[usize],
    ablation: Ablation,
    exec: Exec,
) -> Result<Tensor> {
    let chunks: Vec<&[usize]> = periods.chunks(16).collect();
    let parts = exec.map(&chunks, |chunk| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = ForecasterVars::constants(&tape, params);
        let y = forward_var(&vars, inputs, chunk, ablation)?;
        let out = y.value().data().to_vec();
        Ok(out)
    });
    let n = inputs.n_stocks();
    let mut out = Tensor::zeros(&[n, periods.len()]);
    let mut col = 0;
    for part in parts {
        let part = part?;
        for row in part.chunks(n) {
            for (i, v) in row.iter().enumerate() {
                out.set2(i, col, *v);
            }
            col += 1;
        }
    }
    Ok(out)
}

/// Mean cross-sectional rank correlation of `[I, P]` forecasts.
fn mean_rank_ic(y_hat: &Tensor, inputs: &ForecastInputs, periods: &[usize]) -> f64 {
    let n = inputs.n_stocks();
    let ics: Vec<f64> = periods
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let pred: Vec<f64> = (0..n).map(|i| y_hat.at2(i, k)).collect();
            let truth: Vec<f64> = (0..n).map(|i| inputs.returns.at2(i, t)).collect();
            stats::pearson(&stats::average_ranks(&pred), &stats::average_ranks(&truth)).unwrap_or(0.0)
        })
        .collect();
    stats::mean(&ics)
}

#[derive(Clone, Debug)]
pub struct ForecasterFit {
    pub params: ForecasterParams,
    /// Validation RankIC after every epoch run.
    pub val_rank_ic: Vec<f64>,
    pub best_epoch: usize,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
}

/// Trains on periods `first..train_end`, holding out the trailing
/// `val_fraction` for early stopping, and keeps the best-validation weights.
pub fn train_forecaster(
    inputs: &ForecastInputs,
    train_end: usize,
    hyper: &ForecasterHyper,
    ablation: Ablation,
    exec: Exec,
) -> Result<ForecasterFit> {
    hyper.validate().map_err(ForecastError::NotEnoughPeriods)?;
    if hyper.window != inputs.window {
        return Err(ForecastError::AlignmentError(format!(
            "inputs were built for window {}, hyperparameters say {}",
            inputs.window, hyper.window
        )));
    }
    let end = train_end.min(inputs.n_periods());
    let periods: Vec<usize> = (inputs.first..end).collect();
    let n_val = ((periods.len() as f64 * hyper.val_fraction).round() as usize).max(1);
    if periods.len() < n_val + 2 {
        return Err(ForecastError::NotEnoughPeriods(format!(
            "{} periods between {} and {end}",
            periods.len(),
            inputs.first
        )));
    }
    let (fit_periods, val_periods) = periods.split_at(periods.len() - n_val);
    let lambda3 = if ablation.no_rank_loss { 0.0 } else { hyper.lambda3 };

    let mut params = ForecasterParams::init(inputs.input_dim(), inputs.repr_dim(), hyper, !ablation.no_relation);
    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut best = (f64::NEG_INFINITY, params.clone(), 0);
    let (mut val_hist, mut loss_hist) = (Vec::new(), Vec::new());
    let mut stale = 0;
    for epoch in 0..hyper.max_epochs {
        let mut order = fit_periods.to_vec();
        order.shuffle(&mut sub_rng(hyper.seed, stream::FORECASTER_ORDER, epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(hyper.periods_per_step) {
            let tape = Tape::new();
            let leaves = tape.leaves(&params.tensors());
            let vars = ForecasterVars::from_slice(&params, &leaves);
            let y_hat = forward_var(&vars, inputs, chunk, ablation)?;
            let y = inputs.targets(chunk);
            let loss = loss_total_var(y_hat, &y, &rank_targets(&y), lambda3)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(DiffError::NumericalFailure(format!("forecaster loss became {value} in epoch {epoch}")).into());
            }
            total += value;
            tape.backward(loss)?;
            let grads: Vec<Tensor> = leaves.iter().map(|v| tape.grad(*v)).collect();
            opt.step(params.tensors_mut(), &grads)?;
        }
        loss_hist.push(total / order.len().div_ceil(hyper.periods_per_step) as f64);
        let val = mean_rank_ic(&predict(&params, inputs, val_periods, ablation, exec)?, inputs, val_periods);
        val_hist.push(val);
        log::debug!("forecaster epoch {epoch}: loss {:.4} val RankIC {val:.4}", loss_hist[epoch]);
        if val > best.0 {
            best = (val, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }
    Ok(ForecasterFit {
        params: best.1,
        val_rank_ic: val_hist,
        best_epoch: best.2,
        train_loss: loss_hist,
    })
}
