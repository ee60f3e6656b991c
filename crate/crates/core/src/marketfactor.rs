//! Market-level irrationality factor.
//!
//! Each stock gets a dynamic representation `r = e_t ‖ Σ_τ α_τ e_τ` from a
//! self-attention summary of its last `L` feature vectors. A market
//! representation pools those with learned non-negative weights
//! `η = ReLU(w_ηᵀ(embed_i + r))`. Training contrasts two random halves of the
//! market at the same period against other periods of the minibatch and
//! predicts the next period's synchronism label from the full-market pool.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::SynchronismLabel;
use crate::diffcore::{Adam, AdamConfig, DiffError, ParamSet, Tape, Tensor, Var};
use crate::exec::Exec;
use crate::rng::{normal, stage_rng, stream, sub_rng, uniform};

#[derive(Debug, thiserror::Error)]
pub enum MarketError {
    #[error("period {period} has fewer than {window} periods of history")]
    TooEarly { period: usize, window: usize },
    #[error("sub-market has no stocks")]
    EmptySubset,
    #[error("need at least 2 stocks, got {0}")]
    TooFewStocks(usize),
    #[error("contrastive batch needs at least 2 periods, got {0}")]
    NoNegatives(usize),
    #[error("inconsistent inputs: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, MarketError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketEncoderParams {
    /// Window projection `W_S`, `[D, D]`.
    pub ws: Tensor,
    /// Window projection bias, `[D]`.
    pub bias: Tensor,
    /// Stock ID embeddings, one column per stock, `[2D, I]`.
    pub id_embed: Tensor,
    /// Pooling weight vector, `[2D]`.
    pub w_eta: Tensor,
    /// Contrastive criterion weights, `[4D]`; the first half reads the anchor.
    pub w_m: Tensor,
    /// Contrastive criterion bias, `[1]`.
    pub b_m: Tensor,
    /// Classifier layers: `[2D, H]`, `[H]`, `[H, 3]`, `[3]`.
    pub cls_w1: Tensor,
    pub cls_b1: Tensor,
    pub cls_w2: Tensor,
    pub cls_b2: Tensor,
}

impl MarketEncoderParams {
    /// Seeded initialization; `W_S` starts near the identity.
    pub fn init(n_stocks: usize, n_features: usize, hidden: usize, seed: u64) -> Self {
        let (d, d2) = (n_features, 2 * n_features);
        let mut rng = stage_rng(seed, stream::MARKET_INIT);
        let mut ws = Tensor::identity(d);
        for v in ws.data_mut() {
            *v += 0.01 * normal(&mut rng);
        }
        let mut fill = |shape: &[usize], scale: f64| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| uniform(&mut rng, -scale, scale)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        };
        let embed_scale = 1.0 / (d2 as f64).sqrt();
        let id_embed = fill(&[d2, n_stocks], embed_scale);
        let w_eta = fill(&[d2], embed_scale);
        let w_m = fill(&[2 * d2], 1.0 / (2.0 * d2 as f64).sqrt());
        let cls_w1 = fill(&[d2, hidden], (6.0 / (d2 + hidden) as f64).sqrt());
        let cls_w2 = fill(&[hidden, 3], (6.0 / (hidden + 3) as f64).sqrt());
        Self {
            ws,
            bias: Tensor::zeros(&[d]),
            id_embed,
            w_eta,
            w_m,
            b_m: Tensor::zeros(&[1]),
            cls_w1,
            cls_b1: Tensor::zeros(&[hidden]),
            cls_w2,
            cls_b2: Tensor::zeros(&[3]),
        }
    }

    pub fn n_features(&self) -> usize {
        self.bias.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.id_embed.shape()[1]
    }

    /// Length of `r` and `m`.
    pub fn repr_dim(&self) -> usize {
        2 * self.n_features()
    }
}

impl ParamSet for MarketEncoderParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.ws,
            &self.bias,
            &self.id_embed,
            &self.w_eta,
            &self.w_m,
            &self.b_m,
            &self.cls_w1,
            &self.cls_b1,
            &self.cls_w2,
            &self.cls_b2,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ws,
            &mut self.bias,
            &mut self.id_embed,
            &mut self.w_eta,
            &mut self.w_m,
            &mut self.b_m,
            &mut self.cls_w1,
            &mut self.cls_b1,
            &mut self.cls_w2,
            &mut self.cls_b2,
        ]
    }
}

/// Tape handles for [`MarketEncoderParams`], in `tensors()` order.
#[derive(Clone, Copy)]
pub struct MarketVars<'t> {
    pub ws: Var<'t>,
    pub bias: Var<'t>,
    pub id_embed: Var<'t>,
    pub w_eta: Var<'t>,
    pub w_m: Var<'t>,
    pub b_m: Var<'t>,
    pub cls_w1: Var<'t>,
    pub cls_b1: Var<'t>,
    pub cls_w2: Var<'t>,
    pub cls_b2: Var<'t>,
}

impl<'t> MarketVars<'t> {
    pub fn from_slice(v: &[Var<'t>]) -> Self {
        Self {
            ws: v[0],
            bias: v[1],
            id_embed: v[2],
            w_eta: v[3],
            w_m: v[4],
            b_m: v[5],
            cls_w1: v[6],
            cls_b1: v[7],
            cls_w2: v[8],
            cls_b2: v[9],
        }
    }

    /// All parameters as untracked constants.
    pub fn constants(tape: &'t Tape, params: &MarketEncoderParams) -> Self {
        let v: Vec<Var<'t>> = params.tensors().into_iter().map(|t| tape.constant(t.clone())).collect();
        Self::from_slice(&v)
    }

    fn repr_dim(&self) -> usize {
        self.w_eta.shape()[0]
    }
}

/// Feature windows `t−L+1..=t` for every stock at every listed period,
/// `[P·I, L, D]`, period-major.
pub fn gather_windows(features: &Tensor, periods: &[usize], window: usize) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(MarketError::Mismatch(format!("features must be [I, T, D], got {shape:?}")));
    }
    let (n, t_len, d) = (shape[0], shape[1], shape[2]);
    if window == 0 {
        return Err(MarketError::Mismatch("window length must be positive".into()));
    }
    let mut data = Vec::with_capacity(periods.len() * n * window * d);
    for &t in periods {
        if t + 1 < window {
            return Err(MarketError::TooEarly { period: t, window });
        }
        if t >= t_len {
            return Err(MarketError::Mismatch(format!("period {t} outside panel of {t_len}")));
        }
        for i in 0..n {
            let start = (i * t_len + t + 1 - window) * d;
            data.extend_from_slice(&features.data()[start..start + window * d]);
        }
    }
    Ok(Tensor::new(vec![periods.len() * n, window, d], data)?)
}

/// Dynamic representations for a batch of windows `[N, L, D]` -> `[N, 2D]`.
pub fn stock_repr_var<'t>(vars: &MarketVars<'t>, windows: Var<'t>) -> Result<Var<'t>> {
    let s = windows.shape();
    let (n, l, d) = (s[0], s[1], s[2]);
    let proj = windows.matmul(&vars.ws.transpose()?)?.add(&vars.bias)?;
    let query = proj.slice(1, l - 1, l)?;
    let scores = query.bmm(&proj.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    let summary = scores.softmax_row().bmm(&windows)?.reshape(&[n, d])?;
    let current = windows.slice(1, l - 1, l)?.reshape(&[n, d])?;
    Ok(Var::concat(&[current, summary], 1)?)
}

/// Pooling weights `η` for representations `[N, 2D]` of the given stocks.
pub fn stock_weight_var<'t>(vars: &MarketVars<'t>, reprs: Var<'t>, stocks: &[usize]) -> Result<Var<'t>> {
    let d2 = vars.repr_dim();
    let embed = vars.id_embed.transpose()?.index_select(0, stocks)?;
    let n = stocks.len();
    Ok(embed
        .add(&reprs)?
        .matmul(&vars.w_eta.reshape(&[d2, 1])?)?
        .reshape(&[n])?
        .relu())
}

/// η-weighted mean over `subset` for each of `n_periods` cross-sections.
/// `reprs` is `[P·I, 2D]` and `weights` is `[P·I]`, period-major.
pub fn pool_var<'t>(
    reprs: Var<'t>,
    weights: Var<'t>,
    n_periods: usize,
    n_stocks: usize,
    subset: &[usize],
) -> Result<Var<'t>> {
    if subset.is_empty() {
        return Err(MarketError::EmptySubset);
    }
    let d2 = reprs.shape()[1];
    let k = subset.len();
    let r = reprs.reshape(&[n_periods, n_stocks, d2])?.index_select(1, subset)?;
    let eta = weights.reshape(&[n_periods, n_stocks])?.index_select(1, subset)?;
    let mut fallback = Tensor::zeros(&[n_periods, k]);
    {
        let values = eta.value();
        for p in 0..n_periods {
            if values.data()[p * k..(p + 1) * k].iter().all(|&v| v == 0.0) {
                log::debug!("all pooling weights are zero at batch row {p}; using uniform weights");
                fallback.data_mut()[p * k..(p + 1) * k].fill(1.0);
            }
        }
    }
    let w = eta.add(&reprs.tape().constant(fallback))?;
    let num = w.reshape(&[n_periods, 1, k])?.bmm(&r)?.reshape(&[n_periods, d2])?;
    let den = w.sum_last()?.reshape(&[n_periods, 1])?;
    Ok(num.div(&den)?)
}

/// Market representations `[P, 2D]` over `subset` at each listed period.
pub fn market_repr_var<'t>(
    vars: &MarketVars<'t>,
    features: &Tensor,
    periods: &[usize],
    window: usize,
    subset: &[usize],
) -> Result<Var<'t>> {
    let tape = vars.ws.tape();
    let n = features.shape()[0];
    let windows = tape.constant(gather_windows(features, periods, window)?);
    let reprs = stock_repr_var(vars, windows)?;
    let stocks: Vec<usize> = (0..periods.len()).flat_map(|_| 0..n).collect();
    let eta = stock_weight_var(vars, reprs, &stocks)?;
    pool_var(reprs, eta, periods.len(), n, subset)
}

/// `−mean_t log softmax_t'(criterion logits)[t]` for anchors `m1` and
/// candidates `m2`, both `[B, 2D]`, at the listed periods.
pub fn infonce_var<'t>(vars: &MarketVars<'t>, m1: Var<'t>, m2: Var<'t>, periods: &[usize]) -> Result<Var<'t>> {
    let b = periods.len();
    if b < 2 {
        return Err(MarketError::NoNegatives(b));
    }
    let d2 = vars.repr_dim();
    let tape = m1.tape();
    let anchor = m1.matmul(&vars.w_m.slice(0, 0, d2)?.reshape(&[d2, 1])?)?;
    let other = m2
        .matmul(&vars.w_m.slice(0, d2, 2 * d2)?.reshape(&[d2, 1])?)?
        .reshape(&[1, b])?;
    let mut decay = Tensor::zeros(&[b, b]);
    for (r, &t) in periods.iter().enumerate() {
        for (c, &s) in periods.iter().enumerate() {
            decay.set2(r, c, 1.0 / (t.abs_diff(s) as f64 + 1.0));
        }
    }
    let logits = anchor.add(&other)?.add(&vars.b_m)?.mul(&tape.constant(decay))?;
    let picked = logits.log_softmax_row().mul(&tape.constant(Tensor::identity(b)))?;
    Ok(picked.sum().scale(-1.0 / b as f64))
}

/// Classifier logits `[B, 3]` from market representations `[B, 2D]`.
pub fn classifier_logits_var<'t>(vars: &MarketVars<'t>, m: Var<'t>) -> Result<Var<'t>> {
    let hidden = m.matmul(&vars.cls_w1)?.add(&vars.cls_b1)?.relu();
    Ok(hidden.matmul(&vars.cls_w2)?.add(&vars.cls_b2)?)
}

/// Mean cross-entropy of the classifier on `m_prev` against `labels`.
pub fn synchronism_loss_var<'t>(
    vars: &MarketVars<'t>,
    m_prev: Var<'t>,
    labels: &[SynchronismLabel],
) -> Result<Var<'t>> {
    let b = labels.len();
    let onehot: Vec<f64> = labels.iter().flat_map(|l| l.one_hot()).collect();
    let target = m_prev.tape().constant(Tensor::new(vec![b, 3], onehot)?);
    let logp = classifier_logits_var(vars, m_prev)?.log_softmax_row();
    Ok(logp.mul(&target)?.sum().scale(-1.0 / b as f64))
}

/// Scaled features `[I, T, D]` and per-period labels.
#[derive(Clone, Copy, Debug)]
pub struct MarketData<'a> {
    pub features: &'a Tensor,
    pub labels: &'a [SynchronismLabel],
    pub window: usize,
}

impl MarketData<'_> {
    fn n_stocks(&self) -> usize {
        self.features.shape()[0]
    }

    fn check(&self, params: &MarketEncoderParams) -> Result<()> {
        let s = self.features.shape();
        if s.len() != 3 || s[0] != params.n_stocks() || s[2] != params.n_features() {
            return Err(MarketError::Mismatch(format!(
                "features {s:?} do not fit an encoder for {} stocks x {} features",
                params.n_stocks(),
                params.n_features()
            )));
        }
        if self.labels.len() != s[1] {
            return Err(MarketError::Mismatch(format!(
                "{} labels for {} periods",
                self.labels.len(),
                s[1]
            )));
        }
        Ok(())
    }
}

/// `L_C + λ2·L_P` for a batch of periods (each needs `L` periods of history
/// before it, since the prediction term reads the window ending at `t−1`).
pub fn loss_m_var<'t>(
    vars: &MarketVars<'t>,
    data: &MarketData<'_>,
    periods: &[usize],
    lambda2: f64,
    split: &(Vec<usize>, Vec<usize>),
) -> Result<Var<'t>> {
    let tape = vars.ws.tape();
    let n = data.n_stocks();
    let windows = tape.constant(gather_windows(data.features, periods, data.window)?);
    let reprs = stock_repr_var(vars, windows)?;
    let stocks: Vec<usize> = (0..periods.len()).flat_map(|_| 0..n).collect();
    let eta = stock_weight_var(vars, reprs, &stocks)?;
    let m1 = pool_var(reprs, eta, periods.len(), n, &split.0)?;
    let m2 = pool_var(reprs, eta, periods.len(), n, &split.1)?;
    let contrastive = infonce_var(vars, m1, m2, periods)?;
    if lambda2 == 0.0 {
        return Ok(contrastive);
    }
    let prev: Vec<usize> = periods
        .iter()
        .map(|&t| t.checked_sub(1).ok_or(MarketError::TooEarly { period: t, window: data.window }))
        .collect::<Result<_>>()?;
    let all: Vec<usize> = (0..n).collect();
    let m_prev = market_repr_var(vars, data.features, &prev, data.window, &all)?;
    let labels: Vec<SynchronismLabel> = periods.iter().map(|&t| data.labels[t]).collect();
    let prediction = synchronism_loss_var(vars, m_prev, &labels)?;
    Ok(contrastive.add(&prediction.scale(lambda2))?)
}

/// Dynamic representation of one stock at period `t`, length `2D`.
pub fn dynamic_stock_repr(
    features: &Tensor,
    params: &MarketEncoderParams,
    stock: usize,
    t: usize,
    window: usize,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let vars = MarketVars::constants(&tape, params);
    let all = gather_windows(features, &[t], window)?;
    let w = tape.constant(all).index_select(0, &[stock])?;
    let r = stock_repr_var(&vars, w)?;
    let out = r.value().data().to_vec();
    Ok(out)
}

pub fn stock_weight(params: &MarketEncoderParams, stock: usize, repr: &[f64]) -> f64 {
    let d2 = params.repr_dim();
    let s = (0..d2)
        .map(|k| params.w_eta.data()[k] * (params.id_embed.at2(k, stock) + repr[k]))
        .sum::<f64>();
    s.max(0.0)
}

/// `m_t` pooled over `subset`.
pub fn market_repr(
    features: &Tensor,
    params: &MarketEncoderParams,
    subset: &[usize],
    t: usize,
    window: usize,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let vars = MarketVars::constants(&tape, params);
    let m = market_repr_var(&vars, features, &[t], window, subset)?;
    let out = m.value().data().to_vec();
    Ok(out)
}

/// Random halves of sizes `⌈I/2⌉` and `⌊I/2⌋`, each sorted.
pub fn submarket_split(n_stocks: usize, seed: u64, epoch: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_stocks < 2 {
        return Err(MarketError::TooFewStocks(n_stocks));
    }
    let mut order: Vec<usize> = (0..n_stocks).collect();
    order.shuffle(&mut sub_rng(seed, stream::MARKET_SPLIT, epoch));
    let mut first = order[..n_stocks.div_ceil(2)].to_vec();
    let mut second = order[n_stocks.div_ceil(2)..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

/// `exp((w_Mᵀ(m1 ‖ m2) + b_M) / (|t − t'| + 1))`.
pub fn criterion(params: &MarketEncoderParams, m1: &[f64], m2: &[f64], t: usize, t2: usize) -> f64 {
    let logit: f64 = m1
        .iter()
        .chain(m2)
        .zip(params.w_m.data())
        .map(|(a, b)| a * b)
        .sum::<f64>()
        + params.b_m.data()[0];
    (logit / (t.abs_diff(t2) as f64 + 1.0)).exp()
}

pub fn infonce_loss(
    params: &MarketEncoderParams,
    features: &Tensor,
    periods: &[usize],
    window: usize,
    seed: u64,
    epoch: u64,
) -> Result<f64> {
    let split = submarket_split(features.shape()[0], seed, epoch)?;
    let tape = Tape::new();
    let vars = MarketVars::constants(&tape, params);
    let m1 = market_repr_var(&vars, features, periods, window, &split.0)?;
    let m2 = market_repr_var(&vars, features, periods, window, &split.1)?;
    Ok(infonce_var(&vars, m1, m2, periods)?.item())
}

/// Class probabilities in [`SynchronismLabel::ALL`] order.
pub fn synchronism_predict(params: &MarketEncoderParams, m_prev: &[f64]) -> Result<[f64; 3]> {
    let tape = Tape::new();
    let vars = MarketVars::constants(&tape, params);
    let m = tape.constant(Tensor::new(vec![1, m_prev.len()], m_prev.to_vec())?);
    let p = classifier_logits_var(&vars, m)?.softmax_row();
    let v = p.value();
    Ok([v.data()[0], v.data()[1], v.data()[2]])
}

pub fn loss_m(
    params: &MarketEncoderParams,
    data: &MarketData<'_>,
    periods: &[usize],
    lambda2: f64,
    split: &(Vec<usize>, Vec<usize>),
) -> Result<f64> {
    data.check(params)?;
    let tape = Tape::new();
    let vars = MarketVars::constants(&tape, params);
    Ok(loss_m_var(&vars, data, periods, lambda2, split)?.item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketHyper {
    pub window: usize,
    pub lambda2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Classifier hidden width; `None` means `2D`.
    pub hidden: Option<usize>,
    pub seed: u64,
}

impl Default for MarketHyper {
    fn default() -> Self {
        Self {
            window: 20,
            lambda2: 1.0,
            lr: 3e-3,
            epochs: 40,
            batch: 32,
            hidden: None,
            seed: 0,
        }
    }
}

/// Frozen market representations, `[T, 2D]`; rows before `first` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MarketSeries {
    pub m: Tensor,
    pub first: usize,
}

impl MarketSeries {
    pub fn at(&self, t: usize) -> Option<&[f64]> {
        (t >= self.first).then(|| self.m.row(t))
    }
}

#[derive(Clone, Debug)]
pub struct MarketFit {
    pub params: MarketEncoderParams,
    pub series: MarketSeries,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// `L_M` over every training period at once, before and after training,
    /// under the epoch-0 split.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Periods usable by `L_M` within `0..end`.
pub fn trainable_periods(window: usize, end: usize) -> Vec<usize> {
    (window..end).collect()
}

/// Minibatch Adam on `L_M` over periods before `train_end`, then encodes
/// every period of `features` with the frozen parameters.
pub fn train_market_factors(
    features: &Tensor,
    labels: &[SynchronismLabel],
    train_end: usize,
    hyper: &MarketHyper,
    exec: Exec,
) -> Result<MarketFit> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(MarketError::Mismatch(format!("features must be [I, T, D], got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[2]);
    if n < 2 {
        return Err(MarketError::TooFewStocks(n));
    }
    let hidden = hyper.hidden.unwrap_or(2 * d);
    let mut params = MarketEncoderParams::init(n, d, hidden, hyper.seed);
    let data = MarketData {
        features,
        labels,
        window: hyper.window,
    };
    data.check(&params)?;
    let periods = trainable_periods(hyper.window, train_end.min(shape[1]));
    if periods.len() < 2 {
        return Err(MarketError::NoNegatives(periods.len()));
    }
    let eval_split = submarket_split(n, hyper.seed, 0)?;
    let initial_loss = loss_m(&params, &data, &periods, hyper.lambda2, &eval_split)?;

    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs as u64 {
        let split = submarket_split(n, hyper.seed, epoch)?;
        let mut order = periods.clone();
        order.shuffle(&mut sub_rng(hyper.seed, stream::MARKET_BATCH, epoch));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hyper.batch.max(2)) {
            if chunk.len() < 2 {
                continue;
            }
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let tape = Tape::new();
            let leaves = tape.leaves(&params.tensors());
            let vars = MarketVars::from_slice(&leaves);
            let loss = loss_m_var(&vars, &data, &batch, hyper.lambda2, &split)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(DiffError::NumericalFailure(format!("L_M became {value} in epoch {epoch}")).into());
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = leaves.iter().map(|v| tape.grad(*v)).collect();
            opt.step(params.tensors_mut(), &grads)?;
            total += value;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    let final_loss = loss_m(&params, &data, &periods, hyper.lambda2, &eval_split)?;
    if !final_loss.is_finite() {
        return Err(DiffError::NumericalFailure(format!("L_M became {final_loss}")).into());
    }
    let series = encode_market(features, &params, hyper.window, exec)?;
    Ok(MarketFit {
        params,
        series,
        epoch_losses,
        initial_loss,
        final_loss,
    })
}

/// Full-market `m_t` for every period with a complete window.
pub fn encode_market(
    features: &Tensor,
    params: &MarketEncoderParams,
    window: usize,
    exec: Exec,
) -> Result<MarketSeries> {
    let (n, t_len) = (features.shape()[0], features.shape()[1]);
    let d2 = params.repr_dim();
    let first = window.saturating_sub(1);
    let periods: Vec<usize> = (first..t_len).collect();
    let all: Vec<usize> = (0..n).collect();
    let chunks: Vec<&[usize]> = periods.chunks(64).collect();
    let encoded = exec.map(&chunks, |chunk| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = MarketVars::constants(&tape, params);
        let m = market_repr_var(&vars, features, chunk, window, &all)?;
        let out = m.value().data().to_vec();
        Ok(out)
    });
    let mut m = vec![0.0; first.min(t_len) * d2];
    for part in encoded {
        m.extend(part?);
    }
    Ok(MarketSeries {
        m: Tensor::new(vec![t_len, d2], m)?,
        first,
    })
}

/// Dynamic representations of every stock at each listed period,
/// `[P, I, 2D]`.
pub fn encode_stocks(
    features: &Tensor,
    params: &MarketEncoderParams,
    periods: &[usize],
    window: usize,
    exec: Exec,
) -> Result<Tensor> {
    let n = features.shape()[0];
    let d2 = params.repr_dim();
    let chunks: Vec<&[usize]> = periods.chunks(64).collect();
    let encoded = exec.map(&chunks, |chunk| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let vars = MarketVars::constants(&tape, params);
        let w = tape.constant(gather_windows(features, chunk, window)?);
        let r = stock_repr_var(&vars, w)?;
        let out = r.value().data().to_vec();
        Ok(out)
    });
    let mut data = Vec::with_capacity(periods.len() * n * d2);
    for part in encoded {
        data.extend(part?);
    }
    Ok(Tensor::new(vec![periods.len(), n, d2], data)?)
}

/// Mean criterion over positive pairs `(t, t)` and over negative pairs
/// `(t, t')`, `t ≠ t'`, among `periods`, with sub-market representations
/// from `split`.
pub fn pair_criteria(
    params: &MarketEncoderParams,
    features: &Tensor,
    periods: &[usize],
    window: usize,
    split: &(Vec<usize>, Vec<usize>),
) -> Result<(f64, f64)> {
    if periods.len() < 2 {
        return Err(MarketError::NoNegatives(periods.len()));
    }
    let tape = Tape::new();
    let vars = MarketVars::constants(&tape, params);
    let m1 = market_repr_var(&vars, features, periods, window, &split.0)?;
    let m2 = market_repr_var(&vars, features, periods, window, &split.1)?;
    let (a, b) = (m1.value(), m2.value());
    let d2 = params.repr_dim();
    let (mut pos, mut neg, mut n_neg) = (0.0, 0.0, 0usize);
    for (r, &t) in periods.iter().enumerate() {
        for (c, &s) in periods.iter().enumerate() {
            let v = criterion(params, &a.data()[r * d2..(r + 1) * d2], &b.data()[c * d2..(c + 1) * d2], t, s);
            if r == c {
                pos += v;
            } else {
                neg += v;
                n_neg += 1;
            }
        }
    }
    Ok((pos / periods.len() as f64, neg / n_neg as f64))
}

/// Share of `periods` whose label the classifier gets right from `m_{t−1}`.
pub fn classifier_accuracy(
    params: &MarketEncoderParams,
    series: &MarketSeries,
    labels: &[SynchronismLabel],
    periods: &[usize],
) -> Result<f64> {
    let mut hits = 0usize;
    for &t in periods {
        let prev = t
            .checked_sub(1)
            .and_then(|p| series.at(p))
            .ok_or(MarketError::TooEarly {
                period: t,
                window: series.first + 1,
            })?;
        let p = synchronism_predict(params, prev)?;
        let best = (0..3).fold(0, |b, k| if p[k] > p[b] { k } else { b });
        if SynchronismLabel::ALL[best] == labels[t] {
            hits += 1;
        }
    }
    Ok(hits as f64 / periods.len().max(1) as f64)
}

/// Writes `date,m_1..m_2D` for every period with a representation.
pub fn write_market_repr<W: Write>(
    series: &MarketSeries,
    periods: &[String],
    out: W,
    stamp: Option<&str>,
) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    if let Some(s) = stamp {
        writeln!(out, "# {s}")?;
    }
    let d2 = series.m.shape()[1];
    let header: Vec<String> = (1..=d2).map(|k| format!("m_{k}")).collect();
    writeln!(out, "date,{}", header.join(","))?;
    for (t, date) in periods.iter().enumerate().skip(series.first) {
        let row: Vec<String> = series.m.row(t).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{date},{}", row.join(","))?;
    }
    out.flush()
}

/// Writes `date,label` for audit.
pub fn write_labels<W: Write>(
    labels: &[SynchronismLabel],
    periods: &[String],
    out: W,
    stamp: Option<&str>,
) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(out);
    if let Some(s) = stamp {
        writeln!(out, "# {s}")?;
    }
    writeln!(out, "date,label")?;
    for (date, label) in periods.iter().zip(labels) {
        writeln!(out, "{date},{}", label.as_str())?;
    }
    out.flush()
}
