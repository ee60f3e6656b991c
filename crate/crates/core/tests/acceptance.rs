//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use irrfactor::cli::{cmd_pipeline, RunConfig};
use irrfactor::data::{
    compute_deltas, compute_synchronism_labels, generate_synthetic, FeatureScaler, MarketPanel, SynchronismConfig,
    SynchronismLabel, SyntheticSpec,
};
use irrfactor::diffcore::{gradient_check, objective, DiffError, ParamSet, Tensor};
use irrfactor::evaluation::{self, apply_costs, long_short_return, turnover, Membership, PortfolioConfig};
use irrfactor::exec::Exec;
use irrfactor::forecaster::{
    forward_var, loss_total_var, rank_targets, Ablation, ForecastInputs, ForecasterHyper, ForecasterParams,
    ForecasterVars,
};
use irrfactor::marketfactor::{
    self, classifier_accuracy, infonce_var, loss_m_var, market_repr_var, pair_criteria, submarket_split,
    synchronism_loss_var, train_market_factors, MarketData, MarketEncoderParams, MarketHyper, MarketVars,
};
use irrfactor::pipeline::{self, Checkpoints, FittedModel, PipelineConfig};
use irrfactor::stockfactor::{
    loss_beta_var, loss_rho_var, loss_s_var, residual_var, stationarity_diagnostic, train_stock_factors,
    CointVars, CointegrationParams, StockFactorHyper,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run_criterion(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "criterion {id} {name}: {} ({detail}) [{secs:.1}s]",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn main() {
    let mut shared_model: Option<(MarketPanel, FittedModel)> = None;
    let results = [
        run_criterion(1, "gradient fidelity", gradient_fidelity),
        run_criterion(2, "stock-factor recovery", stock_factor_recovery),
        run_criterion(3, "synchronism classifier", synchronism_classifier),
        run_criterion(4, "contrastive separation", contrastive_separation),
        run_criterion(5, "metric oracles", metric_oracles),
        run_criterion(6, "hand examples", hand_examples),
        run_criterion(7, "ablation ordering", || ablation_ordering(&mut shared_model)),
        run_criterion(8, "causality", || causality(shared_model.take())),
        run_criterion(9, "determinism", determinism),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

// ---------------------------------------------------------------- criterion 1

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn jitter(params: &mut dyn ParamSet, rng: &mut ChaCha8Rng, amount: f64) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-amount..amount);
        }
    }
}

fn owned(params: &dyn ParamSet) -> Vec<Tensor> {
    params.tensors().into_iter().cloned().collect()
}

fn stock_instance(seed: u64) -> (Tensor, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=5);
    let prices = random_tensor(&mut rng, &[n, 8], 5.0, 15.0);
    let mut params = CointegrationParams::init(n);
    jitter(&mut params, &mut rng, 0.5);
    (prices, owned(&params))
}

fn labels(rng: &mut ChaCha8Rng, t: usize) -> Vec<SynchronismLabel> {
    (0..t).map(|_| SynchronismLabel::ALL[rng.random_range(0..3)]).collect()
}

struct MarketInstance {
    features: Tensor,
    labels: Vec<SynchronismLabel>,
    params: Vec<Tensor>,
    periods: Vec<usize>,
    split: (Vec<usize>, Vec<usize>),
}

const MARKET_WINDOW: usize = 2;

fn market_instance(seed: u64) -> MarketInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, t, d) = (rng.random_range(4..=5), 8, rng.random_range(2..=4));
    let features = random_tensor(&mut rng, &[n, t, d], -1.0, 1.0);
    let mut params = MarketEncoderParams::init(n, d, 2 * d, seed);
    jitter(&mut params, &mut rng, 0.3);
    // Keep pooling weights away from the ReLU kink.
    params.w_eta.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.2);
    params.id_embed.data_mut().iter_mut().for_each(|v| *v = v.abs() + 3.0);
    let labels = labels(&mut rng, t);
    MarketInstance {
        features,
        labels,
        params: owned(&params),
        periods: (MARKET_WINDOW..t).collect(),
        split: submarket_split(n, seed, 0).unwrap(),
    }
}

fn forecaster_instance(seed: u64) -> (ForecastInputs, Vec<Tensor>, Tensor, Tensor, Vec<usize>, ForecasterParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, t, d) = (rng.random_range(3..=5), 8, rng.random_range(2..=4));
    let features = random_tensor(&mut rng, &[n, t, d], -1.0, 1.0);
    let u = random_tensor(&mut rng, &[n, t], -1.0, 1.0);
    let returns = random_tensor(&mut rng, &[n, t], -3.0, 3.0);
    let market = MarketEncoderParams::init(n, d, 2 * d, seed);
    let series = marketfactor::encode_market(&features, &market, MARKET_WINDOW, Exec::Sequential).unwrap();
    let inputs = ForecastInputs::new(
        &features,
        Some(&u),
        &returns,
        &market,
        Some(&series),
        MARKET_WINDOW,
        3,
        Exec::Sequential,
    )
    .unwrap();
    let hyper = ForecasterHyper {
        window: 3,
        width: 4,
        blocks: 1,
        heads: 2,
        head_hidden: 3,
        seed,
        ..ForecasterHyper::default()
    };
    let mut params = ForecasterParams::init(inputs.input_dim(), inputs.repr_dim(), &hyper, true);
    jitter(&mut params, &mut rng, 0.2);
    let periods: Vec<usize> = (inputs.first_period()..t).collect();
    let y = inputs.targets(&periods);
    let z = rank_targets(&y);
    let tensors = owned(&params);
    (inputs, tensors, y, z, periods, params)
}

fn market_error(e: marketfactor::MarketError) -> DiffError {
    DiffError::Shape(e.to_string())
}

fn check_loss(name: &str, seed: u64) -> f64 {
    const EPS: f64 = 1e-6;
    match name {
        "L_beta" | "L_rho" | "L_S" => {
            let (prices, params) = stock_instance(seed);
            let which = name.to_string();
            let f = objective(move |tape, v| {
                let cv = CointVars::from_slice(v);
                let p = tape.constant(prices.clone());
                match which.as_str() {
                    "L_beta" => loss_beta_var(residual_var(&cv, p)?),
                    "L_rho" => loss_rho_var(residual_var(&cv, p)?, cv.rho_raw),
                    _ => loss_s_var(&cv, p, 0.5),
                }
            });
            gradient_check(f, &params, EPS).unwrap()
        }
        "L_C" | "L_P" | "L_M" => {
            let inst = market_instance(seed);
            let which = name.to_string();
            let f = objective(move |_tape, v| {
                let mv = MarketVars::from_slice(v);
                let n = inst.features.shape()[0];
                match which.as_str() {
                    "L_C" => {
                        let w = MARKET_WINDOW;
                        let m1 = market_repr_var(&mv, &inst.features, &inst.periods, w, &inst.split.0)
                            .map_err(market_error)?;
                        let m2 = market_repr_var(&mv, &inst.features, &inst.periods, w, &inst.split.1)
                            .map_err(market_error)?;
                        infonce_var(&mv, m1, m2, &inst.periods).map_err(market_error)
                    }
                    "L_P" => {
                        let prev: Vec<usize> = inst.periods.iter().map(|t| t - 1).collect();
                        let all: Vec<usize> = (0..n).collect();
                        let m_prev = market_repr_var(&mv, &inst.features, &prev, MARKET_WINDOW, &all)
                            .map_err(market_error)?;
                        let labels: Vec<SynchronismLabel> = inst.periods.iter().map(|&t| inst.labels[t]).collect();
                        synchronism_loss_var(&mv, m_prev, &labels).map_err(market_error)
                    }
                    _ => {
                        let data = MarketData {
                            features: &inst.features,
                            labels: &inst.labels,
                            window: MARKET_WINDOW,
                        };
                        loss_m_var(&mv, &data, &inst.periods, 0.7, &inst.split).map_err(market_error)
                    }
                }
            });
            let params = market_instance(seed).params;
            gradient_check(f, &params, EPS).unwrap()
        }
        _ => {
            let (inputs, tensors, y, z, periods, params) = forecaster_instance(seed);
            let lambda3 = if name == "L_MSE" { 0.0 } else { 0.1 };
            let f = objective(move |_tape, v| {
                let fv = ForecasterVars::from_slice(&params, v);
                forward_var(&fv, &inputs, &periods, Ablation::FULL)
                    .and_then(|yh| loss_total_var(yh, &y, &z, lambda3))
                    .map_err(|e| DiffError::Shape(e.to_string()))
            });
            gradient_check(f, &tensors, EPS).unwrap()
        }
    }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = Vec::new();
    let mut ok = true;
    for name in ["L_beta", "L_rho", "L_S", "L_C", "L_P", "L_M", "L_MSE", "L"] {
        let err = SEEDS.iter().map(|&s| check_loss(name, s)).fold(0.0, f64::max);
        ok &= err < 1e-4;
        worst.push(format!("{name} {err:.1e}"));
    }
    let elapsed = start.elapsed();
    ok &= within(elapsed, 60);
    outcome(ok, format!("worst relative error per loss: {}", worst.join(", ")))
}

// ---------------------------------------------------------------- criterion 2

fn stock_factor_recovery() -> Outcome {
    let start = Instant::now();
    let mut hits = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let panel = generate_synthetic(&SyntheticSpec::single_pair(8, 500, 0.7, 0.6, seed)).unwrap();
        let fit = train_stock_factors(&panel, &StockFactorHyper::default()).unwrap();
        let att = fit.params.attention();
        let weight = att.at2(0, 1);
        let effective = fit.params.beta.at2(0, 1) * weight;
        let rho_u = stationarity_diagnostic(fit.factors.series(0)).unwrap();
        let rho_p = stationarity_diagnostic(panel.prices().row(0)).unwrap();
        let ok = weight >= 0.5 && (0.55..=0.85).contains(&effective) && rho_u.abs() <= 0.9 && rho_p.abs() >= 0.95;
        hits += usize::from(ok);
        lines.push(format!(
            "seed {seed}: att {weight:.3} beta*att {effective:.3} ar(u) {rho_u:.3} ar(p) {rho_p:.4}"
        ));
    }
    let fast = within(start.elapsed(), 300);
    outcome(hits >= 4 && fast, format!("{hits}/5 seeds; {}", lines.join("; ")))
}

// ------------------------------------------------------------ criteria 3 and 4

const TRAIN_END: usize = 280;

struct MarketRun {
    accuracy: f64,
    baseline: f64,
    share: f64,
    separation: Option<(f64, f64)>,
}

fn market_run(seed: u64, precursor: f64) -> MarketRun {
    let mut spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    spec.sentiment.precursor_strength = precursor;
    let panel = generate_synthetic(&spec).unwrap();
    let sync = SynchronismConfig::default();
    let labels = compute_synchronism_labels(&compute_deltas(panel.returns(), &sync), &sync);
    let features = FeatureScaler::fit(&panel, TRAIN_END).transform(&panel);
    let hyper = MarketHyper {
        seed,
        ..MarketHyper::default()
    };
    let fit = train_market_factors(&features, &labels, TRAIN_END, &hyper, Exec::Parallel).unwrap();
    let test: Vec<usize> = (TRAIN_END..panel.n_periods()).collect();
    let accuracy = classifier_accuracy(&fit.params, &fit.series, &labels, &test).unwrap();

    let count = |periods: &[usize], l: SynchronismLabel| periods.iter().filter(|&&t| labels[t] == l).count();
    let train: Vec<usize> = (hyper.window..TRAIN_END).collect();
    let majority = SynchronismLabel::ALL
        .into_iter()
        .max_by_key(|&l| count(&train, l))
        .unwrap();
    let baseline = count(&test, majority) as f64 / test.len() as f64;
    let share = SynchronismLabel::ALL
        .into_iter()
        .map(|l| count(&test, l))
        .max()
        .unwrap() as f64
        / test.len() as f64;

    let separation = (precursor > 0.0).then(|| {
        let split = submarket_split(panel.n_stocks(), seed, u64::MAX).unwrap();
        pair_criteria(&fit.params, &features, &test, hyper.window, &split).unwrap()
    });
    MarketRun {
        accuracy,
        baseline,
        share,
        separation,
    }
}

fn synchronism_classifier() -> Outcome {
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let with = market_run(seed, 0.5);
        let without = market_run(seed, 0.0);
        let gap = (without.accuracy - without.baseline).abs();
        ok &= with.accuracy >= 0.6 && with.share <= 0.5 && gap <= 0.10;
        lines.push(format!(
            "seed {seed}: acc {:.3} share {:.3} | no precursor acc {:.3} vs baseline {:.3}",
            with.accuracy, with.share, without.accuracy, without.baseline
        ));
    }
    outcome(ok, lines.join("; "))
}

fn contrastive_separation() -> Outcome {
    let mut hits = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let (pos, neg) = market_run(seed, 0.5).separation.unwrap();
        hits += usize::from(pos > neg);
        lines.push(format!("seed {seed}: pos {pos:.4} neg {neg:.4}"));
    }
    outcome(hits >= 4, format!("{hits}/5 seeds; {}", lines.join("; ")))
}

// ---------------------------------------------------------------- criterion 5

fn naive_mean(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v;
    }
    s / x.len() as f64
}

fn naive_pop_std(x: &[f64]) -> f64 {
    let m = naive_mean(x);
    let mut s = 0.0;
    for v in x {
        s += (v - m) * (v - m);
    }
    (s / x.len() as f64).sqrt()
}

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (naive_mean(x), naive_mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn naive_ranks(x: &[f64]) -> Vec<f64> {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    x.iter()
        .map(|v| {
            let first = sorted.iter().position(|s| s == v).unwrap();
            let last = sorted.iter().rposition(|s| s == v).unwrap();
            (first + last) as f64 / 2.0 + 1.0
        })
        .collect()
}

fn naive_ratio(x: &[f64]) -> f64 {
    let s = naive_pop_std(x);
    if s > 0.0 {
        naive_mean(x) / s
    } else {
        0.0
    }
}

fn naive_mdd(r: &[f64]) -> f64 {
    let sums: Vec<f64> = (0..r.len()).map(|k| r[..=k].iter().sum()).collect();
    let mut worst = 0.0f64;
    for b in 0..sums.len() {
        for a in 0..=b {
            worst = worst.max(sums[a] - sums[b]);
        }
    }
    worst
}

/// Book membership flags by explicit position counting.
fn naive_books(y_hat: &[f64], n: usize) -> (Vec<bool>, Vec<bool>) {
    let i_total = y_hat.len();
    let position = |i: usize| {
        (0..i_total)
            .filter(|&j| y_hat[j] > y_hat[i] || (y_hat[j] == y_hat[i] && j < i))
            .count()
    };
    let pos: Vec<usize> = (0..i_total).map(position).collect();
    (
        pos.iter().map(|&p| p < n).collect(),
        pos.iter().map(|&p| p >= i_total - n).collect(),
    )
}

fn naive_report(y_hat: &[Vec<f64>], y: &[Vec<f64>], cfg: &PortfolioConfig) -> (Vec<(&'static str, f64)>, Vec<f64>) {
    let i_total = y_hat[0].len();
    let n = ((cfg.n_fraction * i_total as f64).floor() as usize).max(1);
    let mut net = Vec::new();
    let mut prev: Option<(Vec<bool>, Vec<bool>)> = None;
    for (p, r) in y_hat.iter().zip(y) {
        let (long, short) = naive_books(p, n);
        let mut gross = 0.0;
        for i in 0..i_total {
            if long[i] {
                gross += r[i] / 100.0;
            }
            if short[i] {
                gross -= r[i] / 100.0;
            }
        }
        gross /= n as f64;
        let tc = match &prev {
            None => 2 * n,
            Some((pl, ps)) => (0..i_total)
                .map(|i| usize::from(pl[i] != long[i]) + usize::from(ps[i] != short[i]))
                .sum(),
        };
        net.push(gross - cfg.cost_rate * tc as f64 / n as f64);
        prev = Some((long, short));
    }

    let (mut se, mut ae, mut count) = (0.0, 0.0, 0.0);
    let (mut ics, mut rics) = (Vec::new(), Vec::new());
    for (p, r) in y_hat.iter().zip(y) {
        for (a, b) in p.iter().zip(r) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
            count += 1.0;
        }
        let z = naive_ranks(r);
        ics.push(naive_pearson(p, &z));
        rics.push(naive_pearson(&naive_ranks(p), &z));
    }
    let days = cfg.trading_days as f64;
    let ar = naive_mean(&net) * days;
    let av = naive_pop_std(&net) * days.sqrt();
    let sr = if av > 0.0 { ar / av } else { 0.0 };
    let mdd = naive_mdd(&net);
    let cr = if mdd > 0.0 { ar / mdd } else { 0.0 };
    let metrics = vec![
        ("RMSE", (se / count).sqrt()),
        ("MAE", ae / count),
        ("IC", naive_mean(&ics)),
        ("ICIR", naive_ratio(&ics)),
        ("RankIC", naive_mean(&rics)),
        ("RankICIR", naive_ratio(&rics)),
        ("AR", ar),
        ("AV", av),
        ("SR", sr),
        ("MDD", mdd),
        ("CR", cr),
    ];
    (metrics, net)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * b.abs().max(1.0)
}

fn random_cross_sections(rng: &mut ChaCha8Rng, periods: usize, stocks: usize, tied: bool) -> Vec<Vec<f64>> {
    (0..periods)
        .map(|_| {
            (0..stocks)
                .map(|_| {
                    let v: f64 = rng.random_range(-5.0..5.0);
                    if tied {
                        v.round()
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = (0.0f64, "");
    let mut failures = 0;
    for case in 0..100 {
        let periods = rng.random_range(2..=40);
        let stocks = rng.random_range(4..=30);
        let y_hat = random_cross_sections(&mut rng, periods, stocks, case % 5 == 0);
        let y = random_cross_sections(&mut rng, periods, stocks, case % 3 == 0);
        let cfg = PortfolioConfig {
            n_fraction: [0.1, 0.2, 0.25, 0.5][rng.random_range(0..4)],
            cost_rate: rng.random_range(0.0..0.005),
            ..PortfolioConfig::default()
        };
        let dates: Vec<String> = (0..periods).map(|t| format!("d{t}")).collect();
        let report = evaluation::backtest(&dates, &y_hat, &y, &cfg).unwrap();
        let (expected, net) = naive_report(&y_hat, &y, &cfg);
        let mut case_ok = report.net.iter().zip(&net).all(|(a, b)| close(*a, *b));
        for ((name, got), (_, want)) in report.metrics().into_iter().zip(expected) {
            let err = (got - want).abs() / want.abs().max(1.0);
            if err > worst.0 {
                worst = (err, name);
            }
            case_ok &= close(got, want);
        }
        failures += usize::from(!case_ok);
    }
    outcome(
        failures == 0,
        format!("{failures}/100 instances disagree; worst relative gap {:.1e} ({})", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------- criterion 6

fn hand_examples() -> Outcome {
    let cfg = PortfolioConfig {
        n_fraction: 0.25,
        ..PortfolioConfig::default()
    };
    let ls = long_short_return(&[0.9, 0.5, 0.1, -0.4], &[2.0, 7.0, -8.0, -3.0], &cfg).unwrap();

    let costs = PortfolioConfig {
        cost_rate: 0.001,
        ..PortfolioConfig::default()
    };
    let old = Membership {
        long: (0..10).collect(),
        short: (10..20).collect(),
    };
    let new = Membership {
        long: (20..30).collect(),
        short: (30..40).collect(),
    };
    let full_tc = turnover(Some(&old), &new);
    let (net, _) = apply_costs(&[0.0, 0.0], &[old, new], &costs).unwrap();
    let full_cost = -net[1];

    let first = Membership {
        long: (0..5).collect(),
        short: (5..10).collect(),
    };
    let first_tc = turnover(None, &first);
    let (net, tcs) = apply_costs(&[0.0], &[first], &costs).unwrap();
    let first_cost = -net[0];

    let exact = |a: f64, b: f64| (a - b).abs() <= 1e-15;
    let ok = exact(ls, 0.05)
        && full_tc == 40
        && exact(full_cost, 0.004)
        && first_tc == 10
        && tcs[0] == 10
        && exact(first_cost, 0.002);
    outcome(
        ok,
        format!(
            "long-short {ls}; full turnover TC {full_tc} cost {full_cost}; first period TC {first_tc} cost {first_cost}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

/// Smaller forecaster than the library default so that twenty trainings
/// fit the time budget.
fn acceptance_config(seed: u64, n_periods: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::with_seed(seed, n_periods, 0.7);
    cfg.forecaster.width = 32;
    cfg.forecaster.blocks = 1;
    cfg.forecaster.head_hidden = 32;
    cfg.forecaster.max_epochs = 10;
    cfg
}

fn ablation_ordering(keep: &mut Option<(MarketPanel, FittedModel)>) -> Outcome {
    let start = Instant::now();
    let variants = ["full", "NS", "NM", "NR"];
    let mut sums = [0.0; 4];
    let mut wins = [0usize; 4];
    for seed in SEEDS {
        let spec = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        let panel = generate_synthetic(&spec).unwrap();
        let cfg = acceptance_config(seed, panel.n_periods());
        let factors = pipeline::fit_factors(&panel, &cfg, &Checkpoints::default(), Exec::Parallel).unwrap();
        let mut ric = [0.0; 4];
        for (k, v) in variants.iter().enumerate() {
            let mut c = cfg.clone();
            c.ablation = Ablation::parse(v).unwrap();
            let out = pipeline::forecast(&panel, &factors, &c, &Checkpoints::default(), Exec::Parallel).unwrap();
            ric[k] = out.report.forecast.rank_ic;
            if k == 0 && seed == SEEDS[0] {
                *keep = Some((panel.clone(), out.model));
            }
        }
        for k in 0..4 {
            sums[k] += ric[k];
            wins[k] += usize::from(ric[0] > ric[k]);
        }
    }
    let means = sums.map(|s| s / SEEDS.len() as f64);
    let ordered = (1..4).all(|k| means[0] > means[k]);
    let fast = within(start.elapsed(), 900);
    let detail = variants
        .iter()
        .enumerate()
        .map(|(k, v)| {
            if k == 0 {
                format!("mean RankIC {v} {:.4}", means[k])
            } else {
                format!("{v} {:.4} (full ahead on {}/5 seeds)", means[k], wins[k])
            }
        })
        .collect::<Vec<_>>()
        .join(", ");
    outcome(ordered && fast, detail)
}

// ---------------------------------------------------------------- criterion 8

fn fallback_model() -> (MarketPanel, FittedModel) {
    let panel = generate_synthetic(&SyntheticSpec::default()).unwrap();
    let mut cfg = acceptance_config(0, panel.n_periods());
    cfg.forecaster.max_epochs = 2;
    let (_, out) = pipeline::run(&panel, &cfg, Exec::Parallel).unwrap();
    (panel, out.model)
}

fn causality(shared: Option<(MarketPanel, FittedModel)>) -> Outcome {
    let (panel, model) = shared.unwrap_or_else(fallback_model);
    let first = model.market_window.max(model.forecaster_window).max(1);
    let t_len = panel.n_periods();
    let periods: Vec<usize> = (first..t_len).collect();
    let base = model.predict(&panel, &periods, Exec::Parallel).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let (mut leaks, mut later_changed) = (0, 0);
    for _ in 0..20 {
        let t = rng.random_range(first..t_len - 1);
        let mut shuffled = panel.clone();
        let mut order: Vec<usize> = (0..panel.n_stocks()).collect();
        order.shuffle(&mut rng);
        for (dst, &src) in order.iter().enumerate() {
            let bump = rng.random_range(1.05..1.3);
            shuffled.set_price(dst, t, panel.price(src, t) * bump).unwrap();
            for (k, &v) in panel.feature(src, t).iter().enumerate() {
                shuffled.set_feature(dst, t, k, v * bump);
            }
        }
        let after = model.predict(&shuffled, &periods, Exec::Parallel).unwrap();
        let column_changed = |p: usize| (0..panel.n_stocks()).any(|i| base.at2(i, p) != after.at2(i, p));
        let cut = t - first;
        leaks += usize::from((0..=cut).any(column_changed));
        later_changed += usize::from((cut + 1..periods.len()).any(column_changed));
    }
    outcome(
        leaks == 0 && later_changed > 0,
        format!("20 shuffle trials: {leaks} changed a forecast at or before the shuffled period, {later_changed} changed a later one"),
    )
}

// ---------------------------------------------------------------- criterion 9

const ARTIFACTS: [&str; 6] = [
    "report.txt",
    "predictions.csv",
    "series.csv",
    "factors.csv",
    "labels.csv",
    "market_repr.csv",
];

fn small_run(out: &Path, exec: Exec) {
    let mut cfg = RunConfig::parse(
        "seed = 3\n\
         synthetic.n_periods = 200\n\
         stock.steps = 300\n\
         market.epochs = 5\n\
         forecaster.width = 16\n\
         forecaster.blocks = 1\n\
         forecaster.heads = 2\n\
         forecaster.head_hidden = 16\n\
         forecaster.max_epochs = 3\n",
    )
    .unwrap();
    cfg.out = out.to_path_buf();
    cfg.exec = exec;
    cmd_pipeline(&cfg).unwrap();
}

fn determinism() -> Outcome {
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    small_run(dirs[0].path(), Exec::Parallel);
    small_run(dirs[1].path(), Exec::Parallel);
    small_run(dirs[2].path(), Exec::Sequential);
    let mut differing = Vec::new();
    for name in ARTIFACTS {
        let reference = std::fs::read(dirs[0].path().join(name)).unwrap();
        for (k, d) in dirs.iter().enumerate().skip(1) {
            if std::fs::read(d.path().join(name)).unwrap() != reference {
                differing.push(format!("{name} (run {k})"));
            }
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            "two parallel runs and one sequential run produced byte-identical artifacts".into()
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}
