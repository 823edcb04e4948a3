//! Acceptance criteria 1-10. Each test prints one verdict line to stderr
//! (outside the harness capture) and then asserts it.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use precip_post::datagen::{build_dataset, sample_raw_member, truth_at, Dataset, SyntheticConfig};
use precip_post::dist::{Censored, CsgdParams, Family, GtcndParams, Params};
use precip_post::fitting::*;
use precip_post::grid::GridTensor;
use precip_post::gridnet::train::predict_params;
use precip_post::gridnet::*;
use precip_post::quantiles::{default_levels, QuantileForecast};
use precip_post::scoring::*;
use precip_post::verification::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};

fn verdict(n: usize, name: &str, ok: bool, detail: String) {
    let line = format!("criterion {n:>2} {} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

fn random_gtcnd(rng: &mut ChaCha8Rng) -> GtcndParams {
    GtcndParams::new(
        rng.random_range(0.0..0.95),
        rng.random_range(-3.0..8.0),
        rng.random_range(0.2..5.0),
    )
    .unwrap()
}

fn random_csgd(rng: &mut ChaCha8Rng) -> CsgdParams {
    CsgdParams::new(
        rng.random_range(0.2..6.0),
        rng.random_range(0.2..4.0),
        -rng.random_range(0.01..5.0),
    )
    .unwrap()
}

fn random_obs<D: Censored>(d: &D, rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..3) {
        0 => 0.0,
        1 => d.sample(rng),
        _ => rng.random_range(0.0..20.0),
    }
}

/// Point mass, then rejection from the untruncated normal. Only used
/// where `μ/σ > -2`, so rejection stays cheap.
fn draw_gtcnd(p: &GtcndParams, rng: &mut ChaCha8Rng) -> f64 {
    if rng.random::<f64>() < p.l {
        return 0.0;
    }
    let n = Normal::new(p.mu, p.sigma).unwrap();
    loop {
        let x = n.sample(rng);
        if x > 0.0 {
            return x;
        }
    }
}

fn draw_csgd(p: &CsgdParams, rng: &mut ChaCha8Rng) -> f64 {
    (p.delta + p.theta * Gamma::new(p.k, 1.0).unwrap().sample(rng)).max(0.0)
}

/// Mean and standard error of the mean.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn c01_closed_form_crps() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for i in 0..2000 {
        let (cf, oracle) = if i % 2 == 0 {
            let p = random_gtcnd(&mut rng);
            let y = random_obs(&p, &mut rng);
            (crps_gtcnd(&p, y), crps_numeric_dist(&p, y, 1e-11).unwrap())
        } else {
            let p = random_csgd(&mut rng);
            let y = random_obs(&p, &mut rng);
            (crps_csgd(&p, y), crps_numeric_dist(&p, y, 1e-11).unwrap())
        };
        worst = worst.max((cf - oracle).abs() / (1.0 + oracle));
    }
    let t = start.elapsed();
    verdict(
        1,
        "closed-form CRPS vs quadrature",
        worst <= 1e-6 && t < Duration::from_secs(60),
        format!(
            "1000+1000 cases, worst |cf-num|/(1+num) = {worst:.2e} (tol 1e-6), {:.1}s (limit 60s)",
            t.as_secs_f64()
        ),
    );
}

#[test]
fn c02_representation_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = [0.0f64; 3];
    for i in 0..100 {
        let [thr, pin, ker, cf] = if i % 2 == 0 {
            let p = random_gtcnd(&mut rng);
            let y = random_obs(&p, &mut rng);
            [
                crps_numeric_dist(&p, y, 1e-10).unwrap(),
                crps_pinball_integral(&p, y, 1e-9).unwrap(),
                crps_kernel_integral(&p, y, 1e-9).unwrap(),
                crps_gtcnd(&p, y),
            ]
        } else {
            let p = random_csgd(&mut rng);
            let y = random_obs(&p, &mut rng);
            [
                crps_numeric_dist(&p, y, 1e-10).unwrap(),
                crps_pinball_integral(&p, y, 1e-9).unwrap(),
                crps_kernel_integral(&p, y, 1e-9).unwrap(),
                crps_csgd(&p, y),
            ]
        };
        for (w, v) in worst.iter_mut().zip([thr, pin, ker]) {
            *w = w.max((v - cf).abs() / cf);
        }
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    verdict(
        2,
        "threshold, pinball and kernel forms",
        max <= 1e-4,
        format!(
            "100 cases, worst relative error threshold {:.1e} pinball {:.1e} kernel {:.1e} (tol 1e-4)",
            worst[0], worst[1], worst[2]
        ),
    );
}

#[test]
fn c03_fair_estimator_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let g = GtcndParams::new(0.3, 1.5, 2.0).unwrap();
    let c = CsgdParams::new(1.2, 2.0, -0.8).unwrap();
    let mut ok = true;
    let mut worst_z: f64 = 0.0;
    let mut fair_above_nrg = 0;
    for (case, y) in [0.0, 0.7, 4.5]
        .into_iter()
        .enumerate()
        .flat_map(|(i, y)| [(2 * i, y), (2 * i + 1, y)])
    {
        let analytic = if case % 2 == 0 {
            crps_gtcnd(&g, y)
        } else {
            crps_csgd(&c, y)
        };
        let mut fair = Vec::with_capacity(10_000);
        for _ in 0..10_000 {
            let ens: Vec<f64> = (0..20)
                .map(|_| {
                    if case % 2 == 0 {
                        draw_gtcnd(&g, &mut rng)
                    } else {
                        draw_csgd(&c, &mut rng)
                    }
                })
                .collect();
            let f = crps_ensemble_fair(&ens, y).unwrap();
            if f > crps_ensemble_nrg(&ens, y).unwrap() {
                fair_above_nrg += 1;
            }
            fair.push(f);
        }
        let (m, se) = mean_se(&fair);
        let z = (m - analytic).abs() / se;
        worst_z = worst_z.max(z);
        ok &= z <= 3.0;
    }
    ok &= fair_above_nrg == 0;
    verdict(
        3,
        "fair ensemble CRPS unbiasedness",
        ok,
        format!("6 cases x 1e4 ensembles of 20, worst |mean-analytic|/SE = {worst_z:.2} (limit 3), fair > nrg on {fair_above_nrg} draws"),
    );
}

#[test]
fn c04_moments_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let (mut worst_g, mut worst_c): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let p = GtcndParams::new(
            rng.random_range(0.0..0.9),
            rng.random_range(-2.0..6.0),
            rng.random_range(0.3..5.0),
        )
        .unwrap();
        let (m1, m2) = p.raw_moments();
        let f = fit_gtcnd(p.l, m1, m2).unwrap();
        if f.l != p.l {
            worst_g = f64::INFINITY;
        }
        worst_g = worst_g.max(rel(f.mu, p.mu)).max(rel(f.sigma, p.sigma));

        let q = CsgdParams::new(
            rng.random_range(0.3..5.0),
            rng.random_range(0.3..4.0),
            -rng.random_range(0.02..3.0),
        )
        .unwrap();
        let (m1, m2, m3) = q.raw_moments();
        let f = fit_csgd(m1, m2, m3).unwrap();
        worst_c = worst_c
            .max(rel(f.k, q.k))
            .max(rel(f.theta, q.theta))
            .max(rel(f.delta, q.delta));
    }

    // Analytic moments against 1e7-sample estimates.
    const N: usize = 10_000_000;
    let mut worst_z: f64 = 0.0;
    // Streaming (mean, SE) of x, x², x³.
    let sample_moments = |draw: &mut dyn FnMut() -> f64, orders: usize| -> Vec<(f64, f64)> {
        let (mut s, mut ss) = (vec![0.0; orders], vec![0.0; orders]);
        for _ in 0..N {
            let x = draw();
            let mut v = 1.0;
            for o in 0..orders {
                v *= x;
                s[o] += v;
                ss[o] += v * v;
            }
        }
        let n = N as f64;
        (0..orders)
            .map(|o| {
                let m = s[o] / n;
                (m, ((ss[o] / n - m * m) * n / (n - 1.0) / n).sqrt())
            })
            .collect()
    };
    for p in [
        GtcndParams::new(0.2, 1.0, 1.5).unwrap(),
        GtcndParams::new(0.6, -0.5, 2.0).unwrap(),
    ] {
        let (a1, a2) = p.raw_moments();
        let est = sample_moments(&mut || draw_gtcnd(&p, &mut rng), 2);
        for ((m, se), a) in est.into_iter().zip([a1, a2]) {
            worst_z = worst_z.max((m - a).abs() / se);
        }
    }
    for p in [
        CsgdParams::new(1.5, 1.2, -0.6).unwrap(),
        CsgdParams::new(0.6, 3.0, -0.3).unwrap(),
    ] {
        let (a1, a2, a3) = p.raw_moments();
        let est = sample_moments(&mut || draw_csgd(&p, &mut rng), 3);
        for ((m, se), a) in est.into_iter().zip([a1, a2, a3]) {
            worst_z = worst_z.max((m - a).abs() / se);
        }
    }
    verdict(
        4,
        "moments round trip and Monte Carlo moments",
        worst_g <= 1e-6 && worst_c <= 1e-4 && worst_z <= 4.0,
        format!(
            "worst relative recovery GTCND {worst_g:.1e} (tol 1e-6), CSGD {worst_c:.1e} (tol 1e-4); \
             worst moment |analytic-MC|/SE = {worst_z:.2} (limit 4)"
        ),
    );
}

/// Random quantile forecasts of mixed shape: parametric, empirical with
/// dry members, and heavy-tailed.
fn random_forecast(rng: &mut ChaCha8Rng) -> QuantileForecast {
    let levels = default_levels();
    match rng.random_range(0..3) {
        0 => {
            let p = random_gtcnd(rng);
            QuantileForecast::new(levels.clone(), p.quantiles(&levels).unwrap()).unwrap()
        }
        1 => {
            let p = random_csgd(rng);
            QuantileForecast::new(levels.clone(), p.quantiles(&levels).unwrap()).unwrap()
        }
        _ => {
            let dry = rng.random_range(0.0..1.0);
            let scale = rng.random_range(0.1..30.0);
            let mut v: Vec<f64> = (0..levels.len())
                .map(|_| {
                    if rng.random::<f64>() < dry {
                        0.0
                    } else {
                        scale * rng.random::<f64>().powi(3)
                    }
                })
                .collect();
            v.sort_by(f64::total_cmp);
            QuantileForecast::new(levels, v).unwrap()
        }
    }
}

#[test]
fn c05_tail_extension_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut violations = Vec::new();
    let (mut inactive, mut extended, mut failed) = (0, 0, 0);
    for i in 0..1000 {
        let q = random_forecast(&mut rng);
        let cfg = TailConfig {
            family: if i % 2 == 0 { Family::Gtcnd } else { Family::Csgd },
            ..TailConfig::default()
        };
        let out = tail_extend(&q, &cfg).unwrap();
        let v = out.forecast.values();
        if !v.windows(2).all(|w| w[0] <= w[1]) {
            violations.push(format!("{i}: not monotone"));
        }
        let updated = cfg.levels_to_update.indices(q.len());
        for (j, (&new, &old)) in v.iter().zip(q.values()).enumerate() {
            if updated.contains(&j) && new < old {
                violations.push(format!("{i}: level {j} lowered"));
            }
            if !updated.contains(&j) && new != old {
                violations.push(format!("{i}: level {j} changed outside the update set"));
            }
        }
        match out.status {
            TailStatus::Inactive { .. } => {
                inactive += 1;
                if out.forecast != q {
                    violations.push(format!("{i}: inactive gate changed the forecast"));
                }
            }
            TailStatus::FitFailed(_) => failed += 1,
            TailStatus::Extended { fit, .. } => {
                extended += 1;
                let (again, changed) = apply_tail_fit(&out.forecast, &fit, &cfg.levels_to_update).unwrap();
                if changed != 0 || again != out.forecast {
                    violations.push(format!("{i}: not idempotent"));
                }
            }
        }
    }
    verdict(
        5,
        "tail extension contract",
        violations.is_empty() && inactive > 0 && extended > 0,
        format!(
            "1000 forecasts ({extended} extended, {inactive} gated off, {failed} fit failures), {} violations {:?}",
            violations.len(),
            violations.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

/// Central differences of `f` in every parameter. A ReLU or max-pool kink
/// inside the stencil shows up as a mismatch that vanishes at a smaller
/// step, so steps shrink until agreement. Near-zero pairs are compared on
/// an absolute scale of 1e-8.
fn fd_worst<F: Fn(&[Vec<f64>]) -> f64>(params: &[Vec<f64>], grads: &[Vec<f64>], f: F) -> (f64, usize) {
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let mut best = f64::INFINITY;
            for h in [1e-5, 1e-6, 1e-7] {
                let mut p = params.to_vec();
                p[t][i] += h;
                let up = f(&p);
                p[t][i] -= 2.0 * h;
                let down = f(&p);
                best = best.min(rel(grads[t][i], (up - down) / (2.0 * h)));
                if best < 1e-4 {
                    break;
                }
            }
            worst = worst.max(best);
            n += 1;
        }
    }
    (worst, n)
}

#[test]
fn c06_gradients() {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut ok = true;
    for (family, seed) in [(Family::Gtcnd, 61), (Family::Csgd, 62)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = UNet::new(UNetConfig::new(5, 4, family, seed)).unwrap();
        let x = Tensor4::new(
            2,
            8,
            8,
            5,
            (0..2 * 8 * 8 * 5)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
        .unwrap();
        let obs: Vec<f64> = (0..128)
            .map(|_| {
                if rng.random_bool(0.4) {
                    0.0
                } else {
                    rng.random_range(0.0..3.0)
                }
            })
            .collect();
        let loss = |p: &[Vec<f64>]| {
            let mut m = model.clone();
            m.params.values = p.to_vec();
            let (tape, out, _) = m.forward_raw(x.clone(), Mode::Train).unwrap();
            crps_loss_raw(tape.value(out), &obs, None, family).unwrap().0
        };
        let (tape, out, _) = model.forward_raw(x.clone(), Mode::Train).unwrap();
        let (_, seed_grad) = crps_loss_raw(tape.value(out), &obs, None, family).unwrap();
        let grads = tape.backward(out, &seed_grad);
        let (worst, n) = fd_worst(&model.params.values, &grads, loss);
        ok &= worst < 1e-4 && n == model.params.count();
        details.push(format!("{family}: {n} parameters, worst {worst:.1e}"));
    }
    let t = start.elapsed();
    ok &= t < Duration::from_secs(300);
    verdict(
        6,
        "network gradients vs central differences",
        ok,
        format!(
            "8x8 grid, base 4: {} (tol 1e-4), {:.1}s (limit 300s)",
            details.join("; "),
            t.as_secs_f64()
        ),
    );
}

fn jpz_rejects(ranks: &[usize], n_ranks: usize) -> JpzResult {
    jpz_test(&RankHistogram::from_ranks(ranks, n_ranks, N_CLASSES).unwrap(), 0.05).unwrap()
}

fn random_truth(family: Family, rng: &mut ChaCha8Rng) -> Params {
    let mut z = || rng.sample::<f64, _>(StandardNormal);
    truth_at(family, z(), z(), 0.5 * z())
}

#[test]
fn c07_calibration_machinery() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let levels = default_levels();
    // Calibrated: each observation is drawn from the forecast it is ranked in.
    let pool: Vec<(Params, QuantileForecast)> = (0..200)
        .map(|i| {
            let p = random_truth(if i % 2 == 0 { Family::Gtcnd } else { Family::Csgd }, &mut rng);
            let q = QuantileForecast::new(levels.clone(), p.quantiles(&levels).unwrap()).unwrap();
            (p, q)
        })
        .collect();
    let trials = 10_000;
    let mut rejected = 0;
    let mut ranks = vec![0usize; 1000];
    for _ in 0..trials {
        for r in ranks.iter_mut() {
            let (p, q) = &pool[rng.random_range(0..pool.len())];
            *r = observation_rank(q, p.sample(&mut rng), &mut rng);
        }
        rejected += usize::from(jpz_rejects(&ranks, N_RANKS).reject_flatness);
    }
    let rate = rejected as f64 / trials as f64;

    // Distorted 17-member raw ensembles: 18 ranks in 18 classes.
    let m = 17;
    let distorted = |bias: f64, dispersion: f64, rng: &mut ChaCha8Rng| {
        let (mut rejected, mut pooled) = (0, vec![0u64; N_CLASSES]);
        let mut proj = (0.0, 0.0);
        for t in 0..1000 {
            let ranks: Vec<usize> = (0..1000)
                .map(|_| {
                    let p = random_truth(if t % 2 == 0 { Family::Gtcnd } else { Family::Csgd }, rng);
                    let mut ens: Vec<f64> = (0..m).map(|_| sample_raw_member(&p, bias, dispersion, rng)).collect();
                    ens.sort_by(f64::total_cmp);
                    rank_among(&ens, p.sample(rng), rng)
                })
                .collect();
            let h = RankHistogram::from_ranks(&ranks, m + 1, N_CLASSES).unwrap();
            pooled.iter_mut().zip(&h.counts).for_each(|(a, b)| *a += b);
            let r = jpz_test(&h, 0.05).unwrap();
            rejected += usize::from(r.reject_flatness);
            proj.0 += r.bias.projection;
            proj.1 += r.dispersion.projection;
        }
        (rejected as f64 / 1000.0, pooled, proj)
    };
    let (under_rate, under, (_, under_disp)) = distorted(0.0, 0.5, &mut rng);
    let (bias_rate, biased, (bias_proj, _)) = distorted(1.0, 1.0, &mut rng);
    let k = N_CLASSES;
    let mid = (under[k / 2 - 1] + under[k / 2]) as f64 / 2.0;
    let cup = under[0] as f64 > 2.0 * mid && under[k - 1] as f64 > 2.0 * mid && under_disp > 0.0;
    // Members biased high leave the observation at low ranks.
    let falling = biased.windows(2).filter(|w| w[0] >= w[1]).count();
    let triangular = biased[0] > 2 * biased[k - 1] && falling >= k - 3 && bias_proj < 0.0;
    verdict(
        7,
        "rank histogram flatness test",
        (rate - 0.05).abs() <= 0.01 && under_rate > 0.99 && cup && bias_rate > 0.99 && triangular,
        format!(
            "calibrated rejection {rate:.4} over {trials} histograms (target 0.05 +/- 0.01); \
             dispersion 0.5: rejection {under_rate:.3}, end/middle class ratio {:.2}, U-shaped {cup}; \
             bias +1: rejection {bias_rate:.3}, first/last class ratio {:.2}, triangular {triangular}",
            (under[0] + under[k - 1]) as f64 / (2.0 * mid),
            biased[0] as f64 / biased[k - 1] as f64,
        ),
    );
}

/// One trained and aggregated end-to-end run on a 32x32 synthetic dataset.
struct Pipeline {
    ds: Dataset,
    mask: CensorMask,
    /// Aggregated forecasts over the test days, day-major.
    forecasts: Vec<QuantileForecast>,
    statuses: Vec<TrainStatus>,
    elapsed: Duration,
}

const E2E_EPOCHS: usize = 25;
const E2E_BASE: usize = 8;
const E2E_MODELS: usize = 10;

fn run_pipeline(family: Family) -> Pipeline {
    let start = Instant::now();
    let ds = build_dataset(&SyntheticConfig::new(32, 32, 512, family, 1)).unwrap();
    let mask = ds.censor_mask();
    let data = TrainData {
        predictors: &ds.predictors,
        observations: &ds.observations,
        train_days: &ds.train_days,
        val_days: &ds.val_days,
        mask: Some(&mask.include),
    };
    let ucfg = UNetConfig::new(ds.config.n_predictors(), E2E_BASE, family, 3);
    let tcfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: E2E_EPOCHS,
        seed: 1,
        clip_norm: None,
        n_models: E2E_MODELS,
    };
    let results = train_ensemble(&data, &ucfg, &tcfg).unwrap();
    let statuses = results.iter().map(|r| r.status.clone()).collect();
    let models: Vec<UNet> = results.into_iter().map(|r| r.model).collect();
    let x = test_days(&ds, &ds.predictors);
    let forecasts = ensemble_quantiles(&models, &x, default_levels()).unwrap();
    // Aggregation must not lose information relative to a single member.
    assert_eq!(
        predict_params(&models[0], &x, 8).unwrap().data.len(),
        3 * forecasts.len()
    );
    Pipeline {
        ds,
        mask,
        forecasts,
        statuses,
        elapsed: start.elapsed(),
    }
}

fn test_days(ds: &Dataset, g: &GridTensor) -> GridTensor {
    GridTensor::stack(&ds.test_days.iter().map(|&d| g.sample(d).unwrap()).collect::<Vec<_>>()).unwrap()
}

fn pipeline(family: Family) -> &'static Pipeline {
    static GTCND: OnceLock<Pipeline> = OnceLock::new();
    static CSGD: OnceLock<Pipeline> = OnceLock::new();
    match family {
        Family::Gtcnd => GTCND.get_or_init(|| run_pipeline(family)),
        Family::Csgd => CSGD.get_or_init(|| run_pipeline(family)),
    }
}

impl Pipeline {
    fn cells(&self) -> usize {
        self.ds.config.height * self.ds.config.width
    }

    fn truth(&self, day: usize, cell: usize) -> Params {
        let i = day * self.cells() + cell;
        let t = &self.ds.truth.data()[3 * i..3 * i + 3];
        Params::from_triple(self.ds.config.family, [t[0], t[1], t[2]]).unwrap()
    }

    fn obs(&self, day: usize, cell: usize) -> f64 {
        self.ds.observations.data()[day * self.cells() + cell]
    }

    fn raw(&self, day: usize, cell: usize) -> &[f64] {
        let m = self.ds.config.ensemble_size;
        let i = day * self.cells() + cell;
        &self.ds.raw.data()[i * m..(i + 1) * m]
    }

    /// Per-point mean test score of `score(test_index, day, cell)`, `[H, W, 1]`.
    fn score_map(&self, score: impl Fn(usize, usize, usize) -> f64) -> GridTensor {
        let c = &self.ds.config;
        let n = self.ds.test_days.len() as f64;
        let data = (0..self.cells())
            .map(|cell| {
                self.ds
                    .test_days
                    .iter()
                    .enumerate()
                    .map(|(k, &d)| score(k, d, cell))
                    .sum::<f64>()
                    / n
            })
            .collect();
        GridTensor::new(vec![c.height, c.width, 1], vec!["crps".into()], data).unwrap()
    }

    /// Climatology: per-point moments fit to the training observations,
    /// pooled over the grid where the per-point fit fails.
    fn climatology(&self) -> Vec<Params> {
        let family = self.ds.config.family;
        let fit = |ys: &[f64]| -> precip_post::error::Result<Params> {
            let n = ys.len() as f64;
            let m = |k: i32| ys.iter().map(|y| y.powi(k)).sum::<f64>() / n;
            let dry = ys.iter().filter(|&&y| y == 0.0).count() as f64 / n;
            Ok(match family {
                Family::Gtcnd => Params::Gtcnd(fit_gtcnd(dry, m(1), m(2))?),
                Family::Csgd => Params::Csgd(fit_csgd(m(1), m(2), m(3))?),
            })
        };
        let series: Vec<Vec<f64>> = (0..self.cells())
            .map(|c| self.ds.train_days.iter().map(|&d| self.obs(d, c)).collect())
            .collect();
        let pooled = fit(&series.concat()).unwrap();
        series.iter().map(|s| fit(s).unwrap_or(pooled)).collect()
    }
}

struct Scores {
    dru: f64,
    oracle: f64,
    oracle_q: f64,
    crpss_clim: f64,
    crpss_raw: f64,
}

fn e2e_scores(p: &Pipeline) -> Scores {
    let cells = p.cells();
    let levels = default_levels();
    let dru = p.score_map(|k, d, c| crps_from_quantiles(&p.forecasts[k * cells + c], p.obs(d, c)));
    let oracle = p.score_map(|_, d, c| p.truth(d, c).crps(p.obs(d, c)));
    let oracle_q = p.score_map(|_, d, c| {
        let t = p.truth(d, c);
        let q = QuantileForecast::new(levels.clone(), t.quantiles(&levels).unwrap()).unwrap();
        crps_from_quantiles(&q, p.obs(d, c))
    });
    let clim_params = p.climatology();
    let clim = p.score_map(|_, d, c| clim_params[c].crps(p.obs(d, c)));
    let raw = p.score_map(|_, d, c| crps_ensemble_fair(p.raw(d, c), p.obs(d, c)).unwrap());
    let masked = |g: &GridTensor| crpss_map(g, g, &p.mask).unwrap().masked_mean_score;
    Scores {
        dru: masked(&dru),
        oracle: masked(&oracle),
        oracle_q: masked(&oracle_q),
        crpss_clim: crpss_map(&dru, &clim, &p.mask).unwrap().masked_skill.unwrap(),
        crpss_raw: crpss_map(&dru, &raw, &p.mask).unwrap().masked_skill.unwrap(),
    }
}

#[test]
fn c08_roc() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    // Separable: every event outranks every non-event.
    let events: Vec<bool> = (0..2000).map(|_| rng.random_bool(0.3)).collect();
    let probs: Vec<f64> = events
        .iter()
        .map(|&e| {
            if e {
                rng.random_range(0.6..1.0)
            } else {
                rng.random_range(0.0..0.4)
            }
        })
        .collect();
    let separable = roc_curve(&probs, &events).unwrap().auc;
    let events: Vec<bool> = (0..10_000).map(|_| rng.random_bool(0.3)).collect();
    let probs: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let independent = roc_curve(&probs, &events).unwrap().auc;

    // Trained forecasts against the 0.5-dispersion raw ensemble, at the
    // 90th and 97th percentiles of training observations.
    let mut ok = separable == 1.0 && (independent - 0.5).abs() <= 0.02;
    let mut rows = Vec::new();
    for family in [Family::Gtcnd, Family::Csgd] {
        let p = pipeline(family);
        let cells = p.cells();
        let mut clim: Vec<f64> =
            p.ds.train_days
                .iter()
                .flat_map(|&d| (0..cells).filter(|&c| p.mask.include[c]).map(move |c| (d, c)))
                .map(|(d, c)| p.obs(d, c))
                .collect();
        clim.sort_by(f64::total_cmp);
        for pct in [0.90, 0.97] {
            let t = clim[(pct * (clim.len() - 1) as f64) as usize];
            let (mut pd, mut pr, mut ev) = (Vec::new(), Vec::new(), Vec::new());
            for (k, &d) in p.ds.test_days.iter().enumerate() {
                for c in (0..cells).filter(|&c| p.mask.include[c]) {
                    pd.push(p.forecasts[k * cells + c].exceedance(t));
                    let raw = p.raw(d, c);
                    pr.push(raw.iter().filter(|&&v| v > t).count() as f64 / raw.len() as f64);
                    ev.push(p.obs(d, c) > t);
                }
            }
            let a_dru = roc_curve(&pd, &ev).unwrap().auc;
            let a_raw = roc_curve(&pr, &ev).unwrap().auc;
            ok &= a_dru > a_raw;
            rows.push(format!(
                "{family} t={t:.2} ({:.0}th pct) DRU {a_dru:.4} vs raw {a_raw:.4}",
                pct * 100.0
            ));
        }
    }
    verdict(
        8,
        "ROC",
        ok,
        format!(
            "separable AUC {separable}, independent AUC {independent:.4} (0.5 +/- 0.02); {}",
            rows.join("; ")
        ),
    );
}

#[test]
fn c09_end_to_end_learning() {
    let mut ok = true;
    let mut rows = Vec::new();
    for family in [Family::Gtcnd, Family::Csgd] {
        let p = pipeline(family);
        let s = e2e_scores(p);
        let diverged = p.statuses.iter().filter(|s| **s != TrainStatus::Completed).count();
        let (r, rq) = (s.dru / s.oracle, s.dru / s.oracle_q);
        ok &= r <= 1.10 && rq <= 1.10 && s.crpss_clim > 0.0 && s.crpss_raw > 0.0;
        ok &= diverged == 0 && p.elapsed < Duration::from_secs(1800);
        rows.push(format!(
            "{family}: CRPS {:.4}, oracle {:.4} (ratio {r:.4}), oracle on quantiles {:.4} (ratio {rq:.4}), \
             CRPSS vs climatology {:.4}, vs raw {:.4}, {diverged} diverged, {:.0}s",
            s.dru,
            s.oracle,
            s.oracle_q,
            s.crpss_clim,
            s.crpss_raw,
            p.elapsed.as_secs_f64()
        ));
    }
    verdict(
        9,
        "end-to-end learning",
        ok,
        format!(
            "{E2E_MODELS} models, base {E2E_BASE}, {E2E_EPOCHS} epochs; ratio limit 1.10, CRPSS > 0, < 1800s each; {}",
            rows.join("; ")
        ),
    );
}

fn run_cli(args: &[&str], cwd: &Path) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_precip-post"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PRECIP_POST_SEED")
        .env_remove("PRECIP_POST_WORKERS")
        .output()
        .unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

const CLI_CONFIG: &str = "\
[dataset]
height = 16
width = 16
n_days = 48

[training]
epochs = 2
n_models = 2
base_channels = 4

[verification]
thresholds = [0, 5, 10, 20]
";

fn cli_pipeline(root: &Path, workers: &str) -> (BTreeMap<String, Vec<u8>>, Vec<String>) {
    std::fs::create_dir_all(root).unwrap();
    std::fs::write(root.join("config.toml"), CLI_CONFIG).unwrap();
    let steps: [&[&str]; 7] = [
        &["datagen", "--config", "config.toml", "--out", "ds"],
        &["train", "--dataset", "ds", "--config", "config.toml", "--out", "ckpt"],
        &["predict", "--checkpoints", "ckpt", "--dataset", "ds", "--out", "pred"],
        &[
            "fit-tail",
            "--forecasts",
            "pred/quantiles.gpt",
            "--config",
            "config.toml",
            "--out",
            "tail",
        ],
        &[
            "verify",
            "--forecasts",
            "tail/quantiles.gpt",
            "--dataset",
            "ds",
            "--config",
            "config.toml",
            "--out",
            "v_dru",
        ],
        &[
            "verify",
            "--raw",
            "--dataset",
            "ds",
            "--config",
            "config.toml",
            "--out",
            "v_raw",
        ],
        &[
            "report",
            "--reports",
            "v_raw",
            "v_dru",
            "--reference",
            "v_raw",
            "--out",
            "report",
        ],
    ];
    let mut failures = Vec::new();
    for step in steps {
        let mut args = vec!["--seed", "7", "--workers", workers];
        args.extend_from_slice(step);
        let (ok, err) = run_cli(&args, root);
        if !ok {
            failures.push(format!("{}: {}", step[0], err.trim()));
        }
    }
    std::fs::remove_file(root.join("config.toml")).unwrap();
    (snapshot(root), failures)
}

#[test]
fn c10_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, mut failures) = cli_pipeline(&tmp.path().join("a"), "1");
    let (b, fb) = cli_pipeline(&tmp.path().join("b"), "1");
    let (c, fc) = cli_pipeline(&tmp.path().join("c"), "3");
    failures.extend(fb);
    failures.extend(fc);
    let differing: Vec<&String> = a
        .keys()
        .filter(|k| b.get(*k) != a.get(*k) || c.get(*k) != a.get(*k))
        .collect();
    let roc_files = a
        .keys()
        .filter(|k| k.starts_with("v_dru") && k.contains("roc_t"))
        .count();
    let ok = failures.is_empty()
        && a.len() > 20
        && a.len() == b.len()
        && a.len() == c.len()
        && differing.is_empty()
        && roc_files == 4;
    verdict(
        10,
        "CLI determinism",
        ok,
        format!(
            "7 commands run 3 times (1, 1 and 3 workers): {} files, {} differing {:?}, {roc_files} ROC files, failures {:?}",
            a.len(),
            differing.len(),
            differing.iter().take(3).collect::<Vec<_>>(),
            failures
        ),
    );
}
