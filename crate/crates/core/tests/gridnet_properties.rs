use precip_post::dist::{Censored, Family, Params};
use precip_post::grid::GridTensor;
use precip_post::gridnet::model::Normalizer;
use precip_post::gridnet::tape::{Tape, Var};
use precip_post::gridnet::tensor::{self, Tensor4};
use precip_post::gridnet::train::predict_params;
use precip_post::gridnet::*;
use precip_post::quantiles::default_levels;
use precip_post::scoring::crps_from_quantiles;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Tensor4 {
    Tensor4::new(
        n,
        h,
        w,
        c,
        (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Zero-padded read used by the loop oracles.
fn get(x: &Tensor4, b: usize, i: i64, j: i64, ch: usize) -> f64 {
    if i < 0 || j < 0 || i >= x.h as i64 || j >= x.w as i64 {
        0.0
    } else {
        x.at(b, i as usize, j as usize, ch)
    }
}

#[test]
fn separable_conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, 1, 4, 4, 2);
    let dk = random_vec(&mut rng, 18);
    let pk = random_vec(&mut rng, 6);
    let y = tensor::pointwise(&tensor::depthwise3(&x, &dk), &pk, None, 3);
    for i in 0..4 {
        for j in 0..4 {
            let mut dw = [0.0; 2];
            for (ch, d) in dw.iter_mut().enumerate() {
                for di in 0..3 {
                    for dj in 0..3 {
                        *d += get(&x, 0, i + di - 1, j + dj - 1, ch) * dk[(di * 3 + dj) as usize * 2 + ch];
                    }
                }
            }
            for o in 0..3 {
                let mut v = 0.0;
                for ci in 0..2 {
                    v += dw[ci] * pk[ci * 3 + o];
                }
                assert_eq!(y.at(0, i as usize, j as usize, o), v, "({i},{j},{o})");
            }
        }
    }
}

#[test]
fn full_conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, 2, 3, 5, 2);
    let k = random_vec(&mut rng, 9 * 2 * 4);
    let y = tensor::conv3(&x, &k, 4);
    for b in 0..2 {
        for i in 0..3i64 {
            for j in 0..5i64 {
                for o in 0..4 {
                    let mut v = 0.0;
                    for di in 0..3 {
                        for dj in 0..3 {
                            for ci in 0..2 {
                                v += get(&x, b, i + di - 1, j + dj - 1, ci)
                                    * k[((di * 3 + dj) as usize * 2 + ci) * 4 + o];
                            }
                        }
                    }
                    assert!((y.at(b, i as usize, j as usize, o) - v).abs() < 1e-14);
                }
            }
        }
    }
}

#[test]
fn pool_and_upsample_match_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, 2, 4, 6, 3);
    let (p, _) = tensor::max_pool2(&x).unwrap();
    for b in 0..2 {
        for i in 0..2 {
            for j in 0..3 {
                for ch in 0..3 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, c)| x.at(b, 2 * i + a, 2 * j + c, ch))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(p.at(b, i, j, ch), m);
                }
            }
        }
    }
    // Bilinear with half-pixel centres: output pixel o samples source
    // coordinate (o + 0.5)/2 - 0.5, clamped to the grid.
    let u = tensor::upsample2(&x);
    let interp = |n: usize, o: usize| {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0).min((n - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(n - 1), s - lo as f64)
    };
    for b in 0..2 {
        for i in 0..8 {
            for j in 0..12 {
                let (r0, r1, a) = interp(4, i);
                let (c0, c1, c) = interp(6, j);
                for ch in 0..3 {
                    let top = x.at(b, r0, c0, ch) * (1.0 - c) + x.at(b, r0, c1, ch) * c;
                    let bot = x.at(b, r1, c0, ch) * (1.0 - c) + x.at(b, r1, c1, ch) * c;
                    let v = top * (1.0 - a) + bot * a;
                    assert!((u.at(b, i, j, ch) - v).abs() < 1e-14);
                }
            }
        }
    }
}

/// Relative error used by every gradient check. Near-zero pairs are
/// compared on an absolute scale of `1e-8`, the level at which central
/// differences with step 1e-5 stop resolving anything but round-off.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of `f` in parameter `(t, i)`. Steps shrink when a
/// ReLU or max-pool kink lies inside the stencil, signalled by a
/// mismatch that disappears at a smaller step.
fn fd_check<F: Fn(&[Vec<f64>]) -> f64>(params: &[Vec<f64>], grads: &[Vec<f64>], f: F) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for t in 0..params.len() {
        for i in 0..params[t].len() {
            let mut best = f64::INFINITY;
            for h in [1e-5, 1e-6, 1e-7] {
                let mut p = params.to_vec();
                p[t][i] += h;
                let up = f(&p);
                p[t][i] -= 2.0 * h;
                let down = f(&p);
                let fd = (up - down) / (2.0 * h);
                best = best.min(rel_err(grads[t][i], fd));
                if best < 1e-4 {
                    break;
                }
            }
            worst = worst.max(best);
            checked += 1;
        }
    }
    (worst, checked)
}

type Running = (Vec<f64>, Vec<f64>);

/// Every tape op chained into a weighted-sum scalar.
fn op_chain<'p>(
    p: &'p [Vec<f64>],
    x: &Tensor4,
    running: &Running,
    weights: &[f64],
    train: bool,
) -> (Tape<'p>, Var, f64) {
    let mut tape = Tape::new(p);
    let inp = tape.input(x.clone());
    let a = tape.depthwise(inp, 0);
    let a = tape.pointwise(a, 1, None, 3);
    let a = if train {
        tape.batch_norm(a, 3, 4).0
    } else {
        tape.batch_norm_infer(a, 3, 4, &running.0[..3], &running.1[..3])
    };
    let a = tape.relu(a);
    let b = tape.conv3(inp, 5, 3);
    let b = tape.pointwise(b, 7, Some(2), 3);
    let c = tape.concat(a, b).unwrap();
    let d = tape.max_pool(c).unwrap();
    let d = tape.upsample(d);
    let d = tape.pad_to(d, 5, 7);
    let e = tape.depthwise(d, 6);
    let out = tape.crop_to(e, 4, 6);
    let padded = tape.pad_to(out, 5, 7);
    let loss: f64 = tape.value(padded).data.iter().zip(weights).map(|(v, w)| v * w).sum();
    (tape, padded, loss)
}

#[test]
fn every_tape_op_passes_fd_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&mut rng, 2, 4, 6, 2);
    // params: 0 depthwise, 1 pointwise, 2 bias, 3 gamma, 4 beta, 5 conv3, 6 depthwise, 7 pointwise
    let params = vec![
        random_vec(&mut rng, 18),
        random_vec(&mut rng, 6),
        random_vec(&mut rng, 3),
        random_vec(&mut rng, 3).iter().map(|v| 1.0 + 0.5 * v).collect(),
        random_vec(&mut rng, 3),
        random_vec(&mut rng, 9 * 2 * 3),
        random_vec(&mut rng, 54),
        random_vec(&mut rng, 9),
    ];
    let weights = random_vec(&mut rng, 2 * 5 * 7 * 6);
    let running = (
        random_vec(&mut rng, 6),
        random_vec(&mut rng, 6).iter().map(|v| 1.5 + v).collect::<Vec<_>>(),
    );
    for train in [true, false] {
        let (tape, out, _) = op_chain(&params, &x, &running, &weights, train);
        let grads = tape.backward(out, &weights);
        let (worst, n) = fd_check(&params, &grads, |p| op_chain(p, &x, &running, &weights, train).2);
        assert!(n > 100);
        assert!(worst < 1e-4, "train={train}: worst relative error {worst}");
    }
}

fn fd_model(family: Family, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = UNetConfig::new(3, 4, family, seed);
    let model = UNet::new(cfg).unwrap();
    let x = random_tensor(&mut rng, 2, 8, 8, 3);
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
    fd_check(&model.params.values, &grads, loss)
}

#[test]
fn desk_model_gradients_match_finite_differences() {
    for (family, seed) in [(Family::Gtcnd, 5), (Family::Csgd, 6)] {
        let (worst, n) = fd_model(family, seed);
        assert!(n > 900, "{n} parameters");
        assert!(worst < 1e-4, "{family}: worst relative error {worst}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences_on_small_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for family in [Family::Gtcnd, Family::Csgd] {
        let raw = random_tensor(&mut rng, 1, 4, 4, 3);
        let obs: Vec<f64> = (0..16)
            .map(|i| if i % 3 == 0 { 0.0 } else { rng.random_range(0.0..4.0) })
            .collect();
        let (_, g) = crps_loss_raw(&raw, &obs, None, family).unwrap();
        let f = |p: &[Vec<f64>]| {
            let t = Tensor4 {
                data: p[0].clone(),
                ..raw.clone()
            };
            crps_loss_raw(&t, &obs, None, family).unwrap().0
        };
        let (worst, _) = fd_check(&[raw.data.clone()], &[g], f);
        assert!(worst < 1e-4, "{family}: {worst}");
    }
}

#[test]
fn forward_is_deterministic_and_always_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for family in [Family::Gtcnd, Family::Csgd] {
        for seed in 0..5 {
            let m = UNet::new(UNetConfig::new(5, 4, family, seed)).unwrap();
            let mut x = random_tensor(&mut rng, 2, 10, 14, 5);
            // Occasional huge inputs push the raw outputs into saturation.
            if seed == 4 {
                x.data.iter_mut().for_each(|v| *v *= 1e6);
            }
            let a = m.predict_raw(x.clone()).unwrap();
            let b = m.predict_raw(x.clone()).unwrap();
            assert_eq!(a.data, b.data);
            assert_eq!(a.dims(), [2, 10, 14, 3]);
            let p = link_params(&a, family).unwrap();
            for t in p.data.chunks_exact(3) {
                assert!(Params::from_triple(family, [t[0], t[1], t[2]]).is_ok(), "{t:?}");
            }
        }
    }
}

#[test]
fn desk_scale_shape_contract() {
    let m = UNet::new(UNetConfig::new(5, 4, Family::Gtcnd, 0)).unwrap();
    let out = m.predict_raw(Tensor4::zeros(1, 32, 32, 5)).unwrap();
    assert_eq!(out.dims(), [1, 32, 32, 3]);
}

#[test]
fn batch_norm_infer_identity_and_train_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&mut rng, 3, 4, 4, 2);
    let params = vec![vec![1.0; 2], vec![0.0; 2]];
    let mut tape = Tape::new(&params);
    let v = tape.input(x.clone());
    let y = tape.batch_norm_infer(v, 0, 1, &[0.0; 2], &[1.0 - 1e-3; 2]);
    for (a, b) in tape.value(y).data.iter().zip(&x.data) {
        assert!((a - b).abs() < 1e-15);
    }
    let (t, _) = tape.batch_norm(v, 0, 1);
    let out = &tape.value(t).data;
    for ch in 0..2 {
        let vals: Vec<f64> = out.iter().skip(ch).step_by(2).copied().collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 0.02, "{m} {var}");
    }
}

#[test]
fn masked_points_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let raw = random_tensor(&mut rng, 2, 3, 3, 3);
    let obs: Vec<f64> = (0..18).map(|_| rng.random_range(0.0..2.0)).collect();
    let mask: Vec<bool> = (0..9).map(|i| i % 2 == 0).collect();
    let (_, g) = crps_loss_raw(&raw, &obs, Some(&mask), Family::Csgd).unwrap();
    for (i, px) in g.chunks_exact(3).enumerate() {
        if !mask[i % 9] {
            assert!(px.iter().all(|&v| v == 0.0));
        }
    }
}

/// Predictors `[N, H, W, 2]` and observations drawn from a GTCND whose
/// parameters are smooth functions of the predictors.
fn realizable(n: usize, h: usize, w: usize, seed: u64) -> (GridTensor, GridTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * h * w * 2);
    let mut y = Vec::with_capacity(n * h * w);
    for _ in 0..n * h * w {
        let (a, b): (f64, f64) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        x.extend([a, b]);
        let p = Params::from_triple(
            Family::Gtcnd,
            [1.0 / (1.0 + (2.0 * a).exp()), 1.0 + 1.5 * a, 0.5 + 0.3 * (b + 1.5)],
        )
        .unwrap();
        y.push(p.sample(&mut rng));
    }
    (
        GridTensor::new(vec![n, h, w, 2], vec!["a".into(), "b".into()], x).unwrap(),
        GridTensor::new(vec![n, h, w, 1], vec!["obs".into()], y).unwrap(),
    )
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let (x, y) = realizable(48, 8, 8, 11);
    let train_days: Vec<usize> = (0..40).collect();
    let val_days: Vec<usize> = (40..48).collect();
    let data = TrainData {
        predictors: &x,
        observations: &y,
        train_days: &train_days,
        val_days: &val_days,
        mask: None,
    };
    let ucfg = UNetConfig::new(2, 4, Family::Gtcnd, 3);
    let tcfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        epochs: 12,
        seed: 4,
        clip_norm: None,
        n_models: 1,
    };
    let a = train(&data, &ucfg, &tcfg).unwrap();
    assert_eq!(a.status, TrainStatus::Completed);
    let h: Vec<f64> = a.history.iter().map(|r| r.train_loss).collect();
    let early = h[..3].iter().sum::<f64>() / 3.0;
    let late = h[h.len() - 3..].iter().sum::<f64>() / 3.0;
    assert!(late < 0.9 * early, "history {h:?}");
    let b = train(&data, &ucfg, &tcfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    let best = a
        .history
        .iter()
        .map(|r| r.val_loss.unwrap())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(a.history[a.best_epoch - 1].val_loss, Some(best));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (x, y) = realizable(12, 4, 4, 12);
    let days: Vec<usize> = (0..12).collect();
    let data = TrainData {
        predictors: &x,
        observations: &y,
        train_days: &days,
        val_days: &[],
        mask: None,
    };
    let ucfg = UNetConfig::new(2, 2, Family::Gtcnd, 1);
    let tcfg = TrainConfig {
        learning_rate: 0.0,
        batch_size: 12,
        epochs: 4,
        seed: 2,
        clip_norm: None,
        n_models: 1,
    };
    let r = train(&data, &ucfg, &tcfg).unwrap();
    let fresh = UNet::new(ucfg).unwrap();
    assert_eq!(r.model.params.values, fresh.params.values);
    assert!(
        r.history.windows(2).all(|w| w[0].train_loss == w[1].train_loss),
        "{:?}",
        r.history
    );
}

#[test]
fn divergence_returns_last_finite_checkpoint() {
    let (x, mut y) = realizable(8, 4, 4, 13);
    y.data_mut()[5] = f64::NAN;
    let days: Vec<usize> = (0..8).collect();
    let data = TrainData {
        predictors: &x,
        observations: &y,
        train_days: &days,
        val_days: &[],
        mask: None,
    };
    let ucfg = UNetConfig::new(2, 2, Family::Gtcnd, 1);
    let r = train(
        &data,
        &ucfg,
        &TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert!(
        matches!(r.status, TrainStatus::Diverged { epoch: 1, .. }),
        "{:?}",
        r.status
    );
    assert!(r.model.params.is_finite());
    assert!(r.history.is_empty());
}

#[test]
fn aggregation_properties() {
    let (x, y) = realizable(16, 4, 4, 14);
    let days: Vec<usize> = (0..16).collect();
    let data = TrainData {
        predictors: &x,
        observations: &y,
        train_days: &days,
        val_days: &[],
        mask: None,
    };
    let ucfg = UNetConfig::new(2, 2, Family::Gtcnd, 0);
    let tcfg = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        epochs: 3,
        seed: 9,
        clip_norm: Some(10.0),
        n_models: 3,
    };
    let members: Vec<UNet> = train_ensemble(&data, &ucfg, &tcfg)
        .unwrap()
        .into_iter()
        .map(|r| r.model)
        .collect();
    let levels = default_levels();
    let single = ensemble_quantiles(&members[..1], &x, levels.clone()).unwrap();
    let fields = predict_params(&members[0], &x, 8).unwrap();
    for (i, q) in single.iter().enumerate().step_by(37) {
        let t = &fields.data[3 * i..3 * i + 3];
        let p = Params::from_triple(Family::Gtcnd, [t[0], t[1], t[2]]).unwrap();
        for (v, &lv) in q.values().iter().zip(levels.iter()) {
            let expect = if lv <= p.point_mass() {
                0.0
            } else {
                p.quantile(lv).unwrap()
            };
            assert_eq!(*v, expect);
        }
    }
    let twice = ensemble_quantiles(&[members[0].clone(), members[0].clone()], &x, levels.clone()).unwrap();
    for (a, b) in single.iter().zip(&twice) {
        for (u, v) in a.values().iter().zip(b.values()) {
            assert!((u - v).abs() <= 1e-15 * u.abs().max(1.0));
        }
    }
    // Quantile averaging never scores worse than the mean member score.
    let agg = ensemble_quantiles(&members, &x, levels.clone()).unwrap();
    let obs = y.data();
    let agg_crps: f64 = agg.iter().zip(obs).map(|(q, &o)| crps_from_quantiles(q, o)).sum();
    let member_crps: f64 = members
        .iter()
        .map(|m| {
            let q = ensemble_quantiles(std::slice::from_ref(m), &x, levels.clone()).unwrap();
            q.iter().zip(obs).map(|(q, &o)| crps_from_quantiles(q, o)).sum::<f64>()
        })
        .sum::<f64>()
        / members.len() as f64;
    assert!(agg_crps <= member_crps + 1e-12, "{agg_crps} vs {member_crps}");
}

#[test]
fn normalizer_standardizes_channels() {
    let data = vec![1.0, 10.0, 3.0, 10.0, 5.0, 10.0];
    let n = Normalizer::fit(&data, 2);
    let mut d = data.clone();
    n.apply(&mut d);
    assert!((d[0] + 1.224_744_871_391_589).abs() < 1e-12);
    assert_eq!(d[1], 0.0);
}
