mod common;

use common::{dense_dc, max_abs_diff, random_keep, random_vec, rel_err};
use proptest::prelude::*;
use smug_core::autodiff::Tape;
use smug_core::fourier::{make_vd_mask, ComplexImage, ForwardOperator, KSpaceData, SamplingMask};
use smug_core::models::{
    image_tensor, DenoiserConfig, DenoiserNet, EncoderConfig, IstaConfig, IstaNetParams, WeightEncoder,
};
use smug_core::reconstructors::*;

fn image(h: usize, w: usize, seed: u64) -> ComplexImage {
    ComplexImage::from_vec(h, w, random_vec(2 * h * w, seed)).unwrap()
}

fn small_net(seed: u64) -> DenoiserNet {
    DenoiserNet::init(
        DenoiserConfig {
            layers: 2,
            channels: 4,
            kernel: 3,
            bound: 1.5,
        },
        seed,
    )
    .unwrap()
}

fn problem(h: usize, w: usize, seed: u64) -> (ForwardOperator, KSpaceData) {
    let op = ForwardOperator::new(make_vd_mask(h, w, 2.0, 0.25, seed).unwrap());
    let y = op.apply_forward(&image(h, w, seed + 100)).unwrap();
    (op, y)
}

fn tight() -> UnrollConfig {
    UnrollConfig {
        n_steps: 3,
        lambda: 1.0,
        cg_tol: 1e-12,
        cg_max: 50,
    }
}

#[test]
fn dc_step_fully_sampled_is_average() {
    let op = ForwardOperator::new(SamplingMask::full(8, 8).unwrap());
    let t = image(8, 8, 1);
    let y = op.apply_forward(&t).unwrap();
    let z = image(8, 8, 2);
    let out = dc_step(
        &op,
        &y,
        &z,
        &UnrollConfig {
            cg_tol: 1e-12,
            ..Default::default()
        },
    )
    .unwrap();
    let expect = op.apply_adjoint(&y).unwrap().add(&z).scaled(0.5);
    assert!(max_abs_diff(out.x.as_slice(), expect.as_slice()) < 1e-10);
    assert!(out.cg.converged);
}

#[test]
fn dc_step_matches_dense_solve() {
    for seed in 0..5 {
        let keep = random_keep(64, 0.4, seed);
        let op = ForwardOperator::new(SamplingMask::from_keep(8, 8, keep.clone()).unwrap());
        let y = op.apply_forward(&image(8, 8, seed + 10)).unwrap();
        let z = image(8, 8, seed + 20);
        let cfg = UnrollConfig {
            lambda: 0.7,
            cg_tol: 1e-13,
            cg_max: 100,
            ..Default::default()
        };
        let out = dc_step(&op, &y, &z, &cfg).unwrap();
        let dense = dense_dc(8, 8, &keep, 0.7, y.as_slice(), z.as_slice());
        assert!(rel_err(out.x.as_slice(), &dense) < 1e-8);
    }
}

#[test]
fn dc_step_small_lambda_approaches_least_squares() {
    let keep = random_keep(64, 0.5, 3);
    let op = ForwardOperator::new(SamplingMask::from_keep(8, 8, keep.clone()).unwrap());
    let y = op.apply_forward(&image(8, 8, 4)).unwrap();
    let z = ComplexImage::zeros(8, 8).unwrap();
    let cfg = UnrollConfig {
        lambda: 1e-6,
        cg_tol: 1e-14,
        cg_max: 100,
        ..Default::default()
    };
    let out = dc_step(&op, &y, &z, &cfg).unwrap();
    let dense = dense_dc(8, 8, &keep, 1e-6, y.as_slice(), z.as_slice());
    assert!(rel_err(out.x.as_slice(), &dense) < 1e-8);
    // on the sampled subspace the minimum-norm least-squares answer is A^H y
    let ls = op.apply_adjoint(&y).unwrap();
    assert!(rel_err(out.x.as_slice(), ls.as_slice()) < 1e-5);
}

#[test]
fn dc_step_flags_cg_cap() {
    let (op, y) = problem(8, 8, 5);
    let cfg = UnrollConfig {
        lambda: 0.01,
        cg_tol: 1e-30,
        cg_max: 1,
        ..Default::default()
    };
    let out = dc_step(&op, &y, &image(8, 8, 6), &cfg).unwrap();
    assert!(!out.cg.converged);
}

#[test]
fn modl_single_step_with_zero_net_is_dc_of_zero() {
    let (op, y) = problem(8, 8, 7);
    let zero = DenoiserNet::zeros(DenoiserConfig::default()).unwrap();
    let cfg = UnrollConfig { n_steps: 1, ..tight() };
    let tr = modl_reconstruct(&zero, &op, &y, &cfg).unwrap();
    let dc = dc_step(&op, &y, &ComplexImage::zeros(8, 8).unwrap(), &cfg).unwrap();
    assert_eq!(tr.output().as_slice(), dc.x.as_slice());
}

#[test]
fn trace_contract() {
    let (op, y) = problem(8, 8, 8);
    let net = small_net(1);
    let enc = WeightEncoder::init(EncoderConfig { channels: 4, kernel: 3 }, 2).unwrap();
    let x0 = op.apply_adjoint(&y).unwrap();
    let sc = SmoothingConfig {
        sigma: 0.05,
        samples: 2,
        seed: 3,
    };
    for n in [0, 1, 4] {
        let cfg = UnrollConfig { n_steps: n, ..tight() };
        for tr in [
            modl_reconstruct(&net, &op, &y, &cfg).unwrap(),
            smug_reconstruct(&net, &op, &y, &cfg, &sc).unwrap(),
            wsmug_reconstruct(&net, &enc, &op, &y, &cfg, &sc).unwrap(),
        ] {
            assert_eq!(tr.len(), n + 1);
            assert_eq!(tr.iterates[0].as_slice(), x0.as_slice());
        }
    }
}

#[test]
fn fixed_point_is_preserved() {
    // D(x) = B tanh(b) is constant; its value is a fixed point of MoDL when
    // the measurements are consistent with it.
    let mut net = DenoiserNet::zeros(DenoiserConfig {
        layers: 2,
        channels: 4,
        kernel: 3,
        bound: 1.5,
    })
    .unwrap();
    let n = net.params().len();
    net.params_mut().tensors_mut()[n - 1]
        .data_mut()
        .copy_from_slice(&[0.3, -0.2]);
    let c = net.denoise(&ComplexImage::zeros(8, 8).unwrap()).unwrap();
    let op = ForwardOperator::new(make_vd_mask(8, 8, 2.0, 0.25, 9).unwrap());
    let y = op.apply_forward(&c).unwrap();
    let cfg = UnrollConfig {
        n_steps: 1,
        lambda: 1.0,
        cg_tol: 1e-8,
        cg_max: 50,
    };
    let z = net.denoise(&c).unwrap();
    let out = dc_step(&op, &y, &z, &cfg).unwrap();
    assert!(out.x.distance(&c) <= 10.0 * cfg.cg_tol * c.norm());
}

#[test]
fn smooth_denoise_degenerate_cases() {
    let net = small_net(4);
    let x = image(8, 8, 11);
    let clean = net.denoise(&x).unwrap();
    let zero_sigma = SmoothingConfig {
        sigma: 0.0,
        samples: 3,
        seed: 1,
    };
    assert!(
        max_abs_diff(
            smooth_denoise(&net, &x, &zero_sigma).unwrap().as_slice(),
            clean.as_slice()
        ) < 1e-15
    );

    let sc = SmoothingConfig {
        sigma: 0.1,
        samples: 1,
        seed: 7,
    };
    let eta = smoothing_noise(&sc, 0, 0, 8, 8);
    let xp = ComplexImage::from_vec(8, 8, x.as_slice().iter().zip(eta.data()).map(|(a, b)| a + b).collect()).unwrap();
    assert_eq!(
        smooth_denoise(&net, &x, &sc).unwrap().as_slice(),
        net.denoise(&xp).unwrap().as_slice()
    );
}

fn seed_variance(net: &DenoiserNet, x: &ComplexImage, samples: usize, seeds: u64) -> f64 {
    let outs: Vec<ComplexImage> = (0..seeds)
        .map(|s| {
            smooth_denoise(
                net,
                x,
                &SmoothingConfig {
                    sigma: 0.5,
                    samples,
                    seed: 1000 + s,
                },
            )
            .unwrap()
        })
        .collect();
    let len = x.as_slice().len();
    let mut total = 0.0;
    for i in 0..len {
        let m = outs.iter().map(|o| o.as_slice()[i]).sum::<f64>() / seeds as f64;
        total += outs.iter().map(|o| (o.as_slice()[i] - m).powi(2)).sum::<f64>() / (seeds - 1) as f64;
    }
    total / len as f64
}

#[test]
fn smoothing_variance_scales_inversely_with_samples() {
    let net = small_net(5);
    let x = image(8, 8, 12);
    let v4 = seed_variance(&net, &x, 4, 200);
    let v16 = seed_variance(&net, &x, 16, 200);
    let ratio = v4 / v16;
    assert!((ratio / 4.0 - 1.0).abs() < 0.3, "ratio {ratio}");
}

#[test]
fn smug_degenerates_to_modl() {
    for seed in 0..3 {
        let (op, y) = problem(8, 8, 20 + seed);
        let net = small_net(seed);
        let a = modl_reconstruct(&net, &op, &y, &tight()).unwrap();
        let b = smug_reconstruct(
            &net,
            &op,
            &y,
            &tight(),
            &SmoothingConfig {
                sigma: 0.0,
                samples: 1,
                seed,
            },
        )
        .unwrap();
        assert!(max_abs_diff(a.output().as_slice(), b.output().as_slice()) < 1e-12);
    }
}

#[test]
fn smug_is_seed_deterministic() {
    let (op, y) = problem(8, 8, 30);
    let net = small_net(6);
    let sc = |seed| SmoothingConfig {
        sigma: 0.05,
        samples: 2,
        seed,
    };
    let a = smug_reconstruct(&net, &op, &y, &tight(), &sc(1)).unwrap();
    let b = smug_reconstruct(&net, &op, &y, &tight(), &sc(1)).unwrap();
    let c = smug_reconstruct(&net, &op, &y, &tight(), &sc(2)).unwrap();
    assert_eq!(a.output().as_slice(), b.output().as_slice());
    assert_ne!(a.output().as_slice(), c.output().as_slice());
}

#[test]
fn rs_e2e_is_mean_of_separate_runs() {
    let (op, y) = problem(8, 8, 40);
    let net = small_net(7);
    let cfg = tight();
    let sc = SmoothingConfig {
        sigma: 0.05,
        samples: 2,
        seed: 9,
    };
    let got = rs_e2e_reconstruct(&net, &op, &y, &cfg, &sc).unwrap();
    let mut acc = vec![0.0; 128];
    for t in 0..2 {
        let eta = kspace_noise(&sc, t, 8, 8);
        let yt = KSpaceData::from_vec(8, 8, y.as_slice().iter().zip(eta.data()).map(|(a, b)| a + b).collect()).unwrap();
        let run = modl_reconstruct(&net, &op, &yt, &cfg).unwrap();
        for (a, v) in acc.iter_mut().zip(run.output().as_slice()) {
            *a += v / 2.0;
        }
    }
    assert!(max_abs_diff(got.as_slice(), &acc) < 1e-12);

    let plain = modl_reconstruct(&net, &op, &y, &cfg).unwrap();
    let zero = rs_e2e_reconstruct(
        &net,
        &op,
        &y,
        &cfg,
        &SmoothingConfig {
            sigma: 0.0,
            samples: 3,
            seed: 1,
        },
    )
    .unwrap();
    assert!(max_abs_diff(zero.as_slice(), plain.output().as_slice()) < 1e-12);
}

#[test]
fn rs_e2e_with_zero_denoiser_is_unbiased() {
    // the DC chain is affine in y, so the mean over k-space noise converges to
    // the noiseless output
    let (op, y) = problem(8, 8, 41);
    let zero = DenoiserNet::zeros(DenoiserConfig::default()).unwrap();
    let cfg = UnrollConfig { n_steps: 2, ..tight() };
    let clean = modl_reconstruct(&zero, &op, &y, &cfg).unwrap();
    let (sigma, samples) = (0.2, 400);
    let sc = SmoothingConfig {
        sigma,
        samples,
        seed: 5,
    };
    let mean = rs_e2e_reconstruct(&zero, &op, &y, &cfg, &sc).unwrap();
    // per-entry standard error bounded by sigma / sqrt(T): the chain is a contraction
    let se = sigma / (samples as f64).sqrt();
    assert!(max_abs_diff(mean.as_slice(), clean.output().as_slice()) < 4.0 * se);
    let mean_dev = mean.distance(clean.output()) / (128f64).sqrt();
    assert!(mean_dev < 3.0 * se);
}

#[test]
fn weighted_smooth_reduces_to_plain_for_constant_encoder() {
    let net = small_net(8);
    let mut enc = WeightEncoder::init(EncoderConfig { channels: 4, kernel: 3 }, 3).unwrap();
    enc.zero_head();
    let x = image(8, 8, 13);
    let sc = SmoothingConfig {
        sigma: 0.1,
        samples: 5,
        seed: 2,
    };
    let a = weighted_smooth(&net, &enc, &x, &sc).unwrap();
    let b = smooth_denoise(&net, &x, &sc).unwrap();
    assert!(max_abs_diff(a.as_slice(), b.as_slice()) < 1e-12);
}

#[test]
fn weighted_smooth_two_term_oracle() {
    let net = small_net(9);
    let enc = WeightEncoder::init(EncoderConfig { channels: 4, kernel: 3 }, 4).unwrap();
    let x = image(8, 8, 14);
    let sc = SmoothingConfig {
        sigma: 0.3,
        samples: 2,
        seed: 3,
    };
    let got = weighted_smooth(&net, &enc, &x, &sc).unwrap();
    let perturbed: Vec<ComplexImage> = (0..2)
        .map(|t| {
            let eta = smoothing_noise(&sc, 0, t, 8, 8);
            ComplexImage::from_vec(8, 8, x.as_slice().iter().zip(eta.data()).map(|(a, b)| a + b).collect()).unwrap()
        })
        .collect();
    let w: Vec<f64> = perturbed.iter().map(|p| enc.encode_weight(p).unwrap()).collect();
    let d: Vec<ComplexImage> = perturbed.iter().map(|p| net.denoise(p).unwrap()).collect();
    assert_ne!(w[0], w[1]);
    let expect: Vec<f64> = (0..128)
        .map(|i| (w[0] * d[0].as_slice()[i] + w[1] * d[1].as_slice()[i]) / (w[0] + w[1]))
        .collect();
    assert!(max_abs_diff(got.as_slice(), &expect) < 1e-12);

    let one = SmoothingConfig { samples: 1, ..sc };
    let single = weighted_smooth(&net, &enc, &x, &one).unwrap();
    assert!(max_abs_diff(single.as_slice(), d[0].as_slice()) < 1e-12);
}

#[test]
fn wsmug_degeneracy_and_determinism() {
    let (op, y) = problem(8, 8, 50);
    let net = small_net(10);
    let mut enc = WeightEncoder::init(EncoderConfig { channels: 4, kernel: 3 }, 5).unwrap();
    let sc = SmoothingConfig {
        sigma: 0.05,
        samples: 3,
        seed: 4,
    };
    let a = wsmug_reconstruct(&net, &enc, &op, &y, &tight(), &sc).unwrap();
    let b = wsmug_reconstruct(&net, &enc, &op, &y, &tight(), &sc).unwrap();
    assert_eq!(a.output().as_slice(), b.output().as_slice());
    let c = wsmug_reconstruct(
        &net,
        &enc,
        &op,
        &y,
        &tight(),
        &SmoothingConfig { seed: 5, ..sc.clone() },
    )
    .unwrap();
    assert_ne!(a.output().as_slice(), c.output().as_slice());

    let none = SmoothingConfig {
        sigma: 0.0,
        samples: 1,
        seed: 0,
    };
    let w = wsmug_reconstruct(&net, &enc, &op, &y, &tight(), &none).unwrap();
    let m = modl_reconstruct(&net, &op, &y, &tight()).unwrap();
    assert!(max_abs_diff(w.output().as_slice(), m.output().as_slice()) < 1e-12);

    enc.zero_head();
    let w = wsmug_reconstruct(&net, &enc, &op, &y, &tight(), &sc).unwrap();
    let s = smug_reconstruct(&net, &op, &y, &tight(), &sc).unwrap();
    assert!(max_abs_diff(w.output().as_slice(), s.output().as_slice()) < 1e-12);
}

fn identity_ista(phases: usize) -> IstaNetParams {
    let cfg = IstaConfig {
        phases,
        channels: 4,
        kernel: 3,
        init_step: 0.0,
        init_threshold: 0.0,
    };
    let mut p = IstaNetParams::init(cfg, 0).unwrap();
    let center = 4; // middle tap of a 3x3 kernel
    for (name, t) in p.params_mut().names().to_vec().iter().zip(p.params_mut().tensors_mut()) {
        let d = t.data_mut();
        d.iter_mut().for_each(|v| *v = 0.0);
        let tap = |cout: usize, cin: usize, ncin: usize| cout * ncin * 9 + cin * 9 + center;
        if name.ends_with("fwd1") {
            // [re, -re, im, -im]
            d[tap(0, 0, 2)] = 1.0;
            d[tap(1, 0, 2)] = -1.0;
            d[tap(2, 1, 2)] = 1.0;
            d[tap(3, 1, 2)] = -1.0;
        } else if name.ends_with("fwd2") || name.ends_with("inv1") {
            for c in 0..4 {
                d[tap(c, c, 4)] = 1.0;
            }
        } else if name.ends_with("inv2") {
            d[tap(0, 0, 4)] = 1.0;
            d[tap(0, 1, 4)] = -1.0;
            d[tap(1, 2, 4)] = 1.0;
            d[tap(1, 3, 4)] = -1.0;
        }
    }
    p
}

#[test]
fn ista_identity_transform_with_zero_step_is_a_fixed_point() {
    let (op, y) = problem(8, 8, 60);
    let p = identity_ista(4);
    let cfg = UnrollConfig { n_steps: 4, ..tight() };
    let tr = istanet_reconstruct(&p, None, &op, &y, &cfg, &SmoothingConfig::none(), IstaMode::Vanilla).unwrap();
    for x in &tr.iterates {
        assert!(max_abs_diff(x.as_slice(), tr.iterates[0].as_slice()) < 1e-14);
    }
}

#[test]
fn ista_smoothing_modes_degenerate_to_vanilla() {
    let (op, y) = problem(8, 8, 61);
    let p = IstaNetParams::init(
        IstaConfig {
            phases: 3,
            channels: 4,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let mut enc = WeightEncoder::init(EncoderConfig { channels: 4, kernel: 3 }, 2).unwrap();
    let cfg = UnrollConfig { n_steps: 3, ..tight() };
    let none = SmoothingConfig {
        sigma: 0.0,
        samples: 1,
        seed: 0,
    };
    let v = istanet_reconstruct(&p, None, &op, &y, &cfg, &none, IstaMode::Vanilla).unwrap();
    let s = istanet_reconstruct(&p, None, &op, &y, &cfg, &none, IstaMode::Smug).unwrap();
    let w = istanet_reconstruct(&p, Some(&enc), &op, &y, &cfg, &none, IstaMode::Wsmug).unwrap();
    assert!(max_abs_diff(v.output().as_slice(), s.output().as_slice()) < 1e-12);
    assert!(max_abs_diff(v.output().as_slice(), w.output().as_slice()) < 1e-12);

    enc.zero_head();
    let sc = SmoothingConfig {
        sigma: 0.05,
        samples: 2,
        seed: 3,
    };
    let s = istanet_reconstruct(&p, None, &op, &y, &cfg, &sc, IstaMode::Smug).unwrap();
    let w = istanet_reconstruct(&p, Some(&enc), &op, &y, &cfg, &sc, IstaMode::Wsmug).unwrap();
    assert!(max_abs_diff(s.output().as_slice(), w.output().as_slice()) < 1e-12);

    let too_many = UnrollConfig { n_steps: 4, ..tight() };
    assert!(istanet_reconstruct(&p, None, &op, &y, &too_many, &none, IstaMode::Vanilla).is_err());
}

#[test]
fn soft_threshold_at_zero_is_identity() {
    let mut tape = Tape::new();
    let u = tape.constant(image_tensor(&image(4, 4, 70)));
    let th = tape.constant(smug_core::tensor::Tensor::scalar(0.0));
    let s = tape.soft_threshold(u, th).unwrap();
    assert_eq!(tape.value(s).data(), tape.value(u).data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn degeneracy_chain(seed in 0u64..1000, steps in 1usize..4) {
        let (op, y) = problem(8, 8, seed);
        let net = small_net(seed);
        let mut enc = WeightEncoder::init(EncoderConfig { channels: 4, kernel: 3 }, seed).unwrap();
        enc.zero_head();
        let cfg = UnrollConfig { n_steps: steps, ..tight() };
        let sc = SmoothingConfig { sigma: 0.05, samples: 2, seed };
        let s = smug_reconstruct(&net, &op, &y, &cfg, &sc).unwrap();
        let w = wsmug_reconstruct(&net, &enc, &op, &y, &cfg, &sc).unwrap();
        prop_assert!(max_abs_diff(s.output().as_slice(), w.output().as_slice()) < 1e-12);
        let none = SmoothingConfig { sigma: 0.0, samples: 1, seed };
        let s0 = smug_reconstruct(&net, &op, &y, &cfg, &none).unwrap();
        let m = modl_reconstruct(&net, &op, &y, &cfg).unwrap();
        prop_assert!(max_abs_diff(s0.output().as_slice(), m.output().as_slice()) < 1e-12);
    }
}
